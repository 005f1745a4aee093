import os
from pathlib import Path


BASE_DIR = Path(__file__).resolve().parent.parent


class Config:
    ANCILLA_JOBS = int(os.environ.get("ANCILLA_JOBS", "1"))
    ANCILLA_MAX_JOBS = int(os.environ.get("ANCILLA_MAX_JOBS", "16"))
    ANCILLA_OUTPUT_DIR = os.environ.get("ANCILLA_OUTPUT_DIR", "results")
    ANCILLA_LOG_LEVEL = os.environ.get("ANCILLA_LOG_LEVEL", "INFO")


class TestConfig(Config):
    ANCILLA_JOBS = 1
    ANCILLA_OUTPUT_DIR = str(BASE_DIR / "results-test")
    ANCILLA_LOG_LEVEL = "WARNING"
