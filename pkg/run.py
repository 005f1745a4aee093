from app import create_cli

cli = create_cli()


def main() -> None:
    cli(prog_name="ancilla")


if __name__ == "__main__":
    main()
