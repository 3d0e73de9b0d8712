import sys

from .cli import main as app_main


def main(argv: list[str] | None = None) -> int:
    return app_main(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
