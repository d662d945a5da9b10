"""Process entry point for the `lite-pose` command line."""
import logging

from app.cli import cli
from app.core.config import settings

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)


def main():
    cli(prog_name="lite-pose")


if __name__ == "__main__":
    main()
