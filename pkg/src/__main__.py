"""Allow running as `python -m src`."""

from src.cli import app

app()
