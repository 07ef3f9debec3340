"""Entry point for `python -m dscml_lab`."""

from dscml_lab.cli import app

if __name__ == "__main__":
    app()
