"""
Entry point: `python -m coda_lab ...`
"""

from coda_lab.cli import cli

if __name__ == "__main__":
    try:
        cli()
    except KeyboardInterrupt:
        print("⛔⌨️ Co-DA lab stopped by user.")
