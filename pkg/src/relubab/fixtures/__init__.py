"""Small hand-built networks with known answers.

``twin_relu``: two ReLUs of the same input, output their difference; the
output is identically 0 on ``[-1, 1]`` but two of the four sign patterns are
empty.  ``shifted_abs``: ``|x - 0.3| - 0.2`` on ``[-1, 1]``, negative near 0.3.
"""
from pathlib import Path

FIXTURE_DIR = Path(__file__).parent


def path(name: str, kind: str) -> Path:
    """``path("twin_relu", "net")`` -> the JSON file of that fixture."""
    return FIXTURE_DIR / f"{name}_{kind}.json"
