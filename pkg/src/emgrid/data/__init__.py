"""Bundled synthetic scenarios and disturbance traces.

Parameters and profiles are synthetic (fixed-seed diurnal shapes, see
scripts/gen_data.py in the repository); they are shaped for reproducible
tests, not taken from any real installation.
"""

from importlib import resources
from pathlib import Path

_NAMES = {
    "scenario1": "scenario1.json",
    "scenario2": "scenario2.json",
    "scenario4": "scenario4.json",
    "series1": "series1.csv",
    "series2": "series2.csv",
    "series4": "series4.csv",
}


def bundled_path(name: str) -> Path:
    """Filesystem path of a bundled data file by short name."""
    if name not in _NAMES:
        raise KeyError(f"no bundled file {name!r}; have {sorted(_NAMES)}")
    return Path(resources.files(__package__) / _NAMES[name])
