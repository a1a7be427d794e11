"""Packaged feeder descriptions."""

from importlib import resources
from pathlib import Path


def packaged_feeder(name: str) -> Path:
    """Path to a feeder JSON shipped with the package, e.g. ``ieee13``."""
    ref = resources.files(__package__) / f"{name}.json"
    if not ref.is_file():
        available = sorted(p.name[:-5] for p in resources.files(__package__).iterdir()
                           if p.name.endswith(".json"))
        raise FileNotFoundError(
            f"no packaged feeder named {name!r}; available: {available}")
    return Path(str(ref))
