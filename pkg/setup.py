"""Minimal packaging shim so the flat `mcgrad_lab` package installs in editable mode."""
from pathlib import Path

from setuptools import setup

_REQUIREMENTS = [
    line.strip()
    for line in (Path(__file__).parent / "requirements.txt").read_text().splitlines()
    if line.strip() and not line.startswith("#") and line.strip() != "pytest"
]

setup(
    name="mcgrad-lab",
    version="0.0.0",
    packages=["mcgrad_lab"],
    install_requires=_REQUIREMENTS,
    extras_require={"test": ["pytest"]},
)
