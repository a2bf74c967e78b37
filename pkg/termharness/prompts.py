"""Versioned prompt assets shipped in ``termharness/templates/``."""

from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def load_prompt(name):
    return resources.files("termharness").joinpath("templates", name).read_text(
        encoding="utf-8"
    )


def render_prompt(name, **values):
    return Template(load_prompt(name)).substitute(**values)
