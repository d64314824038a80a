"""Desk-scale trainable voice pipeline on a synthetic tone-language corpus.

Subpackages are imported lazily so that the command-line entry point can
configure threading environment variables before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "cli", "config", "corpus", "dsp", "errors", "evaluation", "flowgen",
    "numerics", "recognizer", "token_lm", "tokenizer",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
