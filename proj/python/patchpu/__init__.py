"""Patch-based multi-label classification from single positive labels."""

import json
import os

from ._patchpu import (
    ConfigError,
    ContractError,
    IoError,
    LookupError,
    NumericError,
    ShapeError,
    an_loss,
    average_precision,
    bce_loss,
    ce_loss,
    cosine_similarity,
    epr_loss,
    estimate_negatives,
    evaluate,
    expected_patch_count,
    extract_patches,
    gradcheck,
    localize,
    mean_average_precision,
    thresholded_relu,
    wn_loss,
)
from . import _patchpu


def _as_json(config):
    if isinstance(config, (str, os.PathLike)) and os.path.exists(config):
        with open(config) as f:
            return f.read(), os.path.dirname(os.path.abspath(config))
    return json.dumps(config), os.getcwd()


def gen_data(config, out):
    """Writes train/ and val/ synthetic splits under out; returns manifest paths."""
    text, _ = _as_json(config)
    return _patchpu.gen_data(text, os.fspath(out))


def train(config, verbose=False):
    """Trains from a config dict or JSON file; relative paths resolve against the file."""
    text, base = _as_json(config)
    return _patchpu.train(text, base, verbose)


__all__ = [name for name in dir() if not name.startswith("_") and name not in ("json", "os")]
