"""DeepCaps capsule network engine."""

import json
import os

from ._core import (
    ArchitectureMismatchError,
    CheckpointHeaderError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    CountMismatchError,
    Error,
    FormatError,
    GradientError,
    InvalidValueError,
    IoError,
    SQUASH_EPSILON,
    Model,
    NonFiniteLossError,
    ShapeError,
    TruncatedError,
    load_mnist,
    margin_loss,
    route,
    run_config_json,
    squash,
)


def load_run_config(path):
    """Run configuration as a dict, defaults filled in."""
    return json.loads(run_config_json(os.fspath(path)))


def build_model(architecture, seed=1):
    """Model from an architecture dict or a run configuration file."""
    if isinstance(architecture, (str, os.PathLike)):
        architecture = load_run_config(architecture)["architecture"]
    return Model(json.dumps(architecture), seed)
