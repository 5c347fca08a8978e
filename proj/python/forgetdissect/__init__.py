"""Forgetting dissection toolkit: block-wise evidence comparison and freezing policies."""

import json
from pathlib import Path

from . import _core
from ._core import (
    ForgetDissectError,
    best_match,
    bleu,
    fragile_block,
    iou,
    load_sample,
    rouge_l,
    sha256_file,
    verify_checksum_index,
)

__all__ = [
    "ForgetDissectError",
    "best_match",
    "block_relevance",
    "bleu",
    "default_config",
    "dissect",
    "error_kind",
    "fragile_block",
    "gen_data",
    "iou",
    "load_report",
    "load_sample",
    "normalize_config",
    "report",
    "rouge_l",
    "run_all",
    "sha256_file",
    "train_base",
    "train_incremental",
    "verify_checksum_index",
]


def _dump(config):
    if config is None:
        return ""
    return json.dumps(config)


def error_kind(err):
    """Kind name of a ForgetDissectError, e.g. "config" or "input"."""
    return err.args[1] if len(err.args) > 1 else None


def default_config():
    return json.loads(_core.default_config())


def normalize_config(config):
    return json.loads(_core.normalize_config(_dump(config)))


def gen_data(config=None):
    return json.loads(_core.gen_data(_dump(config)))[0]


def train_base(config=None):
    return json.loads(_core.train_base(_dump(config)))[0]


def train_incremental(config=None, labels=()):
    return json.loads(_core.train_incremental(_dump(config), list(labels)))


def dissect(config=None):
    return json.loads(_core.dissect(_dump(config)))[0]


def report(config=None):
    return json.loads(_core.report(_dump(config)))[0]


def run_all(config=None):
    return json.loads(_core.run_all(_dump(config)))


def load_report(path):
    return json.loads(_core.load_report(Path(path)))


def block_relevance(snapshot, image, block_id, donors, pda=None):
    """Relevance maps of every channel of a block, shape (channels, H, W)."""
    return _core.block_relevance(Path(snapshot), image, block_id, list(donors), _dump(pda))
