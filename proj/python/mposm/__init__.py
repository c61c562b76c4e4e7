"""Python bindings for the mposm tagging workbench.

Functions returning reports give plain dicts decoded from the JSON the C++
side writes to disk, so the keys match the CLI output files.
"""

import json
from os import PathLike

from . import _mposm
from ._mposm import CheckpointError, ConfigError, ParseError, TrainingError

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ParseError",
    "TrainingError",
    "generate_synthetic",
    "load_corpus",
    "many_to_one",
    "m1_upper_bound",
    "tag_mutual_information",
    "predict",
    "run",
    "resolve_config",
]


def generate_synthetic(variant: str, n_sentences: int, words_per_tag: int = 5, seed: int = 1):
    """Synthetic corpus as a list of (words, tags)."""
    return _mposm.generate_synthetic(variant, n_sentences, words_per_tag, seed)


def load_corpus(path: str | PathLike, format: str = "tsv"):
    """Reads a corpus; tags are None for the words-only format."""
    return _mposm.load_corpus(path, format)


def many_to_one(pred, gold) -> dict:
    return json.loads(_mposm.many_to_one(list(pred), list(gold)))


def m1_upper_bound(sentences) -> float:
    return _mposm.m1_upper_bound(sentences)


def tag_mutual_information(tags, offsets=(-1,), log_base: float = 0.0) -> dict:
    return json.loads(_mposm.tag_mutual_information(tags, list(offsets), log_base))


def predict(checkpoint: str | PathLike, sentences):
    """Tag ids per sentence. `sentences` holds (words, tags) pairs or plain word lists."""
    pairs = [(s, None) if s and isinstance(s[0], str) else s for s in sentences]
    return _mposm.predict(checkpoint, pairs)


def run(config_text: str, overrides=(), out_dir: str | PathLike = "") -> dict:
    """Trains every configured seed and returns the aggregate report."""
    return json.loads(_mposm.run(config_text, list(overrides), out_dir))


def resolve_config(config_text: str, overrides=()) -> str:
    return _mposm.resolve_config(config_text, list(overrides))
