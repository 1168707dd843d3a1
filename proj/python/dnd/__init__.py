"""Python bindings for the dnd core: data, models, attacks, experiments and the gateway."""

import json
from pathlib import Path

from ._core import (
    Classifier,
    Gateway,
    IoError,
    SearchFailure,
    StageError,
    derive_seed,
    gen_dataset,
    glyph_templates,
    load_dataset,
    quantize,
    roc_auc,
    save_dataset,
    selection_counts,
)
from . import _core

__all__ = [
    "Classifier",
    "Gateway",
    "IoError",
    "Report",
    "SearchFailure",
    "StageError",
    "config_hash",
    "default_config",
    "derive_seed",
    "gen_dataset",
    "glyph_templates",
    "load_dataset",
    "load_report",
    "quantize",
    "roc_auc",
    "run_experiment",
    "save_dataset",
    "selection_counts",
    "train_system",
    "write_report",
]


class Report:
    """Summary (the report.json object) plus per-sample rows by scenario."""

    def __init__(self, summary, samples):
        self.summary = summary
        self.samples = samples

    @classmethod
    def _from_raw(cls, raw):
        return cls(json.loads(raw.summary), json.loads(raw.samples))

    def recount(self):
        return _core.recount_rates(json.dumps(self.samples))


def default_config():
    return json.loads(_core.default_config())


def _text(config):
    return json.dumps(config if config is not None else default_config())


def config_hash(config):
    return _core.config_hash(_text(config))


def run_experiment(config=None):
    return Report._from_raw(_core.run_experiment(_text(config)))


def train_system(config, out_dir):
    _core.train_system(_text(config), Path(out_dir))


def write_report(report, out_dir):
    _core.write_report(json.dumps(report.summary), json.dumps(report.samples), Path(out_dir))


def load_report(out_dir):
    return Report._from_raw(_core.load_report(Path(out_dir)))
