"""Experiment configuration and the end-to-end training run.

Configs are flat JSON objects with a ``schema_version`` key. Bundled
presets are addressed as ``preset:<name>``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from .checkpoint import save_checkpoint
from .cluster import ClusterConfig, RoundLog
from .errors import ContractViolation, FormatError
from .idx import MnistDataset
from .model import build_mlp
from .numeric import ActivationKind
from .partition import MaskPolicy
from .trainer import Hyperparams, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DATA_DIR_ENV = "NEURONSIM_DATA_DIR"
DEFAULT_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class ExperimentConfig:
    seed: int
    schema_version: int = SCHEMA_VERSION
    data_dir: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    layers: str = "784-512-10"
    hidden_activation: str = "relu"
    use_bias: bool = True
    # "retention": the rates below are keep probabilities; "drop": drop probabilities
    dropout_reading: str = "retention"
    input_dropout: float = 0.8
    hidden_dropout: float = 0.5
    learning_rate: float = 0.3
    momentum: float = 0.98
    batch_size: int = 100
    max_iterations: int = 10_000
    n_groups: int = 1
    tasks_per_group: int = 1
    sync_mode: str = "allreduce"
    deterministic: bool = True
    max_staleness: Optional[int] = None
    submodel_masking: bool = False
    connection_drop_probability: float = 0.2
    mask_refresh: str = "run"
    eval_interval: int = 500
    engine: str = "vector"
    out_dir: str = "runs/latest"
    base_dir: Optional[str] = field(default=None, repr=False, compare=False)

    @property
    def layer_sizes(self):
        try:
            sizes = [int(s) for s in str(self.layers).replace(",", "-").split("-")]
        except ValueError:
            raise ContractViolation(f"layers must look like '784-512-10', got {self.layers!r}") from None
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractViolation(f"invalid layer sizes {sizes}")
        return sizes

    def retentions(self):
        if self.dropout_reading == "retention":
            return self.input_dropout, self.hidden_dropout
        if self.dropout_reading == "drop":
            return 1.0 - self.input_dropout, 1.0 - self.hidden_dropout
        raise ContractViolation(f"dropout_reading must be 'retention' or 'drop', got {self.dropout_reading!r}")

    def hyperparams(self) -> Hyperparams:
        p_in, p_hidden = self.retentions()
        return Hyperparams(self.learning_rate, self.momentum, p_in, p_hidden,
                           self.batch_size, self.max_iterations)

    def cluster(self) -> ClusterConfig:
        return ClusterConfig(self.n_groups, self.tasks_per_group, self.sync_mode,
                             self.deterministic, self.seed, self.max_staleness)

    def mask_policy(self) -> Optional[MaskPolicy]:
        if not self.submodel_masking:
            return None
        return MaskPolicy(self.connection_drop_probability, self.seed)

    def build_model(self):
        p_in, p_hidden = self.retentions()
        return build_mlp(self.layer_sizes, ActivationKind.parse(self.hidden_activation),
                         p_in, p_hidden, seed=self.seed, use_bias=self.use_bias)

    def data_path(self, key) -> Path:
        explicit = getattr(self, key)
        base = Path(self.base_dir) if self.base_dir else Path.cwd()
        if explicit:
            p = Path(explicit)
            return p if p.is_absolute() else base / p
        data_dir = self.data_dir or os.environ.get(DATA_DIR_ENV)
        if not data_dir:
            raise ContractViolation(
                f"no path for {key}: set data_dir, {key}, or ${DATA_DIR_ENV}")
        d = Path(data_dir)
        return (d if d.is_absolute() else base / d) / DEFAULT_FILES[key]

    def validate(self, check_paths=True):
        if self.schema_version != SCHEMA_VERSION:
            raise FormatError(f"unsupported config schema_version {self.schema_version}")
        self.hyperparams()
        self.cluster()
        self.mask_policy()
        self.layer_sizes
        if self.eval_interval < 1:
            raise ContractViolation("eval_interval must be at least 1")
        if self.mask_refresh not in ("run", "batch"):
            raise ContractViolation(f"mask_refresh must be 'run' or 'batch', got {self.mask_refresh!r}")
        if check_paths:
            for key in DEFAULT_FILES:
                p = self.data_path(key)
                if not p.is_file():
                    raise ContractViolation(f"{key} file not found: {p}")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key, value):
    if key not in _FIELD_TYPES or key == "base_dir":
        raise FormatError(f"unknown config key {key!r}")
    if value is None or not isinstance(value, str):
        return value
    kind = _FIELD_TYPES[key]
    if "bool" in kind:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"{key} expects a boolean, got {value!r}")
    if value.lower() in ("none", "null") and "Optional" in kind:
        return None
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return value


def config_from_dict(raw: dict, base_dir=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise FormatError("config must be a flat JSON object")
    if "seed" not in raw:
        raise FormatError("config is missing the mandatory 'seed'")
    values = {}
    for key, value in raw.items():
        if isinstance(value, (dict, list)):
            raise FormatError(f"config key {key!r} must be a scalar (configs are flat)")
        values[key] = _coerce(key, value)
    cfg = ExperimentConfig(**values)
    cfg.base_dir = str(base_dir) if base_dir is not None else None
    return cfg


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("neuronsim.presets").iterdir()
                  if p.name.endswith(".json"))


def load_config(source) -> ExperimentConfig:
    """Load a JSON config file, or a bundled preset via ``preset:<name>``."""
    source = str(source)
    if source.startswith("preset:"):
        name = source.split(":", 1)[1]
        res = resources.files("neuronsim.presets") / f"{name}.json"
        if not res.is_file():
            raise FormatError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
        return config_from_dict(json.loads(res.read_text()), base_dir=Path.cwd())
    path = Path(source)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw, base_dir=path.resolve().parent)


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """``key=value`` strings from the command line."""
    changes = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise FormatError(f"override {pair!r} is not key=value")
        changes[key.strip()] = _coerce(key.strip(), value.strip())
    return cfg.replace(**changes)


def load_datasets(cfg: ExperimentConfig):
    train_set = MnistDataset.load(cfg.data_path("train_images"), cfg.data_path("train_labels"))
    test_set = MnistDataset.load(cfg.data_path("test_images"), cfg.data_path("test_labels"))
    return train_set.head(cfg.train_limit), test_set.head(cfg.test_limit)


def run_experiment(cfg: ExperimentConfig, out_dir=None, stdout=None, datasets=None):
    """Train per ``cfg`` and write ``metrics.csv``, ``rounds.csv``,
    ``checkpoint.npz`` and ``config.json`` into ``out_dir``.

    Returns ``(exit_status, metrics)``.
    """
    stdout = stdout or sys.stdout
    out = Path(out_dir or cfg.out_dir)
    cfg.validate(check_paths=datasets is None)
    train_set, test_set = datasets if datasets is not None else load_datasets(cfg)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with open(out / "rounds.csv", "w", newline="") as rounds:
        metrics = train(cfg.cluster(), cfg.hyperparams(), train_set, test_set, cfg.build_model(),
                        policy=cfg.mask_policy(), eval_interval=cfg.eval_interval,
                        mask_refresh=cfg.mask_refresh, engine=cfg.engine,
                        round_log=RoundLog(rounds))
    wall = time.perf_counter() - t0
    with open(out / "metrics.csv", "w", newline="") as fh:
        metrics.to_csv(fh)
    save_checkpoint(out / "checkpoint.npz", metrics.model, metrics.masks,
                    extra={"iterations": cfg.max_iterations})
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    last = metrics.points[-1]
    print(f"final_accuracy={last.accuracy:.4f} iterations={last.iteration} wall_s={wall:.1f}",
          file=stdout)
    return 0, metrics
