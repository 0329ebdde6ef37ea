"""
idwrec/settings.py
------------------
Experiment specifications, presets and run-directory helpers.

An experiment is described by one JSON document validated into an
ExperimentSpec (or a SweepSpec when it names a sweep axis). Dotted
`key=value` overrides are applied to the raw document before validation so
every value goes through the same validators.

Environment
-----------
IDWREC_OUTPUT_ROOT   – default parent directory of run directories (./runs).
IDWREC_LOG_LEVEL     – default log level (INFO).
IDWREC_NUM_THREADS   – torch intra-op threads.
"""

from __future__ import annotations

import json
import logging
import os
import uuid
from datetime import datetime
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Union

import torch
from pydantic import BaseModel, Field, field_validator, model_validator

from idwrec.errors import InvalidConfigError
from idwrec.evaluation import EvalProtocol
from idwrec.idw import IdwConfig
from idwrec.synthetic import SynthConfig
from idwrec.towers import TowerConfig
from idwrec.training import TrainConfig

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------
OUTPUT_ROOT_ENV = "IDWREC_OUTPUT_ROOT"
LOG_LEVEL_ENV = "IDWREC_LOG_LEVEL"
NUM_THREADS_ENV = "IDWREC_NUM_THREADS"
DEFAULT_OUTPUT_ROOT = "runs"

COMMANDS = ("generate", "train", "idw", "evaluate", "sweep", "report")
SWEEP_AXES = ("interest_exponent", "M", "eta", "momentum", "strategy")


class Variant(NamedTuple):
    strategy: str
    single_rep: bool = False
    idw: bool = False
    calibrate: bool = True


VARIANTS: Dict[str, Variant] = {
    "sur": Variant("uniform", single_rep=True),
    "mur": Variant("uniform"),
    "frequency": Variant("frequency"),
    "focal": Variant("focal"),
    "qmargin": Variant("qmargin"),
    "item_norm": Variant("item_norm"),
    "item_norm_posthoc": Variant("item_norm_posthoc"),
    "sur_idw": Variant("uniform", single_rep=True, idw=True),
    "mur_idw": Variant("uniform", idw=True),
    "mur_idw_nocalib": Variant("uniform", idw=True, calibrate=False),
}


def _check_variant(v: str) -> str:
    v = v.strip().lower()
    if v not in VARIANTS:
        raise ValueError(f"Invalid variant '{v}'. Must be one of: {sorted(VARIANTS)}")
    return v


# ---------------------------------------------------------------------------
# Pydantic models
# ---------------------------------------------------------------------------

class DataSource(BaseModel):
    """Where interactions come from and how evaluation groups are formed."""
    model_config = {'protected_namespaces': ()}

    kind: Literal["synthetic", "tsv", "movielens", "amazon_json"] = "synthetic"
    path: Optional[str] = None
    ground_truth: Optional[str] = None
    synthetic: SynthConfig = Field(default_factory=SynthConfig)
    max_len: int = Field(30, ge=2)
    group_by: Literal["items", "clusters"] = "items"
    head_clusters: int = Field(2, ge=1)

    @model_validator(mode="after")
    def check_source(self) -> "DataSource":
        if self.kind != "synthetic" and not self.path:
            raise ValueError(f"data.path is required for kind '{self.kind}'.")
        if self.group_by == "clusters" and self.kind != "synthetic" and not self.ground_truth:
            raise ValueError("group_by='clusters' needs synthetic data or data.ground_truth.")
        return self


class ExperimentSpec(BaseModel):
    """One experiment: data, model, schedule, protocol and outputs."""
    model_config = {'protected_namespaces': ()}

    command: Literal["generate", "train", "idw", "evaluate", "sweep", "report"] = "train"
    variant: str = "mur"
    data: DataSource = Field(default_factory=DataSource)
    towers: TowerConfig = Field(default_factory=TowerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    idw: IdwConfig = Field(default_factory=IdwConfig)
    eval: EvalProtocol = Field(default_factory=EvalProtocol)
    seeds: List[int] = [0]
    output_root: Optional[str] = None
    checkpoint: Optional[str] = None
    run_dirs: List[str] = []
    export_items: bool = False
    write_ranks: bool = False
    write_splits: bool = False

    @field_validator("variant")
    @classmethod
    def validate_variant(cls, v: str) -> str:
        return _check_variant(v)

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("seeds must not be empty.")
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative.")
        return v

    @property
    def variant_spec(self) -> Variant:
        return VARIANTS[self.variant]

    def check_paths(self) -> None:
        """
        Confirms that every referenced file exists.

        Raises:
            InvalidConfigError: Naming the first missing path.
        """
        if self.data.kind != "synthetic" and self.command != "report" and not os.path.exists(self.data.path):
            raise InvalidConfigError("data.path", f"file not found: {self.data.path}")
        if self.data.ground_truth and not os.path.exists(self.data.ground_truth):
            raise InvalidConfigError("data.ground_truth", f"file not found: {self.data.ground_truth}")
        if self.command == "evaluate":
            if not self.checkpoint:
                raise InvalidConfigError("checkpoint", "evaluate needs a checkpoint path")
            if not os.path.exists(self.checkpoint):
                raise InvalidConfigError("checkpoint", f"file not found: {self.checkpoint}")
        if self.command == "report":
            if not self.run_dirs:
                raise InvalidConfigError("run_dirs", "report needs at least one run directory")
            for d in self.run_dirs:
                if not os.path.isdir(d):
                    raise InvalidConfigError("run_dirs", f"directory not found: {d}")

    @classmethod
    def synthetic_preset(cls, visual: bool = False, interest_exponent: float = 0.0) -> "ExperimentSpec":
        """
        Interest-cluster generator defaults: 5 clusters x 10 items, 29 negatives
        (a 50-item catalog cannot supply 99 unseen items) and cluster head/tail.
        `visual` switches to 2-D representations for scatter plots.
        """
        d = 2 if visual else 16
        return cls(
            data=DataSource(
                kind="synthetic",
                synthetic=SynthConfig(num_users=2000, seq_len=20, interest_exponent=interest_exponent),
                group_by="clusters",
            ),
            towers=TowerConfig(embed_dim=d, attention_heads=1 if visual else 4,
                               norm="rms" if visual else "layer"),
            train=TrainConfig(batch_size=128, max_epochs=30, monitor_k=5),
            idw=IdwConfig(wake=TrainConfig(batch_size=128, max_epochs=30, patience=2, monitor_k=5)),
            eval=EvalProtocol(k_values=[5, 20], num_negatives=29),
            seeds=[0, 1, 2],
        )

    @classmethod
    def movielens_preset(cls, path: str) -> "ExperimentSpec":
        """MovieLens-1M ratings.dat with d=16, M=5, lr 0.01 and batch 256."""
        return cls(
            data=DataSource(kind="movielens", path=path),
            towers=TowerConfig(embed_dim=16, num_reps=5),
            train=TrainConfig(batch_size=256),
            idw=IdwConfig(wake=TrainConfig(batch_size=256, patience=2)),
            seeds=[0, 1, 2],
        )


class SweepSpec(BaseModel):
    """One axis of values crossed with a list of variants over the base seeds."""
    model_config = {'protected_namespaces': ()}

    axis: Literal["interest_exponent", "M", "eta", "momentum", "strategy"]
    values: List[Union[float, str]]
    variants: List[str] = ["mur"]
    base: ExperimentSpec = Field(default_factory=ExperimentSpec)

    @field_validator("variants")
    @classmethod
    def validate_variants(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("variants must not be empty.")
        return [_check_variant(x) for x in v]

    @model_validator(mode="after")
    def check_values(self) -> "SweepSpec":
        if not self.values:
            raise ValueError("values must not be empty.")
        if self.axis == "strategy":
            self.values = [_check_variant(str(v)) for v in self.values]
            return self
        try:
            numbers = [float(v) for v in self.values]
        except (TypeError, ValueError):
            raise ValueError(f"values for axis '{self.axis}' must be numeric.") from None
        if self.axis == "interest_exponent" and any(x < 0 for x in numbers):
            raise ValueError("interest_exponent values must be >= 0.")
        if self.axis == "M" and any(x < 1 or x != int(x) for x in numbers):
            raise ValueError("M values must be positive integers.")
        if self.axis == "eta" and any(x <= 0 for x in numbers):
            raise ValueError("eta values must be > 0.")
        if self.axis == "momentum" and any(not 0 <= x <= 1 for x in numbers):
            raise ValueError("momentum values must lie in [0, 1].")
        self.values = [int(x) if self.axis == "M" else x for x in numbers]
        return self

    def runs(self) -> List[tuple]:
        """(axis_value, variant, seed, spec) for every run of the sweep."""
        variants = ["__axis__"] if self.axis == "strategy" else self.variants
        out = []
        for value in self.values:
            for variant in variants:
                for seed in self.base.seeds:
                    spec = apply_axis(self.base, self.axis, value, variant)
                    spec = spec.model_copy(update={"seeds": [seed]})
                    out.append((value, spec.variant, seed, spec))
        return out


def apply_axis(base: ExperimentSpec, axis: str, value: Any, variant: str) -> ExperimentSpec:
    """Copy of `base` with one sweep value and variant applied."""
    payload = base.model_dump()
    payload["variant"] = value if axis == "strategy" else variant
    if axis == "interest_exponent":
        payload["data"]["synthetic"]["interest_exponent"] = float(value)
    elif axis == "M":
        payload["towers"]["num_reps"] = int(value)
    elif axis == "eta":
        payload["idw"]["eta"] = float(value)
    elif axis == "momentum":
        payload["idw"]["momentum"] = float(value)
    payload["command"] = "idw" if VARIANTS[payload["variant"]].idw else "train"
    return ExperimentSpec(**payload)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(payload: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Applies `dotted.key=value` overrides in place; values are parsed as JSON
    when possible and kept as strings otherwise.

    Raises:
        InvalidConfigError: On an override without '='.
    """
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(item, "overrides must look like dotted.key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = payload
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidConfigError(key, f"'{part}' is not a section")
        node[parts[-1]] = _parse_value(raw.strip())
    return payload


def deep_merge(target: Dict[str, Any], source: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively copies `source` into `target`; nested dicts are merged."""
    for key, value in source.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            deep_merge(target[key], value)
        else:
            target[key] = value
    return target


def load_spec(path: Optional[str], overrides: Sequence[str] = (), command: Optional[str] = None,
              preset: Optional[ExperimentSpec] = None) -> Union[ExperimentSpec, SweepSpec]:
    """
    Builds a spec from an optional preset, a JSON file and overrides, in that
    order, then validates it.

    A document with an `axis` key, or the `sweep` command, yields a SweepSpec
    whose `base` starts from the preset.

    Raises:
        InvalidConfigError: If the file is missing or an override is malformed.
        pydantic.ValidationError: If the merged document is invalid.
    """
    file_payload: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise InvalidConfigError("config", f"file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            file_payload = json.load(f)

    sweeping = command == "sweep" or "axis" in file_payload
    payload: Dict[str, Any] = {}
    if preset is not None:
        preset_payload = preset.model_dump()
        payload = {"base": preset_payload} if sweeping else preset_payload
    deep_merge(payload, file_payload)
    apply_overrides(payload, overrides)

    if command == "sweep" or "axis" in payload:
        payload.setdefault("base", {})
        return SweepSpec(**payload)
    if command:
        payload["command"] = command
    return ExperimentSpec(**payload)


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

def resolve_output_root(cli_value: Optional[str] = None, spec_value: Optional[str] = None) -> str:
    return cli_value or spec_value or os.getenv(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT


def make_run_dir(root: str, name: str) -> str:
    """Creates `<root>/<timestamp>-<name>-<suffix>` and returns its path."""
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    path = os.path.join(root, f"{stamp}-{name}-{uuid.uuid4().hex[:6]}")
    os.makedirs(path, exist_ok=False)
    return path


def write_json(path: str, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def configure_threads() -> None:
    value = os.getenv(NUM_THREADS_ENV)
    if not value:
        return
    try:
        torch.set_num_threads(int(value))
        logger.info("[CLI] torch intra-op threads set to %s", value)
    except ValueError:
        logger.warning("[CLI] Ignoring non-integer %s=%r", NUM_THREADS_ENV, value)
