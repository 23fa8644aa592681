"""Run configuration: dataclass sections, INI loading and the config hash.

Defaults mirror the training hyperparameters used for both trainers
(G, clipping, KL coefficient, temperature, learning rate, cosine schedule,
one epoch, batch 8) and the desk-scale corpus sizes.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError

__all__ = [
    "CorpusConfig",
    "PolicyConfig",
    "PretrainConfig",
    "RewardConfig",
    "DatasetConfig",
    "GrpoConfig",
    "DpoConfig",
    "EvalConfig",
    "InterleaveConfig",
    "RunConfig",
    "ARTIFACT_ENV_VAR",
    "load_config",
]

ARTIFACT_ENV_VAR = "RELSUM_ARTIFACTS"


@dataclass(slots=True)
class CorpusConfig:
    n_products: int = 2000
    n_attributes: int = 200
    n_filler: int = 300
    attrs_min: int = 4
    attrs_max: int = 8
    reveal_prob: float = 0.5
    title_max: int = 16
    title_filler_min: int = 1
    title_filler_max: int = 6
    desc_min: int = 24
    desc_max: int = 64
    n_train_queries: int = 1500
    n_eval_queries: int = 500
    zipf_s: float = 1.1
    max_targets: int = 3
    query_filler_max: int = 2
    pairs_per_query: int = 10
    share_fraction: float = 0.6
    tail_fraction: float = 1.0 / 3.0

    def validate(self) -> None:
        if min(self.n_products, self.n_attributes, self.n_filler, self.pairs_per_query) <= 0:
            raise ConfigError("corpus sizes must be positive")
        if self.n_train_queries < 0 or self.n_eval_queries < 0:
            raise ConfigError("query counts must be non-negative")
        if not 0 < self.attrs_min <= self.attrs_max:
            raise ConfigError(f"need 0 < attrs_min <= attrs_max, got {self.attrs_min}, {self.attrs_max}")
        if self.attrs_max > self.n_attributes:
            raise ConfigError("attribute vocabulary smaller than attrs_max")
        if self.attrs_min < 2:
            raise ConfigError("titles must reveal one attribute and hide another: attrs_min must be >= 2")
        if not 0.0 < self.reveal_prob < 1.0:
            raise ConfigError("reveal_prob must lie in (0, 1)")
        if self.attrs_max - 1 > self.title_max:
            raise ConfigError("title_max cannot hold the revealed attributes")
        if not 0 <= self.title_filler_min <= self.title_filler_max:
            raise ConfigError("title filler bounds are inverted")
        if not self.attrs_max <= self.desc_max or not 0 < self.desc_min <= self.desc_max:
            raise ConfigError("description length bounds cannot hold the attributes")
        if not 1 <= self.max_targets <= self.attrs_min:
            raise ConfigError("max_targets must lie in [1, attrs_min]")
        if self.zipf_s <= 0:
            raise ConfigError("zipf_s must be positive")
        if not 0.0 <= self.share_fraction <= 1.0:
            raise ConfigError("share_fraction must lie in [0, 1]")
        if not 0.0 < self.tail_fraction < 1.0:
            raise ConfigError("tail_fraction must lie in (0, 1)")


@dataclass(slots=True)
class PolicyConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    tied_output: bool = False
    init_std: float = 0.02
    context_window: int = 128
    title_budget: int = 16
    description_budget: int = 64
    summary_budget: int = 12

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.context_window) <= 0:
            raise ConfigError("policy dimensions must be positive")
        if self.summary_budget < 0:
            raise ConfigError("summary_budget must be non-negative")


@dataclass(slots=True)
class PretrainConfig:
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.01
    heldout_fraction: float = 0.1
    plateau_tolerance: float = 0.01

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("pretraining needs epochs >= 1, batch_size >= 1 and lr > 0")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in (0, 1)")


@dataclass(slots=True)
class RewardConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    head_hidden: int = 64
    init_std: float = 0.02
    query_budget: int = 8
    context_budget: int = 96
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: int = 30
    heldout_fraction: float = 0.1
    gate: float = 0.15

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.max_epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("reward training needs max_epochs >= 1, batch_size >= 1 and lr > 0")
        if not 0.0 < self.gate <= 1.0:
            raise ConfigError("gate must lie in (0, 1]")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in (0, 1)")


@dataclass(slots=True)
class DatasetConfig:
    tau: float = 0.2

    def validate(self) -> None:
        if self.tau < 0:
            raise ConfigError("tau must be non-negative")


@dataclass(slots=True)
class GrpoConfig:
    G: int = 4
    epsilon: float = 0.2
    beta: float = 0.0
    temperature: float = 0.9
    lr: float = 1e-5
    epochs: int = 1
    batch_size: int = 8
    inner_updates: int = 1
    std_floor: float = 1e-8
    weight_decay: float = 0.01
    checkpoint_every: int = 50

    def validate(self) -> None:
        if self.G < 2:
            raise ConfigError("GRPO needs G >= 2 to standardise rewards")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.beta < 0 or self.temperature <= 0 or self.lr <= 0:
            raise ConfigError("beta must be >= 0, temperature and lr > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.inner_updates < 1:
            raise ConfigError("epochs, batch_size and inner_updates must be >= 1")


@dataclass(slots=True)
class DpoConfig:
    beta: float = 0.1
    temperature: float = 0.9
    lr: float = 1e-5
    epochs: int = 1
    batch_size: int = 8
    G: int = 2
    weight_decay: float = 0.01
    checkpoint_every: int = 50

    def validate(self) -> None:
        if self.beta <= 0:
            raise ConfigError("DPO beta must be positive")
        if self.G != 2:
            raise ConfigError("DPO samples exactly two summaries per prompt (G = 2)")
        if self.temperature <= 0 or self.lr <= 0:
            raise ConfigError("temperature and lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass(slots=True)
class EvalConfig:
    ndcg_k: int = 5
    precision_target: float = 0.9
    gain: str = "linear"
    sample_summaries: bool = False
    sample_temperature: float = 0.9
    examples: int = 5

    def validate(self) -> None:
        if self.ndcg_k < 1:
            raise ConfigError("ndcg_k must be >= 1")
        if not 0.0 < self.precision_target <= 1.0:
            raise ConfigError("precision_target must lie in (0, 1]")
        if self.gain not in {"linear", "exponential"}:
            raise ConfigError("gain must be 'linear' or 'exponential'")


@dataclass(slots=True)
class InterleaveConfig:
    n_sessions: int = 10000
    top_k: int = 40
    atc_excellent: float = 0.30
    atc_good: float = 0.12
    atc_other: float = 0.02
    traffic_weighted: bool = True
    variation: str = "RelsumGrpo"
    control: str = "None"

    def validate(self) -> None:
        if self.n_sessions < 1 or self.top_k < 1:
            raise ConfigError("n_sessions and top_k must be >= 1")
        probs = (self.atc_other, self.atc_good, self.atc_excellent)
        if any(not 0.0 <= p <= 1.0 for p in probs) or list(probs) != sorted(probs):
            raise ConfigError("ATC probabilities must lie in [0, 1] and be monotone in rating")


_SECTIONS: dict[str, type] = {
    "corpus": CorpusConfig,
    "policy": PolicyConfig,
    "pretrain": PretrainConfig,
    "reward": RewardConfig,
    "dataset": DatasetConfig,
    "grpo": GrpoConfig,
    "dpo": DpoConfig,
    "eval": EvalConfig,
    "interleave": InterleaveConfig,
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {"int": int, "float": float, "bool": _parse_bool, "str": str}


def _coerce(section: str, key: str, annotation: str, raw: object) -> object:
    parser = _PARSERS.get(str(annotation))
    if parser is None:
        raise ConfigError(f"[{section}] {key}: unsupported field type {annotation}")
    if not isinstance(raw, str):
        raw = str(raw)
    try:
        return parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {annotation}") from exc


@dataclass(slots=True)
class RunConfig:
    """Every knob of a pipeline run."""

    root_seed: int = 0
    artifact_dir: str = "artifacts"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    interleave: InterleaveConfig = field(default_factory=InterleaveConfig)

    def validate(self) -> None:
        if self.root_seed < 0:
            raise ConfigError("root_seed must be a non-negative integer")
        for name in _SECTIONS:
            getattr(self, name).validate()

    def to_payload(self) -> dict[str, object]:
        return asdict(self)

    @classmethod
    def from_payload(cls, payload: Mapping[str, object]) -> "RunConfig":
        config = cls()
        for key in ("root_seed", "artifact_dir"):
            if key in payload:
                setattr(config, key, type(getattr(config, key))(payload[key]))
        for name, section_type in _SECTIONS.items():
            values = payload.get(name, {})
            if not isinstance(values, Mapping):
                raise ConfigError(f"section '{name}' must be a mapping")
            setattr(config, name, _build_section(name, section_type, values))
        return config

    def config_hash(self) -> str:
        """SHA-256 of all sections plus the root seed (artifact dir excluded)."""

        payload = self.to_payload()
        payload.pop("artifact_dir", None)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """Apply ``section.key=value`` strings on top of the current values."""

        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
            self._set(section, key, raw)

    def _set(self, section: str, key: str, raw: object) -> None:
        if section == "run":
            if key not in {"root_seed", "artifact_dir"}:
                raise ConfigError(f"unknown key [run] {key}")
            setattr(self, key, _coerce("run", key, "int" if key == "root_seed" else "str", raw))
            return
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(self, section)
        annotations = {f.name: f.type for f in fields(target)}
        if key not in annotations:
            raise ConfigError(f"unknown key [{section}] {key}")
        setattr(target, key, _coerce(section, key, annotations[key], raw))

    def to_ini(self) -> str:
        lines = ["[run]", f"root_seed = {self.root_seed}", f"artifact_dir = {self.artifact_dir}", ""]
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            for key, value in asdict(getattr(self, name)).items():
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _build_section(name: str, section_type: type, values: Mapping[str, object]) -> Any:
    section = section_type()
    annotations = {f.name: f.type for f in fields(section)}
    for key, raw in values.items():
        if key not in annotations:
            raise ConfigError(f"unknown key [{name}] {key}")
        setattr(section, key, _coerce(name, key, annotations[key], raw))
    return section


def load_config(
    path: str | Path | None = None,
    *,
    overrides: Iterable[str] = (),
    seed: int | None = None,
    artifact_dir: str | None = None,
) -> RunConfig:
    """Build a :class:`RunConfig` from an INI file, then overrides, then flags.

    Precedence (lowest first): defaults, file, ``--set`` overrides, the
    ``RELSUM_ARTIFACTS`` environment variable (artifact root only), explicit
    ``seed``/``artifact_dir`` arguments.
    """

    config = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (e.g. ``G``)
        source = Path(path)
        if not source.exists():
            raise ConfigError(f"config file not found: {source}")
        try:
            parser.read(source, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                config._set(section, key, raw)
    config.apply_overrides(overrides)
    env_root = os.environ.get(ARTIFACT_ENV_VAR)
    if env_root:
        config.artifact_dir = env_root
    if seed is not None:
        config.root_seed = seed
    if artifact_dir is not None:
        config.artifact_dir = artifact_dir
    config.validate()
    return config
