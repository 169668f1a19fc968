"""Experiment configuration and the shared setup every arm starts from."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from flsim import __version__
from flsim.data import DatasetManifest, generate_synthetic, load_jsonl
from flsim.errors import ConfigurationError
from flsim.federation import FedConfig
from flsim.lora import LoraAdapterSet, init_adapters
from flsim.nn.model import BaseModel, ModelConfig, init_base_model
from flsim.partition import ClientShard, PartitionPlan, partition, split_holdout


@dataclass
class DataConfig:
    path: str | None = None
    synthetic_seed: int = 7
    n_records: int = 800
    category_spec: list | None = None
    holdout_fraction: float = 0.1
    holdout_seed: int = 0


@dataclass
class EvalConfig:
    local_arms: int = 3
    local_epochs: int | None = None
    batch_size: int = 16


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    model_seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionPlan = field(default_factory=PartitionPlan)
    federation: FedConfig = field(default_factory=FedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.partition.n_clients != self.federation.n_clients:
            raise ConfigurationError(
                f"partition.n_clients={self.partition.n_clients} != "
                f"federation.n_clients={self.federation.n_clients}"
            )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "model_seed": self.model_seed,
            "data": asdict(self.data),
            "partition": self.partition.to_dict(),
            "federation": self.federation.to_dict(),
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        sections = {"model": ModelConfig, "data": DataConfig, "partition": PartitionPlan,
                    "federation": FedConfig, "eval": EvalConfig}
        unknown = set(d) - set(sections) - {"model_seed"}
        if unknown:
            raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        for name, typ in sections.items():
            sec = d.get(name, {})
            allowed = {f.name for f in fields(typ)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in [{name}]: {sorted(bad)}")
            if name == "partition" and "classes_per_client" in sec:
                sec["classes_per_client"] = tuple(sec["classes_per_client"])
            d[name] = sec
        # n_clients may be given in either section
        n = d["partition"].get("n_clients", d["federation"].get("n_clients"))
        if n is not None:
            d["partition"].setdefault("n_clients", n)
            d["federation"].setdefault("n_clients", n)
        for name, typ in sections.items():
            kwargs[name] = typ(**d[name])
        return cls(model_seed=d.get("model_seed", 0), **kwargs)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with every seed derived from ``seed``."""
        s = [int(x) for x in np.random.SeedSequence(seed).generate_state(6)]
        d = self.to_dict()
        d["model_seed"] = s[0]
        d["data"]["synthetic_seed"] = s[1]
        d["data"]["holdout_seed"] = s[2]
        d["partition"]["seed"] = s[3]
        d["federation"]["selection_seed"] = s[4]
        d["federation"]["training_seed"] = s[5]
        return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


@dataclass
class Setup:
    config: ExperimentConfig
    manifest: DatasetManifest
    holdout: list[int]
    train_indices: list[int]
    shards: list[ClientShard]
    base: BaseModel
    initial_adapters: LoraAdapterSet


def load_dataset(cfg: DataConfig) -> DatasetManifest:
    if cfg.path:
        return load_jsonl(cfg.path)
    return generate_synthetic(cfg.synthetic_seed, cfg.n_records, cfg.category_spec)


def prepare(config: ExperimentConfig, manifest: DatasetManifest | None = None,
            shards: list[ClientShard] | None = None, holdout: list[int] | None = None) -> Setup:
    """Dataset, holdout split, shards, frozen base model and the initial adapters."""
    manifest = load_dataset(config.data) if manifest is None else manifest
    if holdout is None:
        holdout, train = split_holdout(manifest, config.data.holdout_fraction, config.data.holdout_seed)
    else:
        held = set(holdout)
        train = [i for i in range(len(manifest)) if i not in held]
    if shards is None:
        shards = partition(manifest, config.partition, train)
    held = set(holdout)
    for s in shards:
        if held.intersection(s.record_indices):
            raise ConfigurationError(f"client {s.client_id} shard overlaps the holdout")
    base = init_base_model(config.model, config.model_seed)
    fed = config.federation
    adapters = init_adapters(base, fed.lora_rank, fed.training_seed, fed.lora_sigma)
    return Setup(config, manifest, holdout, train, shards, base, adapters)


def run_manifest(config: ExperimentConfig, manifest: DatasetManifest, extra: dict | None = None) -> dict:
    """Everything needed to replay a run bit-for-bit in sequential mode."""
    doc = {
        "format": "flsim-run/1",
        "version": __version__,
        "config": config.to_dict(),
        "dataset_sha256": manifest.digest(),
        "dataset_source": manifest.source,
    }
    doc.update(extra or {})
    return doc
