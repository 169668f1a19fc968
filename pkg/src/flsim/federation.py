"""Server loop: select clients, tune adapters locally, aggregate.

Only adapter matrices cross the simulated wire; the base model is shared
read-only and optimizer state lives and dies inside one local_train call.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from flsim.data import DatasetManifest, TokenizedExample, collate, tokenize
from flsim.errors import ConfigurationError, ProtocolError, TrainingDivergedError
from flsim.lora import (
    LoraAdapter,
    LoraAdapterSet,
    header_bytes,
    init_adapters,
    payload_bytes,
    serialize_adapters,
)
from flsim.nn.model import PAD, BaseModel, backward, forward_lm, loss_next_token
from flsim.nn.optim import OptimizerState, optimizer_step
from flsim.partition import ClientShard

log = logging.getLogger(__name__)

WEIGHTINGS = ("size", "uniform")


@dataclass
class FedConfig:
    n_clients: int = 100
    rounds: int = 20
    clients_per_round: int = 5
    local_epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 3e-3
    optimizer: str = "adam"
    lora_rank: int = 8
    lora_sigma: float | None = None
    weighting: str = "size"
    selection_seed: int = 0
    training_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("n_clients, rounds, local_epochs and batch_size must be >= 1")
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigurationError(
                f"clients_per_round={self.clients_per_round} must be in [1, n_clients={self.n_clients}]"
            )
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.lora_rank < 1:
            raise ConfigurationError("lora_rank must be >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ConfigurationError(f"weighting must be one of {WEIGHTINGS}")
        OptimizerState(kind=self.optimizer)  # validates the name
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClientStats:
    client_id: int
    shard_size: int
    n_steps: int
    mean_loss: float | None
    update_norm: float
    skipped_records: int = 0


@dataclass
class RoundLog:
    round: int
    selected: list[int]
    clients: list[dict]
    aggregate_update_norm: float
    product_gap: float
    uplink_bytes: int
    downlink_bytes: int
    global_sha256: str
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundLog":
        return cls(**d)

    def replay_key(self) -> dict:
        """Everything except wall-clock time, which no replay can reproduce."""
        d = self.to_dict()
        d.pop("wall_seconds")
        return d


def select_clients(n_clients: int, m: int, round_index: int, selection_seed: int) -> list[int]:
    """Uniform sample of ``m`` distinct ids, deterministic in (seed, round)."""
    if not 1 <= m <= n_clients:
        raise ConfigurationError(f"cannot select {m} of {n_clients} clients")
    rng = np.random.default_rng([selection_seed, round_index])
    return sorted(int(c) for c in rng.choice(n_clients, size=m, replace=False))


def client_rng(training_seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([training_seed, round_index, client_id])


def _batches(n: int, batch_size: int, rng: np.random.Generator, n_steps: int | None, epochs: int):
    """Index batches: whole shuffled epochs, or exactly ``n_steps`` batches."""
    done = 0
    epoch = 0
    while True:
        if n_steps is None and epoch >= epochs:
            return
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if n_steps is not None and done >= n_steps:
                return
            yield perm[start:start + batch_size]
            done += 1
        epoch += 1


def train_adapters(
    base: BaseModel,
    adapters: LoraAdapterSet,
    examples: Sequence[TokenizedExample],
    config: FedConfig,
    rng: np.random.Generator,
    *,
    epochs: int | None = None,
    n_steps: int | None = None,
    context: str = "",
) -> tuple[LoraAdapterSet, list[float]]:
    """Mini-batch training of ``adapters`` (a private copy) on ``examples``.

    A fresh optimizer is created for the call. Returns the trained copy and
    the per-batch losses.
    """
    state = OptimizerState(kind=config.optimizer, learning_rate=config.learning_rate)
    params = {k: v.copy() for k, v in adapters.flat_params().items()}
    current = adapters.with_flat_params(params)
    losses = []
    epochs = config.local_epochs if epochs is None else epochs
    for idx in _batches(len(examples), config.batch_size, rng, n_steps, epochs):
        tokens, mask = collate([examples[i] for i in idx], PAD)
        logits, tape = forward_lm(base, current, tokens)
        loss = loss_next_token(logits, tokens, mask)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} {context}".strip())
        losses.append(value)
        grads = backward(tape)
        params = optimizer_step(state, params, grads)
        current = adapters.with_flat_params(params)
    return current, losses


def update_norm(a: LoraAdapterSet, b: LoraAdapterSet) -> float:
    return float(np.linalg.norm(a.vector() - b.vector()))


def tokenize_indices(manifest: DatasetManifest, indices, max_seq_len: int, cache: dict | None = None):
    """Tokenized examples for ``indices`` (skipping overlong prompts) and the skip count."""
    out = []
    skipped = 0
    for i in indices:
        if cache is not None and i in cache:
            ex = cache[i]
        else:
            ex = tokenize(manifest.records[i], max_seq_len)
            if cache is not None:
                cache[i] = ex
        if ex is None:
            skipped += 1
        else:
            out.append(ex)
    return out, skipped


def local_train(
    base: BaseModel,
    global_adapters: LoraAdapterSet,
    shard: ClientShard,
    manifest: DatasetManifest,
    config: FedConfig,
    round_index: int = 0,
    cache: dict | None = None,
) -> tuple[LoraAdapterSet, ClientStats]:
    """One client's instruction tuning of a private copy of the global adapters."""
    examples, skipped = tokenize_indices(manifest, shard.record_indices, base.config.max_seq_len, cache)
    if not examples:
        stats = ClientStats(shard.client_id, len(shard), 0, None, 0.0, skipped)
        return global_adapters.clone(provenance=(round_index + 1, shard.client_id)), stats
    rng = client_rng(config.training_seed, round_index, shard.client_id)
    trained, losses = train_adapters(
        base, global_adapters, examples, config, rng,
        context=f"(round {round_index}, client {shard.client_id})",
    )
    trained.provenance = (round_index + 1, shard.client_id)
    stats = ClientStats(
        shard.client_id,
        len(shard),
        len(losses),
        float(np.mean(losses)),
        update_norm(trained, global_adapters),
        skipped,
    )
    return trained, stats


def aggregate(updates: Sequence[tuple[int, LoraAdapterSet, float]], provenance=(0, "global")) -> LoraAdapterSet:
    """Weighted entrywise mean of A and of B across client updates.

    Updates are summed in ascending client-id order in float64, as
    ``sum_i (w_i / W) * X_i`` with ``W`` accumulated in the same order, and
    cast back to the adapter dtype.
    """
    if not updates:
        raise ProtocolError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u[0])
    ref = ordered[0][1]
    for cid, ad, w in ordered:
        if w < 0:
            raise ProtocolError(f"client {cid}: negative weight {w}")
        if list(ad.keys()) != list(ref.keys()):
            raise ProtocolError(f"client {cid}: adapter layer set differs from client {ordered[0][0]}")
        for name in ref.keys():
            if ad[name].A.shape != ref[name].A.shape or ad[name].B.shape != ref[name].B.shape:
                raise ProtocolError(f"client {cid}: shape mismatch at layer {name!r}")
    total = 0.0
    for _, _, w in ordered:
        total += float(w)
    if total <= 0:
        raise ProtocolError("all aggregation weights are zero")
    probs = [float(w) / total for _, _, w in ordered]
    out = {}
    for name in ref.keys():
        accA = np.zeros(ref[name].A.shape, dtype=np.float64)
        accB = np.zeros(ref[name].B.shape, dtype=np.float64)
        for p, (_, ad, _) in zip(probs, ordered):
            accA += p * ad[name].A.astype(np.float64)
            accB += p * ad[name].B.astype(np.float64)
        dtype = ref[name].A.dtype
        out[name] = LoraAdapter(name, accA.astype(dtype), accB.astype(dtype))
    return LoraAdapterSet(out, provenance=provenance)


def product_gap(updates: Sequence[tuple[int, LoraAdapterSet, float]], merged: LoraAdapterSet) -> float:
    """Frobenius gap between the weighted mean of B_i A_i and the product of the means."""
    total = sum(float(w) for _, _, w in updates)
    gap = 0.0
    for name in merged.keys():
        mean_prod = sum(
            (float(w) / total) * (ad[name].B.astype(np.float64) @ ad[name].A.astype(np.float64))
            for _, ad, w in updates
        )
        prod_mean = merged[name].B.astype(np.float64) @ merged[name].A.astype(np.float64)
        gap += float(np.sum((mean_prod - prod_mean) ** 2))
    return gap**0.5


def adapters_sha256(adapters: LoraAdapterSet) -> str:
    return hashlib.sha256(serialize_adapters(adapters)).hexdigest()


def run_federation(
    base: BaseModel,
    manifest: DatasetManifest,
    shards: Sequence[ClientShard],
    config: FedConfig,
    *,
    initial_adapters: LoraAdapterSet | None = None,
    start_round: int = 0,
    history: list[RoundLog] | None = None,
    on_round: Callable[[RoundLog, LoraAdapterSet], None] | None = None,
    cache: dict | None = None,
) -> tuple[LoraAdapterSet, list[RoundLog]]:
    """Run rounds ``start_round .. config.rounds - 1``.

    ``initial_adapters`` is the global state entering ``start_round``
    (defaults to a fresh zero-B init seeded by ``training_seed``), which is
    how an interrupted run resumes. ``on_round`` sees each finished round.
    """
    if len(shards) != config.n_clients:
        raise ConfigurationError(f"{len(shards)} shards for n_clients={config.n_clients}")
    if not base.frozen:
        raise ConfigurationError("base model must be frozen")
    by_id = {s.client_id: s for s in shards}
    if sorted(by_id) != list(range(config.n_clients)):
        raise ConfigurationError("shard client ids must be 0..n_clients-1")
    if initial_adapters is None:
        initial_adapters = init_adapters(base, config.lora_rank, config.training_seed, config.lora_sigma)
    global_adapters = initial_adapters.clone(provenance=(start_round, "global"))
    logs = list(history or [])
    cache = {} if cache is None else cache
    payload = payload_bytes(global_adapters)
    base_hash = base.fingerprint()

    for k in range(start_round, config.rounds):
        t0 = time.perf_counter()
        selected = select_clients(config.n_clients, config.clients_per_round, k, config.selection_seed)
        if config.threads > 1:
            # warm the cache so worker threads only read it
            for c in selected:
                tokenize_indices(manifest, by_id[c].record_indices, base.config.max_seq_len, cache)
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(
                    lambda c: local_train(base, global_adapters, by_id[c], manifest, config, k, cache),
                    selected,
                ))
        else:
            results = [local_train(base, global_adapters, by_id[c], manifest, config, k, cache) for c in selected]

        updates = []
        for adapters, stats in results:
            n_usable = stats.shard_size - stats.skipped_records
            if stats.n_steps == 0:
                w = 0.0
            elif config.weighting == "size":
                w = float(n_usable)
            else:
                w = 1.0
            updates.append((stats.client_id, adapters, w))
        new_global = aggregate(updates, provenance=(k + 1, "global"))
        entry = RoundLog(
            round=k,
            selected=selected,
            clients=[asdict(s) for _, s in results],
            aggregate_update_norm=update_norm(new_global, global_adapters),
            product_gap=product_gap([u for u in updates if u[2] > 0], new_global),
            uplink_bytes=len(selected) * payload,
            downlink_bytes=len(selected) * payload,
            global_sha256=adapters_sha256(new_global),
            wall_seconds=time.perf_counter() - t0,
        )
        global_adapters = new_global
        logs.append(entry)
        log.info(
            "round %d clients=%s mean_loss=%.4f",
            k, selected, np.mean([c["mean_loss"] for c in entry.clients if c["mean_loss"] is not None]),
        )
        if on_round is not None:
            on_round(entry, global_adapters)

    if base.fingerprint() != base_hash:
        raise RuntimeError("base model changed during federation")
    return global_adapters, logs


@dataclass
class CommunicationReport:
    uplink_total: int
    downlink_total: int
    uplink_per_round: list[int]
    downlink_per_round: list[int]
    full_model_uplink_total: int
    reduction_ratio: float
    gross_reduction_ratio: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def account_communication(
    logs: Sequence[RoundLog], *, base_params: int, layer_names, adapter_params: int
) -> CommunicationReport:
    """Bytes moved versus exchanging the full model (4 bytes/parameter).

    ``reduction_ratio`` compares tensor payloads only (headers excluded) and
    so equals the trainable-parameter fraction; ``gross_reduction_ratio``
    includes the per-file header.
    """
    if not logs:
        raise ConfigurationError("no round logs")
    hdr = header_bytes(layer_names)
    up = [l.uplink_bytes for l in logs]
    down = [l.downlink_bytes for l in logs]
    sent = sum(len(l.selected) for l in logs)
    full = sent * 4 * base_params
    tensor_bytes = sum(up) - sent * hdr
    return CommunicationReport(
        uplink_total=sum(up),
        downlink_total=sum(down),
        uplink_per_round=up,
        downlink_per_round=down,
        full_model_uplink_total=full,
        reduction_ratio=tensor_bytes / full,
        gross_reduction_ratio=sum(up) / full,
        extra={"header_bytes": hdr, "adapter_params": adapter_params, "base_params": base_params},
    )
