"""Held-out evaluation and the federated-vs-baselines comparison.

Quality is measured as teacher-forced cross-entropy on the response tokens
of held-out records. Lower is better, so the relative score of the
federated model against a baseline is ``baseline_loss / federated_loss``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from flsim.data import DatasetManifest, collate
from flsim.experiment import ExperimentConfig, Setup, prepare
from flsim.federation import (
    FedConfig,
    RoundLog,
    client_rng,
    local_train,
    run_federation,
    tokenize_indices,
    train_adapters,
)
from flsim.lora import LoraAdapterSet
from flsim.nn.model import PAD, BaseModel, logits_of
from flsim.partition import ClientShard

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    tag: str
    overall_loss: float
    per_category: dict[str, float]
    perplexity: float
    n_examples: int
    category_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def example_losses(base: BaseModel, adapters, examples, batch_size: int = 16) -> np.ndarray:
    """Masked mean next-token loss of each example, in float64."""
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        tokens, mask = collate(chunk, PAD)
        logits = logits_of(base, adapters, tokens).astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp[:, :-1], tokens[:, 1:, None], axis=-1)[..., 0]
        m = mask[:, 1:]
        out.extend((-(picked * m).sum(axis=1) / m.sum(axis=1)).tolist())
    return np.array(out, dtype=np.float64)


def evaluate(
    base: BaseModel,
    adapters: LoraAdapterSet | None,
    manifest: DatasetManifest,
    indices=None,
    *,
    tag: str = "",
    batch_size: int = 16,
) -> EvalReport:
    """Overall and per-category held-out loss; categories with no examples are omitted."""
    indices = list(range(len(manifest))) if indices is None else list(indices)
    kept = []
    examples = []
    for i in indices:
        ex, _ = tokenize_indices(manifest, [i], base.config.max_seq_len)
        if ex:
            kept.append(i)
            examples.append(ex[0])
    if not examples:
        raise ValueError("no evaluable examples")
    losses = example_losses(base, adapters, examples, batch_size)
    per_cat: dict[str, list[float]] = {}
    for i, loss in zip(kept, losses):
        per_cat.setdefault(manifest.records[i].category, []).append(float(loss))
    overall = float(losses.mean())
    return EvalReport(
        tag=tag,
        overall_loss=overall,
        per_category={c: float(np.mean(v)) for c, v in per_cat.items()},
        perplexity=math.exp(overall),
        n_examples=len(examples),
        category_counts={c: len(v) for c, v in per_cat.items()},
    )


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonRow:
    tag: str
    baseline_loss: float
    federated_loss: float
    relative_score: float
    note: str = ""


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]
    reports: dict[str, EvalReport]
    adapters: dict[str, LoraAdapterSet]
    round_logs: list[RoundLog]
    local_clients: list[int]
    centralized_steps: int
    failures: dict[str, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tag", "baseline_loss", "federated_loss", "relative_score"])
        for r in self.rows:
            w.writerow([r.tag, repr(r.baseline_loss), repr(r.federated_loss), repr(r.relative_score)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "reports": {k: v.to_dict() for k, v in self.reports.items()},
            "local_clients": self.local_clients,
            "centralized_steps": self.centralized_steps,
            "failures": self.failures,
        }


def designate_local_clients(shards: list[ClientShard], n_arms: int = 3) -> list[int]:
    """Pick local-only baselines: two single-category shards on different
    categories, then a two-category shard; larger shards preferred, more
    concentrated shards used when a kind is missing."""

    def concentration(s):
        total = len(s)
        return max(s.category_histogram.values()) / total if total else 0.0

    usable = [s for s in shards if len(s) > 0]
    singles = sorted((s for s in usable if s.n_categories == 1), key=lambda s: (-len(s), s.client_id))
    doubles = sorted((s for s in usable if s.n_categories == 2), key=lambda s: (-len(s), s.client_id))
    picks: list[ClientShard] = []
    if singles:
        picks.append(singles[0])
        first_cat = next(iter(singles[0].category_histogram))
        other = [s for s in singles[1:] if next(iter(s.category_histogram)) != first_cat]
        if other:
            picks.append(other[0])
    if doubles:
        picks.append(doubles[0])
    rest = sorted(usable, key=lambda s: (-concentration(s), -len(s), s.client_id))
    for s in rest:
        if len(picks) >= n_arms:
            break
        if s not in picks:
            picks.append(s)
    return [s.client_id for s in picks[:n_arms]]


def centralized_steps(config: FedConfig, n_examples: int) -> int:
    """Steps giving the centralized arm the epoch budget of the federation:
    rounds * local_epochs * (clients_per_round / n_clients) passes."""
    epochs = config.rounds * config.local_epochs * config.clients_per_round / config.n_clients
    return max(1, math.ceil(epochs * n_examples / config.batch_size))


CENTRALIZED_FORMULA = "ceil(rounds * local_epochs * clients_per_round / n_clients * n_train / batch_size)"


def run_comparison(config: ExperimentConfig, setup: Setup | None = None) -> ComparisonResult:
    """Train the federated, centralized and local-only arms and score them with the base model."""
    setup = prepare(config) if setup is None else setup
    fed = config.federation
    base, manifest = setup.base, setup.manifest
    cache: dict = {}
    reports: dict[str, EvalReport] = {}
    adapters: dict[str, LoraAdapterSet] = {}
    failures: dict[str, str] = {}

    def score(tag, ad):
        reports[tag] = evaluate(base, ad, manifest, setup.holdout, tag=tag, batch_size=config.eval.batch_size)

    score("base", None)

    logs: list[RoundLog] = []
    try:
        adapters["federated"], logs = run_federation(
            base, manifest, setup.shards, fed, initial_adapters=setup.initial_adapters, cache=cache
        )
        score("federated", adapters["federated"])
    except Exception as exc:  # an arm failing leaves a partial table
        failures["federated"] = f"{type(exc).__name__}: {exc}"

    union = sorted(i for s in setup.shards for i in s.record_indices)
    examples, _ = tokenize_indices(manifest, union, base.config.max_seq_len, cache)
    n_steps = centralized_steps(fed, len(examples))
    try:
        adapters["centralized"], _ = train_adapters(
            base, setup.initial_adapters, examples, fed, client_rng(fed.training_seed, 0, 0), n_steps=n_steps
        )
        score("centralized", adapters["centralized"])
    except Exception as exc:
        failures["centralized"] = f"{type(exc).__name__}: {exc}"

    local_ids = designate_local_clients(setup.shards, config.eval.local_arms)
    local_cfg = fed
    if config.eval.local_epochs is not None:
        local_cfg = FedConfig(**{**fed.to_dict(), "local_epochs": config.eval.local_epochs})
    by_id = {s.client_id: s for s in setup.shards}
    for n, cid in enumerate(local_ids, start=1):
        tag = f"local-{n}"
        try:
            adapters[tag], _ = local_train(base, setup.initial_adapters, by_id[cid], manifest, local_cfg, 0, cache)
            score(tag, adapters[tag])
        except Exception as exc:
            failures[tag] = f"{type(exc).__name__}: {exc}"

    rows = []
    fed_loss = reports["federated"].overall_loss if "federated" in reports else float("nan")
    for tag in ["centralized", "base"] + [f"local-{n}" for n in range(1, len(local_ids) + 1)]:
        if tag in reports:
            b = reports[tag].overall_loss
            rows.append(ComparisonRow(tag, b, fed_loss, b / fed_loss))
        else:
            rows.append(ComparisonRow(tag, float("nan"), fed_loss, float("nan"),
                                      note=failures.get(tag, failures.get("federated", "failed"))))
    return ComparisonResult(rows, reports, adapters, logs, local_ids, n_steps, failures)
