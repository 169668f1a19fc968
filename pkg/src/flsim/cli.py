"""Command line entry point: generate | partition | train | evaluate | compare | report.

Exit codes: 0 success, 1 internal failure, 2 bad input or usage. Errors are
also written to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from flsim import __version__
from flsim.data import load_jsonl, write_jsonl
from flsim.errors import ConfigurationError, FormatError, InputError, ProtocolError
from flsim.evalkit import CENTRALIZED_FORMULA, evaluate, run_comparison
from flsim.experiment import (
    ExperimentConfig,
    apply_overrides,
    load_dataset,
    prepare,
    run_manifest,
)
from flsim.federation import RoundLog, adapters_sha256, run_federation
from flsim.lora import load_adapters, save_adapters, trainable_param_count
from flsim.nn.checkpoint import save_model
from flsim.partition import PartitionPlan, heterogeneity_report, load_shards, partition, save_shards, split_holdout

log = logging.getLogger("flsim")

BAD_INPUT = (FileNotFoundError, IsADirectoryError, FormatError, ConfigurationError, InputError,
             ProtocolError, json.JSONDecodeError)


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _config(args) -> ExperimentConfig:
    """Config file (or run manifest) plus ``--set`` overrides plus FLSIM_THREADS."""
    base: dict = {}
    if getattr(args, "manifest", None):
        doc = json.loads(_require_file(args.manifest, "run manifest").read_text())
        if doc.get("format") != "flsim-run/1":
            raise FormatError(f"{args.manifest}: not a run manifest")
        base = doc["config"]
    elif getattr(args, "config", None):
        base = json.loads(_require_file(args.config, "config file").read_text())
    d = apply_overrides(ExperimentConfig.from_dict(base).to_dict(), getattr(args, "set", None) or [])
    threads = os.environ.get("FLSIM_THREADS")
    if threads:
        d["federation"]["threads"] = int(threads)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = _config(args)
    manifest = load_dataset(cfg.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(manifest, out)
    meta = {
        "format": "flsim-dataset/1",
        "records": len(manifest),
        "category_set": manifest.category_set,
        "counts": dict(Counter(r.category for r in manifest.records)),
        "source": manifest.source,
        "sha256": sha256_file(out),
    }
    Path(str(out) + ".manifest.json").write_text(json.dumps(meta, indent=1))
    print(json.dumps({"out": str(out), "records": len(manifest), "sha256": meta["sha256"]}))
    return 0


def cmd_partition(args) -> int:
    manifest = load_jsonl(_require_file(args.dataset, "dataset"))
    cfg = _config(args)
    plan = cfg.partition.to_dict()
    for key, val in (("scheme", args.scheme), ("n_clients", args.clients), ("volume_skew", args.skew),
                     ("seed", args.seed)):
        if val is not None:
            plan[key] = val
    if args.classes:
        plan["classes_per_client"] = args.classes
    plan = PartitionPlan(**plan)
    fraction = cfg.data.holdout_fraction if args.holdout is None else args.holdout
    holdout, train = split_holdout(manifest, fraction, cfg.data.holdout_seed)
    shards = partition(manifest, plan, train)
    save_shards(args.out, shards, plan, manifest, holdout)
    report = heterogeneity_report(shards, manifest)
    if args.report_csv:
        Path(args.report_csv).write_text(report.to_csv())
    print(json.dumps({"out": args.out, "clients": len(shards), "holdout": len(holdout), **report.summary}))
    return 0


def _setup_from_args(args, cfg: ExperimentConfig):
    manifest = shards = holdout = None
    inputs = {}
    if getattr(args, "dataset", None):
        path = _require_file(args.dataset, "dataset")
        manifest = load_jsonl(path)
        inputs["dataset"] = {"path": str(path), "sha256": sha256_file(path)}
        d = cfg.to_dict()
        d["data"]["path"] = str(path)
        cfg = ExperimentConfig.from_dict(d)
    if getattr(args, "shards", None):
        path = _require_file(args.shards, "shard index")
        if manifest is None:
            manifest = load_dataset(cfg.data)
        shards, doc = load_shards(path, manifest)
        holdout = doc["holdout"]
        inputs["shards"] = {"path": str(path), "sha256": sha256_file(path)}
        d = cfg.to_dict()
        d["partition"] = doc["plan"]
        d["federation"]["n_clients"] = len(shards)
        cfg = ExperimentConfig.from_dict(d)
    if cfg.data.path and "dataset" not in inputs:
        inputs["dataset"] = {"path": cfg.data.path, "sha256": sha256_file(_require_file(cfg.data.path, "dataset"))}
    for name, meta in inputs.items():
        if sha256_file(meta["path"]) != meta["sha256"]:
            raise FormatError(f"{name} file changed: {meta['path']}")
    setup = prepare(cfg, manifest=manifest, shards=shards, holdout=holdout)
    return cfg, setup, inputs


def _check_replay_inputs(args):
    """A replayed manifest must see byte-identical input files."""
    if not getattr(args, "manifest", None):
        return
    doc = json.loads(Path(args.manifest).read_text())
    for name, meta in doc.get("inputs", {}).items():
        if not Path(meta["path"]).is_file():
            raise CliError(f"{name} file from manifest not found: {meta['path']}")
        if sha256_file(meta["path"]) != meta["sha256"]:
            raise FormatError(f"{name} file {meta['path']} differs from the recorded hash")
        if name == "shards" and not getattr(args, "shards", None):
            args.shards = meta["path"]
        if name == "dataset" and not getattr(args, "dataset", None):
            args.dataset = meta["path"]


def cmd_train(args) -> int:
    _check_replay_inputs(args)
    cfg = _config(args)
    cfg, setup, inputs = _setup_from_args(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs_path = out / "rounds.jsonl"
    ckpt_path = out / "checkpoint.fladp"
    manifest_path = out / "run_manifest.json"

    start, history, initial = 0, [], setup.initial_adapters
    if args.resume and logs_path.exists():
        old = json.loads(manifest_path.read_text())["config"]
        if _without_threads(old) != _without_threads(cfg.to_dict()):
            raise CliError("cannot resume: configuration differs from the interrupted run")
        history = [RoundLog.from_dict(json.loads(line)) for line in logs_path.read_text().splitlines() if line]
        if history:
            initial = load_adapters(_require_file(ckpt_path, "round checkpoint"))
            if adapters_sha256(initial) != history[-1].global_sha256:
                raise FormatError("checkpoint does not match the last logged round")
            start = history[-1].round + 1
            log.info("resuming at round %d", start)
    else:
        logs_path.write_text("")

    adapter_params, base_params, fraction = trainable_param_count(setup.base, cfg.federation.lora_rank)
    extra = {
        "inputs": inputs,
        "base_fingerprint": setup.base.fingerprint(),
        "adapter_params": adapter_params,
        "base_params": base_params,
        "trainable_fraction": fraction,
    }
    manifest_path.write_text(json.dumps(run_manifest(cfg, setup.manifest, extra), indent=1))
    save_model(setup.base, out / "base.flsim")

    def on_round(entry: RoundLog, adapters):
        save_adapters(adapters, ckpt_path)
        with logs_path.open("a") as fh:
            fh.write(json.dumps(entry.to_dict()) + "\n")
        if args.stop_after is not None and entry.round + 1 >= args.stop_after:
            raise _Interrupted(entry.round)

    try:
        final, logs = run_federation(
            setup.base, setup.manifest, setup.shards, cfg.federation,
            initial_adapters=initial, start_round=start, history=history, on_round=on_round,
        )
    except _Interrupted as stop:
        print(json.dumps({"interrupted_after_round": stop.round, "out": str(out)}))
        return 0
    save_adapters(final, out / "adapters.fladp")
    print(json.dumps({
        "out": str(out),
        "rounds": len(logs),
        "adapters_sha256": sha256_file(out / "adapters.fladp"),
    }))
    return 0


def _without_threads(d: dict) -> dict:
    d = json.loads(json.dumps(d))
    d["federation"].pop("threads", None)
    return d


class _Interrupted(Exception):
    def __init__(self, round_index: int):
        self.round = round_index


def cmd_evaluate(args) -> int:
    adapters_path = _require_file(args.adapters, "adapters file") if args.adapters else None
    _check_replay_inputs(args)
    cfg = _config(args)
    cfg, setup, _ = _setup_from_args(args, cfg)
    adapters = load_adapters(adapters_path) if adapters_path else None
    report = evaluate(setup.base, adapters, setup.manifest, setup.holdout,
                      tag=args.tag or ("base" if adapters is None else adapters_path.stem),
                      batch_size=cfg.eval.batch_size)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_compare(args) -> int:
    _check_replay_inputs(args)
    cfg = _config(args)
    cfg, setup, inputs = _setup_from_args(args, cfg)
    result = run_comparison(cfg, setup)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(result.to_csv())
    (out / "reports.json").write_text(json.dumps(result.to_dict(), indent=1))
    extra = {"inputs": inputs, "centralized_steps": result.centralized_steps,
             "centralized_formula": CENTRALIZED_FORMULA, "local_clients": result.local_clients}
    (out / "run_manifest.json").write_text(json.dumps(run_manifest(cfg, setup.manifest, extra), indent=1))
    for tag, ad in result.adapters.items():
        save_adapters(ad, out / f"{tag}.fladp")
    print(result.to_csv(), end="")
    return 1 if result.failures else 0


def cmd_report(args) -> int:
    path = _require_file(args.logs, "round log")
    logs = [RoundLog.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
    if not logs:
        raise CliError(f"{path} holds no rounds")
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "mean_client_loss", "aggregate_update_norm", "product_gap",
                    "uplink_bytes", "downlink_bytes", "cumulative_uplink_bytes", "cumulative_downlink_bytes"])
        up = down = 0
        for entry in logs:
            up += entry.uplink_bytes
            down += entry.downlink_bytes
            losses = [c["mean_loss"] for c in entry.clients if c["mean_loss"] is not None]
            mean_loss = sum(losses) / len(losses) if losses else float("nan")
            w.writerow([entry.round, repr(mean_loss), repr(entry.aggregate_update_norm), repr(entry.product_gap),
                        entry.uplink_bytes, entry.downlink_bytes, up, down])
    counts = Counter(c for entry in logs for c in entry.selected)
    part = Path(args.participation) if args.participation else out.with_name(out.stem + "_participation.csv")
    with part.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "rounds_selected"])
        for cid in sorted(counts):
            w.writerow([cid, counts[cid]])
    print(json.dumps({"rounds": len(logs), "series": str(out), "participation": str(part),
                      "uplink_total": up, "downlink_total": down}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"flsim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=False):
        sp.add_argument("--config", help="experiment JSON config")
        if manifest:
            sp.add_argument("--manifest", help="run manifest to replay (takes precedence over --config)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")

    sp = sub.add_parser("generate", help="write the synthetic dataset as JSONL")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("partition", help="split a dataset into client shards")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scheme", type=int, choices=[1, 2])
    sp.add_argument("--clients", type=int)
    sp.add_argument("--classes", type=int, nargs=2, metavar=("MIN", "MAX"))
    sp.add_argument("--skew", type=float, help="lognormal sigma of client volumes (scheme 2)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--holdout", type=float, help="holdout fraction")
    sp.add_argument("--report-csv", help="write the per-client category table here")
    sp.set_defaults(func=cmd_partition)

    sp = sub.add_parser("train", help="run federated training")
    common(sp, manifest=True)
    sp.add_argument("--dataset")
    sp.add_argument("--shards")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", action="store_true", help="continue from the last completed round")
    sp.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="held-out loss of base model plus optional adapters")
    common(sp, manifest=True)
    sp.add_argument("--adapters")
    sp.add_argument("--dataset")
    sp.add_argument("--shards")
    sp.add_argument("--tag")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="federated vs centralized vs local-only vs base")
    common(sp, manifest=True)
    sp.add_argument("--dataset")
    sp.add_argument("--shards")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("report", help="plot-ready CSV series from round logs")
    sp.add_argument("--logs", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--participation")
    sp.set_defaults(func=cmd_report)
    return p


def _fail(exc: BaseException, code: int) -> int:
    line = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc, exc.code)
    except BAD_INPUT as exc:
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
