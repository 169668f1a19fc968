#!/usr/bin/env python3
# A shortened federated run next to its centralized and local-only baselines.
# The full desk schedule (20 rounds) is what the acceptance suite uses; this
# one trims rounds so it finishes in well under a minute.

import time

from flsim.evalkit import run_comparison
from flsim.experiment import ExperimentConfig, prepare
from flsim.federation import account_communication
from flsim.lora import trainable_param_count

cfg = ExperimentConfig.from_dict({"federation": {"rounds": 6}})
print(cfg.federation)

t0 = time.time()
res = run_comparison(cfg)
print(f"done in {time.time() - t0:.0f}s; local-only clients {res.local_clients}, "
      f"centralized steps {res.centralized_steps}")

for tag, rep in res.reports.items():
    print(f"{tag:12s} loss {rep.overall_loss:.3f}  ppl {rep.perplexity:7.1f}")
print(res.to_csv())

# per-category view: where does federation help?
fed, base = res.reports["federated"], res.reports["base"]
for c in sorted(fed.per_category):
    print(f"{c:18s} base {base.per_category[c]:.3f} -> federated {fed.per_category[c]:.3f}")

for log in res.round_logs:
    losses = [c["mean_loss"] for c in log.clients]
    print(log.round, log.selected, [round(x, 3) for x in losses], f"gap {log.product_gap:.2e}")

base_model = prepare(cfg).base
a, b, _ = trainable_param_count(base_model, cfg.federation.lora_rank)
comm = account_communication(res.round_logs, base_params=b, layer_names=base_model.adapted_layers(), adapter_params=a)
print(f"uplink {comm.uplink_total} bytes vs {comm.full_model_uplink_total} for full models "
      f"(ratio {comm.gross_reduction_ratio:.3f})")
