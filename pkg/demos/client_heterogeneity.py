#!/usr/bin/env python3
# How skewed are the client datasets under the two allocation schemes?

from collections import Counter

from flsim.data import generate_synthetic, render_prompt
from flsim.partition import PartitionPlan, heterogeneity_report, partition, split_holdout

data = generate_synthetic(seed=7, n_records=800)
print(len(data), "records:", dict(Counter(r.category for r in data.records)))
print(render_prompt(data.records[0]) + data.records[0].response)

holdout, train = split_holdout(data, 0.1, seed=0)

# scheme 1: few categories per client, similar volumes
shards = partition(data, PartitionPlan(scheme=1, n_clients=10, classes_per_client=(1, 3), seed=0), train)
for s in shards:
    print(s.client_id, len(s), s.category_histogram)
print(heterogeneity_report(shards, data).summary)

# scheme 2: volumes drawn lognormal too
for sigma in (0.0, 0.5, 1.0, 2.0):
    plan = PartitionPlan(scheme=2, n_clients=10, classes_per_client=(1, 3), volume_skew=sigma, seed=0)
    rep = heterogeneity_report(partition(data, plan, train), data)
    print(f"sigma {sigma}: volume cv {rep.summary['volume_cv']:.2f}, "
          f"max/min {rep.summary['volume_max_min_ratio']:.1f}, mean TV {rep.summary['mean_pairwise_tv']:.2f}")

# iid reference: every client sees every category
iid = partition(data, PartitionPlan(scheme=1, n_clients=10, classes_per_client=(8, 8), seed=0), train)
print("iid mean TV:", round(heterogeneity_report(iid, data).summary["mean_pairwise_tv"], 3))
