#!/usr/bin/env python3
# LoRA on the frozen toy transformer: counts, zero-init, merge, wire size

import numpy as np

from flsim.lora import init_adapters, merge, payload_bytes, serialize_adapters, trainable_param_count
from flsim.nn import BOS, ModelConfig, init_base_model, logits_of

model = init_base_model(ModelConfig(), seed=0)  # d_model 64, 2 blocks, byte vocab
print(model)
print("adapted layers:", model.adapted_layers())

adapter_params, base_params, fraction = trainable_param_count(model, rank=8)
print(f"rank 8: {adapter_params} adapter params vs {base_params} base params ({fraction:.2%})")
for r in (1, 2, 4, 8, 16):
    print("  rank", r, "->", trainable_param_count(model, r)[0])

ad = init_adapters(model, rank=8, seed=1)
toks = np.array([BOS] + list(b"### Instruction:\nReverse the text."))
same = np.array_equal(logits_of(model, ad, toks), logits_of(model, None, toks))
print("fresh adapters leave logits unchanged:", same)  # B starts at zero

# pretend training moved B
rng = np.random.default_rng(2)
trained = ad.with_flat_params(
    {k: (v if k.endswith(".A") else rng.normal(0, 0.05, v.shape).astype(v.dtype)) for k, v in ad.flat_params().items()}
)
merged = merge(model, trained)
gap = np.abs(logits_of(merged, None, toks) - logits_of(model, trained, toks)).max()
print(f"merged vs adapted max logit gap: {gap:.2e}")

blob = serialize_adapters(trained)
print("bytes on the wire per client:", len(blob), "=", payload_bytes(trained))
print("full model would be:", 4 * base_params)
