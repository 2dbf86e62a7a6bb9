#!/usr/bin/env python3
# %% [markdown]
# # Staged training of model C on synthetic identities
#
# The synthetic set has 16 identities with 40 aligned 56x56 faces each.
# Training runs in stages, each with the earlier components frozen:
#
# 1. backbone with a softmax head
# 2. the LSTM identity encoder over the 68 local features
# 3. the identity-conditioned relation network
# 4. the fusion layer joining the global and relational features
#
# Set EPOCHS to shorten every stage, e.g. ``EPOCHS=3 python demos/02_desk_training.py``.

# %%
import os
import time

import numpy as np

from prnface.harness import RunConfig, TrainConfig, build_model, gen_dataset, train_stage
from prnface.harness.evaluate import all_pairs, identify, mean_templates, verify_pairs
from prnface.harness.pipeline import accuracy, embeddings_and_logits, run_outputs

epochs = int(os.environ.get("EPOCHS", 30))
cfg = RunConfig(train=TrainConfig(epochs=epochs, stage_epochs={"prn": min(epochs, 10)}))
data = gen_dataset()
print(f"{len(data.train)} train / {len(data.val)} val faces, {data.num_ids} identities")

# %%
model = build_model(cfg)
for stage in ("backbone", "encoder", "prn", "fusion"):
    start = time.perf_counter()
    result = train_stage(model, stage, data, cfg)
    print(f"{stage:8s} {len(result.steps):4d} steps  loss {result.epoch_loss[0]:.3f} -> {result.epoch_loss[-1]:.3f}"
          f"  val acc {result.final_accuracy:.3f}  ({time.perf_counter() - start:.0f} s)")

# %% each head's validation accuracy
out = run_outputs(model, data.val.images(), data.val.landmarks)
for name, logits in (("global only (A)", out.backbone_logits), ("identity encoder", out.sid_logits),
                     ("relational (PRN+)", out.relational_logits), ("fused (C)", out.logits)):
    print(f"{name:18s} {accuracy(logits, data.val.labels):.4f}")

# %% verification over every validation pair, squared L2 on the fused embedding
emb, _ = embeddings_and_logits(model, data.val.images(), data.val.landmarks)
i, j, same = all_pairs(data.val.labels)
print("\n".join(verify_pairs(emb[i], emb[j], same).lines()))

# %% open-set identification: mean train templates of 12 identities form the gallery
train_emb, _ = embeddings_and_logits(model, data.train.images(), data.train.landmarks)
gallery, labels = mean_templates(train_emb, data.train.labels)
keep = labels < 12
print("\n".join(identify(gallery[keep], labels[keep], emb, data.val.labels).lines()))
