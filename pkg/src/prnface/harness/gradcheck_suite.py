"""Finite-difference checks of every differentiable building block in float64.

Each target builds a small instance from a seed, reduces its output to a
scalar with a fixed random projection and compares tape gradients with
central differences on every input and parameter tensor. Linear biases that
feed straight into batch norm have an exactly zero true gradient; they are
checked to be inert instead of compared coordinate-wise.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..backbone import Bottleneck
from ..losses import joint_loss, mine_triplet_indices, pairwise_loss, triplet_ratio_loss
from ..numerics import tensor as T
from ..numerics.gradcheck import check_tape
from ..numerics.layers import LSTM, MLP, BatchNorm, Conv2d, DenseBlock, Linear, Module
from ..numerics.tensor import Tensor, record_branch
from ..prn import Fusion, IdentityEncoder, RelationConfig, RelationMLP

H = 1e-5
COUNT = 12  # coordinates per tensor


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return T.external_loss([out], float((out.data * proj).sum()), [proj])


def _tensors(inputs: dict, *modules: Module):
    named = list(inputs.items())
    inert = []
    for prefix, m in modules:
        m.train()
        for name, p in m.named_parameters(prefix):
            p.requires_grad = True
            (inert if _feeds_batch_norm(m, name[len(prefix):]) else named).append((name, p))
    return named, inert


def _feeds_batch_norm(module: Module, name: str) -> bool:
    if not name.endswith("linear.b"):
        return False
    owner = module
    for part in name.split(".")[:-2]:
        owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
    return isinstance(owner, DenseBlock)


def _run(forward: Callable[[], Tensor], inputs: dict, modules=(), rng=None) -> dict[str, float]:
    named, inert = _tensors(inputs, *modules)
    errors = check_tape(forward, named, H, COUNT, rng)
    for name, p in inert:
        # bias ahead of batch norm: the forward pass does not depend on it
        errors[name] = float(np.abs(p.grad).max() if p.grad is not None else 0.0)
    return errors


def target_affine(rng):
    x, lin = _leaf(rng, 4, 5), Linear(5, 3, rng)
    proj = rng.normal(size=(4, 3))
    return _run(lambda: _projected(lin(x), proj), {"x": x}, [("lin.", lin)], rng)


def target_conv(rng):
    x = _leaf(rng, 2, 5, 5, 3)
    c1, c2 = Conv2d(3, 4, 3, 1, rng), Conv2d(4, 2, 3, 2, rng)
    proj = rng.normal(size=(2, 3, 3, 2))
    return _run(lambda: _projected(c2(c1(x)), proj), {"x": x}, [("c1.", c1), ("c2.", c2)], rng)


def target_max_pool(rng):
    x = _leaf(rng, 2, 5, 5, 2)
    proj = rng.normal(size=T.max_pool(x).shape)
    return _run(lambda: _projected(T.max_pool(x), proj), {"x": x}, rng=rng)


def target_bottleneck(rng):
    x = _leaf(rng, 3, 4, 4, 4)
    block = Bottleneck(4, 3, 6, 2, rng)
    proj = rng.normal(size=(3, 2, 2, 6))
    return _run(lambda: _projected(block(x), proj), {"x": x},
                [("block.", block)], rng)


def target_batch_norm(rng):
    x, x4 = _leaf(rng, 6, 5, scale=2.0), _leaf(rng, 3, 2, 2, 4)
    bn, bn4 = BatchNorm(5), BatchNorm(4)
    bn.gamma.data = rng.normal(size=5)
    bn.beta.data = rng.normal(size=5)
    p1, p2 = rng.normal(size=(6, 5)), rng.normal(size=(3, 2, 2, 4))

    def forward():
        a, b = _projected(bn(x), p1), _projected(bn4(x4), p2)
        return T.external_loss([a, b], float(a.data + b.data), [np.ones(()), np.ones(())])

    return _run(forward, {"x": x, "x4": x4}, [("bn.", bn), ("bn4.", bn4)], rng)


def target_relu_composite(rng):
    x = _leaf(rng, 5, 4)
    l1, l2 = Linear(4, 6, rng), Linear(6, 3, rng)
    proj = rng.normal(size=(5, 3))
    return _run(lambda: _projected(l2(T.relu(l1(x))), proj), {"x": x}, [("l1.", l1), ("l2.", l2)], rng)


def target_lstm(rng):
    xs = _leaf(rng, 2, 3, 4)  # 3-step unroll
    lstm = LSTM(4, 5, rng)
    proj = rng.normal(size=(2, 5))
    return _run(lambda: _projected(lstm(xs), proj), {"xs": xs}, [("lstm.", lstm)], rng)


def target_softmax_ce(rng):
    logits = _leaf(rng, 5, 4, scale=2.0)
    labels = rng.integers(0, 4, size=5)
    return _run(lambda: T.softmax_cross_entropy(logits, labels), {"logits": logits}, rng=rng)


def _small_relation(rng, variant="C"):
    return RelationConfig(g_layers=(6, 5), f_layers=(5, 4), lstm_hidden=5, sid_width=3, embed_dim=4,
                          variant=variant)


def target_relation_g(rng):
    feats, sid = _leaf(rng, 4, 5, 3), _leaf(rng, 4, 3)
    g = RelationMLP(2 * 3 + 3, (6, 5), rng)
    proj = rng.normal(size=(4, 10, 5))
    return _run(lambda: _projected(g.pairs(feats, sid), proj), {"feats": feats, "sid": sid}, [("g.", g)], rng)


def target_relation_f(rng):
    x = _leaf(rng, 5, 6, scale=3.0)
    f = MLP(6, (5, 4), rng)
    proj = rng.normal(size=(5, 4))
    return _run(lambda: _projected(f(x), proj), {"x": x}, [("f.", f)], rng)


def target_identity_encoder(rng):
    feats = _leaf(rng, 4, 6, 3)
    enc = IdentityEncoder(3, _small_relation(rng), 4, rng)
    p1, p2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 4))

    def forward():
        sid, logits = enc(feats)
        return T.external_loss([sid, logits], float((sid.data * p1).sum() + (logits.data * p2).sum()), [p1, p2])

    return _run(forward, {"feats": feats}, [("enc.", enc)], rng)


def target_fusion(rng):
    fg, rel = _leaf(rng, 4, 3), _leaf(rng, 4, 5)
    fusion = Fusion(3, 5, 4, rng)
    proj = rng.normal(size=(4, 4))
    return _run(lambda: _projected(fusion(fg, rel), proj), {"f_g": fg, "relational": rel}, [("fusion.", fusion)], rng)


def _loss_node(inputs, value, grads, active=None):
    if active is not None:
        record_branch(active)
    return T.external_loss(inputs, value, grads)


def target_triplet_ratio(rng):
    a, p, n = _leaf(rng, 6, 4), _leaf(rng, 6, 4), _leaf(rng, 6, 4)

    def forward():
        loss, grads, _ = triplet_ratio_loss(a.data, p.data, n.data, margin=0.5)
        d_ap = np.linalg.norm(a.data - p.data, axis=1)
        d_an = np.linalg.norm(a.data - n.data, axis=1)
        return _loss_node([a, p, n], loss, grads, d_an < d_ap + 0.5)

    return _run(forward, {"a": a, "p": p, "n": n}, rng=rng)


def target_pairwise(rng):
    a, p = _leaf(rng, 6, 4), _leaf(rng, 6, 4)

    def forward():
        loss, grads = pairwise_loss(a.data, p.data)
        return _loss_node([a, p], loss, grads)

    return _run(forward, {"a": a, "p": p}, rng=rng)


def target_joint(rng):
    emb, logits = _leaf(rng, 8, 4), _leaf(rng, 8, 3)
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    idx = mine_triplet_indices(emb.data, labels, "random-k", seed=int(rng.integers(1000)), k=2)

    def forward():
        report, d_emb, d_logits = joint_loss(emb.data, logits.data, labels, idx, (1.0, 0.5, 2.0), margin=0.5)
        a, p, n = (emb.data[idx[:, k]] for k in range(3))
        d_ap, d_an = np.linalg.norm(a - p, axis=1), np.linalg.norm(a - n, axis=1)
        return _loss_node([emb, logits], report.joint, [d_emb, d_logits], d_an < d_ap + 0.5)

    return _run(forward, {"embeddings": emb, "logits": logits}, rng=rng)


def target_model_c(rng):
    """Tiny backbone + identity encoder + conditioned PRN + fusion under the joint loss."""
    from ..backbone import BackboneConfig
    from ..model import ModelConfig, PRNFaceModel

    cfg = ModelConfig(BackboneConfig(input_size=12, stem_filters=3, stages=((1, 3), (1, 4)), num_classes=3,
                                     stem_kernel=3),
                      RelationConfig(g_layers=(5,), f_layers=(4,), lstm_hidden=3, sid_width=2, embed_dim=4,
                                     margin=0.5, n_landmarks=6))
    model = PRNFaceModel(cfg, seed=int(rng.integers(1 << 30)))
    model.astype(np.float64)
    images = Tensor(rng.uniform(0.0, 1.0, size=(6, 12, 12, 3)), requires_grad=True)
    landmarks = rng.uniform(0.0, 12.0, size=(6, 6, 2))
    labels = np.array([0, 0, 1, 1, 2, 2])
    idx = mine_triplet_indices(np.zeros((6, 1)), labels, "all-valid")

    def forward():
        emb, logits = model(images, landmarks)
        report, d_emb, d_logits = joint_loss(emb.data, logits.data, labels, idx, margin=0.5)
        a, p, n = (emb.data[idx[:, k]] for k in range(3))
        active = np.linalg.norm(a - n, axis=1) < np.linalg.norm(a - p, axis=1) + 0.5
        return _loss_node([emb, logits], report.joint, [d_emb, d_logits], active)

    return _run(forward, {"images": images}, [("", model)], rng)


TARGETS: dict[str, Callable[[np.random.Generator], dict[str, float]]] = {
    "affine": target_affine,
    "conv": target_conv,
    "max_pool": target_max_pool,
    "bottleneck": target_bottleneck,
    "batch_norm": target_batch_norm,
    "relu_composite": target_relu_composite,
    "lstm": target_lstm,
    "softmax_ce": target_softmax_ce,
    "relation_g": target_relation_g,
    "relation_f": target_relation_f,
    "identity_encoder": target_identity_encoder,
    "fusion": target_fusion,
    "triplet_ratio": target_triplet_ratio,
    "pairwise": target_pairwise,
    "joint": target_joint,
    "model_c": target_model_c,
}


def run_target(name: str, seed: int) -> dict[str, float]:
    if name not in TARGETS:
        raise ValueError(f"unknown gradcheck target {name!r}; choose from {sorted(TARGETS)} or 'all'")
    return TARGETS[name](np.random.default_rng([seed, list(TARGETS).index(name)]))


def run_targets(names: Iterable[str], seeds=range(10)):
    """Yield (target, worst relative error over seeds and tensors)."""
    for name in names:
        worst = 0.0
        for seed in seeds:
            worst = max(worst, max(run_target(name, seed).values()))
        yield name, worst
