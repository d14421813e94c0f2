"""Finite-difference verification suites.

Every differentiable piece of the system is checked against central
differences at eps=1e-5: primitive ops at random non-singular points, the
neural blocks, the cross-attention enhancement module, each loss with its
mining indices frozen, and finally the entire network + total loss on a
2-identity micro batch. Each suite returns (name, max_relative_error) pairs;
errors above 1e-4 mean a wrong backward rule.
"""

from __future__ import annotations

import numpy as np

from . import data as D
from . import losses as L
from . import nn
from . import tensor as T
from .losses import CenterBank, LossWeights
from .model import AsaNet, AsreModule, ModelConfig
from .nn import ParamRegistry
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4


def _op_cases(rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    y = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    m = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    params = [("x", x), ("y", y), ("m", m)]
    cases = {
        "add": lambda: T.reduce_sum((x + y) * y),
        "sub": lambda: T.reduce_sum((x - y) * x),
        "mul": lambda: T.reduce_sum(x * y),
        "div": lambda: T.reduce_sum(T.div(x, y)),
        "scale": lambda: T.reduce_sum(x * 0.7),
        "relu": lambda: T.reduce_sum(T.relu(x - 1.2) * y),
        "sigmoid": lambda: T.reduce_sum(T.sigmoid(x * 2 - 2)),
        "exp": lambda: T.reduce_sum(T.exp(x * 0.5)),
        "log": lambda: T.reduce_sum(T.log(x)),
        "sqrt": lambda: T.reduce_sum(T.sqrt(x)),
        "softplus": lambda: T.reduce_sum(T.softplus(x * 3 - 4)),
        "matmul": lambda: T.reduce_sum(T.matmul(x, m) * 0.5),
        "softmax_rows": lambda: T.reduce_sum(T.softmax_rows(x * 4) * y),
        "reduce_sum": lambda: T.reduce_sum(x * x),
        "reduce_mean": lambda: T.reduce_sum(T.reduce_mean(x * y, axis=1)),
        "reduce_max": lambda: T.reduce_sum(T.reduce_max(x * y, axis=1)),
        "reshape": lambda: T.reduce_sum(T.reshape(x, (2, 6)) * T.reshape(y, (2, 6))),
        "transpose": lambda: T.reduce_sum(T.transpose(x) @ m.transpose()),
        "concat": lambda: T.reduce_sum(T.concat([x, y], axis=1) * 1.3),
        "take_rows": lambda: T.reduce_sum(T.take_rows(x, [0, 2, 1, 2]) * 2.0),
        "clip": lambda: T.reduce_sum(T.clip(x, 0.6, 1.8) * y),
    }
    return cases, params


def ops_suite(seeds: int = 20, eps: float = 1e-5) -> list[tuple[str, float]]:
    names = list(_op_cases(np.random.default_rng(0))[0])
    worst = dict.fromkeys(names, 0.0)
    for seed in range(seeds):
        cases, params = _op_cases(np.random.default_rng(seed))
        for name, f in cases.items():
            worst[name] = max(worst[name], grad_check(f, params, eps=eps))
    return list(worst.items())


def blocks_suite(eps: float = 1e-5) -> list[tuple[str, float]]:
    rng = np.random.default_rng(42)
    results = []

    x4 = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    w1 = Tensor(rng.standard_normal((5, 3)) * 0.4, requires_grad=True)
    b1 = Tensor(rng.standard_normal(5) * 0.1, requires_grad=True)
    results.append(("conv1x1", grad_check(
        lambda: T.reduce_sum(T.sigmoid(nn.conv1x1(x4, w1, b1))),
        [("x", x4), ("w", w1), ("b", b1)], eps=eps)))

    w3 = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
    b3 = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    for stride in (1, 2):
        results.append((f"conv3x3_stride{stride}", grad_check(
            lambda s=stride: T.reduce_sum(T.sigmoid(nn.conv3x3(x4, w3, b3, stride=s))),
            [("x", x4), ("w", w3), ("b", b3)], eps=eps)))

    xf = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    wf = Tensor(rng.standard_normal((2, 4)) * 0.5, requires_grad=True)
    bf = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
    results.append(("fc", grad_check(
        lambda: T.reduce_sum(T.sigmoid(nn.fc(xf, wf, bf))),
        [("x", xf), ("w", wf), ("b", bf)], eps=eps)))

    reg = ParamRegistry()
    bn = nn.BatchNorm(reg, "bn", 3)
    bn.update_running = False
    results.append(("batchnorm_train", grad_check(
        lambda: T.reduce_sum(T.sigmoid(bn(x4))),
        [("x", x4), ("gamma", bn.gamma), ("beta", bn.beta)], eps=eps)))

    reg2 = ParamRegistry()
    block = nn.ResidualBlock(reg2, "res", 3, 6, rng)
    for norm in block.norms:
        norm.update_running = False
    params = [("x", x4)] + [(n, e.tensor) for n, e in reg2.items()]
    results.append(("residual_block", grad_check(
        lambda: T.reduce_sum(T.sigmoid(block(x4))), params, eps=eps)))

    xp = Tensor(rng.standard_normal((2, 3, 4, 2)), requires_grad=True)
    probe = Tensor(rng.standard_normal((1, 3)))
    results.append(("pooling", grad_check(
        lambda: T.reduce_sum(
            nn.temporal_pool(T.reshape(nn.spatial_pool(xp), (1, 2, 3))) * probe
        ),
        [("x", xp)], eps=eps)))
    return results


def asre_suite(eps: float = 1e-5) -> list[tuple[str, float]]:
    rng = np.random.default_rng(17)
    reg = ParamRegistry()
    mod = AsreModule(reg, "asre", attr_channels=4, id_channels=2, rng=rng)
    mod.mask_bn.update_running = False
    x_attr = Tensor(rng.standard_normal((2, 4, 2, 2)), requires_grad=True)
    x_id = Tensor(rng.standard_normal((2, 2, 2, 2)), requires_grad=True)
    params = [("x_attr", x_attr), ("x_id", x_id)]
    params += [(n, e.tensor) for n, e in reg.items()]
    probe = Tensor(rng.standard_normal((2, 2, 2, 2)))
    err = grad_check(
        lambda: T.reduce_sum(T.sigmoid(mod(x_attr, x_id)[0]) * probe), params, eps=eps
    )
    return [("asre", err)]


def losses_suite(eps: float = 1e-5) -> list[tuple[str, float]]:
    rng = np.random.default_rng(23)
    labels = np.array([0, 0, 0, 1, 1, 1])
    feats = Tensor(rng.standard_normal((6, 4)) + 0.2, requires_grad=True)
    logits = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    raw_attr = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    attr_targets = rng.integers(0, 2, size=(6, 5)).astype(float)
    bank = CenterBank(ParamRegistry(), 2, 4)
    bank.centers.data[...] = rng.standard_normal((2, 4)) * 0.5
    triplets = L.pmi_mine(rng.standard_normal((6, 3)), labels)  # frozen indices

    results = [
        ("pmi_loss", grad_check(
            lambda: L.pmi_loss(triplets, feats), [("f", feats)], eps=eps)),
        ("wrt_loss", grad_check(
            lambda: L.wrt_loss(feats, labels), [("f", feats)], eps=eps)),
        ("center_loss", grad_check(
            lambda: L.center_loss(feats, labels, bank),
            [("f", feats), ("centers", bank.centers)], eps=eps)),
        ("xent_label_smooth", grad_check(
            lambda: L.xent_label_smooth(logits, labels % 3, eps=0.1),
            [("logits", logits)], eps=eps)),
        ("bce_attributes", grad_check(
            lambda: L.bce_attributes(T.sigmoid(raw_attr), attr_targets),
            [("raw", raw_attr)], eps=eps)),
    ]
    return results


def build_micro_batch(seed: int = 3):
    """2 identities x 3 tracklets, T=2 frames, 32x16 images, C=8 network."""
    dataset = D.gen_dataset(seed=seed, num_identities=2, tracklets_per_identity=6,
                            cameras=2, frames_per_tracklet=4, image=(32, 16),
                            query_per_identity=1, gallery_per_identity=2)
    model = AsaNet(ModelConfig(channels=8, frames_per_clip=2, image_height=32,
                               image_width=16, num_identities=2), seed=seed)
    rng = np.random.default_rng(seed)
    sampler = D.PKBatchSampler(dataset.train_groups(), p=2, k=3, rng=rng)
    batch = D.make_batch(dataset, sampler.epoch()[0], 2, rng)
    return model, batch


def full_suite(eps: float = 1e-5, seed: int = 0) -> list[tuple[str, float]]:
    """Whole graph: forward + all five losses on the micro batch.

    The default seed is a sample point with no ReLU preactivation within eps
    of its kink. Batch-norm centers preactivations at zero, so most random
    micro batches contain one unit whose +-eps perturbation crosses a kink
    and inflates the central difference; the subgradient-at-zero convention
    makes that a property of the sample point, not of the backward rules.
    """
    model, batch = build_micro_batch(seed)
    model.train_mode(update_running=False)
    bank = CenterBank(model.registry, 2, model.config.final_width)
    rng = np.random.default_rng(seed + 1)
    bank.centers.data[...] = rng.standard_normal(bank.centers.shape) * 0.3
    weights = LossWeights()

    base = model.forward_batch(batch.frames)
    triplets = L.pmi_mine(base.ir_attr_feat, batch.identities)  # frozen for the check
    attr_labels = np.concatenate([batch.re_labels, batch.ir_labels], axis=1)

    def f():
        out = model.forward_batch(batch.frames)
        attr_prob = T.concat([out.re_attr_prob, out.ir_attr_prob], axis=1)
        components = {
            "xent": L.xent_label_smooth(out.id_logits, batch.identities,
                                        weights.smoothing_eps),
            "wrt": L.wrt_loss(out.final_feat, batch.identities),
            "cent": L.center_loss(out.final_feat, batch.identities, bank),
            "bce": L.bce_attributes(attr_prob, attr_labels),
            "pmi": L.pmi_loss(triplets, out.final_feat),
        }
        total, _ = L.total_loss(components, weights, lambda_pmi=weights.lambda_pmi_low)
        return total

    params = [(n, e.tensor) for n, e in model.registry.items()]
    return [("full_graph", grad_check(f, params, eps=eps))]


SUITES = {
    "ops": lambda: ops_suite(),
    "blocks": lambda: blocks_suite(),
    "asre": lambda: asre_suite(),
    "losses": lambda: losses_suite(),
    "full": lambda: full_suite(),
}


def run_scope(scope: str) -> list[tuple[str, float]]:
    if scope not in SUITES:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return SUITES[scope]()
