"""Backprop-trained baselines on the same architecture as the energy model.

The feedforward pass is a single sweep: clamp(pool(conv(s)) + b) per conv
connection, clamp(W s + b) per fc connection, then the linear readout. No
batch normalization (deliberate simplification; it would introduce
train/eval mode divergence orthogonal to what these baselines are for).
Gradients are a dedicated hand-written reverse pass sharing the adjoint
primitives; the adversarially trained variant replaces each minibatch with
PGD examples crafted against the current model before the step.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .attacks import project, steepest_ascent, uniform_ball
from .energy import _as_batch_x, _f64, _flat, _linmap, _linmap_t, cross_entropy, softmax
from .model import ModelSpec, Params
from .training import GradEstimate, TrainConfig, run_training

_F = np.float64


def bp_forward(xs, params: Params, spec: ModelSpec, collect: bool = False):
    """Feedforward logits; with collect=True also the per-layer cache."""
    xb, _ = _as_batch_x(xs, spec)
    p64 = _f64(params)
    cache = []
    s = xb
    for i, cs in enumerate(spec.conv):
        c = ops.conv2d(s, p64.conv_w[i], cs)
        pooled, idx = ops.maxpool2(c)
        pre = pooled + p64.conv_b[i][:, None, None]
        out = ops.hard_clamp(pre)
        if collect:
            cache.append({"src": s, "idx": idx, "mask": (pre >= 0) & (pre <= 1)})
        s = out
    for j in range(len(spec.fc)):
        pre = _linmap(_flat(s), p64.fc_w[j]) + p64.fc_b[j]
        out = ops.hard_clamp(pre)
        if collect:
            cache.append({"src": s, "mask": (pre >= 0) & (pre <= 1)})
        s = out
    logits = _linmap(_flat(s), p64.readout_w) + p64.readout_b
    if collect:
        return logits, {"layers": cache, "top": s}
    return logits


def bp_backward(cache, params: Params, spec: ModelSpec, g_logits):
    """Parameter gradients (summed over the batch) and the input gradient."""
    p64 = _f64(params)
    grads = GradEstimate.zeros_like(params)
    top = _flat(cache["top"])
    grads.readout_w = np.einsum("bk,bd->kd", g_logits, top, dtype=_F)
    grads.readout_b = g_logits.sum(axis=0)
    g = _linmap_t(g_logits, p64.readout_w).reshape(cache["top"].shape)
    for j in reversed(range(len(spec.fc))):
        layer = cache["layers"][spec.n_conv + j]
        g_pre = _flat(g) * _flat(layer["mask"])
        src_flat = _flat(layer["src"])
        grads.fc_w[j] = np.einsum("bk,bd->kd", g_pre, src_flat, dtype=_F)
        grads.fc_b[j] = g_pre.sum(axis=0)
        g = _linmap_t(g_pre, p64.fc_w[j]).reshape(layer["src"].shape)
    for i in reversed(range(spec.n_conv)):
        layer = cache["layers"][i]
        g_pre = g.reshape(layer["mask"].shape) * layer["mask"]
        routed = ops.unpool2(g_pre, layer["idx"])
        grads.conv_w[i] = ops.conv2d_weight_grad(layer["src"], routed, spec.conv[i])
        grads.conv_b[i] = g_pre.sum(axis=(0, 2, 3))
        g = ops.conv2d_transpose(routed, p64.conv_w[i], spec.conv[i])
    return grads, g


def bp_loss_and_input_grad(xs, ys, params: Params, spec: ModelSpec):
    """Per-example cross-entropy losses and input gradients."""
    xb, batched = _as_batch_x(xs, spec)
    ys = np.atleast_1d(np.asarray(ys))
    logits, cache = bp_forward(xb, params, spec, collect=True)
    losses = cross_entropy(logits, ys)
    g_logits = softmax(logits)
    g_logits[np.arange(len(ys)), ys] -= 1.0
    _, g_x = bp_backward(cache, params, spec, g_logits)
    if batched:
        return losses, g_x
    return float(losses[0]), g_x[0]


def bp_predict(xs, params: Params, spec: ModelSpec):
    return np.argmax(bp_forward(xs, params, spec), axis=-1)


def bp_logits_and_vjp(xs, params: Params, spec: ModelSpec):
    """Feedforward logits plus a pullback from logit space to input space."""
    xb, _ = _as_batch_x(xs, spec)
    logits, cache = bp_forward(xb, params, spec, collect=True)

    def vjp(g_logits):
        _, g_x = bp_backward(cache, params, spec, np.asarray(g_logits, dtype=_F))
        return g_x

    return logits, vjp


def _bp_batch_grads(params, spec, xs, ys):
    logits, cache = bp_forward(xs, params, spec, collect=True)
    g_logits = softmax(logits)
    g_logits[np.arange(len(ys)), ys] -= 1.0
    g_logits /= len(ys)  # batch-mean loss
    grads, _ = bp_backward(cache, params, spec, g_logits)
    return grads


def _craft_train_batch(xs, ys, params, spec, adv, rng):
    """PGD examples against the current model (random start, alpha=2.5 eps/steps)."""
    x = project(xs, xs + uniform_ball(rng, xs.shape, adv.norm, adv.epsilon),
                adv.norm, adv.epsilon)
    alpha = 2.5 * adv.epsilon / adv.steps
    for _ in range(adv.steps):
        _, g = bp_loss_and_input_grad(x, ys, params, spec)
        x = project(xs, x + alpha * steepest_ascent(g, adv.norm), adv.norm, adv.epsilon)
    return x


def train_bp(dataset, spec: ModelSpec, cfg: TrainConfig, val_dataset=None):
    """Plain backprop training of the feedforward twin."""
    return run_training(
        dataset, spec, cfg,
        grad_fn=lambda p, xs, ys, rng: _bp_batch_grads(p, spec, xs, ys),
        predict_fn=lambda p, xs: bp_predict(xs, p, spec),
        val_dataset=val_dataset,
    )


def train_adv(dataset, spec: ModelSpec, cfg: TrainConfig, val_dataset=None):
    """Adversarial training: PGD-crafted minibatches against the live model.

    epsilon = 0 skips crafting entirely, reproducing train_bp bit for bit.
    """
    if cfg.adversarial is None:
        raise ValueError("train_adv needs cfg.adversarial")
    adv = cfg.adversarial

    def grad_fn(params, xs, ys, rng):
        if adv.epsilon > 0:
            xs = _craft_train_batch(xs, ys, params, spec, adv, rng)
        return _bp_batch_grads(params, spec, xs, ys)

    return run_training(
        dataset, spec, cfg,
        grad_fn=grad_fn,
        predict_fn=lambda p, xs: bp_predict(xs, p, spec),
        val_dataset=val_dataset,
    )
