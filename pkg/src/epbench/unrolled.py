"""Exact input gradients by reverse mode through the unrolled free phase.

The forward pass records, per step, the pre-update states, the pooling argmax
routes, and the clamp pass-through masks. The backward pass walks the tape in
reverse, treating pooling routes as constants of the forward pass and using
clamp subgradient 1 on [0,1] (boundary included) and 0 outside. Because the
clamped input x feeds the first connection at every step, its gradient
accumulates across all t steps.

Everything here is per-example exact and bit-identical between batched and
single-example calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .energy import (_as_batch_x, _f64, _flat, _linmap, _linmap_t,
                     cross_entropy, free_phase, softmax)
from .model import ModelSpec, Params

_F = np.float64


@dataclass
class UnrolledTape:
    """Recorded free-phase trajectory of length `steps`.

    states[t] holds the layer states *entering* step t (so states[0] is the
    all-zero start); pool_idx[t] and masks[t] are the routes and clamp masks
    used by step t; final is the state after the last step.
    """

    steps: int
    states: list[list[np.ndarray]]
    pool_idx: list[list[np.ndarray]]
    masks: list[list[np.ndarray]]
    final: list[np.ndarray]

    def nbytes(self) -> int:
        total = sum(s.nbytes for s in self.final)
        for t in range(self.steps):
            total += sum(a.nbytes for a in self.states[t])
            total += sum(a.nbytes for a in self.pool_idx[t])
            total += sum(a.nbytes for a in self.masks[t])
        return total


def record_free_phase(x, params: Params, spec: ModelSpec, t: int) -> UnrolledTape:
    """Run exactly t steps (no early exit) and keep the full trajectory."""
    xb, _ = _as_batch_x(x, spec)
    _, tape = free_phase(xb, params, spec, t=t, record=True, fp_tol=0.0)
    return tape


def backward_input(tape: UnrolledTape, x, params: Params, spec: ModelSpec,
                   g_logits: np.ndarray) -> np.ndarray:
    """Pull a logit-space gradient back through readout and unrolled dynamics."""
    xb, batched = _as_batch_x(x, spec)
    params = _f64(params)
    n_conv, n_layers = spec.n_conv, spec.n_layers

    g_logits = np.asarray(g_logits, dtype=_F)
    if g_logits.ndim == 1:
        g_logits = g_logits[None]
    # readout: logits = flat(s^N) @ W^T + b
    g_layers = [np.zeros_like(s) for s in tape.final]
    g_layers[-1] = _linmap_t(g_logits, params.readout_w).reshape(tape.final[-1].shape)
    g_x = np.zeros_like(xb)

    for step in reversed(range(tape.steps)):
        idx = tape.pool_idx[step]
        masks = tape.masks[step]
        g_pre = [g * m for g, m in zip(g_layers, masks)]
        g_new = [np.zeros_like(s) for s in tape.states[step]]
        for i in range(n_layers):
            # bottom-up term of connection i read s^{i-1} (or x)
            if i < n_conv:
                back = ops.conv2d_transpose(
                    ops.unpool2(g_pre[i], idx[i]), params.conv_w[i], spec.conv[i]
                )
            else:
                back = _linmap_t(g_pre[i], params.fc_w[i - n_conv])
            if i == 0:
                g_x += back.reshape(xb.shape)
            else:
                g_new[i - 1] += back.reshape(g_new[i - 1].shape)
            # top-down term of connection i (into layer i-1) read s^i
            if i >= 1:
                if i < n_conv:
                    g_new[i] += ops.pool_gather(
                        ops.conv2d(g_pre[i - 1], params.conv_w[i], spec.conv[i]),
                        idx[i],
                    )
                else:
                    g_new[i] += _linmap(_flat(g_pre[i - 1]), params.fc_w[i - n_conv]).reshape(
                        g_new[i].shape
                    )
        g_layers = g_new
    return g_x if batched else g_x[0]


def loss_and_grad_batch(xs, ys, params: Params, spec: ModelSpec, t: int):
    """Per-example cross-entropy losses at step t and their input gradients."""
    xb, batched = _as_batch_x(xs, spec)
    ys = np.atleast_1d(np.asarray(ys))
    tape = record_free_phase(xb, params, spec, t)
    p64 = _f64(params)
    logits = _linmap(_flat(tape.final[-1]), p64.readout_w) + p64.readout_b
    losses = cross_entropy(logits, ys)
    g_logits = softmax(logits)
    g_logits[np.arange(len(ys)), ys] -= 1.0
    grads = backward_input(tape, xb, params, spec, g_logits)
    if batched:
        return losses, grads
    return float(losses[0]), grads[0]


def input_grad(x, y, params: Params, spec: ModelSpec, t: int) -> np.ndarray:
    """Exact gradient of the step-t cross-entropy loss with respect to x."""
    _, grad = loss_and_grad_batch(x, y, params, spec, t)
    return grad


def logits_and_vjp(xs, params: Params, spec: ModelSpec, t: int):
    """Logits at step t plus a pullback mapping logit gradients to input space.

    Shares one recorded tape between the forward value and the backward call;
    used by attacks that differentiate losses other than cross-entropy.
    """
    xb, _ = _as_batch_x(xs, spec)
    tape = record_free_phase(xb, params, spec, t)
    p64 = _f64(params)
    logits = _linmap(_flat(tape.final[-1]), p64.readout_w) + p64.readout_b

    def vjp(g_logits: np.ndarray) -> np.ndarray:
        return backward_input(tape, xb, params, spec, g_logits)

    return logits, vjp
