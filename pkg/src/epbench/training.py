"""Parameter estimation: contrastive fixed-point updates and the training loop.

The energy-weight gradients come from differences of dPhi/dtheta between
nudged and free fixed points (one-sided or symmetric rule); the readout is
trained by the delta rule at the free fixed point and stays outside the
energy. Optimization is plain SGD with momentum and one learning rate per
weight tensor (biases share their layer's rate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .energy import (_as_batch_x, _f64, _flat, _layers64, _linmap,
                     free_phase, nudged_phase, readout, softmax)
from .model import ModelSpec, NetworkState, Params, init_params

_F = np.float64


class DivergenceError(RuntimeError):
    """Training produced a non-finite parameter."""


@dataclass
class AdversarialBlock:
    """Inner-attack settings for adversarially trained baselines."""

    norm: str = "l2"
    epsilon: float = 0.5
    steps: int = 10

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0 or self.steps < 1:
            raise ValueError("adversarial block needs epsilon >= 0 and steps >= 1")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rates: tuple[float, ...] = (0.05,)
    beta: float | None = None  # falls back to ModelSpec.beta
    momentum: float = 0.9
    update_rule: str = "symmetric"
    seed: int = 0
    adversarial: AdversarialBlock | None = None

    def __post_init__(self):
        if self.update_rule not in ("one_sided", "symmetric"):
            raise ValueError(f"unknown update rule {self.update_rule!r}")
        if any(lr < 0 for lr in self.learning_rates):
            raise ValueError("learning rates must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def validate_for(self, spec: ModelSpec) -> None:
        want = spec.n_conv + len(spec.fc) + 1  # one per weight tensor incl. readout
        if len(self.learning_rates) != want:
            raise ValueError(
                f"need {want} learning rates (one per weight tensor incl. readout), "
                f"got {len(self.learning_rates)}"
            )


@dataclass
class GradEstimate:
    """One array per parameter tensor, shaped like Params."""

    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    fc_w: list[np.ndarray]
    fc_b: list[np.ndarray]
    readout_w: np.ndarray
    readout_b: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        named = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            named += [(f"conv_w{i}", w), (f"conv_b{i}", b)]
        for j, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            named += [(f"fc_w{j}", w), (f"fc_b{j}", b)]
        named += [("readout_w", self.readout_w), ("readout_b", self.readout_b)]
        return named

    @staticmethod
    def zeros_like(params: Params) -> "GradEstimate":
        z = lambda a: np.zeros(a.shape, dtype=_F)
        return GradEstimate(
            conv_w=[z(w) for w in params.conv_w],
            conv_b=[z(b) for b in params.conv_b],
            fc_w=[z(w) for w in params.fc_w],
            fc_b=[z(b) for b in params.fc_b],
            readout_w=z(params.readout_w),
            readout_b=z(params.readout_b),
        )

    def combine(self, other: "GradEstimate", a: float, b: float) -> "GradEstimate":
        """a*self + b*other, elementwise."""
        f = lambda u, v: a * u + b * v
        return GradEstimate(
            conv_w=[f(u, v) for u, v in zip(self.conv_w, other.conv_w)],
            conv_b=[f(u, v) for u, v in zip(self.conv_b, other.conv_b)],
            fc_w=[f(u, v) for u, v in zip(self.fc_w, other.fc_w)],
            fc_b=[f(u, v) for u, v in zip(self.fc_b, other.fc_b)],
            readout_w=f(self.readout_w, other.readout_w),
            readout_b=f(self.readout_b, other.readout_b),
        )


def phi_grad_params(x, state: NetworkState, params: Params,
                    spec: ModelSpec) -> GradEstimate:
    """dPhi/dtheta at the given state (batch mean for batched input).

    Conv weights: correlation between the unpool-routed post-synaptic state
    and the pre-synaptic state; fc weights: outer products; biases: summed
    post-synaptic states. Readout slots stay zero (outside the energy).
    """
    xb, batched = _as_batch_x(x, spec)
    p64 = _f64(params)
    layers, _ = _layers64(state, spec)
    n = xb.shape[0]
    est = GradEstimate.zeros_like(params)
    srcs = [xb] + layers[:-1]
    for i, cs in enumerate(spec.conv):
        # pooling routes of the bottom-up pass at this state
        _, idx = ops.maxpool2(ops.conv2d(srcs[i], p64.conv_w[i], cs))
        routed = ops.unpool2(layers[i], idx)
        est.conv_w[i] = ops.conv2d_weight_grad(srcs[i], routed, cs) / n
        est.conv_b[i] = layers[i].sum(axis=(0, 2, 3)) / n
    for j in range(len(spec.fc)):
        i = spec.n_conv + j
        est.fc_w[j] = np.einsum("bk,bd->kd", layers[i], _flat(srcs[i]), dtype=_F) / n
        est.fc_b[j] = layers[i].sum(axis=0) / n
    return est


def _readout_delta(s_star_layers, params: Params, y) -> tuple[np.ndarray, np.ndarray]:
    """dL/d(readout) at the free fixed point: the delta rule."""
    top = _flat(s_star_layers[-1])
    logits = _linmap(top, params.readout_w) + params.readout_b
    err = softmax(logits)
    err[np.arange(len(y)), y] -= 1.0
    gw = np.einsum("bk,bd->kd", err, top, dtype=_F) / len(y)
    return gw, err.mean(axis=0)


def ep_update_one_sided(x, y, params: Params, spec: ModelSpec,
                        cfg: TrainConfig) -> GradEstimate:
    """Loss-gradient estimate (G(s_*) - G(s^beta)) / beta from one nudged phase."""
    beta = cfg.beta if cfg.beta is not None else spec.beta
    xb, _ = _as_batch_x(x, spec)
    yb = np.atleast_1d(np.asarray(y))
    s_star = free_phase(xb, params, spec)
    s_plus = nudged_phase(xb, params, spec, s_star, yb, beta)
    g_free = phi_grad_params(xb, s_star, params, spec)
    g_plus = phi_grad_params(xb, s_plus, params, spec)
    return g_free.combine(g_plus, 1.0 / beta, -1.0 / beta)


def ep_update_symmetric(x, y, params: Params, spec: ModelSpec,
                        cfg: TrainConfig) -> GradEstimate:
    """Centered loss-gradient estimate from +|beta| and -|beta| nudged phases.

    The evaluation points are anchored at +/-|beta| with the signed prefactor
    1/(2*beta), which makes the estimate an exactly odd function of beta.
    """
    beta = cfg.beta if cfg.beta is not None else spec.beta
    mag = abs(beta)
    if mag == 0:
        raise ValueError("symmetric update needs beta != 0")
    xb, _ = _as_batch_x(x, spec)
    yb = np.atleast_1d(np.asarray(y))
    s_star = free_phase(xb, params, spec)
    s_plus = nudged_phase(xb, params, spec, s_star, yb, +mag)
    s_minus = nudged_phase(xb, params, spec, s_star, yb, -mag)
    g_plus = phi_grad_params(xb, s_plus, params, spec)
    g_minus = phi_grad_params(xb, s_minus, params, spec)
    return g_minus.combine(g_plus, 1.0 / (2.0 * beta), -1.0 / (2.0 * beta))


def _lr_for(name: str, spec: ModelSpec, cfg: TrainConfig) -> float:
    lrs = cfg.learning_rates
    if name.startswith("conv_"):
        return lrs[int(name[6:])]  # conv_w{i} / conv_b{i} share rate i
    if name.startswith("fc_"):
        return lrs[spec.n_conv + int(name[4:])]
    return lrs[-1]  # readout


def sgd_momentum_step(params: Params, grads: GradEstimate, velocity: GradEstimate,
                      spec: ModelSpec, cfg: TrainConfig) -> None:
    """In-place: v <- mu*v + g; theta <- theta - lr_layer * v."""
    for (name, p), (_, g), (_, v) in zip(
        params.tensors(), grads.tensors(), velocity.tensors()
    ):
        v *= cfg.momentum
        v += g
        lr = _lr_for(name, spec, cfg)
        p -= np.asarray(lr * v, dtype=p.dtype)


def _ep_batch_grads(params, spec, cfg, xs, ys):
    rule = ep_update_symmetric if cfg.update_rule == "symmetric" else ep_update_one_sided
    est = rule(xs, ys, params, spec, cfg)
    s_star = free_phase(xs, params, spec)
    p64 = _f64(params)
    est.readout_w, est.readout_b = _readout_delta(s_star.layers, p64, ys)
    return est


def _ep_predict(params, spec, xs):
    state = free_phase(xs, params, spec)
    return np.argmax(readout(state, _f64(params)), axis=-1)


def run_training(dataset, spec: ModelSpec, cfg: TrainConfig, grad_fn, predict_fn,
                 val_dataset=None):
    """Shared minibatch SGD loop; returns (Params, per-epoch history)."""
    cfg.validate_for(spec)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, rng, dtype=np.float32)
    velocity = GradEstimate.zeros_like(params)
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("dataset is empty")
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, cfg.batch_size):
            take = order[b0:b0 + cfg.batch_size]
            xs = np.asarray(dataset.images[take], dtype=_F)
            ys = dataset.labels[take]
            grads = grad_fn(params, xs, ys, rng)
            sgd_momentum_step(params, grads, velocity, spec, cfg)
            if not params.all_finite():
                raise DivergenceError(
                    f"non-finite parameter at epoch {epoch}, batch {b0 // cfg.batch_size}"
                )
        entry = {"epoch": epoch, "train_acc": _accuracy(predict_fn, params, dataset)}
        if val_dataset is not None:
            entry["val_acc"] = _accuracy(predict_fn, params, val_dataset)
        history.append(entry)
    return params, history


def _accuracy(predict_fn, params, dataset, chunk: int = 256) -> float:
    hits = 0
    for b0 in range(0, len(dataset.labels), chunk):
        xs = np.asarray(dataset.images[b0:b0 + chunk], dtype=_F)
        hits += int(np.sum(predict_fn(params, xs) == dataset.labels[b0:b0 + chunk]))
    return hits / len(dataset.labels)


def train_ep(dataset, spec: ModelSpec, cfg: TrainConfig, val_dataset=None):
    """Train the energy model with the configured contrastive rule."""
    return run_training(
        dataset, spec, cfg,
        grad_fn=lambda p, xs, ys, rng: _ep_batch_grads(p, spec, cfg, xs, ys),
        predict_fn=lambda p, xs: _ep_predict(p, spec, xs),
        val_dataset=val_dataset,
    )
