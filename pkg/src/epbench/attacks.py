"""White-box and black-box attacks plus the composite suite runner.

PGD and C&W consume exact input gradients taken at a chosen free-phase
timestep of the dynamics (or injected gradient callables for other model
kinds); the Square attack is strictly query-based, touching nothing but a
logits callable. All attacks operate on raw pixels in [0,1]; every emitted
example satisfies the norm-ball and box constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import energy, runtime, unrolled
from .model import ModelSpec, Params

_F = np.float64

FAMILIES = ("pgd", "cw", "square")
NORMS = ("l2", "linf")

# Square-attack patch-fraction schedule: (threshold on the iteration count
# rescaled to a 10000-step budget, divisor of p_init).
SQUARE_P_SCHEDULE = (
    (10, 1), (50, 2), (200, 4), (500, 8), (1000, 16),
    (2000, 32), (4000, 64), (6000, 128), (8000, 256), (10**9, 512),
)


@dataclass
class AttackConfig:
    family: str = "pgd"
    norm: str = "linf"
    epsilon: float = 0.0
    steps: int = 20
    step_size: float | None = None  # defaults to epsilon / 8
    random_start: bool = True
    cw_constant: float = 0.1
    cw_lr: float = 0.01
    cw_steps: int = 100
    query_budget: int = 5000
    attack_timestep: int | None = None  # None: measured convergence step
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES and self.family != "suite":
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.family == "pgd" and self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.family == "square" and self.norm != "linf":
            raise ValueError("square attack is defined for the linf norm")
        if self.cw_steps < 1 or self.cw_lr <= 0:
            raise ValueError("cw_steps must be >= 1 and cw_lr > 0")
        if self.query_budget < 1:
            raise ValueError("query_budget must be >= 1")

    @property
    def alpha(self) -> float:
        return self.epsilon / 8.0 if self.step_size is None else self.step_size


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: np.ndarray      # misclassified after the attack
    final_loss: np.ndarray
    queries: np.ndarray
    norms: np.ndarray        # achieved perturbation size under the attack norm

    def robust_accuracy(self) -> float:
        """Fraction still classified as the true label after the attack
        (success flags already encode prediction != label)."""
        return float(np.mean(~self.success))


def _batch_norms(delta: np.ndarray, norm: str) -> np.ndarray:
    flat = delta.reshape(delta.shape[0], -1)
    if norm == "linf":
        return np.abs(flat).max(axis=1) if flat.size else np.zeros(flat.shape[0])
    return np.sqrt((flat ** 2).sum(axis=1))


def project(x0: np.ndarray, x: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Nearest point to x in the epsilon-ball around x0, then box-clipped.

    Box clipping after ball projection cannot re-violate either ball, since
    x0 itself lies in [0,1].
    """
    x0 = np.asarray(x0, dtype=_F)
    x = np.asarray(x, dtype=_F)
    if x0.shape != x.shape:
        raise ValueError(f"project: shapes differ ({x0.shape} vs {x.shape})")
    single = x.ndim == x0.ndim and x.ndim < 4
    xb = x if x.ndim == 4 else x[None]
    x0b = x0 if x0.ndim == 4 else x0[None]
    delta = xb - x0b
    if norm == "linf":
        delta = np.clip(delta, -epsilon, epsilon)
    else:
        norms = _batch_norms(delta, "l2")
        scale = np.ones_like(norms)
        over = norms > epsilon
        scale[over] = epsilon / norms[over]
        delta = delta * scale[:, None, None, None]
    out = np.clip(x0b + delta, 0.0, 1.0)
    return out[0] if (x.ndim < 4) else out


def steepest_ascent(g: np.ndarray, norm: str) -> np.ndarray:
    """argmax_{||v||<=1} v.g: sign(g) for linf, g/||g|| for l2 (0 if g=0)."""
    g = np.asarray(g, dtype=_F)
    if norm == "linf":
        return np.sign(g)
    gb = g if g.ndim == 4 else g[None]
    norms = _batch_norms(gb, "l2")
    out = np.zeros_like(gb)
    nz = norms > 0
    out[nz] = gb[nz] / norms[nz][:, None, None, None]
    return out if g.ndim == 4 else out[0]


def uniform_ball(rng: np.random.Generator, shape, norm: str, epsilon: float) -> np.ndarray:
    """Uniform draw from the epsilon-ball; shape includes the batch axis."""
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, size=shape)
    d = int(np.prod(shape[1:]))
    direction = rng.standard_normal(shape).reshape(shape[0], -1)
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-30)
    radius = epsilon * rng.uniform(0.0, 1.0, size=(shape[0], 1)) ** (1.0 / d)
    return (direction * radius).reshape(shape)


def _default_white_box(params: Params, spec: ModelSpec, timestep: int,
                       normalize=None):
    """(loss_grad_fn, predict_fn, logits_vjp_fn) for the dynamics model.

    normalize=(mean, std) maps raw pixels into model space per channel; its
    jacobian (1/std) is chained into the returned gradients.
    """
    mean, std = _norm_arrays(normalize)

    def to_model(xs):
        return (np.asarray(xs, dtype=_F) - mean) / std

    def loss_grad_fn(xs, ys):
        losses, grads = unrolled.loss_and_grad_batch(to_model(xs), ys, params, spec, timestep)
        return losses, grads / std

    def predict_fn(xs):
        return np.argmax(energy.logits_at(to_model(xs), params, spec, timestep), axis=-1)

    def logits_vjp_fn(xs):
        logits, vjp = unrolled.logits_and_vjp(to_model(xs), params, spec, timestep)
        return logits, lambda gz: vjp(gz) / std

    return loss_grad_fn, predict_fn, logits_vjp_fn


def _norm_arrays(normalize):
    if normalize is None:
        return np.float64(0.0), np.float64(1.0)
    mean, std = normalize
    mean = np.asarray(mean, dtype=_F).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=_F).reshape(1, -1, 1, 1)
    return mean, std


def resolve_timestep(xs, params: Params, spec: ModelSpec, cfg: AttackConfig,
                     normalize=None) -> int:
    """cfg.attack_timestep, or the measured convergence step on this batch."""
    if cfg.attack_timestep is not None:
        return cfg.attack_timestep
    mean, std = _norm_arrays(normalize)
    xm = (np.asarray(xs, dtype=_F) - mean) / std
    return energy.convergence_step(xm, params, spec)


def pgd_attack(xs, ys, params: Params, spec: ModelSpec, cfg: AttackConfig, *,
               grad_fn=None, predict_fn=None, normalize=None) -> AttackResult:
    """Iterated ascent-then-project at a fixed dynamics timestep."""
    if cfg.family != "pgd":
        raise ValueError("cfg.family must be 'pgd'")
    xs = np.asarray(xs, dtype=_F)
    ys = np.asarray(ys)
    if grad_fn is None or predict_fn is None:
        t = resolve_timestep(xs, params, spec, cfg, normalize)
        dflt_grad, dflt_pred, _ = _default_white_box(params, spec, t, normalize)
        grad_fn = grad_fn or dflt_grad
        predict_fn = predict_fn or dflt_pred
    rng = np.random.default_rng(cfg.seed)
    x = xs.copy()
    if cfg.random_start and cfg.epsilon > 0:
        x = project(xs, xs + uniform_ball(rng, xs.shape, cfg.norm, cfg.epsilon),
                    cfg.norm, cfg.epsilon)
    losses = np.zeros(len(xs))
    for _ in range(cfg.steps):
        losses, grads = grad_fn(x, ys)
        x = project(xs, x + cfg.alpha * steepest_ascent(grads, cfg.norm),
                    cfg.norm, cfg.epsilon)
    preds = predict_fn(x)
    return AttackResult(
        adversarial=x,
        success=preds != ys,
        final_loss=np.asarray(losses, dtype=_F),
        queries=np.full(len(xs), cfg.steps + 1),
        norms=_batch_norms(x - xs, cfg.norm),
    )


def _margin(logits: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """z_y - max_{j != y} z_j; negative means misclassified."""
    z = np.asarray(logits, dtype=_F)
    true = np.take_along_axis(z, ys[:, None], axis=1)[:, 0]
    masked = z.copy()
    masked[np.arange(len(ys)), ys] = -np.inf
    return true - masked.max(axis=1)


def cw_attack(xs, ys, params: Params, spec: ModelSpec, cfg: AttackConfig, *,
              logits_vjp_fn=None, normalize=None) -> AttackResult:
    """l2 norm-minimizing attack with margin hinge under a tanh box change
    of variables; plain gradient descent with a single fixed constant.

    Returns the smallest-norm successful iterate per example (final iterate
    when none succeeded). No epsilon ball applies; the box always does.
    """
    if cfg.family != "cw":
        raise ValueError("cfg.family must be 'cw'")
    xs = np.asarray(xs, dtype=_F)
    ys = np.asarray(ys)
    if logits_vjp_fn is None:
        t = resolve_timestep(xs, params, spec, cfg, normalize)
        _, _, logits_vjp_fn = _default_white_box(params, spec, t, normalize)
    eps = 1e-6
    w = np.arctanh((2.0 * np.clip(xs, eps, 1.0 - eps) - 1.0) * (1.0 - eps))
    best = xs.copy()
    best_norm = np.full(len(xs), np.inf)
    succeeded = np.zeros(len(xs), dtype=bool)
    last_obj = np.zeros(len(xs))
    x_adv = xs.copy()
    for _ in range(cfg.cw_steps):
        x_adv = 0.5 * (np.tanh(w) + 1.0)
        logits, vjp = logits_vjp_fn(x_adv)
        margin = _margin(logits, ys)
        delta = x_adv - xs
        l2sq = (delta.reshape(len(xs), -1) ** 2).sum(axis=1)
        hinge = np.maximum(margin, 0.0)  # kappa = 0
        last_obj = l2sq + cfg.cw_constant * hinge
        # track the best (smallest) successful perturbation
        newly = (margin < 0) & (np.sqrt(l2sq) < best_norm)
        best[newly] = x_adv[newly]
        best_norm[newly] = np.sqrt(l2sq[newly])
        succeeded |= margin < 0
        g_logits = np.zeros_like(logits)
        active = margin > 0
        if active.any():
            masked = logits.copy()
            masked[np.arange(len(ys)), ys] = -np.inf
            runner = masked.argmax(axis=1)
            rows = np.where(active)[0]
            g_logits[rows, ys[rows]] = cfg.cw_constant
            g_logits[rows, runner[rows]] = -cfg.cw_constant
        g_x = 2.0 * delta + vjp(g_logits)
        g_w = g_x * 2.0 * x_adv * (1.0 - x_adv)  # d x'/d w for x' = (tanh w + 1)/2
        w = w - cfg.cw_lr * g_w
    out = np.where(succeeded[:, None, None, None], best, x_adv)
    return AttackResult(
        adversarial=out,
        success=succeeded.copy(),
        final_loss=last_obj,
        queries=np.full(len(xs), cfg.cw_steps),
        norms=_batch_norms(out - xs, "l2"),
    )


def _square_patch_side(it_scaled: int, p_init: float, n_features: int, channels: int,
                       max_side: int) -> int:
    divisor = 512
    for thresh, div in SQUARE_P_SCHEDULE:
        if it_scaled <= thresh:
            divisor = div
            break
    p = p_init / divisor
    side = int(round(math.sqrt(p * n_features / channels)))
    return min(max(side, 1), max_side)


def square_attack(xs, ys, query_model, cfg: AttackConfig) -> AttackResult:
    """linf Square attack: random vertical-stripe start, then square patch
    proposals accepted only on strict margin-loss decrease.

    query_model(xs) -> logits is the only access to the model; the per-example
    query counters count its invocations exactly.
    """
    if cfg.family != "square":
        raise ValueError("cfg.family must be 'square'")
    xs = np.asarray(xs, dtype=_F)
    ys = np.asarray(ys)
    n, C, H, W = xs.shape
    eps = cfg.epsilon
    p_init = 0.8

    def attack_one(i):
        rng = np.random.default_rng([cfg.seed, i])
        x0 = xs[i:i + 1]
        if eps == 0.0:
            loss = _margin(query_model(x0), ys[i:i + 1])[0]
            return x0[0], loss < 0, 1, loss
        stripes = eps * rng.choice([-1.0, 1.0], size=(1, C, 1, W))
        x_best = np.clip(x0 + stripes, 0.0, 1.0)
        loss_best = _margin(query_model(x_best), ys[i:i + 1])[0]
        q = 1
        it = 0
        while q < cfg.query_budget and loss_best >= 0:
            it_scaled = int(it / max(cfg.query_budget, 1) * 10000)
            side = _square_patch_side(it_scaled, p_init, C * H * W, C, min(H, W))
            r = int(rng.integers(0, H - side + 1))
            c = int(rng.integers(0, W - side + 1))
            delta = x_best - x0
            # resample patch signs until the proposal actually moves the image
            x_new = x_best
            for _ in range(20):
                patch = 2.0 * eps * rng.choice([-1.0, 1.0], size=(1, C, 1, 1))
                new_delta = delta.copy()
                new_delta[:, :, r:r + side, c:c + side] = (
                    delta[:, :, r:r + side, c:c + side] + patch
                )
                x_new = np.clip(x0 + np.clip(new_delta, -eps, eps), 0.0, 1.0)
                if np.any(np.abs(x_new - x_best) > 1e-12):
                    break
            loss_new = _margin(query_model(x_new), ys[i:i + 1])[0]
            q += 1
            it += 1
            if loss_new < loss_best:  # strict decrease only
                loss_best = loss_new
                x_best = x_new
        return x_best[0], loss_best < 0, q, loss_best

    rows = runtime.map_workers(attack_one, range(n))
    adv = np.stack([r[0] for r in rows]) if rows else xs.copy()
    return AttackResult(
        adversarial=adv,
        success=np.array([r[1] for r in rows], dtype=bool),
        final_loss=np.array([r[3] for r in rows], dtype=_F),
        queries=np.array([r[2] for r in rows], dtype=int),
        norms=_batch_norms(adv - xs, "linf"),
    )


def random_noise_baseline(xs, ys, query_model, cfg: AttackConfig) -> AttackResult:
    """Sanity baseline: uniform +/-epsilon corner draws under the same budget."""
    xs = np.asarray(xs, dtype=_F)
    ys = np.asarray(ys)
    n = len(xs)
    adv = xs.copy()
    success = np.zeros(n, dtype=bool)
    queries = np.zeros(n, dtype=int)
    final_loss = np.zeros(n)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i, 1])
        x0 = xs[i:i + 1]
        best = np.inf
        for q in range(cfg.query_budget):
            noise = cfg.epsilon * rng.choice([-1.0, 1.0], size=x0.shape)
            x_try = np.clip(x0 + noise, 0.0, 1.0)
            m = _margin(query_model(x_try), ys[i:i + 1])[0]
            queries[i] += 1
            if m < best:
                best = m
                adv[i] = x_try[0]
            if m < 0:
                success[i] = True
                break
        final_loss[i] = best
    return AttackResult(adversarial=adv, success=success, final_loss=final_loss,
                        queries=queries, norms=_batch_norms(adv - xs, "linf"))


@dataclass
class SuiteResult:
    results: dict[str, AttackResult]
    worst_case_accuracy: float
    survived: np.ndarray  # per example: correct under every attack


def attack_suite(xs, ys, params: Params, spec: ModelSpec,
                 configs: list[AttackConfig], *, normalize=None,
                 grad_fn=None, predict_fn=None, logits_vjp_fn=None,
                 query_model=None) -> SuiteResult:
    """Run each configured attack; an example counts as robust only if it
    keeps its label under all of them (worst-case aggregation).

    Model access defaults to the dynamics model; pass the fn arguments to
    aim the suite at another model kind.
    """
    xs = np.asarray(xs, dtype=_F)
    ys = np.asarray(ys)
    results: dict[str, AttackResult] = {}
    survived = np.ones(len(xs), dtype=bool)
    for cfg in configs:
        if cfg.family == "pgd":
            res = pgd_attack(xs, ys, params, spec, cfg, normalize=normalize,
                             grad_fn=grad_fn, predict_fn=predict_fn)
        elif cfg.family == "cw":
            res = cw_attack(xs, ys, params, spec, cfg, normalize=normalize,
                            logits_vjp_fn=logits_vjp_fn)
        elif cfg.family == "square":
            qm = query_model
            if qm is None:
                t = resolve_timestep(xs, params, spec, cfg, normalize)
                mean, std = _norm_arrays(normalize)
                qm = lambda z: energy.logits_at((np.asarray(z, dtype=_F) - mean) / std,
                                                params, spec, t)
            res = square_attack(xs, ys, qm, cfg)
        else:
            raise ValueError(f"suite cannot run family {cfg.family!r}")
        key = f"{cfg.family}-{cfg.norm}-{cfg.epsilon:g}"
        results[key] = res
        survived &= ~res.success
    return SuiteResult(results=results,
                       worst_case_accuracy=float(np.mean(survived)),
                       survived=survived)
