"""Model structure: architecture spec, parameter set, and layered network state.

The network is a chain of convolutional connections (each followed by 2x2
stride-2 max pooling) and optional fully connected connections, all inside the
energy, plus a linear readout on the flattened top state that stays outside
the dynamics. States s^1..s^N live in [0,1]; s^0 is the clamped input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import ConvSpec


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and dynamics hyperparameters.

    conv: one ConvSpec per convolutional connection; every conv output is
        2x2-max-pooled, so its spatial extent must come out even.
    fc: (in_dim, out_dim) pairs for fully connected connections inside the
        energy (usually empty; the readout is separate).
    t_free: max free-phase steps; t_nudge: nudged-phase steps; beta: nudging
        strength; fp_tol: infinity-norm step tolerance for fixed-point exit.
    """

    input_shape: tuple[int, int, int]
    conv: tuple[ConvSpec, ...]
    fc: tuple[tuple[int, int], ...] = ()
    readout_dim: int = 10
    t_free: int = 250
    t_nudge: int = 30
    beta: float = 0.5
    fp_tol: float = 1e-6

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.fp_tol <= 0:
            raise ValueError(f"fp_tol must be > 0, got {self.fp_tol}")
        if self.readout_dim < 1:
            raise ValueError("readout_dim must be >= 1")
        shapes = self.state_shapes()  # validates the chain
        if self.t_free < len(shapes):
            raise ValueError(
                f"t_free={self.t_free} < number of layers {len(shapes)}; "
                "information cannot reach the top layer"
            )
        if self.t_nudge < 1:
            raise ValueError("t_nudge must be >= 1")

    @property
    def n_conv(self) -> int:
        return len(self.conv)

    @property
    def n_layers(self) -> int:
        return len(self.conv) + len(self.fc)

    def state_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer state shapes s^1..s^N (unbatched), validating the chain."""
        if self.n_layers == 0:
            raise ValueError("model needs at least one conv or fc connection")
        c, h, w = self.input_shape
        shapes: list[tuple[int, ...]] = []
        for i, cs in enumerate(self.conv):
            if cs.in_channels != c:
                raise ValueError(
                    f"conv {i}: in_channels {cs.in_channels} != incoming channels {c}"
                )
            h2, w2 = cs.out_extent(h), cs.out_extent(w)
            if h2 % 2 or w2 % 2:
                raise ValueError(
                    f"conv {i}: pre-pool extent {h2}x{w2} must be even for 2x2 pooling"
                )
            c, h, w = cs.out_channels, h2 // 2, w2 // 2
            shapes.append((c, h, w))
        dim = c * h * w
        for j, (din, dout) in enumerate(self.fc):
            if din != dim:
                raise ValueError(f"fc {j}: in_dim {din} != incoming dim {dim}")
            dim = dout
            shapes.append((dim,))
        return shapes

    @property
    def top_dim(self) -> int:
        return int(np.prod(self.state_shapes()[-1]))


@dataclass
class Params:
    """Weight set: energy connections plus the readout.

    conv_w[i]: [out,in,k,k]; conv_b[i]: [out]; fc_w[j]: [out,in]; fc_b[j]: [out];
    readout_w: [readout_dim, top_dim]; readout_b: [readout_dim].
    """

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

    def copy(self) -> "Params":
        return Params(
            conv_w=[w.copy() for w in self.conv_w],
            conv_b=[b.copy() for b in self.conv_b],
            fc_w=[w.copy() for w in self.fc_w],
            fc_b=[b.copy() for b in self.fc_b],
            readout_w=self.readout_w.copy(),
            readout_b=self.readout_b.copy(),
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for _, t in self.tensors())

    def validate(self, spec: ModelSpec) -> None:
        shapes = spec.state_shapes()
        if len(self.conv_w) != spec.n_conv or len(self.fc_w) != len(spec.fc):
            raise ValueError("parameter list lengths do not match the spec")
        c = spec.input_shape[0]
        for i, cs in enumerate(spec.conv):
            want = (cs.out_channels, cs.in_channels, cs.kernel, cs.kernel)
            if self.conv_w[i].shape != want:
                raise ValueError(f"conv_w{i} shape {self.conv_w[i].shape} != {want}")
            if self.conv_b[i].shape != (cs.out_channels,):
                raise ValueError(f"conv_b{i} shape mismatch")
            c = cs.out_channels
        for j, (din, dout) in enumerate(spec.fc):
            if self.fc_w[j].shape != (dout, din):
                raise ValueError(f"fc_w{j} shape {self.fc_w[j].shape} != {(dout, din)}")
            if self.fc_b[j].shape != (dout,):
                raise ValueError(f"fc_b{j} shape mismatch")
        if self.readout_w.shape != (spec.readout_dim, spec.top_dim):
            raise ValueError(
                f"readout_w shape {self.readout_w.shape} != "
                f"{(spec.readout_dim, spec.top_dim)}"
            )
        if self.readout_b.shape != (spec.readout_dim,):
            raise ValueError("readout_b shape mismatch")
        if not self.all_finite():
            raise ValueError("parameters contain non-finite values")


def init_params(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32,
                scale: float = 1.0) -> Params:
    """Uniform fan-in initialization: U(-s/sqrt(fan_in), s/sqrt(fan_in))."""

    def uni(shape, fan_in):
        bound = scale / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    conv_w, conv_b, fc_w, fc_b = [], [], [], []
    for cs in spec.conv:
        fan = cs.in_channels * cs.kernel * cs.kernel
        conv_w.append(uni((cs.out_channels, cs.in_channels, cs.kernel, cs.kernel), fan))
        conv_b.append(uni((cs.out_channels,), fan))
    for din, dout in spec.fc:
        fc_w.append(uni((dout, din), din))
        fc_b.append(uni((dout,), din))
    d = spec.top_dim
    return Params(
        conv_w=conv_w, conv_b=conv_b, fc_w=fc_w, fc_b=fc_b,
        readout_w=uni((spec.readout_dim, d), d),
        readout_b=uni((spec.readout_dim,), d),
    )


@dataclass
class NetworkState:
    """Layer states s^1..s^N (batched [B, ...]) plus the last pooling routes.

    pool_idx[i] holds the argmax indices of the bottom-up pooling of conv
    connection i computed at the most recent dynamics step; steps counts the
    dynamics steps applied to produce this state.
    """

    layers: list[np.ndarray]
    pool_idx: list[np.ndarray] = field(default_factory=list)
    steps: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState(
            layers=[s.copy() for s in self.layers],
            pool_idx=[i.copy() for i in self.pool_idx],
            steps=self.steps,
        )


def zero_state(spec: ModelSpec, batch: int, dtype=np.float64) -> NetworkState:
    return NetworkState(
        layers=[np.zeros((batch,) + s, dtype=dtype) for s in spec.state_shapes()]
    )


def tiny_model(rng: np.random.Generator, *, in_shape=(1, 8, 8), channels=(4, 8),
               classes: int = 3, t_free: int = 250, t_nudge: int = 30,
               beta: float = 0.5, fp_tol: float = 1e-6, scale: float = 1.0,
               dtype=np.float64):
    """Small random conv model used throughout the test oracles."""
    c = in_shape[0]
    conv = []
    for ch in channels:
        conv.append(ConvSpec(c, ch, kernel=3, padding=1))
        c = ch
    spec = ModelSpec(
        input_shape=in_shape, conv=tuple(conv), readout_dim=classes,
        t_free=t_free, t_nudge=t_nudge, beta=beta, fp_tol=fp_tol,
    )
    params = init_params(spec, rng, dtype=dtype, scale=scale)
    return spec, params


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "conv": [
            {"in_channels": c.in_channels, "out_channels": c.out_channels,
             "kernel": c.kernel, "padding": c.padding}
            for c in spec.conv
        ],
        "fc": [list(p) for p in spec.fc],
        "readout_dim": spec.readout_dim,
        "t_free": spec.t_free,
        "t_nudge": spec.t_nudge,
        "beta": spec.beta,
        "fp_tol": spec.fp_tol,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        input_shape=tuple(d["input_shape"]),
        conv=tuple(ConvSpec(**c) for c in d["conv"]),
        fc=tuple(tuple(p) for p in d["fc"]),
        readout_dim=d["readout_dim"],
        t_free=d["t_free"],
        t_nudge=d["t_nudge"],
        beta=d["beta"],
        fp_tol=d["fp_tol"],
    )
