"""Binary model checkpoints.

Layout: 4 magic bytes, little-endian uint32 format version, little-endian
uint64 JSON header length, the UTF-8 JSON header, then the named parameter
tensors as raw little-endian float32 in manifest order. The header carries
the architecture descriptor, model kind (ep/bp/adv), training-config
snapshot, RNG seed, normalization stats, the recorded free-phase convergence
step, and the tensor manifest (name + shape). Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, Params, spec_from_dict, spec_to_dict

MAGIC = b"EPBN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: Params
    model_kind: str = "ep"           # ep | bp | adv
    seed: int = 0
    train_config: dict = field(default_factory=dict)
    norm_mean: list = field(default_factory=list)
    norm_std: list = field(default_factory=list)
    convergence_step: int = 0

    @property
    def normalize(self):
        if not self.norm_mean:
            return None
        return (np.asarray(self.norm_mean, dtype=np.float64),
                np.asarray(self.norm_std, dtype=np.float64))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = [(name, np.ascontiguousarray(t, dtype="<f4"))
               for name, t in ckpt.params.tensors()]
    header = {
        "spec": spec_to_dict(ckpt.spec),
        "model_kind": ckpt.model_kind,
        "seed": ckpt.seed,
        "train_config": ckpt.train_config,
        "norm_mean": [float(v) for v in ckpt.norm_mean],
        "norm_std": [float(v) for v in ckpt.norm_std],
        "convergence_step": ckpt.convergence_step,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(t.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        spec = spec_from_dict(header["spec"])
        arrays = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"truncated tensor {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after the last tensor")
    n_conv = sum(1 for k in arrays if k.startswith("conv_w"))
    n_fc = sum(1 for k in arrays if k.startswith("fc_w"))
    params = Params(
        conv_w=[arrays[f"conv_w{i}"] for i in range(n_conv)],
        conv_b=[arrays[f"conv_b{i}"] for i in range(n_conv)],
        fc_w=[arrays[f"fc_w{j}"] for j in range(n_fc)],
        fc_b=[arrays[f"fc_b{j}"] for j in range(n_fc)],
        readout_w=arrays["readout_w"],
        readout_b=arrays["readout_b"],
    )
    params.validate(spec)
    return Checkpoint(
        spec=spec, params=params,
        model_kind=header["model_kind"], seed=header["seed"],
        train_config=header["train_config"],
        norm_mean=header["norm_mean"], norm_std=header["norm_std"],
        convergence_step=header["convergence_step"],
    )


def model_fns(ckpt: Checkpoint, timestep: int | None = None):
    """(predict_fn, logits_fn) in raw [0,1] pixel space for any model kind.

    For dynamics models the timestep defaults to the recorded convergence
    step; feedforward baselines ignore it.
    """
    from . import baseline, energy  # deferred: keep checkpoint import light

    norm = ckpt.normalize
    mean = np.asarray(norm[0], dtype=np.float64).reshape(1, -1, 1, 1) if norm else 0.0
    std = np.asarray(norm[1], dtype=np.float64).reshape(1, -1, 1, 1) if norm else 1.0

    def to_model(xs):
        return (np.asarray(xs, dtype=np.float64) - mean) / std

    if ckpt.model_kind == "ep":
        t = timestep if timestep is not None else (ckpt.convergence_step or ckpt.spec.t_free)

        def logits_fn(xs):
            return energy.logits_at(to_model(xs), ckpt.params, ckpt.spec, t)
    else:
        def logits_fn(xs):
            return baseline.bp_forward(to_model(xs), ckpt.params, ckpt.spec)

    def predict_fn(xs):
        return np.argmax(logits_fn(xs), axis=-1)

    return predict_fn, logits_fn
