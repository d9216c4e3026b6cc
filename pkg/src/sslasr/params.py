"""Named-parameter store, binary serialization, and optimizers.

Store file layout (little-endian), magic ``SPM1``:

    magic        4 bytes  b"SPM1"
    n_tensors    u32
    per tensor:
        name_len u16, name utf-8 bytes
        rank     u32
        dims     u32 * rank
        payload  f64 * prod(dims), C order
"""

from __future__ import annotations

import struct

import numpy as np

from .nn import Parameter

MAGIC = b"SPM1"


class StoreFormatError(ValueError):
    """Malformed parameter-store file."""


class ParameterStore:
    """Ordered mapping of tensor name -> float64 ndarray."""

    def __init__(self, tensors=None):
        self.tensors = dict(tensors or {})

    @classmethod
    def from_module(cls, module):
        return cls({p.name: p.value.copy() for p in module.parameters()})

    def load_into(self, module):
        """Copy stored values into a module's parameters, matching by name."""
        params = module.param_dict()
        missing = set(params) - set(self.tensors)
        extra = set(self.tensors) - set(params)
        if missing or extra:
            raise KeyError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, param in params.items():
            value = self.tensors[name]
            if value.shape != param.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: stored {value.shape}, "
                    f"model {param.value.shape}"
                )
            param.value[...] = value

    def all_finite(self):
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(self.tensors)))
            for name, value in self.tensors.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                arr = np.ascontiguousarray(value, dtype="<f8")
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise StoreFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
        off = 4

        def take(n):
            nonlocal off
            if off + n > len(blob):
                raise StoreFormatError("truncated parameter store")
            chunk = blob[off : off + n]
            off += n
            return chunk

        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            n_items = int(np.prod(dims)) if dims else 1
            payload = take(8 * n_items)
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        if off != len(blob):
            raise StoreFormatError("trailing bytes after last tensor")
        return cls(tensors)


class SgdMomentum:
    """SGD with classical momentum and optional linear learning-rate decay.

    With ``decay_steps`` set, the rate falls linearly from ``lr`` to zero
    across that many calls to ``step``.
    """

    def __init__(self, params, lr, momentum=0.9, decay_steps=None):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.decay_steps = decay_steps
        self.velocity = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def current_lr(self):
        if not self.decay_steps:
            return self.lr
        frac = max(0.0, 1.0 - self.t / self.decay_steps)
        return self.lr * frac

    def step(self):
        lr = self.current_lr()
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v -= lr * p.grad
            p.value += v
        self.t += 1


class Adam:
    """Adam; available behind configuration where SGD converges too slowly."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m += (1.0 - self.beta1) * (p.grad - m)
            v += (1.0 - self.beta2) * (p.grad * p.grad - v)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(params, cfg):
    """Build an optimizer from a config mapping with keys
    ``optimizer`` ("sgd" | "adam"), ``lr``, ``momentum``, ``decay_steps``."""
    kind = cfg.get("optimizer", "sgd")
    if kind == "sgd":
        return SgdMomentum(
            params,
            lr=cfg.get("lr", 1e-5),
            momentum=cfg.get("momentum", 0.9),
            decay_steps=cfg.get("decay_steps"),
        )
    if kind == "adam":
        return Adam(params, lr=cfg.get("lr", 1e-3))
    raise ValueError(f"unknown optimizer {kind!r}")
