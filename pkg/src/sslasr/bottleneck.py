"""Bottleneck adapter: four interleaving conv / fully-connected layers that
turn contextual representations into compact half-shift features and back.

Layer order: transposed conv (kernel 2, stride 2; doubles the frame rate)
-> FC block (linear, ReLU, dropout; d_in -> d_bn)  <- features tap here
-> conv (kernel 2, stride 2; halves the frame rate)
-> FC block (d_bn -> d_in)                         <- reconstruction
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix
from .nn import Conv1d, ConvTranspose1d, Dropout, Linear, Module, Relu
from .params import make_optimizer

logger = logging.getLogger(__name__)


@dataclass
class BottleneckConfig:
    d_in: int = 1024
    d_bn: int = 256
    kernel: int = 2
    stride: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_bn >= self.d_in:
            raise ValueError(f"bottleneck width {self.d_bn} must be smaller than d_in {self.d_in}")
        if self.kernel != self.stride:
            raise ValueError("kernel must equal stride so frame counts double/halve exactly")


class BottleneckAdapter(Module):
    def __init__(self, cfg: BottleneckConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.deconv = ConvTranspose1d(rng, cfg.d_in, cfg.d_in, cfg.kernel, cfg.stride,
                                      "bottleneck.deconv")
        self.fc1 = Linear(rng, cfg.d_in, cfg.d_bn, "bottleneck.fc1")
        self.act1 = Relu()
        self.drop1 = Dropout(cfg.dropout)
        self.reconv = Conv1d(rng, cfg.d_bn, cfg.d_bn, cfg.kernel, cfg.stride,
                             "bottleneck.reconv")
        # final FC block is linear + dropout: a terminal ReLU could not
        # reconstruct the (zero-mean) contextual targets
        self.fc2 = Linear(rng, cfg.d_bn, cfg.d_in, "bottleneck.fc2")
        self.drop2 = Dropout(cfg.dropout)

    def forward_arrays(self, c, rng=None):
        """(T, d_in) -> (bn (2T, d_bn), restored (T, d_in)).

        Pass an rng to enable dropout (training); extraction calls leave
        it unset, so repeated extraction is deterministic.
        """
        c = np.asarray(c, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != self.cfg.d_in:
            raise ValueError(f"expected (T, {self.cfg.d_in}) input, got {c.shape}")
        up = self.deconv.forward(c)
        bn = self.drop1.forward(self.act1.forward(self.fc1.forward(up)), rng)
        down = self.reconv.forward(bn)
        restored = self.drop2.forward(self.fc2.forward(down), rng)
        return bn, restored

    def backward_from_restored(self, drestored, dbn=None):
        """Backward through the whole stack given dL/drestored (and
        optionally dL/dbn for losses that also touch the tap point)."""
        ddown = self.fc2.backward(self.drop2.backward(drestored))
        dbn_total = self.reconv.backward(ddown)
        if dbn is not None:
            dbn_total = dbn_total + dbn
        dup = self.fc1.backward(self.act1.backward(self.drop1.backward(dbn_total)))
        return self.deconv.backward(dup)


def bottleneck_forward(adapter: BottleneckAdapter, feats: FeatureMatrix):
    """Run the adapter over a 20 ms feature matrix; returns the bottleneck
    stream at half the shift (label ``w2v-bn``) and the restored stream at
    the input shift."""
    if feats.frame_shift_us % adapter.cfg.stride != 0:
        raise ValueError("frame shift must divide evenly when doubling the rate")
    bn, restored = adapter.forward_arrays(feats.data.astype(np.float64))
    half = feats.frame_shift_us // adapter.cfg.stride
    return (
        FeatureMatrix(bn, half, "w2v-bn"),
        FeatureMatrix(restored, feats.frame_shift_us, feats.label or "restored"),
    )


def reconstruction_loss(adapter: BottleneckAdapter, c, rng=None):
    """Mean squared reconstruction error with gradient accumulation."""
    c = np.asarray(c, dtype=np.float64)
    bn, restored = adapter.forward_arrays(c, rng=rng)
    diff = restored - c
    loss = float((diff * diff).mean())
    dres = 2.0 * diff / diff.size
    adapter.backward_from_restored(dres)
    return loss


def train_adapter(dataset, cfg: BottleneckConfig, epochs, seed, optimizer_cfg=None):
    """Standalone training that minimizes reconstruction MSE over a list of
    (T, d_in) context matrices. Returns (adapter, per-epoch loss history)."""
    seq = np.random.SeedSequence(seed)
    init_seed, loop_seed = seq.spawn(2)
    adapter = BottleneckAdapter(cfg, seed=init_seed)
    rng = np.random.default_rng(loop_seed)
    opt_cfg = dict(optimizer_cfg or {})
    opt_cfg.setdefault("decay_steps", max(1, epochs * len(dataset)))
    opt = make_optimizer(adapter.parameters(), opt_cfg)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for i in order:
            adapter.zero_grad()
            loss = reconstruction_loss(adapter, dataset[i], rng=rng)
            if not np.isfinite(loss):
                raise RuntimeError(f"adapter training diverged at epoch {epoch}")
            losses.append(loss)
            opt.step()
        history.append({"epoch": epoch, "mse": float(np.mean(losses))})
        logger.info("adapter epoch %d: mse %.6f", epoch, history[-1]["mse"])
    return adapter, history
