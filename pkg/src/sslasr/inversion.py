"""Mixture-density-network articulatory inversion: per frame the model
emits mixture weights, means, and diagonal standard deviations over the
articulatory space; training minimizes the mixture negative log
likelihood on frame-aligned (representation, trajectory) pairs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix
from .nn import Linear, Module, Relu, log_softmax, softmax
from .params import make_optimizer

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MdnConfig:
    d_in: int = 64
    d_artic: int = 6  # 144 at paper scale
    mixtures: int = 2
    hidden_dims: tuple = (32,)

    def __post_init__(self):
        self.hidden_dims = tuple(self.hidden_dims)
        if self.mixtures < 1 or self.d_artic < 1:
            raise ValueError("need mixtures >= 1 and d_artic >= 1")


@dataclass
class MixtureParams:
    """Per-frame diagonal Gaussian mixtures: weights (T, M), means
    (T, M, D), standard deviations (T, M, D)."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    frame_shift_us: int = 10_000

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        t, m = self.weights.shape
        if self.means.shape[:2] != (t, m) or self.stds.shape != self.means.shape:
            raise ValueError("weights, means, and stds disagree on (T, M, D)")
        if not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("mixture weights must sum to 1 per frame")
        if (self.stds <= 0).any():
            raise ValueError("standard deviations must be positive")

    @property
    def n_frames(self):
        return self.weights.shape[0]

    @property
    def n_mixtures(self):
        return self.weights.shape[1]

    @property
    def d_artic(self):
        return self.means.shape[2]


class MdnModel(Module):
    """ReLU MLP trunk with three heads: weight logits, means, log-stds.
    Softmax and exp transforms keep every emitted mixture valid by
    construction."""

    def __init__(self, cfg: MdnConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.layers = []
        self.acts = []
        d = cfg.d_in
        for i, h in enumerate(cfg.hidden_dims):
            self.layers.append(Linear(rng, d, h, f"mdn.hidden{i}"))
            self.acts.append(Relu())
            d = h
        m, da = cfg.mixtures, cfg.d_artic
        self.head_w = Linear(rng, d, m, "mdn.head_weights")
        self.head_mu = Linear(rng, d, m * da, "mdn.head_means")
        self.head_s = Linear(rng, d, m * da, "mdn.head_logstd")

    def _trunk(self, x):
        for layer, act in zip(self.layers, self.acts):
            x = act.forward(layer.forward(x))
        return x

    def forward_arrays(self, x):
        t = x.shape[0]
        m, da = self.cfg.mixtures, self.cfg.d_artic
        h = self._trunk(x)
        logit_w = self.head_w.forward(h)
        mu = self.head_mu.forward(h).reshape(t, m, da)
        log_std = self.head_s.forward(h).reshape(t, m, da)
        cache = (logit_w, mu, log_std)
        return MixtureParams(softmax(logit_w, axis=1), mu, np.exp(log_std)), cache

    def backward_heads(self, dlogit_w, dmu, dlog_std):
        t = dlogit_w.shape[0]
        dh = self.head_w.backward(dlogit_w)
        dh += self.head_mu.backward(dmu.reshape(t, -1))
        dh += self.head_s.backward(dlog_std.reshape(t, -1))
        for i in range(len(self.layers) - 1, -1, -1):
            dh = self.layers[i].backward(self.acts[i].backward(dh))
        return dh


def mdn_forward(feats: FeatureMatrix, model: MdnModel) -> MixtureParams:
    if feats.dim != model.cfg.d_in:
        raise ValueError(f"feature width {feats.dim} does not match model d_in {model.cfg.d_in}")
    mix, _ = model.forward_arrays(feats.data.astype(np.float64))
    mix.frame_shift_us = feats.frame_shift_us
    return mix


def _component_logliks(mix: MixtureParams, targets):
    """(T, M) log [ w_m * N(x | mu_m, diag sigma_m^2) ]."""
    x = targets[:, None, :]  # (T, 1, D)
    z = (x - mix.means) / mix.stds
    log_n = -0.5 * (z * z + LOG_2PI).sum(axis=2) - np.log(mix.stds).sum(axis=2)
    return np.log(mix.weights) + log_n


def mdn_nll(mix: MixtureParams, targets) -> float:
    """Mean over frames of -log sum_m w_m N(x | mu_m, diag sigma_m^2)."""
    targets = _target_array(mix, targets)
    ll = _component_logliks(mix, targets)
    m = ll.max(axis=1)
    lse = m + np.log(np.exp(ll - m[:, None]).sum(axis=1))
    return float(-lse.mean())


def _target_array(mix, targets):
    data = targets.data if isinstance(targets, FeatureMatrix) else np.asarray(targets)
    data = data.astype(np.float64)
    if data.shape != (mix.n_frames, mix.d_artic):
        raise ValueError(
            f"targets of shape {data.shape} do not match mixture ({mix.n_frames}, {mix.d_artic})"
        )
    return data


def mdn_predict(mix: MixtureParams) -> FeatureMatrix:
    """Expected trajectory sum_m w_m mu_m, labeled "artic"."""
    expect = np.einsum("tm,tmd->td", mix.weights, mix.means)
    return FeatureMatrix(expect, mix.frame_shift_us, "artic")


def mdn_nll_step(model: MdnModel, x, targets):
    """NLL forward + backward for one utterance; returns the loss."""
    x = np.asarray(x, dtype=np.float64)
    mix, (logit_w, mu, log_std) = model.forward_arrays(x)
    targets = _target_array(mix, targets)
    ll = _component_logliks(mix, targets)
    post = softmax(ll, axis=1)  # responsibilities gamma_{t,m}
    m = ll.max(axis=1)
    lse = m + np.log(np.exp(ll - m[:, None]).sum(axis=1))
    t = x.shape[0]
    # d(mean NLL)/d logits = (w - gamma) / T; means and log-stds via gamma
    dlogit_w = (mix.weights - post) / t
    z = (targets[:, None, :] - mix.means) / mix.stds
    dmu = -(post[:, :, None] * z / mix.stds) / t
    dlog_std = -(post[:, :, None] * (z * z - 1.0)) / t
    model.backward_heads(dlogit_w, dmu, dlog_std)
    return float(-lse.mean())


def train_inversion(dataset, cfg: MdnConfig, epochs, seed, optimizer_cfg=None):
    """Train on frame-aligned (representation, articulatory) pairs.

    Both sides may be FeatureMatrix or plain arrays; pairs are truncated
    to their common length. Returns (model, per-epoch NLL history).
    """
    seq = np.random.SeedSequence(seed)
    init_seed, loop_seed = seq.spawn(2)
    model = MdnModel(cfg, seed=init_seed)
    rng = np.random.default_rng(loop_seed)
    pairs = []
    for feats, artic in dataset:
        x = feats.data if isinstance(feats, FeatureMatrix) else np.asarray(feats)
        y = artic.data if isinstance(artic, FeatureMatrix) else np.asarray(artic)
        t = min(x.shape[0], y.shape[0])
        pairs.append((x[:t].astype(np.float64), y[:t].astype(np.float64)))
    opt_cfg = dict(optimizer_cfg or {"optimizer": "adam", "lr": 5e-3})
    opt_cfg.setdefault("decay_steps", max(1, epochs * len(pairs)))
    opt = make_optimizer(model.parameters(), opt_cfg)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for i in order:
            x, y = pairs[i]
            model.zero_grad()
            loss = mdn_nll_step(model, x, y)
            if not np.isfinite(loss):
                raise RuntimeError(f"inversion training diverged at epoch {epoch}")
            losses.append(loss)
            opt.step()
        history.append({"epoch": epoch, "nll": float(np.mean(losses))})
        if epoch % 25 == 0 or epoch == epochs - 1:
            logger.info("inversion epoch %d: nll %.4f", epoch, history[-1]["nll"])
    return model, history
