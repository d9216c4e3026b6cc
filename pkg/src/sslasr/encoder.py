"""Toy self-supervised speech encoder: a strided CNN front end, a small
transformer context network, a grouped Gumbel-softmax quantizer, masked
contrastive + diversity pretraining, and a CTC projection head for
supervised fine-tuning.

Frame geometry is fixed by the CNN stack: stride 320 samples (20 ms at
16 kHz) and receptive field 400 samples (25 ms).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ctc import PosteriorStream, ctc_loss
from .features import AudioBuffer
from .nn import (
    Conv1d,
    Gelu,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    TransformerBlock,
    gumbel_noise,
    log_softmax,
    log_softmax_backward,
    sinusoidal_positions,
    softmax,
    softmax_backward,
)
from .params import make_optimizer

logger = logging.getLogger(__name__)

# wide first kernel, two layers: strides multiply to 320 samples (20 ms)
# with a 400-sample (25 ms) receptive field; resolves tone content far
# better than a deep narrow stack at this parameter budget
DEFAULT_CONV_LAYERS = (
    (32, 80, 80),
    (32, 5, 4),
)

# the classic seven-layer stack meets the same stride/field contract
DEEP_CONV_LAYERS = (
    (32, 10, 5),
    (32, 3, 2),
    (32, 3, 2),
    (32, 3, 2),
    (32, 3, 2),
    (32, 2, 2),
    (32, 2, 2),
)


@dataclass
class EncoderConfig:
    """Geometry and loss settings for the toy encoder.

    ``conv_layers`` is a tuple of (channels, kernel, stride); the strides
    must multiply to a 20 ms hop and the stack's receptive field must span
    25 ms at the configured sample rate.
    """

    conv_layers: tuple = DEFAULT_CONV_LAYERS
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    groups: int = 2
    codebook_entries: int = 8  # 320 per codebook at paper scale
    code_dim: int = 16
    mask_prob: float = 0.065
    mask_span: int = 10
    contrastive_temperature: float = 0.1  # kappa
    gumbel_temperature: float = 2.0  # tau; fixed by default
    gumbel_temperature_min: float | None = None  # set below tau to anneal linearly over pretraining
    distractors: int = 5  # K
    loss_weight_diversity: float = 0.1
    position_scale: float = 0.3  # sinusoidal table amplitude at the transformer input
    sample_rate: int = 16000

    def __post_init__(self):
        self.conv_layers = tuple(tuple(layer) for layer in self.conv_layers)
        stride_us = self.total_stride() * 1_000_000 / self.sample_rate
        if abs(stride_us - 20_000) > 1e-9:
            raise ValueError(f"conv strides give a {stride_us:.1f} us hop, need 20 ms")
        field_ms = self.receptive_field() * 1000 / self.sample_rate
        if abs(field_ms - 25.0) > 1e-9:
            raise ValueError(f"receptive field is {field_ms:.3f} ms, need 25 ms")
        if self.groups < 1 or self.codebook_entries < 2:
            raise ValueError("need groups >= 1 and codebook_entries >= 2")
        if self.code_dim % self.groups != 0:
            raise ValueError("code_dim must be divisible by groups")
        if self.gumbel_temperature <= 0 or self.contrastive_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if self.gumbel_temperature_min is not None and self.gumbel_temperature_min <= 0:
            raise ValueError("gumbel_temperature_min must be positive")
        if self.distractors < 0:
            raise ValueError("distractor count must be >= 0")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def total_stride(self):
        out = 1
        for _, _, s in self.conv_layers:
            out *= s
        return out

    def receptive_field(self):
        rf, jump = 1, 1
        for _, k, s in self.conv_layers:
            rf += (k - 1) * jump
            jump *= s
        return rf

    @property
    def frame_shift_us(self):
        return int(round(self.total_stride() * 1_000_000 / self.sample_rate))

    @property
    def d_z(self):
        return self.conv_layers[-1][0]

    def frame_count(self, n_samples):
        """Closed-form conv arithmetic: floor((N - field) / stride) + 1."""
        if n_samples < self.receptive_field():
            return 0
        return (n_samples - self.receptive_field()) // self.total_stride() + 1


def sample_mask_spans(n_frames, mask_prob, mask_span, rng, ensure_nonempty=False):
    """Sample mask-span starts with probability ``mask_prob`` per frame;
    a frame is masked iff covered by at least one span of length
    ``mask_span`` (spans are clipped at the end of the utterance)."""
    starts = np.flatnonzero(rng.random(n_frames) < mask_prob)
    if starts.size == 0 and ensure_nonempty and n_frames > 0:
        starts = np.array([rng.integers(n_frames)])
    covered = np.zeros(n_frames, dtype=bool)
    for s in starts:
        covered[s : s + mask_span] = True
    return np.flatnonzero(covered)


class GumbelQuantizer(Module):
    """Grouped codebook selection: per frame a (G, V) logit block feeds a
    Gumbel-softmax choice per group; chosen codes are concatenated and
    linearly mapped to the contrastive target space."""

    def __init__(self, rng, d_in, cfg: EncoderConfig, name="quantizer"):
        g, v = cfg.groups, cfg.codebook_entries
        dv = cfg.code_dim // g
        self.groups, self.entries, self.dv = g, v, dv
        self.gumbel_temperature = cfg.gumbel_temperature
        self.proj = Linear(rng, d_in, g * v, name + ".proj")
        self.codebooks = Parameter(name + ".codebooks", rng.normal(0.0, 1.0, size=(g, v, dv)))
        self.out = Linear(rng, cfg.code_dim, cfg.d_model, name + ".out")

    def forward(self, zn, rng=None, hard=True, noise=None):
        """Returns (q, probs): q is (T, d_model); probs is the noise-free
        softmax over each group's logits, whose rows the hard selection
        frequencies follow (Gumbel-max property).

        Noise comes from ``rng`` when given, from a fixed ``noise`` array
        otherwise; with neither, selection is over the bare logits.
        """
        if self.gumbel_temperature <= 0:
            raise ValueError("gumbel temperature must be positive")
        t = zn.shape[0]
        logits = self.proj.forward(zn).reshape(t, self.groups, self.entries)
        probs = softmax(logits, axis=-1)
        if rng is not None:
            noise = gumbel_noise(rng, logits.shape)
        scores = logits if noise is None else logits + noise
        soft = softmax(scores / self.gumbel_temperature, axis=-1)
        if hard:
            sel = np.zeros_like(soft)
            top = np.argmax(scores, axis=-1)
            g_idx, t_idx = np.meshgrid(np.arange(self.groups), np.arange(t))
            sel[t_idx, g_idx, top] = 1.0
        else:
            sel = soft
        codes = np.einsum("tgv,gvd->tgd", sel, self.codebooks.value)
        q = self.out.forward(codes.reshape(t, -1))
        self._soft, self._sel, self._probs, self._shape = soft, sel, probs, (t,)
        return q, probs

    def backward(self, dq, dprobs=None):
        """Backward for the latest forward; hard selections use the
        straight-through estimator (gradients flow via the soft path)."""
        t = self._shape[0]
        dcodes = self.out.backward(dq).reshape(t, self.groups, self.dv)
        self.codebooks.grad += np.einsum("tgv,tgd->gvd", self._sel, dcodes)
        dsel = np.einsum("tgd,gvd->tgv", dcodes, self.codebooks.value)
        dlogits = softmax_backward(self._soft, dsel) / self.gumbel_temperature
        if dprobs is not None:
            dlogits = dlogits + softmax_backward(self._probs, dprobs)
        return self.proj.backward(dlogits.reshape(t, -1))


def gumbel_quantize(z_rows, quantizer: GumbelQuantizer, hard=True, rng=None):
    """Functional wrapper over :meth:`GumbelQuantizer.forward`."""
    return quantizer.forward(np.asarray(z_rows, dtype=np.float64), rng=rng, hard=hard)


def _cosine_with_grads(a, b, eps=1e-12):
    """cos(a, b) with the norm guard, plus exact partials."""
    dot = float(a @ b)
    na0, nb0 = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    na, nb = na0 + eps, nb0 + eps
    cos = dot / (na * nb)
    da = b / (na * nb) - (dot / (na * na * nb)) * (a / max(na0, eps))
    db = a / (na * nb) - (dot / (na * nb * nb)) * (b / max(nb0, eps))
    return cos, da, db


@dataclass
class ContrastiveResult:
    value: float
    grad_c: np.ndarray
    grad_q: np.ndarray
    distractors: dict
    reduced_frames: dict = field(default_factory=dict)
    accuracy: float = 0.0  # fraction of masked frames whose target wins


def contrastive_loss(c, q, masked_indices, k, kappa, rng=None,
                     distractor_indices=None) -> ContrastiveResult:
    """Masked contrastive objective: mean over masked frames t of

        -log softmax_t( cos(c_t, q_j) / kappa )   over j in {t} + distractors

    Distractors are sampled uniformly without replacement from the other
    masked frames of the same utterance. Frames with fewer than ``k``
    alternatives get a reduced distractor count, recorded in
    ``reduced_frames``.
    """
    c = np.asarray(c, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    masked = np.asarray(sorted(int(i) for i in masked_indices), dtype=np.int64)
    if masked.size == 0:
        raise ValueError("contrastive loss needs at least one masked frame")
    if kappa <= 0:
        raise ValueError("contrastive temperature must be positive")
    if distractor_indices is None:
        if rng is None and k > 0 and masked.size > 1:
            raise ValueError("need an rng (or fixed distractor_indices) to sample distractors")
        distractor_indices = {}
        for t in masked:
            pool = masked[masked != t]
            kt = min(k, pool.size)
            chosen = rng.choice(pool, size=kt, replace=False) if kt else np.empty(0, np.int64)
            distractor_indices[int(t)] = tuple(int(x) for x in chosen)
    reduced = {
        int(t): len(distractor_indices[int(t)])
        for t in masked
        if len(distractor_indices[int(t)]) < k
    }
    grad_c = np.zeros_like(c)
    grad_q = np.zeros_like(q)
    total = 0.0
    wins = 0
    inv_n = 1.0 / masked.size
    for t in masked:
        cand = (int(t),) + tuple(distractor_indices[int(t)])
        sims = np.empty(len(cand))
        dcs = []
        dqs = []
        for j, idx in enumerate(cand):
            cos, dc, dq = _cosine_with_grads(c[t], q[idx])
            sims[j] = cos / kappa
            dcs.append(dc / kappa)
            dqs.append(dq / kappa)
        logp = sims - (sims.max() + np.log(np.exp(sims - sims.max()).sum()))
        total += -logp[0]
        wins += int(np.argmax(sims) == 0)
        dsim = np.exp(logp)
        dsim[0] -= 1.0
        for j, idx in enumerate(cand):
            grad_c[t] += inv_n * dsim[j] * dcs[j]
            grad_q[idx] += inv_n * dsim[j] * dqs[j]
    return ContrastiveResult(
        value=float(total * inv_n),
        grad_c=grad_c,
        grad_q=grad_q,
        distractors=distractor_indices,
        reduced_frames=reduced,
        accuracy=wins * inv_n,
    )


def _check_prob_rows(probs):
    sums = probs.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValueError("codebook probabilities must sum to 1 per group")
    if (probs < -1e-12).any():
        raise ValueError("codebook probabilities must be nonnegative")


def diversity_loss_with_grad(probs):
    """Softmax-perplexity diversity penalty over batch-averaged codebook
    usage:

        L = (G * V - sum_g exp(H(mean_t probs[t, g]))) / (G * V)

    Returns (value, d value / d probs). Zero when every group's average
    usage is uniform; (G*V - G) / (G*V) when every group collapses.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError("probs must be (T, groups, entries)")
    _check_prob_rows(probs)
    t, g, v = probs.shape
    avg = probs.mean(axis=0)  # (G, V)
    safe = np.where(avg > 0, avg, 1.0)
    ent = -(avg * np.log(safe)).sum(axis=-1)  # natural-log entropy per group
    perp = np.exp(ent)
    value = (g * v - perp.sum()) / (g * v)
    # d value / d avg = -perp_g * dH/davg / (G V);  dH/davg = -(log avg + 1)
    davg = (perp[:, None] * (np.log(safe) + 1.0)) / (g * v)
    dprobs = np.broadcast_to(davg / t, probs.shape).copy()
    return float(value), dprobs


def diversity_loss(probs) -> float:
    return diversity_loss_with_grad(probs)[0]


class SslEncoder(Module):
    """CNN feature encoder + transformer context network + quantizer, with
    an optional CTC projection head added at fine-tuning time."""

    def __init__(self, cfg: EncoderConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.convs = []
        self.conv_acts = []
        c_prev = 1
        for i, (c_out, k, s) in enumerate(cfg.conv_layers):
            self.convs.append(Conv1d(rng, c_prev, c_out, k, s, f"conv{i}", init="kaiming"))
            self.conv_acts.append(Gelu())
            c_prev = c_out
        self.z_norm = LayerNorm(cfg.d_z, "z_norm")
        self.proj = Linear(rng, cfg.d_z, cfg.d_model, "proj")
        self.mask_emb = Parameter(
            "mask_emb", rng.uniform(-1, 1, size=cfg.d_model) / math.sqrt(cfg.d_model)
        )
        self.blocks = [
            TransformerBlock(rng, cfg.d_model, cfg.n_heads, f"block{i}")
            for i in range(cfg.n_blocks)
        ]
        self.final_norm = LayerNorm(cfg.d_model, "final_norm")
        self.quantizer = GumbelQuantizer(rng, cfg.d_z, cfg)
        self.head = None

    # ---- feature encoder ----

    def encode_raw(self, audio):
        """Run the CNN stack over raw samples; frame shift is 20 ms."""
        samples = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio)
        if isinstance(audio, AudioBuffer) and audio.sample_rate != self.cfg.sample_rate:
            raise ValueError(
                f"encoder expects {self.cfg.sample_rate} Hz audio, got {audio.sample_rate}"
            )
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size < self.cfg.receptive_field():
            raise ValueError(
                f"audio of {samples.size} samples is shorter than the "
                f"{self.cfg.receptive_field()}-sample receptive field"
            )
        x = samples[:, None]
        for conv, act in zip(self.convs, self.conv_acts):
            x = act.forward(conv.forward(x))
        return x

    def _encode_backward(self, dz):
        for conv, act in zip(reversed(self.convs), reversed(self.conv_acts)):
            dz = conv.backward(act.backward(dz))
        return dz

    # ---- context network ----

    def _project_and_mask(self, zn, mask_indices):
        x = self.proj.forward(zn)
        mask_indices = np.asarray(list(mask_indices), dtype=np.int64)
        if mask_indices.size:
            x = x.copy()
            x[mask_indices] = self.mask_emb.value
        self._mask_indices = mask_indices
        return x

    def transformer_input(self, z, mask_indices=()):
        """Projected frames with masked rows replaced by the learned mask
        embedding: exactly what the transformer stack consumes (positions
        are added inside the stack)."""
        return self._project_and_mask(self.z_norm.forward(z), mask_indices)

    def _context_from_input(self, x):
        h = x + self.cfg.position_scale * sinusoidal_positions(x.shape[0], self.cfg.d_model)
        for block in self.blocks:
            h = block.forward(h)
        return self.final_norm.forward(h)

    def contextualize(self, z, mask_indices=()):
        return self._context_from_input(self.transformer_input(z, mask_indices))

    def _context_backward(self, dc):
        """Propagate dL/dC back to dL/d(normalized features); the caller
        owns the shared z-norm backward."""
        dh = self.final_norm.backward(dc)
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        dx = dh
        if self._mask_indices.size:
            self.mask_emb.grad += dx[self._mask_indices].sum(axis=0)
            dx = dx.copy()
            dx[self._mask_indices] = 0.0
        return self.proj.backward(dx)

    # ---- CTC head ----

    def attach_ctc_head(self, n_classes, seed=0):
        """Add (or replace) the linear projection used for CTC training;
        ``n_classes`` includes the blank."""
        rng = np.random.default_rng(seed)
        self.head = Linear(rng, self.cfg.d_model, n_classes, "ctc_head")

    def frame_logits(self, audio, adapter=None):
        z = self.encode_raw(audio)
        c = self.contextualize(z)
        if adapter is not None:
            _, restored = adapter.forward_arrays(c)
            c = restored
        if self.head is None:
            raise ValueError("no CTC head attached; fine-tune the model first")
        return self.head.forward(c)

    def frame_posteriors(self, audio, adapter=None, source="w2v") -> PosteriorStream:
        """Per-frame log probabilities from the CTC head at a 20 ms shift."""
        logits = self.frame_logits(audio, adapter=adapter)
        return PosteriorStream(log_softmax(logits, axis=-1), self.cfg.frame_shift_us, source)


def ssl_frame_posteriors(audio, model: SslEncoder, adapter=None, source="w2v"):
    return model.frame_posteriors(audio, adapter=adapter, source=source)


def pretrain_step(model, samples, rng=None, hard=True, mask=None, noise=None,
                  distractor_indices=None, contrastive_weight=1.0,
                  diversity_weight=None):
    """Forward + backward of the pretraining objective on one utterance;
    gradients accumulate into the model.

    The stochastic choices (mask spans, Gumbel noise, distractors) come
    from ``rng`` unless passed in explicitly, which makes the loss a
    deterministic function of the parameters for gradient checking.
    Returns (contrastive value, diversity value).
    """
    cfg = model.cfg
    if diversity_weight is None:
        diversity_weight = cfg.loss_weight_diversity
    z = model.encode_raw(samples)
    t = z.shape[0]
    if mask is None:
        mask = sample_mask_spans(t, cfg.mask_prob, cfg.mask_span, rng, ensure_nonempty=True)
    mask = np.asarray(mask, dtype=np.int64)
    zn = model.z_norm.forward(z)
    c = model._context_from_input(model._project_and_mask(zn, mask))
    q_rows, probs = model.quantizer.forward(zn[mask], rng=rng, hard=hard, noise=noise)
    q_full = np.zeros_like(c)
    q_full[mask] = q_rows
    contrast = contrastive_loss(
        c, q_full, mask, cfg.distractors, cfg.contrastive_temperature,
        rng=rng, distractor_indices=distractor_indices,
    )
    div_value, div_grad = diversity_loss_with_grad(probs)
    # context branch
    dzn = model._context_backward(contrastive_weight * contrast.grad_c)
    # quantizer branch (only masked rows were quantized)
    dzn_q = model.quantizer.backward(
        contrastive_weight * contrast.grad_q[mask], diversity_weight * div_grad
    )
    dzn[mask] += dzn_q
    dz = model.z_norm.backward(dzn)
    model._encode_backward(dz)
    return contrast, div_value


def pretrain(dataset, cfg: EncoderConfig, epochs, seed, optimizer_cfg=None, hard=True):
    """Masked contrastive + diversity pretraining on raw audio.

    Returns ``(model, history)`` where history holds one record per epoch
    with mean contrastive, diversity, and combined losses. Training is
    deterministic given the seed; non-finite losses abort.
    """
    seq = np.random.SeedSequence(seed)
    init_seed, loop_seed = seq.spawn(2)
    model = SslEncoder(cfg, seed=init_seed)
    rng = np.random.default_rng(loop_seed)
    opt_cfg = dict(optimizer_cfg or {})
    opt_cfg.setdefault("decay_steps", max(1, epochs * len(dataset)))
    opt = make_optimizer(model.parameters(), opt_cfg)
    tau_hi = cfg.gumbel_temperature
    tau_lo = cfg.gumbel_temperature_min
    history = []
    for epoch in range(epochs):
        if tau_lo is not None and epochs > 1:
            model.quantizer.gumbel_temperature = (
                tau_hi + (tau_lo - tau_hi) * epoch / (epochs - 1)
            )
        order = rng.permutation(len(dataset))
        parts = []
        for i in order:
            model.zero_grad()
            contrast, ld = pretrain_step(model, dataset[i], rng=rng, hard=hard)
            loss = contrast.value + cfg.loss_weight_diversity * ld
            if not np.isfinite(loss):
                raise RuntimeError(f"pretraining diverged at epoch {epoch}: loss={loss}")
            parts.append((contrast.value, ld, contrast.accuracy))
            opt.step()
        contrast_mean = float(np.mean([p[0] for p in parts]))
        diversity = float(np.mean([p[1] for p in parts]))
        combined = contrast_mean + cfg.loss_weight_diversity * diversity
        history.append(
            {"epoch": epoch, "contrastive": contrast_mean, "diversity": diversity,
             "combined": combined, "accuracy": float(np.mean([p[2] for p in parts]))}
        )
        logger.info(
            "pretrain epoch %d: contrastive %.4f diversity %.4f combined %.4f acc %.2f",
            epoch, contrast_mean, diversity, combined, history[-1]["accuracy"],
        )
    return model, history


def trainable_parameters(model: SslEncoder, scope, adapter=None):
    """Resolve an update scope to a parameter list.

    Scopes: "all", "no-feature-encoder" (freeze the CNN stack),
    "first-N-blocks" (CTC head plus the first N transformer blocks only),
    and "head-only".
    """
    if model.head is None:
        raise ValueError("attach a CTC head before selecting trainable parameters")
    extra = list(adapter.parameters()) if adapter is not None else []
    if scope == "all":
        return model.parameters() + extra
    if scope == "no-feature-encoder":
        conv_params = {id(p) for conv in model.convs for p in conv.parameters()}
        return [p for p in model.parameters() if id(p) not in conv_params] + extra
    if scope == "head-only":
        # strictly the projection head: nothing else may change
        return model.head.parameters()
    if scope.startswith("first-") and scope.endswith("-blocks"):
        n = int(scope[len("first-") : -len("-blocks")])
        chosen = list(model.head.parameters())
        for block in model.blocks[:n]:
            chosen.extend(block.parameters())
        return chosen + extra
    raise ValueError(f"unknown update scope {scope!r}")


def finetune_ctc(dataset, model: SslEncoder, n_classes, epochs, seed,
                 scope="no-feature-encoder", adapter=None, optimizer_cfg=None):
    """Supervised CTC fine-tuning over (samples, token-id sequence) pairs.

    A fresh linear head is attached if the model has none. Only the
    parameters selected by ``scope`` are updated. Returns the per-epoch
    mean loss history.
    """
    seq = np.random.SeedSequence(seed)
    head_seed, loop_seed = seq.spawn(2)
    if model.head is None:
        model.attach_ctc_head(n_classes, seed=head_seed)
    for _, tokens in dataset:
        for tok in tokens:
            if not 1 <= tok <= n_classes - 1:
                raise ValueError(f"token id {tok} outside vocabulary range 1..{n_classes - 1}")
    rng = np.random.default_rng(loop_seed)
    params = trainable_parameters(model, scope, adapter=adapter)
    opt_cfg = dict(optimizer_cfg or {})
    opt_cfg.setdefault("decay_steps", max(1, epochs * len(dataset)))
    opt = make_optimizer(params, opt_cfg)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for i in order:
            samples, tokens = dataset[i]
            model.zero_grad()
            if adapter is not None:
                adapter.zero_grad()
            loss = _ctc_step(model, samples, tokens, adapter)
            if not np.isfinite(loss):
                raise RuntimeError(f"fine-tuning diverged at epoch {epoch}: loss={loss}")
            losses.append(loss)
            opt.step()
        history.append({"epoch": epoch, "ctc_loss": float(np.mean(losses))})
        logger.info("finetune epoch %d: ctc %.4f", epoch, history[-1]["ctc_loss"])
    return history


def _ctc_step(model, samples, tokens, adapter=None):
    z = model.encode_raw(samples)
    c = model.contextualize(z)
    if adapter is not None:
        _, restored = adapter.forward_arrays(c)
        logits = model.head.forward(restored)
    else:
        logits = model.head.forward(c)
    logp = log_softmax(logits, axis=-1)
    res = ctc_loss(logp, tokens)
    dlogits = log_softmax_backward(logp, res.grad_logp, axis=-1)
    dc = model.head.backward(dlogits)
    if adapter is not None:
        dc = adapter.backward_from_restored(dc)
    dz = model.z_norm.backward(model._context_backward(dc))
    model._encode_backward(dz)
    return res.value
