"""CTC loss with analytic gradients, hypothesis scoring, greedy decoding,
and prefix beam search over per-frame log posteriors.

Alignment-lattice conventions: blank id is 0, lexical tokens are 1..V,
and all lattice arithmetic runs in log space with -inf for impossible
states.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

NEG_INF = -np.inf


class UnsatisfiableTargetError(ValueError):
    """Target cannot be aligned within the available frames; the implied
    loss is +inf."""


@dataclass
class TokenVocab:
    """Ordered lexical symbols; ids start at 1, blank is fixed at 0."""

    tokens: tuple

    blank_id = 0

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary symbols must be unique")
        self._ids = {tok: i + 1 for i, tok in enumerate(self.tokens)}

    @property
    def size(self):
        return len(self.tokens)

    @property
    def width(self):
        """Posterior row width: V lexical classes plus blank."""
        return len(self.tokens) + 1

    def id_of(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token_of(self, token_id):
        if not 1 <= token_id <= self.size:
            raise KeyError(f"id {token_id} outside 1..{self.size}")
        return self.tokens[token_id - 1]

    def ids_of(self, tokens):
        return [self.id_of(t) for t in tokens]

    def tokens_of(self, ids):
        return [self.token_of(i) for i in ids]


def _row_logsumexp(logp):
    m = np.max(logp, axis=1)
    out = np.full(logp.shape[0], NEG_INF)
    ok = np.isfinite(m)
    if ok.any():
        out[ok] = m[ok] + np.log(np.exp(logp[ok] - m[ok, None]).sum(axis=1))
    return out


@dataclass
class PosteriorStream:
    """T x (V+1) per-frame log probabilities from one acoustic model."""

    logp: np.ndarray
    frame_shift_us: int
    source: str = ""

    def __post_init__(self):
        self.logp = np.asarray(self.logp, dtype=np.float64)
        if self.logp.ndim != 2:
            raise ValueError("posterior stream must be a T x (V+1) matrix")
        if self.frame_shift_us <= 0:
            raise ValueError("frame_shift_us must be positive")
        if np.isnan(self.logp).any() or (self.logp == np.inf).any():
            raise ValueError("posterior entries must be finite or -inf")
        norm = _row_logsumexp(self.logp)
        if not np.all(np.abs(norm) <= 1e-6):
            worst = float(np.max(np.abs(norm)))
            raise ValueError(f"rows must log-sum-exp to 0 within 1e-6 (worst {worst:.3g})")

    @property
    def n_frames(self):
        return self.logp.shape[0]

    @property
    def width(self):
        return self.logp.shape[1]


def _interleave_blanks(target):
    """[y1..yL] -> [0, y1, 0, y2, ..., yL, 0]."""
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def _check_target(target, width):
    target = list(target)
    for t in target:
        if not 1 <= t <= width - 1:
            raise ValueError(f"target id {t} outside lexical range 1..{width - 1}")
    return target


def _ctc_alphas(logp, ext):
    """Forward lattice, emissions included at every step; returns (T, S)."""
    t_len, s_len = logp.shape[0], len(ext)
    alphas = np.full((t_len, s_len), NEG_INF)
    alphas[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alphas[0, 1] = logp[0, ext[1]]
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    for t in range(1, t_len):
        prev = alphas[t - 1]
        step = np.full(s_len, NEG_INF)
        step[1:] = prev[:-1]
        acc = np.logaddexp(prev, step)
        skip = np.full(s_len, NEG_INF)
        skip[2:] = prev[:-2]
        acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        alphas[t] = acc + logp[t, ext]
    return alphas


def _ctc_betas(logp, ext):
    """Backward lattice, emissions included at every step."""
    t_len, s_len = logp.shape[0], len(ext)
    betas = np.full((t_len, s_len), NEG_INF)
    betas[-1, -1] = logp[-1, ext[-1]]
    if s_len > 1:
        betas[-1, -2] = logp[-1, ext[-2]]
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[:-2] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    for t in range(t_len - 2, -1, -1):
        nxt = betas[t + 1]
        step = np.full(s_len, NEG_INF)
        step[:-1] = nxt[1:]
        acc = np.logaddexp(nxt, step)
        skip = np.full(s_len, NEG_INF)
        skip[:-2] = nxt[2:]
        acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        betas[t] = acc + logp[t, ext]
    return betas


def _stream_logp(stream):
    return stream.logp if isinstance(stream, PosteriorStream) else np.asarray(stream, np.float64)


@dataclass
class CtcLossResult:
    value: float
    grad_logp: np.ndarray


def ctc_loss(stream, target) -> CtcLossResult:
    """Negative log probability of the target under all valid alignments,
    plus its gradient with respect to the log posteriors.

    Raises :class:`UnsatisfiableTargetError` when the blank-interleaved
    target cannot fit in the available frames (the loss would be +inf).
    """
    logp = _stream_logp(stream)
    target = _check_target(target, logp.shape[1])
    t_len = logp.shape[0]
    if 2 * len(target) + 1 > 2 * t_len + 1:
        raise UnsatisfiableTargetError(
            f"target of {len(target)} tokens cannot align in {t_len} frames"
        )
    ext = _interleave_blanks(target)
    alphas = _ctc_alphas(logp, ext)
    if len(ext) > 1:
        log_z = np.logaddexp(alphas[-1, -1], alphas[-1, -2])
    else:
        log_z = alphas[-1, -1]
    if not np.isfinite(log_z):
        raise UnsatisfiableTargetError(
            f"target of {len(target)} tokens has no valid alignment in {t_len} frames"
        )
    betas = _ctc_betas(logp, ext)
    # occ[t, s] = P(path passes state s at frame t) / p_t(label(s)), so
    # summing occ over states sharing a label gives -d(-log Z)/d logp.
    # Unreachable states (alpha or beta = -inf) contribute nothing; mask
    # them before the division to avoid -inf - -inf.
    dead = np.isneginf(alphas) | np.isneginf(betas)
    with np.errstate(invalid="ignore"):
        log_occ = alphas + betas - logp[:, ext] - log_z
    occ = np.where(dead, 0.0, np.exp(np.where(dead, NEG_INF, log_occ)))
    grad = np.zeros_like(logp)
    for s, k in enumerate(ext):
        grad[:, k] -= occ[:, s]
    return CtcLossResult(float(-log_z), grad)


def ctc_forward_score(stream, label_seq) -> float:
    """Negative log probability of a labeling; equals ``ctc_loss`` on the
    same pair but skips the gradient."""
    logp = _stream_logp(stream)
    label_seq = _check_target(label_seq, logp.shape[1])
    ext = _interleave_blanks(label_seq)
    if len(ext) > 2 * logp.shape[0] + 1:
        raise UnsatisfiableTargetError(
            f"labeling of {len(label_seq)} tokens cannot align in {logp.shape[0]} frames"
        )
    alphas = _ctc_alphas(logp, ext)
    if len(ext) > 1:
        log_z = np.logaddexp(alphas[-1, -1], alphas[-1, -2])
    else:
        log_z = alphas[-1, -1]
    if not np.isfinite(log_z):
        raise UnsatisfiableTargetError(
            f"labeling of {len(label_seq)} tokens has no valid alignment "
            f"in {logp.shape[0]} frames"
        )
    return float(-log_z)


def greedy_decode(stream, vocab: TokenVocab | None = None):
    """Per-frame argmax, collapse repeats, drop blanks. Ties break toward
    the lower class index. Returns token ids."""
    logp = _stream_logp(stream)
    best = np.argmax(logp, axis=1)
    out = []
    prev = -1
    for k in best:
        if k != prev and k != 0:
            out.append(int(k))
        prev = k
    return out


@dataclass
class NBestEntry:
    tokens: list
    words: list
    cost_per_system: dict
    combined_cost: float

    def to_json_dict(self):
        return {
            "tokens": list(self.tokens),
            "words": list(self.words),
            "costs": dict(self.cost_per_system),
            "combined": self.combined_cost,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            tokens=list(d["tokens"]),
            words=list(d["words"]),
            cost_per_system=dict(d["costs"]),
            combined_cost=float(d["combined"]),
        )


@dataclass
class NBestList:
    """Ranked hypotheses; every producer in the toolkit emits entries
    sorted ascending by the cost that ranked them."""

    utt_id: str
    entries: list = field(default_factory=list)

    def is_sorted(self):
        costs = [e.combined_cost for e in self.entries]
        return all(a <= b for a, b in zip(costs, costs[1:]))

    def to_json_dict(self):
        return {"utt_id": self.utt_id, "entries": [e.to_json_dict() for e in self.entries]}

    def to_json(self):
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, d):
        return cls(d["utt_id"], [NBestEntry.from_json_dict(e) for e in d["entries"]])

    @classmethod
    def from_json(cls, text):
        return cls.from_json_dict(json.loads(text))


def prefix_beam_nbest(stream, vocab: TokenVocab, beam: int, n: int, utt_id="",
                      system="ctc") -> NBestList:
    """Top-n labelings by total CTC probability via prefix beam search.

    Bookkeeping follows the usual blank / non-blank split per prefix;
    hypotheses are labelings (collapsed outputs), not alignments.
    """
    if not beam >= n >= 1:
        raise ValueError(f"need beam >= n >= 1, got beam={beam} n={n}")
    logp = _stream_logp(stream)
    t_len, width = logp.shape
    # prefix -> [log p ending in blank, log p ending in its last token]
    beams = {(): [0.0, NEG_INF]}
    for t in range(t_len):
        nxt = {}

        def bump(prefix, which, value):
            slot = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            slot[which] = np.logaddexp(slot[which], value)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, 0, total + logp[t, 0])
            if prefix:
                bump(prefix, 1, pnb + logp[t, prefix[-1]])
            for k in range(1, width):
                grown = prefix + (k,)
                if prefix and k == prefix[-1]:
                    bump(grown, 1, pb + logp[t, k])
                else:
                    bump(grown, 1, total + logp[t, k])
        ranked = sorted(
            nxt.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0])
        )
        beams = dict(ranked[:beam])
    final = sorted(
        ((prefix, np.logaddexp(pb, pnb)) for prefix, (pb, pnb) in beams.items()),
        key=lambda kv: (-kv[1], kv[0]),
    )
    entries = []
    for prefix, log_total in final[:n]:
        cost = float(-log_total)
        entries.append(
            NBestEntry(
                tokens=vocab.tokens_of(prefix),
                words=[],
                cost_per_system={system: cost},
                combined_cost=cost,
            )
        )
    return NBestList(utt_id, entries)
