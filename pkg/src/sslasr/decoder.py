"""Frame-level system combination and time-synchronous lexicon decoding.

Posterior interpolation happens in the probability domain (convex
combination of per-frame distributions); decoding runs max-Viterbi over
blank-interleaved word models, either scoring every lexicon word in
isolation or looping word models with an insertion penalty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .ctc import NEG_INF, NBestEntry, NBestList, PosteriorStream, TokenVocab


class DecodeError(ValueError):
    pass


@dataclass
class LexiconEntry:
    word: str
    tokens: tuple


@dataclass
class Lexicon:
    entries: list
    mode: str = "isolated"  # "isolated" | "word-loop"
    word_insertion_penalty: float = 0.0
    alphabet: tuple | None = None  # full ordered token set; defaults to the union of entries

    def __post_init__(self):
        if self.mode not in ("isolated", "word-loop"):
            raise ValueError(f"unknown lexicon mode {self.mode!r}")
        seen = set()
        used = []
        for e in self.entries:
            if not e.tokens:
                raise ValueError(f"word {e.word!r} has an empty token sequence")
            if e.word in seen:
                raise ValueError(f"duplicate word {e.word!r}")
            seen.add(e.word)
            used.extend(e.tokens)
        if self.alphabet is None:
            self.alphabet = tuple(sorted(set(used)))
        else:
            self.alphabet = tuple(self.alphabet)
            missing = set(used) - set(self.alphabet)
            if missing:
                raise ValueError(f"lexicon uses tokens outside the alphabet: {sorted(missing)}")

    def vocab(self) -> TokenVocab:
        return TokenVocab(self.alphabet)

    def tokens_of_words(self, words):
        by_word = {e.word: e.tokens for e in self.entries}
        out = []
        for w in words:
            if w not in by_word:
                raise KeyError(f"word {w!r} not in lexicon")
            out.extend(by_word[w])
        return out

    def to_json_dict(self):
        return {
            "mode": self.mode,
            "word_insertion_penalty": self.word_insertion_penalty,
            "alphabet": list(self.alphabet),
            "words": [{"word": e.word, "tokens": list(e.tokens)} for e in self.entries],
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            entries=[LexiconEntry(w["word"], tuple(w["tokens"])) for w in d["words"]],
            mode=d.get("mode", "isolated"),
            word_insertion_penalty=float(d.get("word_insertion_penalty", 0.0)),
            alphabet=tuple(d["alphabet"]) if "alphabet" in d else None,
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def parse_weight_ratio(text):
    """Parse the ratio syntax "a:b" or "a:b:c" into an array of floats."""
    parts = [p.strip() for p in str(text).split(":")]
    try:
        weights = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError:
        raise ValueError(f"cannot parse weight ratio {text!r}") from None
    return weights


def _check_weights(weights, n_streams):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n_streams,):
        raise ValueError(f"need one weight per stream ({n_streams}), got {weights.shape}")
    if (weights < 0).any():
        raise ValueError("combination weights must be nonnegative")
    if weights.sum() <= 0:
        raise ValueError("at least one combination weight must be positive")
    return weights


def interpolate_posteriors(streams, weights) -> PosteriorStream:
    """Frame-level linear interpolation of per-frame posteriors.

    Weights are normalized to sum to one, so any positive rescaling leaves
    the result unchanged; a single nonzero weight returns that stream's
    log posteriors bit-exactly.
    """
    streams = list(streams)
    if not streams:
        raise ValueError("need at least one stream")
    weights = _check_weights(weights, len(streams))
    shape = streams[0].logp.shape
    shift = streams[0].frame_shift_us
    for s in streams[1:]:
        if s.logp.shape != shape:
            raise ValueError(f"stream shape mismatch: {s.logp.shape} vs {shape}")
        if s.frame_shift_us != shift:
            raise ValueError(f"frame shift mismatch: {s.frame_shift_us} vs {shift}")
    label = "+".join(s.source for s in streams if s.source) or "joint"
    nonzero = np.flatnonzero(weights)
    if nonzero.size == 1:
        keep = streams[int(nonzero[0])]
        return PosteriorStream(keep.logp.copy(), shift, keep.source)
    w = weights / weights.sum()
    mix = np.zeros(shape)
    for wk, s in zip(w, streams):
        if wk > 0:
            mix += wk * np.exp(s.logp)
    with np.errstate(divide="ignore"):
        return PosteriorStream(np.log(mix), shift, label)


def _interleaved_states(token_ids):
    """Blank-interleaved state labels [0, y1, 0, y2, ..., yL, 0]."""
    ext = np.zeros(2 * len(token_ids) + 1, dtype=np.int64)
    ext[1::2] = token_ids
    return ext


def viterbi_align_cost(logp, token_ids):
    """Cost (negative max log probability) of the best monotone alignment
    of the blank-interleaved token sequence; -inf paths yield +inf cost."""
    ext = _interleaved_states(token_ids)
    t_len, s_len = logp.shape[0], len(ext)
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    v = np.full(s_len, NEG_INF)
    v[0] = logp[0, ext[0]]
    if s_len > 1:
        v[1] = logp[0, ext[1]]
    for t in range(1, t_len):
        step = np.full(s_len, NEG_INF)
        step[1:] = v[:-1]
        best = np.maximum(v, step)
        skip = np.full(s_len, NEG_INF)
        skip[2:] = v[:-2]
        best = np.where(skip_ok, np.maximum(best, skip), best)
        v = best + logp[t, ext]
    score = v[-1] if s_len == 1 else max(v[-1], v[-2])
    return float(-score)


def _resolve_tokens(lexicon, vocab):
    return [np.array(vocab.ids_of(e.tokens), dtype=np.int64) for e in lexicon.entries]


def viterbi_isolated(stream: PosteriorStream, lexicon: Lexicon, vocab: TokenVocab):
    """Best single lexicon word by alignment cost; ties go to the lowest
    lexicon index. Raises DecodeError when no word fits the frames."""
    if lexicon.mode != "isolated":
        raise ValueError("lexicon is not in isolated-word mode")
    logp = stream.logp
    best_word, best_cost = None, np.inf
    for entry, ids in zip(lexicon.entries, _resolve_tokens(lexicon, vocab)):
        cost = viterbi_align_cost(logp, ids)
        if cost < best_cost:
            best_word, best_cost = entry.word, cost
    if best_word is None or not np.isfinite(best_cost):
        raise DecodeError(
            f"no lexicon word alignable within {stream.n_frames} frames"
        )
    return best_word, best_cost


def isolated_nbest(stream: PosteriorStream, lexicon: Lexicon, vocab: TokenVocab,
                   n, utt_id="", system="am") -> NBestList:
    """Rank lexicon words by isolated alignment cost; infeasible words get
    +inf cost and sort last (kept so rescoring sees a fixed-size list)."""
    if lexicon.mode != "isolated":
        raise ValueError("lexicon is not in isolated-word mode")
    scored = []
    for rank, (entry, ids) in enumerate(zip(lexicon.entries, _resolve_tokens(lexicon, vocab))):
        cost = viterbi_align_cost(stream.logp, ids)
        scored.append((cost, rank, entry))
    scored.sort(key=lambda item: (item[0], item[1]))
    entries = [
        NBestEntry(
            tokens=list(entry.tokens),
            words=[entry.word],
            cost_per_system={system: cost},
            combined_cost=cost,
        )
        for cost, _, entry in scored[:n]
    ]
    return NBestList(utt_id, entries)


@dataclass
class _LoopState:
    emission: int  # class id whose log posterior this state consumes
    word_index: int | None  # set on word-entry states


def _build_loop(lexicon, token_lists):
    """States of the word-loop graph plus transition lists.

    Per word: token states with optional internal blank states between
    consecutive tokens, then one exit-blank state. A shared start-blank
    state models leading silence. Word entry (into a word's first token)
    pays the insertion penalty and emits the word.
    """
    states = [_LoopState(0, None)]  # 0: start blank, self-loop
    token_state = {}
    inner_blank = {}
    exit_state = {}
    for w, ids in enumerate(token_lists):
        for j, tok in enumerate(ids):
            token_state[(w, j)] = len(states)
            states.append(_LoopState(int(tok), w if j == 0 else None))
            if j + 1 < len(ids):
                inner_blank[(w, j)] = len(states)
                states.append(_LoopState(0, None))
        exit_state[w] = len(states)
        states.append(_LoopState(0, None))
    arcs = []  # (src, dst, enters_word)
    arcs.append((0, 0, False))
    word_entries = [token_state[(w, 0)] for w in range(len(token_lists))]
    for entry in word_entries:
        arcs.append((0, entry, True))
    for w, ids in enumerate(token_lists):
        last = len(ids) - 1
        for j in range(len(ids)):
            s = token_state[(w, j)]
            arcs.append((s, s, False))
            if j < last:
                nxt = token_state[(w, j + 1)]
                blank = inner_blank[(w, j)]
                arcs.append((s, blank, False))
                arcs.append((blank, blank, False))
                arcs.append((blank, nxt, False))
                if ids[j + 1] != ids[j]:
                    arcs.append((s, nxt, False))  # adjacent repeats need the blank
        tail = token_state[(w, last)]
        ex = exit_state[w]
        arcs.append((tail, ex, False))
        arcs.append((ex, ex, False))
        for w2, entry in enumerate(word_entries):
            arcs.append((tail, entry, True))
            arcs.append((ex, entry, True))
    finals = [0] + [token_state[(w, len(ids) - 1)] for w, ids in enumerate(token_lists)]
    finals += list(exit_state.values())
    entry_word = {token_state[(w, 0)]: w for w in range(len(token_lists))}
    return states, arcs, finals, entry_word, word_entries


def word_loop_decode(stream: PosteriorStream, lexicon: Lexicon, vocab: TokenVocab):
    """Viterbi over a loop of word models; each word entry adds the
    lexicon's insertion penalty. Returns (word sequence, cost); the empty
    sequence (pure silence path) is a valid hypothesis.
    """
    if lexicon.mode != "word-loop":
        raise ValueError("lexicon is not in word-loop mode")
    token_lists = _resolve_tokens(lexicon, vocab)
    states, arcs, finals, entry_word, word_entries = _build_loop(lexicon, token_lists)
    penalty = lexicon.word_insertion_penalty
    logp = stream.logp
    t_len, n_states = logp.shape[0], len(states)
    emission_ids = np.array([s.emission for s in states])
    score = np.full(n_states, NEG_INF)
    back = np.full((t_len, n_states), -1, dtype=np.int64)  # arc index taken into (t, dst)
    # frame 0: start blank or directly enter any word
    score[0] = logp[0, 0]
    for entry in word_entries:
        score[entry] = logp[0, states[entry].emission] - penalty
    for t in range(1, t_len):
        new = np.full(n_states, NEG_INF)
        for a, (src, dst, enters) in enumerate(arcs):
            if score[src] == NEG_INF:
                continue
            cand = score[src] - (penalty if enters else 0.0)
            if cand > new[dst]:
                new[dst] = cand
                back[t, dst] = a
        score = new + logp[t, emission_ids]
    best_state, best_score = -1, NEG_INF
    for s in finals:
        if score[s] > best_score:
            best_state, best_score = s, score[s]
    if best_state < 0 or not np.isfinite(best_score):
        raise DecodeError("no word sequence alignable in the stream")
    # walk arcs backwards, collecting word-entry events
    words_rev = []
    s = best_state
    for t in range(t_len - 1, 0, -1):
        a = back[t, s]
        src, dst, enters = arcs[a]
        if enters:
            words_rev.append(entry_word[dst])
        s = src
    if s in entry_word:
        words_rev.append(entry_word[s])
    words = [lexicon.entries[w].word for w in reversed(words_rev)]
    return words, float(-best_score)


@dataclass
class Hypothesis:
    utt_id: str
    words: list
    tokens: list
    cost: float

    def to_json_dict(self):
        return {"utt_id": self.utt_id, "words": self.words,
                "tokens": self.tokens, "cost": self.cost}


def decode_stream(stream, lexicon, vocab, utt_id="") -> Hypothesis:
    """Decode one stream under the lexicon's mode."""
    if lexicon.mode == "isolated":
        word, cost = viterbi_isolated(stream, lexicon, vocab)
        entry = next(e for e in lexicon.entries if e.word == word)
        return Hypothesis(utt_id, [word], list(entry.tokens), cost)
    words, cost = word_loop_decode(stream, lexicon, vocab)
    tokens = [tok for w in words for tok in
              next(e for e in lexicon.entries if e.word == w).tokens]
    return Hypothesis(utt_id, words, tokens, cost)


def joint_decode(streams, weights, lexicon, vocab, utt_id="") -> Hypothesis:
    """Interpolate the systems' posteriors, then run one decoding pass."""
    mixed = interpolate_posteriors(streams, weights)
    return decode_stream(mixed, lexicon, vocab, utt_id)
