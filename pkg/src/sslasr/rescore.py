"""Cross-system multi-pass decoding: add second-pass CTC scores to a
first-pass N-best list and re-rank by the interpolated entry costs."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .ctc import (
    NBestEntry,
    NBestList,
    PosteriorStream,
    TokenVocab,
    UnsatisfiableTargetError,
    ctc_forward_score,
)


class RescoreError(ValueError):
    pass


def score_nbest_with_ssl(nbest: NBestList, ssl_stream: PosteriorStream,
                         vocab: TokenVocab, system="w2v") -> NBestList:
    """Attach a CTC forward score for every entry's token sequence.

    Entries whose token sequence cannot be aligned in the stream get +inf
    cost and stay in the list.
    """
    entries = []
    for entry in nbest.entries:
        ids = vocab.ids_of(entry.tokens)
        try:
            cost = ctc_forward_score(ssl_stream, ids)
        except UnsatisfiableTargetError:
            cost = float("inf")
        costs = dict(entry.cost_per_system)
        costs[system] = cost
        entries.append(replace(entry, cost_per_system=costs))
    return NBestList(nbest.utt_id, entries)


def _weighted(weight, cost):
    # a zero weight annihilates even an infinite cost, so degenerate
    # weights reduce exactly to the other system's ranking
    return 0.0 if weight == 0.0 else weight * cost


def rescore(nbest: NBestList, alpha, beta, second_system="w2v",
            first_system=None):
    """Re-rank by combined cost alpha * second + beta * first.

    ``first_system`` defaults to the only non-second cost key when that is
    unambiguous. Ties keep the lower original rank. Returns (best entry,
    rescored list sorted by combined cost).
    """
    if not nbest.entries:
        raise RescoreError("cannot rescore an empty n-best list")
    if first_system is None:
        keys = {k for e in nbest.entries for k in e.cost_per_system} - {second_system}
        if len(keys) != 1:
            raise RescoreError(
                f"ambiguous first-pass system, candidates {sorted(keys)}; pass first_system"
            )
        first_system = keys.pop()
    rescored = []
    for rank, entry in enumerate(nbest.entries):
        try:
            s_second = entry.cost_per_system[second_system]
            s_first = entry.cost_per_system[first_system]
        except KeyError as missing:
            raise RescoreError(
                f"entry {rank} of {nbest.utt_id!r} lacks a {missing} cost"
            ) from None
        combined = _weighted(alpha, s_second) + _weighted(beta, s_first)
        rescored.append((combined, rank, entry))
    rescored.sort(key=lambda item: (item[0], item[1]))
    entries = [replace(e, combined_cost=c) for c, _, e in rescored]
    out = NBestList(nbest.utt_id, entries)
    return entries[0], out
