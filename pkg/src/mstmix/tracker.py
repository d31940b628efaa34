"""Per-modality constituent tracking.

Each modality carries a state token whose attention row says which of the
modality's tokens currently matter. The tracker averages that row across
heads, restricts it to the modality's own span (the state token itself is
never a candidate), and keeps the K highest-scoring positions. Selection is
an index operation: gradients flow through the gathered hidden rows only,
never through the attention scores used for ranking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nx
from .errors import InsufficientTokensError
from .numeric import Tensor


@dataclass
class TrackedSelection:
    """K tracked rows per modality plus their absolute sequence positions."""

    names: list[str]
    x: dict[str, Tensor]          # name -> (K, d) rows gathered from the hidden state
    idx: dict[str, np.ndarray]    # name -> K strictly increasing absolute positions

    @property
    def k(self) -> int:
        return next(iter(self.x.values())).shape[0]

    def stacked_idx(self) -> np.ndarray:
        return np.concatenate([self.idx[n] for n in self.names])


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest scores; ties favor the smaller position.

    Returned sorted ascending.
    """
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:k])


def span_topk_indices(avg_attn: np.ndarray, spans, k: int) -> np.ndarray:
    """Absolute top-k positions per modality span, as an (N, k) matrix.

    `avg_attn` is the head-averaged (seq, seq) attention map of one sample.
    """
    rows = []
    for sp in spans:
        span_len = sp.end - sp.start
        if span_len < k:
            raise InsufficientTokensError(
                f"modality {sp.name!r} has {span_len} tokens, tracker needs {k}"
            )
        scores = avg_attn[sp.state_pos, sp.start:sp.end]
        rows.append(topk_indices(scores, k) + sp.start)
    return np.stack(rows)


def select_topk(hidden: Tensor, attn: np.ndarray, spans, k: int) -> TrackedSelection:
    """Track the k most state-relevant tokens of every modality span.

    `attn` is the (heads, seq, seq) attention map of the encoder layer the
    hidden state came from; `spans` is an iterable of entries with `name`,
    `state_pos`, `start`, `end` fields.
    """
    avg = attn.mean(axis=0)
    names, xs, idxs = [], {}, {}
    for sp in spans:
        span_len = sp.end - sp.start
        if span_len < k:
            raise InsufficientTokensError(
                f"modality {sp.name!r} has {span_len} tokens, tracker needs {k}"
            )
        scores = avg[sp.state_pos, sp.start:sp.end]
        local = topk_indices(scores, k)
        idx = local + sp.start
        names.append(sp.name)
        idxs[sp.name] = idx
        xs[sp.name] = nx.gather_rows(hidden, idx)
    return TrackedSelection(names, xs, idxs)
