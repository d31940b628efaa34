"""Training objectives: the two-stream graph agreement loss, the generative
loss, and their weighted combination.

The graph agreement term follows the two-value-probability construction:
every raw edge score s is paired with a zero logit to form (0, s), both
prediction matrices go through a log-softmax over those pairs, and the
returned scalar is mean(log_q * q) - mean(log_p * q) over all elements.
That equals the per-edge binary KL(q||p) summed over edges and divided by
2*n^2, so it is non-negative and vanishes iff the two matrices agree.

Minimizing the combined objective with elbo_sign=+1 subtracts this KL-like
quantity (the literal combination rule); elbo_sign=-1 adds it instead.
Neither convention is asserted as "the" right one here - the sign is a
config knob and the default is +1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nx
from .errors import EmptyEvaluationError, InvalidInputError, ShapeError
from .numeric import Tensor


def _paired_log_softmax(a: Tensor, lead: tuple[int, ...] = ()) -> Tensor:
    size = a.size if not lead else int(np.prod(a.shape[len(lead):]))
    flat = a.reshape(lead + (size, 1))
    zeros = nx.const(np.zeros(lead + (size, 1)))
    return nx.log_softmax(nx.concat([zeros, flat], axis=-1))


def elbo_loss(aq: Tensor, ap: Tensor) -> Tensor:
    """Two-stream agreement loss between the q-side and p-side edge scores."""
    if aq.shape != ap.shape:
        raise ShapeError(f"shape mismatch: {aq.shape} vs {ap.shape}")
    if not (np.all(np.isfinite(aq.data)) and np.all(np.isfinite(ap.data))):
        raise InvalidInputError("elbo_loss inputs must be finite")
    log_q = _paired_log_softmax(aq)
    log_p = _paired_log_softmax(ap)
    q_dist = log_q.exp()
    return (log_q * q_dist).mean() - (log_p * q_dist).mean()


def elbo_vector(aq: Tensor, ap: Tensor) -> Tensor:
    """Per-modality agreement values for (B, N, n, n) score stacks.

    Entry i equals elbo_loss applied to the batch of modality i's matrices
    (means taken over all B * 2n^2 elements at once).
    """
    if aq.shape != ap.shape or aq.ndim != 4:
        raise ShapeError(f"expected matching (B, N, n, n) stacks, got {aq.shape} and {ap.shape}")
    if not (np.all(np.isfinite(aq.data)) and np.all(np.isfinite(ap.data))):
        raise InvalidInputError("elbo_vector inputs must be finite")
    b, n_mod = aq.shape[0], aq.shape[1]
    log_q = _paired_log_softmax(aq, (b, n_mod))
    log_p = _paired_log_softmax(ap, (b, n_mod))
    q_dist = log_q.exp()
    per = lambda t: t.transpose((1, 0, 2, 3)).reshape((n_mod, -1)).mean(axis=1)
    return per(log_q * q_dist) - per(log_p * q_dist)


def sequence_nll(logits: Tensor, targets, pad_id: int) -> tuple[Tensor, int]:
    """Summed token NLL and the count of non-pad positions.

    Accepts (T, V) or (B, T, V) logits with matching integer targets.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    mask = targets != pad_id
    count = int(mask.sum())
    if count == 0:
        raise EmptyEvaluationError("all target positions are padding")
    lsm = nx.log_softmax(logits)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], mask[..., None].astype(np.float64), axis=-1)
    return -(lsm * nx.const(onehot)).sum(), count


def generation_loss(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean cross-entropy over non-pad target positions."""
    total, count = sequence_nll(logits, targets, pad_id)
    return total * (1.0 / count)


@dataclass
class LossBreakdown:
    """All the pieces of one optimization objective.

    `l_local` is a (N,) tensor of per-modality agreement values (already
    averaged across mixer instances); `l_global` a scalar tensor. Either may
    be absent when the corresponding term is ablated or no mixer ran.
    """

    l_gen: Tensor
    l_local: Tensor | None = None
    l_global: Tensor | None = None
    alpha1: float = 1.0
    alpha2: float = 100.0
    alpha3: float = 100.0
    elbo_sign: int = 1
    total: Tensor | None = None

    def elbo_combo(self) -> Tensor | None:
        """alpha2 * mean_i(local_i) + alpha3 * global, before the sign."""
        terms = []
        if self.l_local is not None:
            terms.append(self.l_local.mean() * self.alpha2)
        if self.l_global is not None:
            terms.append(self.l_global * self.alpha3)
        if not terms:
            return None
        combo = terms[0]
        for t in terms[1:]:
            combo = combo + t
        return combo

    def scalars(self) -> dict:
        return {
            "l_gen": self.l_gen.item(),
            "l_local": None if self.l_local is None else [float(v) for v in self.l_local.data.reshape(-1)],
            "l_global": None if self.l_global is None else self.l_global.item(),
            "total": None if self.total is None else self.total.item(),
        }


def total_loss(parts: LossBreakdown) -> Tensor:
    """Weighted combination of the generative and graph agreement terms."""
    total = parts.l_gen * parts.alpha1
    combo = parts.elbo_combo()
    if combo is not None:
        total = total - combo * float(parts.elbo_sign)
    parts.total = total
    return total
