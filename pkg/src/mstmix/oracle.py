"""Independent brute-force references used by the tests.

Everything here is deliberately naive: scalar loops, explicit sorts, dense
power iteration. None of it shares code with the main implementations, so
agreement between the two is meaningful. Do not "optimize" these by calling
into the modules they check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    case_id: str
    reference: float
    value: float
    abs_dev: float
    rel_dev: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.abs_dev <= self.threshold

    def as_dict(self) -> dict:
        return {
            "case": self.case_id,
            "reference": self.reference,
            "value": self.value,
            "abs_dev": self.abs_dev,
            "rel_dev": self.rel_dev,
            "threshold": self.threshold,
            "pass": self.passed,
        }


def _two_class_log_probs(s: float) -> tuple[float, float]:
    # log-softmax of the pair (0, s), done with scalar math
    m = max(0.0, s)
    lse = m + math.log(math.exp(0.0 - m) + math.exp(s - m))
    return (0.0 - lse, s - lse)


def elbo_reference(aq: np.ndarray, ap: np.ndarray) -> float:
    """Mean per-edge two-class KL(q||p), scaled by 1/(2 n^2).

    Each raw score s becomes the two-logit vector (0, s); q is the softmax of
    the aq pair, p of the ap pair. The result is the sum over edges of
    KL(q_e || p_e), divided by the total element count 2*n^2.
    """
    fq = np.asarray(aq, dtype=np.float64).reshape(-1)
    fp = np.asarray(ap, dtype=np.float64).reshape(-1)
    assert fq.shape == fp.shape
    total = 0.0
    for sq, sp in zip(fq.tolist(), fp.tolist()):
        lq0, lq1 = _two_class_log_probs(sq)
        lp0, lp1 = _two_class_log_probs(sp)
        q0, q1 = math.exp(lq0), math.exp(lq1)
        total += q0 * (lq0 - lp0) + q1 * (lq1 - lp1)
    return total / (2.0 * fq.size)


def cosine_reference(u, v) -> float:
    du = dv = dot = 0.0
    for a, b in zip(u, v):
        du += a * a
        dv += b * b
        dot += a * b
    if du == 0.0 or dv == 0.0:
        return 0.0
    return dot / (math.sqrt(du) * math.sqrt(dv))


def knn_reference(x: np.ndarray, k: int) -> np.ndarray:
    """Exhaustive kNN graph by cosine similarity, ties to the smaller index."""
    n = x.shape[0]
    adj = np.zeros((n, n))
    for i in range(n):
        sims = []
        for j in range(n):
            if j == i:
                continue
            sims.append((-cosine_reference(x[i], x[j]), j))
        sims.sort()
        for _, j in sims[:k]:
            adj[i, j] = 1.0
    return np.logical_or(adj, adj.T).astype(np.float64)


def topk_reference(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties to the smaller index, sorted."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:k])


def appnp_reference(x, a, w, b, alpha: float, steps: int) -> np.ndarray:
    """Dense power-iteration propagation with explicit scalar loops."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    d_out = np.asarray(w).shape[1]
    h0 = np.empty((n, d_out))
    for i in range(n):
        for j in range(d_out):
            acc = b[j] if b is not None else 0.0
            for t in range(x.shape[1]):
                acc += x[i, t] * w[t, j]
            h0[i, j] = acc
    ahat = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            v = a[i, j] if a[i, j] > 0 else 0.0
            if i == j:
                v += 1.0
            ahat[i, j] = v
    deg = [sum(ahat[i, j] for j in range(n)) for i in range(n)]
    anorm = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            anorm[i, j] = ahat[i, j] / (math.sqrt(deg[i]) * math.sqrt(deg[j]))
    z = h0.copy()
    for _ in range(steps):
        z = (1.0 - alpha) * (anorm @ z) + alpha * h0
    return z


def nll_reference(logits: np.ndarray, targets, pad_id: int) -> float:
    """Mean token negative log-likelihood over non-pad positions, scalar math."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[None]
        targets = np.asarray(targets)[None]
    targets = np.asarray(targets)
    total, count = 0.0, 0
    for bi in range(logits.shape[0]):
        for t in range(logits.shape[1]):
            tok = int(targets[bi, t])
            if tok == pad_id:
                continue
            row = logits[bi, t].tolist()
            m = max(row)
            lse = m + math.log(sum(math.exp(v - m) for v in row))
            total += lse - row[tok]
            count += 1
    if count == 0:
        raise ValueError("no non-pad targets")
    return total / count


def ppl_reference(logits, targets, pad_id: int) -> float:
    return math.exp(nll_reference(logits, targets, pad_id))


# ---------------------------------------------------------------------------
# seeded cross-check suite
# ---------------------------------------------------------------------------

STRUCTURAL_TOL = 1e-12
NUMERIC_TOL = 1e-10


def brute_force_suite(seed: int = 0) -> list[OracleReport]:
    """Run the seeded oracle cross-checks against the main implementations."""
    from . import gsl_local, losses, tracker
    from .numeric import Tensor

    reports: list[OracleReport] = []
    rng = np.random.default_rng(seed)

    # kNN graphs: 50 cases at the default K=10, k=4
    for c in range(50):
        x = rng.normal(size=(10, 8))
        got = gsl_local.knn_init_graph(x, 4)
        want = knn_reference(x, 4)
        dev = float(np.abs(got - want).max())
        reports.append(OracleReport(f"knn/{c}", 0.0, dev, dev, dev, STRUCTURAL_TOL))

    # top-K selection with injected ties
    for c in range(50):
        scores = rng.integers(0, 5, size=12).astype(np.float64) / 4.0
        got = tracker.topk_indices(scores, 4)
        want = topk_reference(scores, 4)
        dev = 0.0 if list(got) == list(want) else 1.0
        reports.append(OracleReport(f"topk/{c}", 0.0, dev, dev, dev, STRUCTURAL_TOL))

    # APPNP propagation on small dense graphs
    for c in range(20):
        n = int(rng.integers(2, 13))
        x = rng.normal(size=(n, 5))
        a = rng.normal(size=(n, n))
        a = (a + a.T) / 2.0
        w = rng.normal(size=(5, 6))
        b = rng.normal(size=6)
        got = gsl_local.appnp_propagate(
            Tensor(x), Tensor(a), Tensor(w), Tensor(b), 0.1, 2
        ).data
        want = appnp_reference(x, a, w, b, 0.1, 2)
        dev = float(np.abs(got - want).max())
        reports.append(OracleReport(f"appnp/{c}", 0.0, dev, dev, dev, NUMERIC_TOL))

    # ELBO and cross-entropy scalars
    for c in range(20):
        n = int(rng.integers(1, 7))
        aq = rng.normal(size=(n, n))
        ap = rng.normal(size=(n, n))
        got = losses.elbo_loss(Tensor(aq), Tensor(ap)).item()
        want = elbo_reference(aq, ap)
        dev = abs(got - want)
        reports.append(OracleReport(f"elbo/{c}", want, got, dev, dev / max(abs(want), 1e-12), NUMERIC_TOL))
    for c in range(10):
        logits = rng.normal(size=(3, 5, 9))
        targets = rng.integers(0, 9, size=(3, 5))
        targets[0, -1] = 0
        got = losses.generation_loss(Tensor(logits), targets, pad_id=0).item()
        want = nll_reference(logits, targets, 0)
        dev = abs(got - want)
        reports.append(OracleReport(f"nll/{c}", want, got, dev, dev / max(abs(want), 1e-12), NUMERIC_TOL))

    return reports
