"""Mixing stage I (divide): per-modality latent graph learning.

For every tracked modality i the stage builds a binary kNN prior over its K
selected rows, then runs two streams of edge estimation under every
conditioning modality j's weight bank:

  upper   A'[i,j] = weighted-cosine edges of X_i, then Z'[i,j] by propagation
  lower   Z''[i,j] by propagation over the kNN prior, then A''[i,j] from the
          concatenated [Z', Z''] features

and combines them as  A_i = 1/2 * knn_i + 1/2 * sum_j (1/N)(A' + A'').
The j-aggregated means of the two streams feed the agreement loss.

Conditioning is realized by per-(i, j) parameter stacks: bank blocks have
shape (N, M, width) and transform blocks (N, d, d), addressed by the
modality's position in the full config list. With multi-modal conditioning
off, only the j = i slice is consumed, which reduces the combination to
A_i = 1/2 * knn_i + 1/2 * (A'_i + A''_i) bit-exactly.

`mix_local` is the single-sample reference path; `mix_local_batch` is the
vectorized path the encoder actually runs, batched over samples and
modalities at once. The two are held together by equivalence tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nx
from .errors import ParameterError, ShapeError
from .numeric import ParamStore, Tensor, _unbroadcast


def knn_init_graph(x: np.ndarray, k: int) -> np.ndarray:
    """Binary kNN adjacency by cosine similarity, OR-symmetrized, zero diag.

    Pure index construction on raw values: no gradient is defined. Ties pick
    the smaller index; zero-norm rows have similarity 0 to everything.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"knn k={k} must satisfy 1 <= k < {n}")
    norms = np.sqrt((x * x).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    xn = x / safe[:, None]
    sims = xn @ xn.T
    adj = np.zeros((n, n))
    pos = np.arange(n)
    for i in range(n):
        order = np.lexsort((pos, -sims[i]))
        order = order[order != i][:k]
        adj[i, order] = 1.0
    return np.logical_or(adj, adj.T).astype(np.float64)


def banked_edges(x: Tensor, banks: Tensor) -> Tensor:
    """Bank-averaged weighted-cosine edge scores.

    x: (..., n, w); banks: (..., M, w); leading dims broadcast against each
    other. Returns (..., n, n) where each entry averages, over the M bank
    vectors, the cosine of the elementwise-weighted rows. Zero-norm weighted
    rows contribute similarity 0.

    Implemented as one fused node: the weighted rows y = x * w_m are the only
    large intermediate, and the backward reuses the cached Gram matrices
    instead of replaying the normalization chain.
    """
    n, w = x.shape[-2], x.shape[-1]
    m = banks.shape[-2]
    xe = x.data.reshape(x.shape[:-2] + (1, n, w))
    be = banks.data.reshape(banks.shape[:-2] + (m, 1, w))
    y = xe * be                                   # (..., M, n, w)
    nmat = y @ np.swapaxes(y, -1, -2)             # (..., M, n, n) Gram
    diag = np.diagonal(nmat, axis1=-2, axis2=-1)  # (..., M, n)
    p = np.where(diag > 1e-300, 1.0 / np.sqrt(np.maximum(diag, 1e-300)), 0.0)
    s = nmat * p[..., :, None] * p[..., None, :]
    out = s.sum(axis=-3) / m

    def bw(g):
        gm = g / m
        gsym = gm + np.swapaxes(gm, -1, -2)
        dn = gm[..., None, :, :] * (p[..., :, None] * p[..., None, :])
        dp = ((gsym[..., None, :, :] * nmat) @ p[..., :, None])[..., 0]
        ddiag = dp * (-0.5) * p ** 3
        r = np.arange(n)
        dn = dn + 0.0                              # broadcast to full (..., M, n, n)
        dn[..., r, r] += ddiag
        gy = (dn + np.swapaxes(dn, -1, -2)) @ y    # (..., M, n, w)
        gx = _unbroadcast((gy * be).sum(axis=-3), x.shape) if x.requires else None
        gb = _unbroadcast((gy * xe).sum(axis=-2), banks.shape) if banks.requires else None
        return (gx, gb)

    return Tensor(out, (x, banks), bw)


def estimate_edges(x: Tensor, bank: Tensor) -> Tensor:
    """Latent adjacency from one weight bank: (1/M) sum_k cos(w_k*x_m, w_k*x_n)."""
    if bank.ndim != 2:
        raise ShapeError("bank must be (M, width)")
    if x.shape[-1] != bank.shape[-1]:
        raise ShapeError(
            f"feature width {x.shape[-1]} does not match bank width {bank.shape[-1]}"
        )
    return banked_edges(x, bank)


def appnp_propagate(
    x: Tensor, a: Tensor, w: Tensor, b: Tensor | None, alpha: float, steps: int
) -> Tensor:
    """Predict-then-propagate: affine transform followed by teleported smoothing.

    The adjacency is clamped to non-negative, given self-loops, and
    symmetrically normalized; isolated nodes end up with self-loop weight 1.
    Broadcasts over leading batch axes of `x`/`a`/`w`.
    """
    if not 0.0 < alpha <= 1.0:
        raise ParameterError("alpha must lie in (0, 1]")
    if steps < 0:
        raise ParameterError("steps must be >= 0")
    h0 = x @ w
    if b is not None:
        h0 = h0 + b
    n = a.shape[-1]
    ahat = a.relu() + nx.const(np.eye(n))
    deg = ahat.sum(axis=-1, keepdims=True)
    dinv = 1.0 / deg.sqrt()
    anorm = ahat * dinv * dinv.swapaxes(-1, -2)
    z = h0
    for _ in range(steps):
        z = (anorm @ z) * (1.0 - alpha) + h0 * alpha
    return z


def sym_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Symmetrized uniform [0,1] draw used by the random-graph ablation."""
    u = rng.uniform(0.0, 1.0, size=shape)
    return (u + np.swapaxes(u, -1, -2)) / 2.0


# ---------------------------------------------------------------------------
# single-sample reference path
# ---------------------------------------------------------------------------


@dataclass
class LocalGraphs:
    """Everything stage I produced for one modality."""

    a_init: Tensor            # (K, K) binary kNN prior, constant
    a_prime: Tensor | None    # (J, K, K) upper-stream graphs per conditioning j
    a_dprime: Tensor | None   # (J, K, K) lower-stream graphs per conditioning j
    aq: Tensor | None         # (K, K) j-averaged upper graphs
    ap: Tensor | None         # (K, K) j-averaged lower graphs
    a: Tensor                 # (K, K) combined latent graph
    z_refined: Tensor | None  # (K, d) j-averaged stream features, for study


@dataclass
class LocalMix:
    graphs: dict[str, LocalGraphs]
    elbos: dict[str, Tensor]


def mix_local(selection, store: ParamStore, cfg, tag: str, rng) -> LocalMix:
    """Run stage I for every tracked modality of one sample.

    `tag` prefixes the parameter block names of this mixer instance; `rng`
    feeds the random-graph ablation and is consumed only when that flag is
    on.
    """
    from .losses import elbo_loss

    names = selection.names
    full_idx = {m: i for i, m in enumerate(cfg.modality_names())}
    active_rows = np.asarray([full_idx[m] for m in names])

    graphs: dict[str, LocalGraphs] = {}
    elbos: dict[str, Tensor] = {}
    for name in names:
        xi = selection.x[name]
        k = xi.shape[0]
        a_init = nx.const(knn_init_graph(xi.data, cfg.knn_k))

        if cfg.knn_only:
            graphs[name] = LocalGraphs(a_init, None, None, None, None, a_init, None)
            continue

        rows = active_rows if cfg.mmc else np.asarray([full_idx[name]])
        j = len(rows)
        if cfg.random_graphs:
            a_prime = nx.const(sym_uniform(rng, (j, k, k)))
        else:
            bank1 = nx.gather_rows(store.leaf(f"{tag}.loc.{name}.bank1"), rows)
            a_prime = banked_edges(xi, bank1)
        t1w = nx.gather_rows(store.leaf(f"{tag}.loc.{name}.t1w"), rows)
        t1b = nx.gather_rows(store.leaf(f"{tag}.loc.{name}.t1b"), rows)
        t2w = nx.gather_rows(store.leaf(f"{tag}.loc.{name}.t2w"), rows)
        t2b = nx.gather_rows(store.leaf(f"{tag}.loc.{name}.t2b"), rows)
        z_prime = appnp_propagate(xi, a_prime, t1w, t1b, cfg.appnp_alpha, cfg.appnp_steps)
        z_dprime = appnp_propagate(xi, a_init, t2w, t2b, cfg.appnp_alpha, cfg.appnp_steps)
        if cfg.random_graphs:
            a_dprime = nx.const(sym_uniform(rng, (j, k, k)))
        else:
            bank2 = nx.gather_rows(store.leaf(f"{tag}.loc.{name}.bank2"), rows)
            a_dprime = banked_edges(nx.concat([z_prime, z_dprime], axis=-1), bank2)

        aq = a_prime.mean(axis=0)
        ap = a_dprime.mean(axis=0)
        vi_term = aq + ap                      # == sum_j (1/N)(A' + A'')
        if cfg.ib:
            a_comb = a_init * 0.5 + vi_term * 0.5
        else:
            a_comb = vi_term
        z_ref = ((z_prime + z_dprime) * 0.5).mean(axis=0)
        graphs[name] = LocalGraphs(a_init, a_prime, a_dprime, aq, ap, a_comb, z_ref)
        if cfg.local_elbo:
            elbos[name] = elbo_loss(ap, aq) if cfg.qp_swap else elbo_loss(aq, ap)
    return LocalMix(graphs, elbos)


# ---------------------------------------------------------------------------
# batched fast path
# ---------------------------------------------------------------------------


@dataclass
class LocalMixBatch:
    """Stage-I products for a whole batch, modality axis second."""

    names: list[str]
    a_init: Tensor            # (B, N, K, K) constant priors
    a_prime: Tensor | None    # (B, N, J, K, K)
    a_dprime: Tensor | None   # (B, N, J, K, K)
    aq: Tensor | None         # (B, N, K, K)
    ap: Tensor | None         # (B, N, K, K)
    a: Tensor                 # (B, N, K, K)
    z_refined: Tensor | None  # (B, N, K, d)
    elbo_vec: Tensor | None   # (N,) per-modality agreement values


def _stack_local_params(store, tag, names, rows, suffix) -> Tensor:
    parts = []
    for name in names:
        blk = nx.gather_rows(store.leaf(f"{tag}.loc.{name}.{suffix}"), rows)
        parts.append(blk.reshape((1,) + blk.shape))
    return nx.concat(parts, axis=0)    # (N, J, ...)


def mix_local_batch(x: Tensor, store: ParamStore, cfg, tag: str, rng, names) -> LocalMixBatch:
    """Vectorized stage I over a (B, N, K, d) stack of tracked features."""
    from .losses import elbo_vector

    b, n, k, d = x.shape
    full_idx = {m: i for i, m in enumerate(cfg.modality_names())}
    active_rows = np.asarray([full_idx[m] for m in names])

    knn = np.empty((b, n, k, k))
    for bi in range(b):
        for i in range(n):
            knn[bi, i] = knn_init_graph(x.data[bi, i], cfg.knn_k)
    a_init = nx.const(knn)

    if cfg.knn_only:
        return LocalMixBatch(list(names), a_init, None, None, None, None, a_init, None, None)

    if cfg.mmc:
        stacks = {
            s: _stack_local_params(store, tag, names, active_rows, s)
            for s in ("bank1", "bank2", "t1w", "t1b", "t2w", "t2b")
        }
        j = n
    else:
        stacks = {
            s: nx.concat(
                [
                    nx.gather_rows(store.leaf(f"{tag}.loc.{m}.{s}"), [full_idx[m]])
                    .reshape((1, 1) + store.leaf(f"{tag}.loc.{m}.{s}").shape[1:])
                    for m in names
                ],
                axis=0,
            )
            for s in ("bank1", "bank2", "t1w", "t1b", "t2w", "t2b")
        }
        j = 1

    xj = x.reshape((b, n, 1, k, d))
    if cfg.random_graphs:
        a_prime = nx.const(sym_uniform(rng, (b, n, j, k, k)))
    else:
        a_prime = banked_edges(xj, stacks["bank1"])           # (B, N, J, K, K)
    z_prime = appnp_propagate(
        xj, a_prime, stacks["t1w"], stacks["t1b"], cfg.appnp_alpha, cfg.appnp_steps
    )
    z_dprime = appnp_propagate(
        xj, a_init.reshape((b, n, 1, k, k)), stacks["t2w"], stacks["t2b"],
        cfg.appnp_alpha, cfg.appnp_steps,
    )
    if cfg.random_graphs:
        a_dprime = nx.const(sym_uniform(rng, (b, n, j, k, k)))
    else:
        a_dprime = banked_edges(nx.concat([z_prime, z_dprime], axis=-1), stacks["bank2"])

    aq = a_prime.mean(axis=2)
    ap = a_dprime.mean(axis=2)
    vi_term = aq + ap
    a_comb = a_init * 0.5 + vi_term * 0.5 if cfg.ib else vi_term
    z_ref = ((z_prime + z_dprime) * 0.5).mean(axis=2)

    elbo_vec = None
    if cfg.local_elbo:
        elbo_vec = elbo_vector(ap, aq) if cfg.qp_swap else elbo_vector(aq, ap)
    return LocalMixBatch(list(names), a_init, a_prime, a_dprime, aq, ap, a_comb, z_ref, elbo_vec)
