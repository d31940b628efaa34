"""Mixing stage II (conquer): one graph over the mix of all modalities.

The stage stacks the tracked rows of every modality into an NK x d node
matrix, seeds the global structure with the block-diagonal of the stage-I
latent graphs, refines structure and features with the same two-stream
scheme, and writes the fused rows back into the backbone hidden state at
their original positions, blended by lambda. State-token rows are refreshed
from the per-modality means of the fused features with the same blend.

Single-sample functions mirror the stage-I reference path; the `_batch`
variants carry a leading sample axis and are what the encoder runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nx
from .errors import ShapeError
from .gsl_local import appnp_propagate, banked_edges, estimate_edges, sym_uniform
from .numeric import ParamStore, Tensor


@dataclass
class GlobalMix:
    """Stage-II products for one mixer instance."""

    a_init: Tensor            # (..., NK, NK) block-diagonal seed
    a_prime: Tensor | None    # (..., NK, NK) upper-stream graph
    a_dprime: Tensor | None   # (..., NK, NK) lower-stream graph
    a: Tensor                 # (..., NK, NK) combined graph, diagnostics only
    z: Tensor                 # (..., NK, d) fused node features
    idx: np.ndarray           # absolute positions of the rows in the sequence


def build_global_init(local_graphs) -> Tensor:
    """Block-diagonal seed graph from the per-modality latent graphs."""
    blocks = list(local_graphs)
    k = blocks[0].shape[0]
    for b in blocks:
        if b.shape != (k, k):
            raise ShapeError(f"inconsistent block shapes: {b.shape} vs {(k, k)}")
    return nx.block_diag(blocks)


def _two_streams(xg, a_init, store, cfg, tag, rng, rand_shape):
    """Shared stage-II stream plumbing for both the single and batch paths."""
    t1w = store.leaf(f"{tag}.glob.t1w")
    t1b = store.leaf(f"{tag}.glob.t1b")
    t2w = store.leaf(f"{tag}.glob.t2w")
    t2b = store.leaf(f"{tag}.glob.t2b")

    if cfg.knn_only:
        z_prime = appnp_propagate(xg, a_init, t1w, t1b, cfg.appnp_alpha, cfg.appnp_steps)
        z_dprime = appnp_propagate(xg, a_init, t2w, t2b, cfg.appnp_alpha, cfg.appnp_steps)
        return None, None, (z_prime + z_dprime) * 0.5

    if cfg.random_graphs:
        a_prime = nx.const(sym_uniform(rng, rand_shape))
    else:
        a_prime = banked_edges(xg, store.leaf(f"{tag}.glob.bank1"))
    z_prime = appnp_propagate(xg, a_prime, t1w, t1b, cfg.appnp_alpha, cfg.appnp_steps)
    z_dprime = appnp_propagate(xg, a_init, t2w, t2b, cfg.appnp_alpha, cfg.appnp_steps)
    if cfg.random_graphs:
        a_dprime = nx.const(sym_uniform(rng, rand_shape))
    else:
        a_dprime = banked_edges(
            nx.concat([z_prime, z_dprime], axis=-1), store.leaf(f"{tag}.glob.bank2")
        )
    return a_prime, a_dprime, (z_prime + z_dprime) * 0.5


def _combine(a_init, a_prime, a_dprime, cfg):
    if a_prime is None:
        return a_init
    vi_term = (a_prime + a_dprime) * 0.5
    return a_init * 0.5 + vi_term * 0.5 if cfg.ib else vi_term


def mix_global(
    selection, a_init: Tensor, store: ParamStore, cfg, tag: str, rng,
    node_features: Tensor | None = None,
) -> tuple[GlobalMix, Tensor | None]:
    """Two-stream refinement over one sample's stacked modality features.

    `node_features` defaults to the raw tracked rows; passing stage-I
    refined features instead is the study variant behind cfg.global_refined.
    Returns the mix products and the global agreement loss (None when gated
    off).
    """
    from .losses import elbo_loss

    if node_features is None:
        node_features = nx.concat([selection.x[n] for n in selection.names], axis=0)
    xg = node_features
    nk = xg.shape[0]
    if a_init.shape != (nk, nk):
        raise ShapeError(f"global seed {a_init.shape} does not match {nk} nodes")
    idx = selection.stacked_idx()

    a_prime, a_dprime, z = _two_streams(xg, a_init, store, cfg, tag, rng, (nk, nk))
    a_comb = _combine(a_init, a_prime, a_dprime, cfg)
    g_elbo = None
    if cfg.global_elbo and a_prime is not None:
        g_elbo = elbo_loss(a_dprime, a_prime) if cfg.qp_swap else elbo_loss(a_prime, a_dprime)
    return GlobalMix(a_init, a_prime, a_dprime, a_comb, z, idx), g_elbo


def mix_global_batch(
    xg: Tensor, a_init: Tensor, idx: np.ndarray, store: ParamStore, cfg, tag: str, rng
) -> tuple[GlobalMix, Tensor | None]:
    """Batched stage II: xg (B, NK, d), a_init (B, NK, NK), idx (B, NK)."""
    from .losses import elbo_loss

    b, nk, _ = xg.shape
    a_prime, a_dprime, z = _two_streams(xg, a_init, store, cfg, tag, rng, (b, nk, nk))
    a_comb = _combine(a_init, a_prime, a_dprime, cfg)
    g_elbo = None
    if cfg.global_elbo and a_prime is not None:
        g_elbo = elbo_loss(a_dprime, a_prime) if cfg.qp_swap else elbo_loss(a_prime, a_dprime)
    return GlobalMix(a_init, a_prime, a_dprime, a_comb, z, idx), g_elbo


def scatter_update(h: Tensor, z: Tensor, idx, lam: float) -> Tensor:
    """Blend fused rows back into the hidden state at their positions.

    Rows at idx become (1-lam)*z + lam*h; every other row is returned
    bit-exactly unchanged. lam=1 is the identity on h. Accepts a single
    sample (h (S, d), idx (NK,)) or a batch (h (B, S, d), idx (B, NK)).
    """
    idx = np.asarray(idx, dtype=np.int64)
    if h.ndim == 2:
        if idx.ndim != 1 or len(idx) != z.shape[0]:
            raise IndexError(f"got {idx.shape} indices for {z.shape[0]} rows")
        if len(idx) > 1 and not np.all(np.diff(idx) > 0):
            raise IndexError("scatter indices must be strictly increasing")
        if len(idx) and (idx.min() < 0 or idx.max() >= h.shape[0]):
            raise IndexError("scatter index out of range")
        blended = z * (1.0 - lam) + nx.gather_rows(h, idx) * lam
        return nx.scatter_rows(h, idx, blended)
    if idx.ndim != 2 or not np.all(np.diff(idx, axis=1) > 0):
        raise IndexError("batch scatter indices must be strictly increasing per sample")
    blended = z * (1.0 - lam) + nx.gather_axis1(h, idx) * lam
    return nx.scatter_axis1(h, idx, blended)


def update_state_tokens(h: Tensor, z: Tensor, spans, lam: float) -> Tensor:
    """Refresh each modality's state row from the mean of its fused block."""
    spans = list(spans)
    n = len(spans)
    state_pos = np.asarray([sp.state_pos for sp in spans], dtype=np.int64)
    if h.ndim == 2:
        k = z.shape[0] // n
        means = z.reshape((n, k, z.shape[-1])).mean(axis=1)
        old = nx.gather_rows(h, state_pos)
        return nx.scatter_rows(h, state_pos, means * (1.0 - lam) + old * lam)
    b = h.shape[0]
    k = z.shape[1] // n
    means = z.reshape((b, n, k, z.shape[-1])).mean(axis=2)
    idx = np.broadcast_to(state_pos, (b, n))
    old = nx.gather_axis1(h, idx)
    return nx.scatter_axis1(h, idx, means * (1.0 - lam) + old * lam)
