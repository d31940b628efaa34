"""Toy multi-modal encoder-decoder with interleaved mixing.

The encoder consumes one assembled sequence per sample: every modality is
laid out as [state token, content...], continuous channels are linearly
projected to the hidden size, token modalities are embedded, and learned
absolute positional embeddings are added. Blocks are pre-norm transformers.
After every encoder layer whose 1-based index is divisible by the insertion
period, the mixer pipeline (track, divide, conquer, scatter) rewrites the
hidden state before the next layer runs.

Everything runs internally with a leading sample axis; the public entry
points also accept single-sample shapes and squeeze their results back. The
decoder is a standard causal/cross-attention stack used with teacher forcing
during training and beam search at inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gsl_global, gsl_local, numeric as nx, tracker
from .config import ModelConfig
from .errors import (
    EmptyEvaluationError,
    InsufficientTokensError,
    InvalidInputError,
    ParameterError,
    SequenceLengthError,
)
from .gsl_global import GlobalMix
from .gsl_local import LocalMixBatch
from .numeric import ParamStore, Tensor, block_seed


@dataclass(frozen=True)
class SpanEntry:
    name: str
    state_pos: int
    start: int    # first content position, just after the state token
    end: int      # one past the last content position


@dataclass
class ModalityBundle:
    """One sample's raw per-modality inputs."""

    channels: dict[str, np.ndarray]        # name -> (length, raw_dim)
    texts: dict[str, list[list[int]]]      # name -> token segments


@dataclass
class EncoderTrace:
    hidden: list[Tensor]                   # hidden[0] is the embedded input
    attn: list[np.ndarray]                 # per layer: (heads, seq, seq) or batched
    spans: list[SpanEntry]


@dataclass
class MixerRecord:
    layer: int
    names: list[str]
    local_elbo: Tensor | None              # (N,) per-modality agreement values
    global_elbo: Tensor | None
    local: LocalMixBatch | None = None
    capture: GlobalMix | None = None


@dataclass
class EncodeResult:
    trace: EncoderTrace
    output: Tensor                         # final-normed encoder state
    mixes: list[MixerRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Create every parameter block of the model.

    Block initializers are seeded per block name, so the same (seed, name)
    always yields the same values no matter which other blocks exist. The
    transformer stack, embeddings, and output head carry the "backbone"
    group tag; projections, state tokens, and all mixer parameters are
    "mixer" (the second learning-rate group).
    """
    cfg.validate()
    store = ParamStore()

    def add(name, shape, group, kind="normal"):
        rng = np.random.default_rng(block_seed(seed, name))
        if kind == "normal":
            # variance-preserving: fan-in scale for weight matrices
            value = rng.normal(0.0, 1.0 / math.sqrt(shape[-2]), size=shape)
        elif kind == "embed":
            # unit-norm-ish dictionary rows
            value = rng.normal(0.0, 1.0 / math.sqrt(shape[-1]), size=shape)
        elif kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        elif kind == "bank":
            value = 1.0 + rng.uniform(-0.01, 0.01, size=shape)
        else:
            raise ValueError(kind)
        store.add(name, value, group)

    d, v = cfg.d, cfg.vocab_size
    add("embed.tok", (v, d), "backbone", "embed")
    add("embed.pos", (cfg.max_seq_len, d), "backbone", "embed")
    add("state", (len(cfg.modalities), d), "mixer", "embed")
    for m in cfg.modalities:
        if m.raw_dim is not None:
            add(f"proj.{m.name}.w", (m.raw_dim, d), "mixer")
            add(f"proj.{m.name}.b", (d,), "mixer", "zeros")

    def add_attn(prefix, group):
        for p in ("q", "k", "v", "o"):
            add(f"{prefix}.w{p}", (d, d), group)
            add(f"{prefix}.b{p}", (d,), group, "zeros")

    def add_ln(prefix, group):
        add(f"{prefix}.g", (d,), group, "ones")
        add(f"{prefix}.b", (d,), group, "zeros")

    def add_ffn(prefix, group):
        add(f"{prefix}.w1", (d, 4 * d), group)
        add(f"{prefix}.b1", (4 * d,), group, "zeros")
        add(f"{prefix}.w2", (4 * d, d), group)
        add(f"{prefix}.b2", (d,), group, "zeros")

    for l in range(1, cfg.n_enc_layers + 1):
        add_ln(f"enc{l}.ln1", "backbone")
        add_attn(f"enc{l}.attn", "backbone")
        add_ln(f"enc{l}.ln2", "backbone")
        add_ffn(f"enc{l}.ffn", "backbone")
    add_ln("enc.lnf", "backbone")

    for l in range(1, cfg.n_dec_layers + 1):
        add_ln(f"dec{l}.ln1", "backbone")
        add_attn(f"dec{l}.self", "backbone")
        add_ln(f"dec{l}.ln2", "backbone")
        add_attn(f"dec{l}.cross", "backbone")
        add_ln(f"dec{l}.ln3", "backbone")
        add_ffn(f"dec{l}.ffn", "backbone")
    add_ln("dec.lnf", "backbone")
    add("head.b", (v,), "backbone", "zeros")   # logits = h @ embed.tok^T + head.b

    n_mod, mm, k2 = len(cfg.modalities), cfg.m_bank, 2 * d
    for l in cfg.mixer_layers():
        for m in cfg.modalities:
            base = f"mix{l}.loc.{m.name}"
            add(f"{base}.bank1", (n_mod, mm, d), "mixer", "bank")
            add(f"{base}.bank2", (n_mod, mm, k2), "mixer", "bank")
            add(f"{base}.t1w", (n_mod, d, d), "mixer")
            add(f"{base}.t1b", (n_mod, 1, d), "mixer", "zeros")
            add(f"{base}.t2w", (n_mod, d, d), "mixer")
            add(f"{base}.t2b", (n_mod, 1, d), "mixer", "zeros")
        base = f"mix{l}.glob"
        add(f"{base}.bank1", (mm, d), "mixer", "bank")
        add(f"{base}.bank2", (mm, k2), "mixer", "bank")
        add(f"{base}.t1w", (d, d), "mixer")
        add(f"{base}.t1b", (d,), "mixer", "zeros")
        add(f"{base}.t2w", (d, d), "mixer")
        add(f"{base}.t2b", (d,), "mixer", "zeros")
    return store


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------


def _join_segments(segments, name: str, cfg: ModelConfig) -> list[int]:
    if not segments or any(len(s) == 0 for s in segments):
        raise InsufficientTokensError(f"text modality {name!r} has an empty segment")
    ids: list[int] = []
    for si, seg in enumerate(segments):
        if si:
            ids.append(cfg.sep_id)
        ids.extend(int(t) for t in seg)
    if max(ids) >= cfg.vocab_size or min(ids) < 0:
        raise InvalidInputError(f"token id out of range in modality {name!r}")
    return ids


def _check_channel(raw: np.ndarray, m, cfg: ModelConfig) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != m.raw_dim:
        raise InvalidInputError(
            f"channel {m.name!r} must be (length, {m.raw_dim}), got {raw.shape}"
        )
    if raw.shape[0] < cfg.k_tracked:
        raise InsufficientTokensError(
            f"channel {m.name!r} has {raw.shape[0]} positions, need >= {cfg.k_tracked}"
        )
    return raw


def assemble_input(bundle: ModalityBundle, store: ParamStore, cfg: ModelConfig):
    """Build one sample's encoder input sequence and its span table."""
    seq, spans = assemble_batch([bundle], store, cfg)
    return seq.reshape(seq.shape[1:]), spans


def assemble_batch(bundles, store: ParamStore, cfg: ModelConfig):
    """Stack same-layout samples into a (B, S, d) input with a shared span table."""
    bundles = list(bundles)
    b = len(bundles)
    tok_emb = store.leaf("embed.tok")
    state_emb = store.leaf("state")
    ones_b = nx.const(np.ones((b, 1, 1)))

    parts: list[Tensor] = []
    spans: list[SpanEntry] = []
    pos = 0
    for mi, m in enumerate(cfg.modalities):
        parts.append(nx.gather_rows(state_emb, [mi]).reshape((1, 1, cfg.d)) * ones_b)
        if m.raw_dim is not None:
            raws = [_check_channel(bd.channels[m.name], m, cfg) for bd in bundles]
            lengths = {r.shape[0] for r in raws}
            if len(lengths) != 1:
                raise InvalidInputError(f"channel {m.name!r} lengths differ across the batch")
            content = nx.const(np.stack(raws)) @ store.leaf(f"proj.{m.name}.w") + store.leaf(
                f"proj.{m.name}.b"
            )
        else:
            ids = [_join_segments(bd.texts[m.name], m.name, cfg) for bd in bundles]
            if len({len(i) for i in ids}) != 1:
                raise InvalidInputError(f"text modality {m.name!r} lengths differ across the batch")
            mat = np.asarray(ids)
            content = nx.gather_rows(tok_emb, mat.reshape(-1)).reshape(
                (b, mat.shape[1], cfg.d)
            )
        length = content.shape[1]
        spans.append(SpanEntry(m.name, pos, pos + 1, pos + 1 + length))
        parts.append(content)
        pos += 1 + length
    if pos > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {pos} exceeds max_seq_len {cfg.max_seq_len}")
    seq = nx.concat(parts, axis=1)
    seq = seq + nx.gather_rows(store.leaf("embed.pos"), np.arange(pos))
    return seq, spans


# ---------------------------------------------------------------------------
# transformer pieces (batched: all activations carry a leading sample axis)
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, store: ParamStore, prefix: str, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / (var + eps).sqrt()
    return xc * inv * store.leaf(f"{prefix}.g") + store.leaf(f"{prefix}.b")


def _attention(x: Tensor, store, cfg, prefix: str, kv: Tensor | None = None, mask=None):
    d, heads = cfg.d, cfg.n_heads
    hd = d // heads
    src = x if kv is None else kv
    q = x @ store.leaf(f"{prefix}.wq") + store.leaf(f"{prefix}.bq")
    k = src @ store.leaf(f"{prefix}.wk") + store.leaf(f"{prefix}.bk")
    v = src @ store.leaf(f"{prefix}.wv") + store.leaf(f"{prefix}.bv")
    bq, s = x.shape[0], x.shape[1]
    bk, t = src.shape[0], src.shape[1]
    qh = q.reshape((bq, s, heads, hd)).transpose((0, 2, 1, 3))
    kh = k.reshape((bk, t, heads, hd)).transpose((0, 2, 1, 3))
    vh = v.reshape((bk, t, heads, hd)).transpose((0, 2, 1, 3))
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    if mask is not None:
        scores = scores + nx.const(mask)
    attn = nx.softmax(scores)                       # (B, heads, s, t)
    ctx = (attn @ vh).transpose((0, 2, 1, 3)).reshape((bq, s, d))
    out = ctx @ store.leaf(f"{prefix}.wo") + store.leaf(f"{prefix}.bo")
    return out, attn


def _ffn(x: Tensor, store, prefix: str) -> Tensor:
    h = (x @ store.leaf(f"{prefix}.w1") + store.leaf(f"{prefix}.b1")).relu()
    return h @ store.leaf(f"{prefix}.w2") + store.leaf(f"{prefix}.b2")


def _encoder_layer(h: Tensor, store, cfg, l: int):
    a, attn = _attention(layer_norm(h, store, f"enc{l}.ln1"), store, cfg, f"enc{l}.attn")
    h = h + a
    h = h + _ffn(layer_norm(h, store, f"enc{l}.ln2"), store, f"enc{l}.ffn")
    return h, attn


# ---------------------------------------------------------------------------
# encode with mixing
# ---------------------------------------------------------------------------


def _run_mixer(h, attn_np, spans, store, cfg, layer, rng, capture):
    tag = f"mix{layer}"
    b = h.shape[0]
    k = cfg.k_tracked
    names = [sp.name for sp in spans]
    avg = attn_np.mean(axis=1)                       # (B, S, S)
    idx = np.stack([tracker.span_topk_indices(avg[i], spans, k) for i in range(b)])
    flat_idx = idx.reshape(b, -1)                    # (B, N*K)
    x = nx.gather_axis1(h, flat_idx).reshape((b, len(spans), k, cfg.d))

    local = gsl_local.mix_local_batch(x, store, cfg, tag, rng, names)
    a_tilde = nx.block_diag_batch(local.a)
    if cfg.global_refined and local.z_refined is not None:
        node_feats = local.z_refined.reshape((b, len(spans) * k, cfg.d))
    else:
        node_feats = x.reshape((b, len(spans) * k, cfg.d))
    gmix, g_elbo = gsl_global.mix_global_batch(node_feats, a_tilde, flat_idx, store, cfg, tag, rng)
    h = gsl_global.scatter_update(h, gmix.z, flat_idx, cfg.lam)
    h = gsl_global.update_state_tokens(h, gmix.z, spans, cfg.lam)
    rec = MixerRecord(
        layer, names, local.elbo_vec, g_elbo,
        local=local if capture else None,
        capture=gmix if capture else None,
    )
    return h, rec


def encode(seq: Tensor, spans, store: ParamStore, cfg: ModelConfig,
           rng=None, capture: bool = False) -> EncodeResult:
    """Run the encoder stack, mixing after every delta-th layer.

    Accepts a single (S, d) sequence or a (B, S, d) batch; single inputs get
    single-shaped traces back. `rng` is only consumed by the random-graph
    ablation; any seeded generator keeps the run deterministic.
    """
    single = seq.ndim == 2
    if single:
        seq = seq.reshape((1,) + seq.shape)
    if rng is None:
        rng = np.random.default_rng(0)
    mixer_at = set(cfg.mixer_layers())
    active = [sp for sp in spans if sp.name not in cfg.gnn_off]
    trace = EncoderTrace(hidden=[seq], attn=[], spans=list(spans))
    mixes: list[MixerRecord] = []
    h = seq
    for l in range(1, cfg.n_enc_layers + 1):
        h, attn = _encoder_layer(h, store, cfg, l)
        trace.attn.append(attn.data)
        if l in mixer_at and active:
            h, rec = _run_mixer(h, attn.data, active, store, cfg, l, rng, capture)
            mixes.append(rec)
        trace.hidden.append(h)
    out = layer_norm(h, store, "enc.lnf")
    if single:
        trace.hidden = [t.reshape(t.shape[1:]) for t in trace.hidden]
        trace.attn = [a[0] for a in trace.attn]
        out = out.reshape(out.shape[1:])
    return EncodeResult(trace, out, mixes)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def decode_teacher_forced(enc_out: Tensor, dec_input, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Logits for each position of a shifted-right target sequence.

    enc_out may be (S, d) or (B, S, d); dec_input (T,) or (B, T). A single
    encoder state broadcasts across a batch of decoder sequences.
    """
    ids = np.asarray(dec_input, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    if enc_out.ndim == 2:
        enc_out = enc_out.reshape((1,) + enc_out.shape)
    b, t = ids.shape
    if t == 0:
        raise InvalidInputError("decoder input must be non-empty")
    if t > cfg.max_answer_len:
        raise SequenceLengthError(f"target length {t} exceeds max_answer_len {cfg.max_answer_len}")
    h = nx.gather_rows(store.leaf("embed.tok"), ids.reshape(-1)).reshape((b, t, cfg.d))
    h = h + nx.gather_rows(store.leaf("embed.pos"), np.arange(t))
    causal = np.triu(np.full((t, t), -1e9), k=1)
    for l in range(1, cfg.n_dec_layers + 1):
        a, _ = _attention(layer_norm(h, store, f"dec{l}.ln1"), store, cfg, f"dec{l}.self", mask=causal)
        h = h + a
        a, _ = _attention(layer_norm(h, store, f"dec{l}.ln2"), store, cfg, f"dec{l}.cross", kv=enc_out)
        h = h + a
        h = h + _ffn(layer_norm(h, store, f"dec{l}.ln3"), store, f"dec{l}.ffn")
    h = layer_norm(h, store, "dec.lnf")
    logits = h @ store.leaf("embed.tok").swapaxes(0, 1) + store.leaf("head.b")
    return logits.reshape(logits.shape[1:]) if single else logits


def generate(enc_out: Tensor, store: ParamStore, cfg: ModelConfig,
             beam_width: int = 5, length_penalty: float = 0.3) -> list[int]:
    """Beam-search decode one answer.

    Hypotheses are ranked by summed log-probability divided by
    length**length_penalty; ties resolve toward the earlier hypothesis index
    and then the smaller token id. Returns generated tokens without BOS/EOS.
    """
    if beam_width < 1:
        raise ParameterError("beam_width must be >= 1")
    if length_penalty < 0:
        raise ParameterError("length_penalty must be >= 0")

    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[float, int, tuple[int, ...]]] = []
    vocab = np.arange(cfg.vocab_size)
    for _ in range(cfg.max_answer_len):
        ids = np.asarray([[cfg.bos_id, *toks] for toks, _ in live])
        logits = decode_teacher_forced(enc_out, ids, store, cfg)
        last = logits.data.reshape(len(live), ids.shape[1], -1)[:, -1, :]
        m = last.max(axis=-1, keepdims=True)
        logp = last - m - np.log(np.exp(last - m).sum(axis=-1, keepdims=True))
        cands = []
        for hi, (toks, lp) in enumerate(live):
            top = np.lexsort((vocab, -logp[hi]))[:beam_width]
            new_len = len(toks) + 1
            for tok in top:
                nlp = lp + float(logp[hi, tok])
                score = nlp / (new_len ** length_penalty)
                cands.append((score, hi, int(tok), nlp))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live = []
        for score, hi, tok, nlp in cands:
            toks = live[hi][0] + (tok,)
            if tok == cfg.eos_id:
                finished.append((score, len(finished), toks))
            elif len(new_live) < beam_width:
                new_live.append((toks, nlp))
            if len(new_live) >= beam_width:
                break
        live = new_live
        if not live:
            break

    pool = list(finished)
    for order, (toks, lp) in enumerate(live):
        score = lp / (max(len(toks), 1) ** length_penalty)
        pool.append((score, len(finished) + order, toks))
    pool.sort(key=lambda c: (-c[0], c[1]))
    best = pool[0][2]
    return [t for t in best if t != cfg.eos_id]


def perplexity(logits, targets, pad_id: int) -> float:
    """exp(mean token NLL) over non-pad target positions."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if arr.shape[:-1] != targets.shape:
        raise InvalidInputError(f"logits {arr.shape} do not match targets {targets.shape}")
    mask = targets != pad_id
    if not mask.any():
        raise EmptyEvaluationError("all target positions are padding")
    m = arr.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(arr - m).sum(axis=-1))
    picked = np.take_along_axis(arr, targets[..., None], axis=-1)[..., 0]
    nll = (lse - picked)[mask].mean()
    return float(np.exp(nll))
