"""End-to-end optimization: two-group AdamW, warmup/decay schedule, gradient
clipping, checkpointing, metrics logging, and evaluation.

Runs are deterministic given (config, seed): batch order, parameter init,
and the random-graph ablation stream are all derived from the seed, and the
metrics log carries no timestamps, so two identical runs produce
byte-identical logs and checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import backbone, losses, numeric as nx, synth
from .config import ModelConfig, RunConfig, run_config_to_dict
from .errors import CheckpointError, DivergenceError, FormatError
from .numeric import ParamStore, Tensor

CKPT_MAGIC = b"MSTMIX01"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a ParamStore, two learning-rate groups."""

    def __init__(self, store: ParamStore, cfg):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(store.value(n)) for n in store.names()}
        self.v = {n: np.zeros_like(store.value(n)) for n in store.names()}

    def lr_scale(self, step: int) -> float:
        """Linear warmup to 1, then linear decay to 0 at max_steps."""
        total = self.cfg.max_steps
        warm = max(1, int(round(self.cfg.warmup_frac * total)))
        if step < warm:
            return (step + 1) / warm
        if total == warm:
            return 1.0
        return max(0.0, (total - step) / (total - warm))

    def step(self, step: int) -> dict[str, float]:
        c = self.cfg
        scale = self.lr_scale(step)
        rates = {"backbone": c.lr_backbone * scale, "mixer": c.lr_rest * scale}
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name in self.store.names():
            blk = self.store.block(name)
            lr = rates[blk.group]
            if lr == 0.0:
                continue
            g = blk.grad
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            wd = 0.0 if self._no_decay(name) else c.weight_decay
            blk.value -= lr * (update + wd * blk.value)
        return rates

    @staticmethod
    def _no_decay(name: str) -> bool:
        # decay only multiplicative weight matrices; norms, biases, banks,
        # and embeddings keep their natural scale
        last = name.rsplit(".", 1)[-1]
        return "w" not in last


def clip_gradients(store: ParamStore, clip_norm: float) -> float:
    """Scale accumulated gradients to a global norm of clip_norm. Returns the
    pre-clip norm."""
    norm = store.grad_norm()
    if norm > clip_norm:
        factor = clip_norm / norm
        for name in store.names():
            store.block(name).grad *= factor
    return norm


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def config_hash(run_cfg_dict: dict) -> str:
    blob = json.dumps(run_cfg_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path: str, store: ParamStore, run_cfg: RunConfig, step: int,
                    metrics: dict | None = None) -> None:
    """Binary checkpoint: magic, JSON metadata, then raw little-endian f64 blocks."""
    cfg_dict = run_config_to_dict(run_cfg)
    blocks = []
    offset = 0
    for name in store.names():
        blk = store.block(name)
        blocks.append(
            {"name": name, "shape": list(blk.value.shape), "group": blk.group,
             "offset": offset, "size": int(blk.value.size)}
        )
        offset += blk.value.size
    meta = {
        "version": CKPT_VERSION,
        "step": step,
        "config": cfg_dict,
        "config_sha256": config_hash(cfg_dict),
        "metrics": metrics or {},
        "blocks": blocks,
    }
    payload = json.dumps(meta, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for name in store.names():
            fh.write(store.value(name).astype("<f8", copy=False).tobytes(order="C"))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ParamStore, RunConfig, dict]:
    from .config import run_config_from_dict

    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint: {e}") from e
    with fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        try:
            meta = json.loads(fh.read(mlen))
        except json.JSONDecodeError as e:
            raise CheckpointError("corrupt checkpoint metadata") from e
        if meta.get("version") != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
        if config_hash(meta["config"]) != meta["config_sha256"]:
            raise CheckpointError("checkpoint config hash mismatch")
        raw = fh.read()
    run_cfg = run_config_from_dict(meta["config"])
    store = ParamStore()
    for blk in meta["blocks"]:
        start = blk["offset"] * 8
        arr = np.frombuffer(raw[start:start + blk["size"] * 8], dtype="<f8").reshape(blk["shape"])
        if arr.size != blk["size"]:
            raise CheckpointError(f"truncated block {blk['name']!r}")
        store.add(blk["name"], arr.copy(), blk["group"])
    return store, run_cfg, meta


# ---------------------------------------------------------------------------
# forward pass shared by train and eval
# ---------------------------------------------------------------------------


@dataclass
class BatchOutput:
    breakdown: losses.LossBreakdown
    result: backbone.EncodeResult
    logits: Tensor
    targets: np.ndarray


def batch_forward(samples, store: ParamStore, cfg: ModelConfig, rng, capture=False) -> BatchOutput:
    """Encode, decode, and assemble the loss breakdown for a list of samples."""
    bundles = [synth.to_bundle(s) for s in samples]
    seq, spans = backbone.assemble_batch(bundles, store, cfg)
    res = backbone.encode(seq, spans, store, cfg, rng=rng, capture=capture)

    width = max(len(s.answer) + 1 for s in samples)
    tgt = np.full((len(samples), width), cfg.pad_id, dtype=np.int64)
    dec_in = np.full((len(samples), width), cfg.pad_id, dtype=np.int64)
    for i, s in enumerate(samples):
        seq_t = s.answer + [cfg.eos_id]
        tgt[i, :len(seq_t)] = seq_t
        dec_in[i, 0] = cfg.bos_id
        dec_in[i, 1:len(seq_t)] = s.answer
    logits = backbone.decode_teacher_forced(res.output, dec_in, store, cfg)

    nll, count = losses.sequence_nll(logits, tgt, cfg.pad_id)
    lb = losses.LossBreakdown(
        l_gen=nll * (1.0 / count),
        alpha1=cfg.alpha1, alpha2=cfg.alpha2, alpha3=cfg.alpha3,
        elbo_sign=cfg.elbo_sign,
    )
    locs = [r.local_elbo for r in res.mixes if r.local_elbo is not None]
    globs = [r.global_elbo for r in res.mixes if r.global_elbo is not None]
    if locs:
        acc = locs[0]
        for t in locs[1:]:
            acc = acc + t
        lb.l_local = acc * (1.0 / len(locs))
    if globs:
        acc = globs[0]
        for t in globs[1:]:
            acc = acc + t
        lb.l_global = acc * (1.0 / len(globs))
    losses.total_loss(lb)
    return BatchOutput(lb, res, logits, tgt)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    steps: int
    final_eval: dict = field(default_factory=dict)


def _json_line(fh, obj) -> None:
    fh.write(json.dumps(obj) + "\n")
    fh.flush()


def train(run_cfg: RunConfig, data_dir: str, out_dir: str,
          track_elbo_grad_norm: bool = False) -> TrainResult:
    """Optimize the model on a generated dataset directory.

    Writes `metrics.jsonl` and `model.ckpt` under out_dir. The per-step
    elbo_grad_norm field is exactly 0.0 whenever the agreement losses have no
    parameter dependence (the random-graph ablation), the measured norm when
    `track_elbo_grad_norm` is set, and null otherwise.
    """
    run_cfg.validate()
    cfg, tc = run_cfg.model, run_cfg.train
    os.makedirs(out_dir, exist_ok=True)

    _, train_samples = synth.load_dataset(os.path.join(data_dir, "train.jsonl"))
    val_path = os.path.join(data_dir, "val.jsonl")
    val_samples = synth.load_dataset(val_path)[1] if os.path.exists(val_path) else []

    store = backbone.init_params(cfg, tc.seed)
    opt = AdamW(store, tc)
    graph_rng = np.random.default_rng([tc.seed, 0xA5])
    batches = synth.batch_indices(len(train_samples), tc.batch_size, tc.max_steps, tc.seed)

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    last_eval: dict = {}
    with open(metrics_path, "w", encoding="utf-8") as mfh:
        _json_line(mfh, {
            "type": "meta", "version": 1,
            "config": run_config_to_dict(run_cfg),
            "track_elbo_grad_norm": track_elbo_grad_norm,
            "n_train": len(train_samples), "n_val": len(val_samples),
        })
        for step, idx in enumerate(batches):
            samples = [train_samples[i] for i in idx]
            store.bind_fresh()
            out = batch_forward(samples, store, cfg, graph_rng)
            lb = out.breakdown
            total = lb.total
            if not np.isfinite(total.data):
                _json_line(mfh, {"type": "abort", "step": step, "batch": [int(i) for i in idx],
                                 "loss": lb.scalars()})
                raise DivergenceError(f"non-finite loss at step {step}, batch {idx[:4]}...")

            store.zero_grad()
            combo = lb.elbo_combo()
            elbo_norm: float | None
            if combo is None or not combo.requires:
                elbo_norm = 0.0
                total.backward()
                store.harvest(1.0)
            elif track_elbo_grad_norm:
                combo.backward()
                elbo_norm = store.harvest(-float(lb.elbo_sign))
                lb.l_gen.backward()
                store.harvest(lb.alpha1)
            else:
                elbo_norm = None
                total.backward()
                store.harvest(1.0)

            grad_norm = clip_gradients(store, tc.clip_norm)
            rates = opt.step(step)

            sc = lb.scalars()
            _json_line(mfh, {
                "type": "step", "step": step,
                "l_gen": sc["l_gen"],
                "l_local_mean": None if sc["l_local"] is None else float(np.mean(sc["l_local"])),
                "l_local": sc["l_local"],
                "l_global": sc["l_global"],
                "total": sc["total"],
                "grad_norm": grad_norm,
                "elbo_grad_norm": elbo_norm,
                "lr_backbone": rates["backbone"],
                "lr_rest": rates["mixer"],
            })

            if val_samples and tc.eval_every and (step + 1) % tc.eval_every == 0:
                ev = _quick_eval(val_samples[: tc.eval_samples], store, cfg, tc)
                last_eval = ev
                _json_line(mfh, {"type": "eval", "step": step, **ev})

        save_checkpoint(ckpt_path, store, run_cfg, len(batches), last_eval)
        _json_line(mfh, {"type": "final", "steps": len(batches), "checkpoint": "model.ckpt",
                         "eval": last_eval})
    return TrainResult(ckpt_path, metrics_path, len(batches), last_eval)


def _chunks(samples, size):
    for i in range(0, len(samples), size):
        yield samples[i:i + size]


def _quick_eval(samples, store, cfg, tc, chunk: int = 32) -> dict:
    """Teacher-forced validation metrics (no generation)."""
    if not samples:
        return {}
    nll_sum, count, hits = 0.0, 0, 0
    for part in _chunks(samples, chunk):
        store.bind_fresh()
        out = batch_forward(part, store, cfg, np.random.default_rng([tc.seed, 0xE7]))
        s, c = losses.sequence_nll(out.logits, out.targets, cfg.pad_id)
        nll_sum += s.item()
        count += c
        pred = out.logits.data.argmax(axis=-1)
        mask = out.targets != cfg.pad_id
        hits += int((pred[mask] == out.targets[mask]).sum())
    return {"ppl": math.exp(nll_sum / count), "token_acc": hits / count, "n": len(samples)}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(store: ParamStore, run_cfg: RunConfig, samples,
             beam_width: int = 5, length_penalty: float = 0.3,
             max_samples: int | None = None, chunk: int = 32) -> dict:
    """PPL, token accuracy, and exact-answer accuracy over a dataset split."""
    cfg = run_cfg.model
    if max_samples is not None:
        samples = samples[:max_samples]
    rng = np.random.default_rng([run_cfg.train.seed, 0xE7])
    nll_sum, count, hits, exact = 0.0, 0, 0, 0
    for part in _chunks(samples, chunk):
        store.bind_fresh()
        out = batch_forward(part, store, cfg, rng)
        s, c = losses.sequence_nll(out.logits, out.targets, cfg.pad_id)
        nll_sum += s.item()
        count += c
        pred = out.logits.data.argmax(axis=-1)
        mask = out.targets != cfg.pad_id
        hits += int((pred[mask] == out.targets[mask]).sum())
        enc_all = out.result.output
        for i, smp in enumerate(part):
            enc_i = nx.Tensor(enc_all.data[i])
            gen = backbone.generate(enc_i, store, cfg, beam_width, length_penalty)
            if gen == list(smp.answer):
                exact += 1
    return {
        "ppl": math.exp(nll_sum / count),
        "token_acc": hits / count,
        "exact_acc": exact / len(samples),
        "n": len(samples),
        "beam": beam_width,
        "length_penalty": length_penalty,
    }
