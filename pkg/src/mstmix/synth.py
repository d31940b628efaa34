"""Deterministic synthetic cross-modal dialog task.

Every dialog draws a latent class grid: one class per (channel, position).
Channel features render each position as a fixed per-channel class prototype
plus Gaussian noise. A question names (channel a, position p, channel b) and
the answer is two tokens: the class at (a, p) and the modular sum of the
classes at (a, p) and (b, p). The second token cannot be produced from any
single channel, which is the point of the task.

Each dialog runs several QA turns over the same grid; the written record
carries the final turn's question/answer with all earlier turns in the
history, after a caption-like prefix that names every channel's class at
position 0.

File format: UTF-8 newline-delimited JSON. The first line is a header with
format name, version, and the generating spec; each further line is one
dialog record with fields channels, history, question, answer, meta.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .backbone import ModalityBundle
from .config import TaskSpec
from .errors import FormatError

FORMAT_NAME = "mstmix-dialog"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TokenMap:
    """Fixed vocabulary layout for a task spec."""

    n_classes: int
    n_channels: int
    l_v: int

    # specials occupy 0..3 (pad, bos, eos, sep)
    @property
    def class_base(self) -> int:
        return 4

    @property
    def channel_base(self) -> int:
        return self.class_base + self.n_classes

    @property
    def pos_base(self) -> int:
        return self.channel_base + self.n_channels

    @property
    def misc_base(self) -> int:
        return self.pos_base + self.l_v

    def class_tok(self, c: int) -> int:
        return self.class_base + c

    def channel_tok(self, ch: int) -> int:
        return self.channel_base + ch

    def pos_tok(self, p: int) -> int:
        return self.pos_base + p

    def misc(self, i: int) -> int:
        return self.misc_base + i


def token_map(spec: TaskSpec) -> TokenMap:
    return TokenMap(spec.n_classes, len(spec.channels), spec.l_v)


@dataclass
class DialogSample:
    channels: dict[str, np.ndarray]     # name -> (l_v, dim) float64
    history: list[list[int]]            # token segments, separator added at assembly
    question: list[int]
    answer: list[int]                   # excludes EOS
    meta: dict


def prototypes(spec: TaskSpec) -> dict[str, dict[str, np.ndarray]]:
    """Per-channel rendering tables, a pure function of the seed.

    Class identity is rendered along one fixed unit direction per channel
    (class k sits at offset k - (n-1)/2 on it), and every position carries a
    fixed marker vector so questions can address positions by content. Both
    choices keep the task solvable only through cross-channel reads while
    making it learnable at desk scale.
    """
    rng = np.random.default_rng([spec.seed, 0x9E37])
    tables = {}
    for c in spec.channels:
        u = rng.normal(size=c.dim)
        u /= np.sqrt((u * u).sum())
        marker = rng.normal(size=(spec.l_v, c.dim))
        tables[c.name] = {"class_dir": u, "marker": marker}
    return tables


def proto_row(spec: TaskSpec, tables, name: str, cls: int, pos: int) -> np.ndarray:
    """Noise-free rendering of one channel position."""
    t = tables[name]
    return (cls - (spec.n_classes - 1) / 2.0) * t["class_dir"] + t["marker"][pos]


def _caption(tm: TokenMap, classes: np.ndarray) -> list[int]:
    cap = [tm.misc(6)]
    for ch in range(classes.shape[0]):
        cap.extend([tm.channel_tok(ch), tm.class_tok(int(classes[ch, 0]))])
    cap.append(tm.misc(7))
    while len(cap) < 12:
        cap.append(tm.misc(2 + len(cap) % 2))
    return cap


def _question(tm: TokenMap, a: int, p: int, b: int) -> list[int]:
    return [
        tm.misc(0), tm.channel_tok(a), tm.pos_tok(p), tm.misc(2),
        tm.channel_tok(b), tm.pos_tok(p), tm.misc(3), tm.misc(4),
        tm.misc(5), tm.misc(2), tm.misc(3), tm.misc(1),
    ]


def _answer(spec: TaskSpec, tm: TokenMap, classes: np.ndarray, a: int, p: int, b: int) -> list[int]:
    ca = int(classes[a, p])
    cb = int(classes[b, p])
    return [tm.class_tok(ca), tm.class_tok((ca + cb) % spec.n_classes)]


def answer_from_grid(spec: TaskSpec, classes, query) -> list[int]:
    """Oracle answer given the latent grid; used to check task solvability."""
    tm = token_map(spec)
    a, p, b = query
    return _answer(spec, tm, np.asarray(classes), a, p, b)


def make_sample(spec: TaskSpec, dialog_index: int, split: int,
                protos: dict[str, np.ndarray] | None = None) -> DialogSample:
    """Generate one dialog deterministically from (spec, split, index)."""
    if protos is None:
        protos = prototypes(spec)
    tm = token_map(spec)
    rng = np.random.default_rng([spec.seed, split, dialog_index])
    n_ch = len(spec.channels)
    classes = rng.integers(0, spec.n_classes, size=(n_ch, spec.l_v))

    channels = {}
    for ci, c in enumerate(spec.channels):
        base = np.stack(
            [proto_row(spec, protos, c.name, int(classes[ci, p]), p) for p in range(spec.l_v)]
        )
        noise = rng.normal(size=(spec.l_v, c.dim)) * spec.noise_sigma
        channels[c.name] = base + noise

    queries = []
    for _ in range(spec.turns):
        a, b = rng.choice(n_ch, size=2, replace=False)
        p = int(rng.integers(0, spec.l_v))
        queries.append((int(a), p, int(b)))

    history: list[list[int]] = [_caption(tm, classes)]
    for a, p, b in queries[:-1]:
        history.append(_question(tm, a, p, b))
        history.append(_answer(spec, tm, classes, a, p, b))
    a, p, b = queries[-1]
    return DialogSample(
        channels=channels,
        history=history,
        question=_question(tm, a, p, b),
        answer=_answer(spec, tm, classes, a, p, b),
        meta={
            "dialog": dialog_index,
            "turn": spec.turns - 1,
            "classes": classes.tolist(),
            "queries": [list(q) for q in queries],
        },
    )


def to_bundle(sample: DialogSample) -> ModalityBundle:
    return ModalityBundle(
        channels=sample.channels,
        texts={"hist": sample.history, "quest": [sample.question]},
    )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _spec_dict(spec: TaskSpec) -> dict:
    return {
        "channels": [{"name": c.name, "dim": c.dim} for c in spec.channels],
        "l_v": spec.l_v,
        "n_classes": spec.n_classes,
        "noise_sigma": spec.noise_sigma,
        "turns": spec.turns,
        "vocab_size": spec.vocab_size,
        "seed": spec.seed,
    }


def _write_split(path: str, spec: TaskSpec, split: int, count: int,
                 protos: dict[str, np.ndarray]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "spec": _spec_dict(spec)}
        fh.write(json.dumps(header) + "\n")
        for i in range(count):
            s = make_sample(spec, i, split, protos)
            rec = {
                "channels": {k: v.tolist() for k, v in s.channels.items()},
                "history": s.history,
                "question": s.question,
                "answer": s.answer,
                "meta": s.meta,
            }
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)


SPLITS = {"train": 0, "val": 1, "test": 2}


def generate_dataset(spec: TaskSpec, out_dir: str) -> dict[str, str]:
    """Write train/val/test files; byte-identical for identical (spec, seed)."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    protos = prototypes(spec)
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    paths = {}
    for split, sid in SPLITS.items():
        path = os.path.join(out_dir, f"{split}.jsonl")
        _write_split(path, spec, sid, counts[split], protos)
        paths[split] = path
    return paths


def load_dataset(path: str) -> tuple[dict, list[DialogSample]]:
    """Read one split written by generate_dataset; lossless round trip."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot open dataset: {e}") from e
    with fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise FormatError("dataset header is not valid JSON") from e
        if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
            raise FormatError("not a dialog dataset file")
        if header.get("version") != FORMAT_VERSION:
            raise FormatError(f"unsupported dataset version {header.get('version')!r}")
        samples = []
        for ln, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(
                    DialogSample(
                        channels={k: np.asarray(v, dtype=np.float64) for k, v in rec["channels"].items()},
                        history=[[int(t) for t in seg] for seg in rec["history"]],
                        question=[int(t) for t in rec["question"]],
                        answer=[int(t) for t in rec["answer"]],
                        meta=rec["meta"],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"corrupt record at line {ln}: {e}") from e
    return header, samples


def batch_indices(n: int, batch_size: int, steps: int, seed: int):
    """Deterministic shuffled batch index stream, reshuffled per epoch."""
    out = []
    epoch = 0
    cursor = 0
    perm = np.random.default_rng([seed, 0x5EED, epoch]).permutation(n)
    while len(out) < steps:
        if cursor + batch_size > n:
            epoch += 1
            perm = np.random.default_rng([seed, 0x5EED, epoch]).permutation(n)
            cursor = 0
        out.append(perm[cursor:cursor + batch_size].copy())
        cursor += batch_size
    return out
