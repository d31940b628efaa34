"""Operator surface: data generation, training, evaluation, gradient
verification, and graph inspection.

One JSON config document (sections: model, train, task, ablations) drives
every subcommand. Exit codes: 0 success, 1 validation/usage failure,
2 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import backbone, synth, train as trainmod
from .config import RunConfig, run_config_from_dict
from .errors import MstMixError
from .numeric import finite_difference_gradients


def _load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return run_config_from_dict(doc)


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.task.seed = args.seed
    paths = synth.generate_dataset(cfg.task, args.out)
    for split, path in sorted(paths.items()):
        print(f"{split}: {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    result = trainmod.train(cfg, args.data, args.out,
                            track_elbo_grad_norm=args.track_elbo_grad_norm)
    print(json.dumps({
        "checkpoint": result.checkpoint_path,
        "metrics": result.metrics_path,
        "steps": result.steps,
        "eval": result.final_eval,
    }))
    return 0


def _cmd_eval(args) -> int:
    store, run_cfg, _ = trainmod.load_checkpoint(args.ckpt)
    _, samples = synth.load_dataset(os.path.join(args.data, f"{args.split}.jsonl"))
    metrics = trainmod.evaluate(
        store, run_cfg, samples,
        beam_width=args.beam, length_penalty=args.length_penalty,
        max_samples=args.max_samples,
    )
    print(json.dumps({"split": args.split, **metrics}))
    return 0


def _gradcheck_loss(run_cfg: RunConfig):
    """Deterministic single-sample total-loss closure for the FD verifier."""
    cfg, task = run_cfg.model, run_cfg.task
    sample = synth.make_sample(task, 0, 0)

    def loss_fn(store):
        out = trainmod.batch_forward(
            [sample], store, cfg, np.random.default_rng([task.seed, 0xFD]))
        return out.breakdown.total

    return loss_fn


def _cmd_gradcheck(args) -> int:
    run_cfg = _load_config(args.config)
    store = backbone.init_params(run_cfg.model, run_cfg.train.seed)
    report = finite_difference_gradients(
        _gradcheck_loss(run_cfg), store,
        eps=args.eps, coords_per_block=args.coords, seed=run_cfg.train.seed,
    )
    for name in sorted(report.blocks):
        blk = report.blocks[name]
        print(json.dumps({
            "block": name, "coords": len(blk.coords), "max_rel_err": blk.max_rel,
        }))
    print(json.dumps({"max_rel_err": report.max_rel_err, "eps": report.eps,
                      "tol": args.tol, "pass": report.max_rel_err < args.tol}))
    return 0 if report.max_rel_err < args.tol else 2


def _cmd_dump_graphs(args) -> int:
    store, run_cfg, _ = trainmod.load_checkpoint(args.ckpt)
    _, samples = synth.load_dataset(os.path.join(args.data, f"{args.split}.jsonl"))
    if not 0 <= args.sample < len(samples):
        raise MstMixError(f"sample index {args.sample} out of range (n={len(samples)})")
    cfg = run_cfg.model
    sample = samples[args.sample]
    store.bind_fresh()
    out = trainmod.batch_forward(
        [sample], store, cfg, np.random.default_rng([run_cfg.train.seed, 0xD6]),
        capture=True,
    )
    spans = out.result.trace.spans
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in out.result.mixes:
            cap = rec.capture
            doc = {
                "layer": rec.layer,
                "lambda": cfg.lam,
                "spans": [
                    {"name": sp.name, "state_pos": sp.state_pos,
                     "start": sp.start, "end": sp.end}
                    for sp in spans
                ],
                "idx": [int(i) for i in cap.idx[0]],
                "a_init": cap.a_init.data[0].tolist(),
                "a_q": None if cap.a_prime is None else cap.a_prime.data[0].tolist(),
                "a_p": None if cap.a_dprime is None else cap.a_dprime.data[0].tolist(),
                "a": cap.a.data[0].tolist(),
                "z": cap.z.data[0].tolist(),
            }
            fh.write(json.dumps(doc) + "\n")
    print(f"wrote {len(out.result.mixes)} mixer dumps to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mstmix", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dialog dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="override task seed")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--track-elbo-grad-norm", action="store_true")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "test"])
    e.add_argument("--beam", type=int, default=5)
    e.add_argument("--length-penalty", type=float, default=0.3)
    e.add_argument("--max-samples", type=int, default=None)
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("gradcheck", help="verify reverse-mode gradients by finite differences")
    c.add_argument("--config", required=True)
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--coords", type=int, default=8,
                   help="coordinates sampled per parameter block (0 = all)")
    c.set_defaults(fn=_cmd_gradcheck)

    d = sub.add_parser("dump-graphs", help="dump per-mixer latent graphs for one sample")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="val", choices=["train", "val", "test"])
    d.add_argument("--sample", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=_cmd_dump_graphs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    if getattr(args, "coords", None) == 0:
        args.coords = None
    try:
        return args.fn(args)
    except MstMixError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())
