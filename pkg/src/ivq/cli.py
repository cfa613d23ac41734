"""Command-line entry point: quantize / search / eval / curves."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as cio
from . import search as searchmod
from .calibration import load_sequences
from .errors import IvqError
from .invariance import transform_records
from .model import (
    ModelParams,
    corpus_cross_entropy,
    from_checkpoint,
    perplexity,
    to_checkpoint,
    weight_items,
)
from .quantizer import QuantSpec, fake_quantize_matrix, quantize_matrix

IDENTITY_BITS = 16  # pass-through mode: no quantization applied


def _load_model(path) -> ModelParams:
    return from_checkpoint(cio.read_checkpoint(path))


def _spec_from_args(args) -> QuantSpec | None:
    if args.bits == IDENTITY_BITS:
        return None
    return QuantSpec(args.bits, args.group_size)


def _load_calib(path, params: ModelParams, max_seqs: int, seq_len: int):
    if seq_len <= 0:
        seq_len = params.hyper.context
    return load_sequences(path, max_seqs, seq_len, vocab=params.hyper.vocab)


def _write_manifest(path, command: str, args_echo: dict, metrics: dict, wall_clock: float):
    manifest = {
        "command": command,
        "version": __version__,
        "config": args_echo,
        "metrics": metrics,
        "wall_clock_s": round(wall_clock, 3),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_quantize(args) -> int:
    t0 = time.monotonic()
    params = _load_model(args.model)
    spec = _spec_from_args(args)
    rows = []
    for name, w in weight_items(params):
        if spec is None:
            rows.append({"tensor": name, "max_error": 0.0, "mean_scale": 0.0})
            continue
        qm = quantize_matrix(w, spec)
        err = float(np.max(np.abs(w - fake_quantize_matrix(w, spec))))
        rows.append(
            {"tensor": name, "max_error": err, "mean_scale": float(qm.scales.mean())}
        )
    print(f"{'tensor':34s} {'max_error':>12s} {'mean_s_g':>12s}")
    for r in rows:
        print(f"{r['tensor']:34s} {r['max_error']:12.6g} {r['mean_scale']:12.6g}")
    overall = {
        "max_error": max(r["max_error"] for r in rows),
        "mean_scale": float(np.mean([r["mean_scale"] for r in rows])),
    }
    print(f"{'TOTAL':34s} {overall['max_error']:12.6g} {overall['mean_scale']:12.6g}")

    cio.write_checkpoint(args.out, to_checkpoint(params, quant=spec))
    report = {
        "bits": args.bits,
        "group_size": args.group_size,
        "tensors": rows,
        "overall": overall,
    }
    with open(str(args.out) + ".report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(
        str(args.out) + ".manifest.json",
        "quantize",
        {"model": str(args.model), "bits": args.bits, "group_size": args.group_size,
         "out": str(args.out)},
        overall,
        time.monotonic() - t0,
    )
    print(f"wrote {args.out}")
    return 0


def _parse_transform_kinds(text: str) -> frozenset[str]:
    if text == "all":
        return searchmod.TRANSFORM_KINDS
    return frozenset(part.strip() for part in text.split(",") if part.strip())


def cmd_search(args) -> int:
    t0 = time.monotonic()
    params = _load_model(args.model)
    spec = _spec_from_args(args)
    calib = _load_calib(args.calib, params, args.calib_seqs, args.seq_len)
    matched = (
        None
        if args.match_layers < 0
        else searchmod.evenly_spaced_layers(args.match_layers, params.hyper.layers)
    )
    cfg = searchmod.SearchConfig(
        steps=args.steps,
        sigma_s=args.sigma_s,
        sigma_r=args.sigma_r,
        subset_fraction=args.subset,
        alpha_ratio=args.alpha_ratio,
        matched_layers=matched,
        quant=spec,
        seed=args.seed,
        transforms=_parse_transform_kinds(args.transforms),
        window=args.window,
    )
    result = searchmod.run(params, cfg, calib)
    print(f"objective: initial {result.initial_objective!r} -> final {result.final_objective!r}")

    ckpt = to_checkpoint(result.params, quant=spec)
    ckpt.tensors.extend(transform_records(result.transforms))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cio.write_checkpoint(args.out, ckpt)
    searchmod.write_curves_csv(args.curves, result.curves)

    metrics = {
        "initial_objective": result.initial_objective,
        "final_objective": result.final_objective,
        "alpha": result.alpha,
        "initial_ce": result.ce0,
        "initial_mse": result.mse0,
        "accepted_steps": sum(r.accepted for r in result.curves),
    }
    if args.heldout:
        held = _load_calib(args.heldout, params, 1024, args.seq_len)
        ppl_rtn = perplexity(params, held, spec)
        ppl_searched = perplexity(result.params, held, spec)
        metrics["heldout_ppl_rtn"] = ppl_rtn
        metrics["heldout_ppl_searched"] = ppl_searched
        print(f"held-out perplexity: RTN {ppl_rtn:.4f} -> searched {ppl_searched:.4f}")

    echo = {
        "model": str(args.model), "calib": str(args.calib),
        "heldout": str(args.heldout) if args.heldout else None,
        "bits": args.bits, "group_size": args.group_size, "steps": args.steps,
        "sigma_s": args.sigma_s, "sigma_r": args.sigma_r, "subset": args.subset,
        "alpha_ratio": args.alpha_ratio, "match_layers": args.match_layers,
        "matched_layer_indices": list(result.matched_layers),
        "transforms": sorted(cfg.transforms), "seed": args.seed,
        "window": args.window, "calib_seqs": args.calib_seqs, "seq_len": args.seq_len,
        "out": str(args.out), "curves": str(args.curves),
    }
    _write_manifest(str(args.out) + ".manifest.json", "search", echo, metrics,
                    time.monotonic() - t0)
    print(f"wrote {args.out} and {args.curves}")
    return 0


def cmd_eval(args) -> int:
    params = _load_model(args.model)
    corpus = _load_calib(args.corpus, params, args.max_seqs, args.seq_len)
    ce = corpus_cross_entropy(params, corpus)
    print(f"full precision: CE {ce:.6f} nats/token, perplexity {np.exp(ce):.4f}")
    spec = _spec_from_args(args)
    if spec is not None:
        ce_q = corpus_cross_entropy(params, corpus, spec)
        print(
            f"{spec.bits}-bit g{spec.group_size} RTN: CE {ce_q:.6f} nats/token, "
            f"perplexity {np.exp(ce_q):.4f}"
        )
    return 0


def cmd_curves(args) -> int:
    run_dir = Path(args.run_dir)
    src = run_dir / "curves.csv"
    if not src.exists():
        raise FileNotFoundError(f"{src} not found")
    if args.format == "csv":
        dst = run_dir / "curves_copy.csv"
        shutil.copyfile(src, dst)
        print(f"wrote {dst}")
        return 0

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = searchmod.read_curves_csv(src)
    steps = [r.step for r in curves]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r.proposed_loss for r in curves], lw=0.5, alpha=0.5, label="proposed")
    ax.plot(steps, [r.best_loss for r in curves], lw=1.5, label="best")
    ax.set_xlabel("step")
    ax.set_ylabel("calibration loss")
    ax.legend()
    loss_path = run_dir / "loss_vs_step.svg"
    fig.savefig(loss_path, metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [r.acceptance_rate for r in curves], lw=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("acceptance rate (sliding window)")
    ax.set_ylim(0, 1)
    acc_path = run_dir / "acceptance_vs_step.svg"
    fig.savefig(acc_path, metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {loss_path} and {acc_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivq", description=__doc__)
    p.add_argument("--version", action="version", version=f"ivq {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    bits_choices = [1, 2, 3, 4, 8, IDENTITY_BITS]

    q = sub.add_parser("quantize", help="round-to-nearest quantization of a checkpoint")
    q.add_argument("model")
    q.add_argument("--bits", type=int, default=2, choices=bits_choices)
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    s = sub.add_parser("search", help="hill-climb invariance transforms before quantizing")
    s.add_argument("model")
    s.add_argument("calib")
    s.add_argument("--bits", type=int, default=2, choices=bits_choices)
    s.add_argument("--group-size", type=int, default=128)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--sigma-s", type=float, default=1e-2)
    s.add_argument("--sigma-r", type=float, default=1e-5)
    s.add_argument("--subset", type=float, default=0.10)
    s.add_argument("--alpha-ratio", type=float, default=10.0)
    s.add_argument("--match-layers", type=int, default=-1,
                   help="number of activation-matched layers (-1 = all)")
    s.add_argument("--transforms", default="all",
                   help="comma list of permutation,scaling,rotation (default all)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--window", type=int, default=500)
    s.add_argument("--calib-seqs", type=int, default=32)
    s.add_argument("--seq-len", type=int, default=0, help="0 = model context window")
    s.add_argument("--heldout", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--curves", required=True)
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="cross-entropy and perplexity of a checkpoint")
    e.add_argument("model")
    e.add_argument("corpus")
    e.add_argument("--bits", type=int, default=IDENTITY_BITS, choices=bits_choices)
    e.add_argument("--group-size", type=int, default=128)
    e.add_argument("--max-seqs", type=int, default=1024)
    e.add_argument("--seq-len", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("curves", help="emit loss and acceptance artifacts from a run dir")
    c.add_argument("run_dir")
    c.add_argument("--format", choices=["csv", "svg-plot"], default="svg-plot")
    c.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except (IvqError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())
