"""CLI producing a full export bundle: checkpoint, token files, reference logits."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ExportError, TrainingError, __version__
from .corpus import make_corpus
from .export import export_checkpoint, export_reference, write_token_lines
from .train import eval_perplexity, train_tiny


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="tinylm-export", description=__doc__)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--corpus", default=None, help="text file; default: bundled synthetic corpus")
    p.add_argument("--sentences", type=int, default=4000, help="synthetic corpus size")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--context", type=int, default=128)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ref-seqs", type=int, default=4)
    try:
        args = p.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.corpus:
            text = Path(args.corpus).read_text(encoding="utf-8")
        else:
            text = make_corpus(args.sentences, seed=args.seed)
            (out / "corpus.txt").write_text(text, encoding="utf-8")

        bundle = train_tiny(
            text,
            layers=args.layers,
            d_model=args.d_model,
            d_ff=args.d_ff,
            n_heads=args.heads,
            context=args.context,
            steps=args.steps,
            seed=args.seed,
        )
        ppl = eval_perplexity(bundle, seq_len=args.context)
        print(f"trained: final batch loss {bundle.final_loss:.4f}, eval ppl {ppl:.3f} "
              f"(vocab {len(bundle.charset)})")

        export_checkpoint(bundle.model, out / "model.ivq", args.d_ff, args.heads)
        n_train = write_token_lines(out / "train_tokens.txt", bundle.train_ids,
                                    args.context, 64)
        n_eval = write_token_lines(out / "eval_tokens.txt", bundle.eval_ids,
                                   args.context, 16)

        ref_lines = min(args.ref_seqs, n_train)
        seqs = np.stack([
            bundle.train_ids[i * args.context : (i + 1) * args.context]
            for i in range(ref_lines)
        ])
        write_token_lines(out / "ref_tokens.txt", seqs.reshape(-1), args.context, ref_lines)
        export_reference(bundle.model, seqs, out / "ref_logits.ivq")

        summary = {
            "vocab": len(bundle.charset),
            "charset": bundle.charset,
            "layers": args.layers, "d_model": args.d_model, "d_ff": args.d_ff,
            "heads": args.heads, "context": args.context,
            "steps": args.steps, "seed": args.seed,
            "eval_perplexity": ppl,
            "train_sequences": n_train, "eval_sequences": n_eval,
            "ref_sequences": ref_lines,
            "tinylm_version": __version__,
        }
        (out / "bundle.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        print(f"wrote bundle to {out}")
        return 0
    except (TrainingError, ExportError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())
