"""Command-line front end: ``eigenattn {train,compress,eval,report}``.

Exit codes: 0 success, 2 configuration / input errors, 3 numeric failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .allot import (DEFAULT_BUDGET_GRID, RANK_COLUMNS, BUDGET_TABLE_COLUMNS, AllotmentConfig, allot,
                    compression_targeting, rank_rows, rank_summary)
from .basis import SPECTRUM_COLUMNS, collect_representations, rows_to_csv, spectrum_report
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cost import analytic_costs, compression_ratio, format_cost_table, standard_costs
from .data import CharTokenizer, calibration_sequences, read_corpus, split_tokens
from .linalg import SvdError
from .model import ModelSpec, init_model, perplexity
from .quant import CURVE_COLUMNS, eval_stacked
from .training import TrainingDiverged, train_tiny

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Flags of one invocation, echoed into every artifact's metadata."""

    subcommand: str
    seed: int = 0
    corpus: Optional[str] = None
    checkpoint: Optional[str] = None
    out: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        d = {k: v for k, v in vars(args).items() if k != "func"}
        known = {k: d.pop(k) for k in ("seed", "corpus", "checkpoint", "out") if k in d}
        return cls(subcommand=d.pop("command"), extra=d, **known)


def _write_csv(path: Path, rows: list[dict], columns) -> None:
    path.write_text(rows_to_csv(rows, columns), encoding="utf-8")


def _tokens(corpus: Optional[str], vocab: Optional[str] = None) -> tuple[CharTokenizer, np.ndarray]:
    try:
        text = read_corpus(corpus)
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {corpus}: {exc}") from None
    tok = CharTokenizer(vocab) if vocab else CharTokenizer.from_text(text)
    try:
        return tok, tok.encode(text)
    except ValueError as exc:
        raise ConfigError(f"corpus does not match checkpoint vocabulary: {exc}") from None


def _load(path: str):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_train(args) -> int:
    tok, ids = _tokens(args.corpus)
    split = split_tokens(ids)
    spec = ModelSpec(vocab_size=tok.size, d_model=args.d_model, n_heads=args.n_heads, n_layers=args.n_layers,
                     d_ffn=args.d_ffn, max_seq=args.max_seq, pos_mode=args.pos_mode)
    weights = init_model(spec, args.seed)
    ppl0 = perplexity(weights, split.heldout, max_windows=args.eval_windows)
    weights, curve = train_tiny(weights, split.train, args.steps, seed=args.seed, lr=args.lr,
                                batch_size=args.batch_size)
    ppl = perplexity(weights, split.heldout, max_windows=args.eval_windows)
    weights.meta.update(run_config=asdict(RunConfig.from_args(args)), heldout_ppl=ppl, untrained_ppl=ppl0)
    out = Path(args.out)
    save_checkpoint(out, weights, vocab=tok.vocab)
    loss_path = out.with_suffix(".loss.csv")
    _write_csv(loss_path, [{"step": i, "loss": v} for i, v in enumerate(curve)], ("step", "loss"))
    print(f"wrote {out} ({args.steps} steps, seed {args.seed}); held-out PPL {ppl0:.3f} -> {ppl:.3f}")
    return 0


def cmd_compress(args) -> int:
    weights, header = _load(args.checkpoint)
    if weights.is_compressed:
        raise ConfigError("checkpoint is already compressed")
    _, ids = _tokens(args.corpus, header.get("vocab"))
    split = split_tokens(ids)
    try:
        calib = calibration_sequences(split.calib, args.n_samples, args.seq_len)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    base = AllotmentConfig(error_budget=args.error_budget or 0.0, step_size=args.step_size,
                           eps_floor=args.eps_floor, averaging_factor=args.averaging_factor,
                           max_rows=args.max_rows)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.target_ratio is not None:
        grid = [float(v) for v in args.budget_grid.split(",")] if args.budget_grid else DEFAULT_BUDGET_GRID
        tr = compression_targeting(weights, calib, grid, args.target_ratio, base)
        model, result = tr.model, tr.result
        _write_csv(out_dir / "budget_table.csv", tr.table, BUDGET_TABLE_COLUMNS)
        if not tr.reached:
            print(f"warning: target {args.target_ratio} not reached on the budget grid; "
                  f"best effort ratio {tr.achieved_ratio:.3f}", file=sys.stderr)
    else:
        model, result = allot(weights, calib, base)
    flagged = [a.layer for a in result.layers if not a.compressed]
    if flagged and result.error_budget > 0:
        print(f"warning: layers {flagged} left at full rank (budget not met at any threshold)", file=sys.stderr)
    model.meta["run_config"] = asdict(RunConfig.from_args(args))
    save_checkpoint(out_dir / "compressed.ckpt", model, vocab=header.get("vocab"))
    result.save(out_dir / "allotment.json")
    _write_csv(out_dir / "ranks.csv", rank_rows(result), RANK_COLUMNS)
    curves, _ = spectrum_report(collect_representations(weights, calib, args.averaging_factor, args.max_rows))
    _write_csv(out_dir / "spectrum.csv", curves, SPECTRUM_COLUMNS)
    print(f"achieved KV ratio {result.kv_ratio:.3f} (e_b={result.error_budget})")
    for a in result.layers:
        print(f"  layer {a.layer}: r_k={a.r_k} r_v={a.r_v} eps_th={a.eps_th:.2f} error={a.error:.3g}")
    print(rank_summary(result))
    return 0


def _parse_grid(text: Optional[str]) -> list[tuple[int, int]]:
    if not text:
        return []
    try:
        return [tuple(int(v) for v in item.split(":")) for item in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad quant grid {text!r}; expected bits:group,...") from None


def cmd_eval(args) -> int:
    std, std_header = _load(args.standard)
    models = {"standard": std}
    for path in args.eigen or []:
        w, header = _load(path)
        if header.get("vocab") != std_header.get("vocab") or w.spec.vocab_size != std.spec.vocab_size:
            raise ConfigError(f"vocabulary of {path} differs from {args.standard}")
        models[Path(path).stem if len(args.eigen) > 1 else "eigen"] = w
    _, ids = _tokens(args.corpus, std_header.get("vocab"))
    heldout = split_tokens(ids).heldout
    n = args.n or std.spec.max_seq
    base_ppl = None
    rows = []
    for name, w in models.items():
        ppl = perplexity(w, heldout, max_windows=args.eval_windows)
        base_ppl = ppl if base_ppl is None else base_ppl
        costs = analytic_costs(w.spec.d_model, w.spec.n_heads, w.kv_ranks(), n)
        std_costs = standard_costs(w.spec.d_model, w.spec.n_heads, w.spec.n_layers, n)
        rows.append({"config": name, "kv_ratio": compression_ratio(costs, std_costs),
                     "kv_bytes": costs.kv_bytes, "ppl": ppl, "delta_ppl": ppl - base_ppl})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "eval.csv", rows, ("config", "kv_ratio", "kv_bytes", "ppl", "delta_ppl"))
    (out_dir / "eval.json").write_text(json.dumps({"rows": rows, "run_config": asdict(RunConfig.from_args(args))},
                                                  indent=2), encoding="utf-8")
    for r in rows:
        print(f"{r['config']:>12}  ratio {r['kv_ratio']:.3f}  kv {r['kv_bytes']:>10.0f} B  "
              f"PPL {r['ppl']:.4f}  dPPL {r['delta_ppl']:+.4f}")
    grid = _parse_grid(args.quant_grid)
    if grid:
        curve = eval_stacked(models, heldout, grid, n=n, max_windows=args.eval_windows)
        _write_csv(out_dir / "quant_curve.csv", curve, CURVE_COLUMNS)
        print(f"wrote {out_dir / 'quant_curve.csv'} ({len(curve)} points)")
    return 0


def cmd_report(args) -> int:
    w, _ = _load(args.checkpoint)
    s = w.spec
    n = args.n or s.max_seq
    kw = dict(batch=args.batch, precision_bits=args.precision_bits)
    eig = analytic_costs(s.d_model, s.n_heads, w.kv_ranks(), n, rope=s.pos_mode == "rope", **kw)
    std = standard_costs(s.d_model, s.n_heads, s.n_layers, n, **kw)
    report = {"eigen": eig.to_dict(), "standard": std.to_dict(), "ratios": eig.ratios(std)}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(format_cost_table(eig, std))
    print(f"KV compression ratio {compression_ratio(eig, std):.3f} at n={n}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eigenattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a toy character-level model")
    t.add_argument("--corpus", help="UTF-8 text file (default: bundled sample)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=300)
    t.add_argument("--d-model", type=int, default=128)
    t.add_argument("--n-heads", type=int, default=4)
    t.add_argument("--n-layers", type=int, default=4)
    t.add_argument("--d-ffn", type=int, default=512)
    t.add_argument("--max-seq", type=int, default=64)
    t.add_argument("--pos-mode", choices=("learned", "alibi", "rope"), default="learned")
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--eval-windows", type=int, default=40)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="calibrate and compress a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--corpus")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-samples", type=int, default=16)
    c.add_argument("--seq-len", type=int, default=64)
    c.add_argument("--averaging-factor", type=int, default=1)
    c.add_argument("--max-rows", type=int)
    budget = c.add_mutually_exclusive_group(required=True)
    budget.add_argument("--error-budget", type=float)
    budget.add_argument("--target-ratio", type=float)
    c.add_argument("--budget-grid", help="comma-separated e_b values for --target-ratio")
    c.add_argument("--step-size", type=float, default=0.02)
    c.add_argument("--eps-floor", type=float, default=0.02)
    c.set_defaults(func=cmd_compress)

    e = sub.add_parser("eval", help="perplexity of standard vs compressed checkpoints")
    e.add_argument("--standard", required=True)
    e.add_argument("--eigen", nargs="*")
    e.add_argument("--corpus")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--quant-grid", help="bits:group pairs, e.g. 2:32,4:128")
    e.add_argument("--n", type=int, help="context length for KV byte accounting")
    e.add_argument("--eval-windows", type=int, default=40)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="analytic KV / parameter / FLOP report")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--n", type=int)
    r.add_argument("--batch", type=int, default=1)
    r.add_argument("--precision-bits", type=int, default=16)
    r.add_argument("--out", help="JSON output path")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, SvdError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
