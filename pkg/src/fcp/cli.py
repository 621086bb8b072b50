"""Command-line entry point: train, eval, gradcheck, pseudomask-compare, ablation."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import harness
from .fileio import load_feature_map, load_mask_pgm, save_mask_pgm
from .gradsuite import pipeline_checks, primitive_checks
from .model import forward
from .pseudomask import mask_metrics

log = logging.getLogger("fcp")

ABLATION_GROUPS = {
    "components": harness.COMPONENT_ABLATION,
    "losses": harness.LOSS_ABLATION,
    "steps": harness.STEP_SWEEP,
}


def _emit(obj, fh=None) -> None:
    fh = fh or sys.stdout
    fh.write(json.dumps(obj, sort_keys=True) + "\n")
    fh.flush()


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _variant_list(text: str) -> list[str]:
    out: list[str] = []
    for name in (x.strip() for x in text.split(",")):
        if not name:
            continue
        out.extend(ABLATION_GROUPS.get(name, (name,)))
    return out


# -- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.steps is not None:
        cfg = cfg.replace(total_steps=args.steps)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        every = max(1, args.log_every)

        def on_step(entry, _params):
            if entry["step"] % every == 0 or entry["step"] == cfg.total_steps - 1:
                _emit({"event": "step", **entry}, log_fh)

        run = harness.train(cfg, callback=on_step)
        harness.save_checkpoint(args.out, run.params, cfg)
        _emit({"event": "checkpoint", "path": os.fspath(args.out), "steps": cfg.total_steps, "seed": cfg.seed}, log_fh)
    finally:
        if log_fh is not sys.stdout:
            log_fh.close()
    return 0


def cmd_eval(args) -> int:
    params, cfg = harness.load_checkpoint(args.checkpoint)
    if args.masks:
        os.makedirs(args.masks, exist_ok=True)

    def on_episode(i, ep, result):
        if args.masks:
            save_mask_pgm(os.path.join(args.masks, f"episode{i:05d}_pred.pgm"), result.pred.data >= cfg.threshold)
            save_mask_pgm(os.path.join(args.masks, f"episode{i:05d}_gt.pgm"), ep.query[2])

    report = harness.evaluate(params, cfg, n_episodes=args.episodes, shots=args.k, on_episode=on_episode)
    for rec in report.records:
        _emit({"event": "episode", **rec})
    _emit({"event": "summary", **report.summary()})
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    suites = (("primitive", primitive_checks(tol=args.tol)), ("pipeline", pipeline_checks(tol=args.tol)))
    for suite, reports in suites:
        for name, rep in reports.items():
            ok = bool(rep.passed)
            _emit({"check": f"{suite}/{name}", "passed": ok, "max_rel_error": float(rep.max_rel_error), "coords": int(rep.n_checked)})
            failed += not ok
    _emit({"check": "summary", "failed": failed})
    return 1 if failed else 0


def _file_episode(args):
    """Build one support/query episode from feature files and PGM masks."""
    need = ("support_sam", "support_backbone", "support_mask", "query_sam", "query_backbone")
    missing = [n for n in need if getattr(args, n) is None]
    if missing:
        raise SystemExit("file mode needs --" + ", --".join(m.replace("_", "-") for m in missing))
    support = [
        (
            load_feature_map(args.support_sam).astype(np.float64),
            load_feature_map(args.support_backbone).astype(np.float64),
            load_mask_pgm(args.support_mask).astype(np.float64),
        )
    ]
    query = (
        load_feature_map(args.query_sam).astype(np.float64),
        load_feature_map(args.query_backbone).astype(np.float64),
        load_mask_pgm(args.query_mask).astype(np.float64) if args.query_mask else None,
    )
    return support, query


def cmd_pseudomask_compare(args) -> int:
    params, cfg = harness.load_checkpoint(args.checkpoint)
    mcfg = cfg.model_config()
    threshold = cfg.threshold if args.threshold is None else args.threshold
    if args.out:
        os.makedirs(args.out, exist_ok=True)

    if args.support_sam is not None:
        support, (g_q, f_q, m_q) = _file_episode(args)
        episodes = [(support, g_q, f_q, m_q)]
    else:
        episodes = [
            (ep.support, *ep.query)
            for ep in harness.eval_episodes(cfg.dataset(), args.episodes, cfg.eval_seed, 1, cfg.max_shapes, cfg.min_fg)
        ]

    conv_rows, attn_rows = [], []
    for i, (support, g_q, f_q, m_q) in enumerate(episodes):
        result = forward(params, mcfg, support, g_q, f_q)
        conv = result.pseudo
        attn = result.attn_masks[-1].data if result.attn_masks else None
        rec = {"event": "episode", "episode": i}
        if m_q is not None:
            rec["conventional"] = mask_metrics(conv, m_q, threshold).as_dict()
            conv_rows.append(rec["conventional"])
            if attn is not None:
                rec["attention"] = mask_metrics(attn, m_q, threshold).as_dict()
                attn_rows.append(rec["attention"])
        if args.out:
            save_mask_pgm(os.path.join(args.out, f"episode{i:05d}_conventional.pgm"), conv >= threshold)
            if attn is not None:
                save_mask_pgm(os.path.join(args.out, f"episode{i:05d}_attention.pgm"), attn >= threshold)
        _emit(rec)
    summary = {"event": "summary", "episodes": len(episodes), "threshold": threshold}
    for key, rows in (("conventional", conv_rows), ("attention", attn_rows)):
        if rows:
            summary[key] = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    _emit(summary)
    return 0


def cmd_ablation(args) -> int:
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    variants = _variant_list(args.variants)
    rows = harness.run_ablation(cfg, variants, seeds=_int_list(args.seeds), n_episodes=args.episodes)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            harness.write_ablation_csv(rows, fh)
    else:
        harness.write_ablation_csv(rows, sys.stdout)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fcp", description="Foreground-covering prototype few-shot segmentation on synthetic features.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("--config", help="key = value config file (defaults when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--out", default="fcp.ckpt", help="checkpoint path")
    p.add_argument("--log", help="JSON-lines log file (stdout when omitted)")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on novel-class episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--k", type=int, help="support shots")
    p.add_argument("--masks", help="directory for predicted and ground-truth PGM masks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive and the full loss")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pseudomask-compare", help="conventional vs attention-based pseudo-mask quality")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="directory for PGM pseudo-masks")
    for name in ("support-sam", "support-backbone", "support-mask", "query-sam", "query-backbone", "query-mask"):
        kind = "PGM mask" if name.endswith("mask") else "feature file"
        p.add_argument(f"--{name}", help=f"{kind} (file mode; replaces sampled episodes)")
    p.set_defaults(func=cmd_pseudomask_compare)

    p = sub.add_parser("ablation", help="train and evaluate ablation variants, emit CSV")
    p.add_argument("--config")
    p.add_argument("--variants", required=True, help="comma list of variants or groups: " + ", ".join(ABLATION_GROUPS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_ablation)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, harness.CheckpointError, OSError, ValueError) as err:
        print(f"fcp: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
