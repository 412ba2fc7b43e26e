"""Command-line entry point: generate, train, eval, attribute, ablate, report.

Exit status 1 means the config failed validation, 2 means a file could not be
read or written.
"""

from __future__ import annotations

import os

_threads = os.environ.get("HCT_THREADS")
if _threads:
    # must be set before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import AblationFlags, ConfigError, RunConfig
from .evalsuite import MetricsReport, accuracy, davies_bouldin, dump_maps, keyframe_ratio
from .model import prepare_split
from .synthbench import dataset_hash, load_eval_labels, load_training_data, write_dataset
from .training import load_checkpoint, predict_prepared, save_checkpoint, two_stage_train, write_trace

log = logging.getLogger("hctransformer")

# ablation-table rows and the flags that realize them
ABLATION_ROWS = (
    ("Backbone", "no_hm_encoder,no_ctx_encoder,no_decoder"),
    ("+HmEnc", "no_ctx_encoder,no_decoder"),
    ("+CtxEnc", "no_hm_encoder,no_decoder"),
    ("+HmEnc+CtxEnc(late-fusion)", "no_decoder"),
    ("Full", ""),
    ("Full-Prototypes", "no_prototypes"),
    ("Full-Masking", "no_masking"),
)
COMPARISON_COLUMNS = ("row", "ablation", "source_accuracy", "target_accuracy", "human_ratio",
                      "davies_bouldin_target")


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.bench.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "ablation", None) is not None:
        cfg.model.ablation = AblationFlags.parse(args.ablation)
    cfg.validate()
    return cfg


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(args.data or cfg.paths.data)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_run(cfg: RunConfig, data: Path, out: Path) -> dict:
    source, target, spec = load_training_data(data)
    if spec.n_cls < 2:
        raise ConfigError("dataset has fewer than two classes")
    cfg.model.M, cfg.model.D = spec.M, spec.D
    state, trace = two_stage_train(source, target, cfg.model, cfg.train, spec.n_cls)
    save_checkpoint(out / "checkpoint.bin", state)
    write_trace(out / "loss_trace.csv", trace)
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "dataset": str(data),
        "dataset_sha256": dataset_hash(data),
        "variant": state.variant,
        "steps": len(trace),
        "final_losses": trace[-1] if trace else {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def evaluate_run(cfg: RunConfig, data: Path, run: Path, with_ratio: bool | None = None) -> MetricsReport:
    state = load_checkpoint(run / "checkpoint.bin")
    source, target, spec = load_training_data(data)
    target_labels = load_eval_labels(data)
    rep = MetricsReport(state.variant)
    src_prep = prepare_split(source, state.model)
    tgt_prep = prepare_split(target, state.model)
    tgt_pred = predict_prepared(state, tgt_prep)
    if cfg.eval.accuracy:
        rep.source_accuracy = accuracy(predict_prepared(state, src_prep).labels, source.labels)
        rep.target_accuracy = accuracy(tgt_pred.labels, target_labels)
    if cfg.eval.davies_bouldin:
        rep.davies_bouldin_target = davies_bouldin(tgt_pred.features, target_labels)
    if cfg.eval.human_ratio if with_ratio is None else with_ratio:
        idx = np.arange(min(cfg.eval.attribution_videos, len(target)))
        ratio, _ = keyframe_ratio(state, tgt_prep, target.masks, idx, tgt_pred.labels[idx], (spec.H, spec.W),
                                  cfg.eval.threshold_coef, cfg.eval.ratio_denominator)
        rep.human_ratio, rep.human_ratio_skipped = ratio.ratio, ratio.skipped
    trace_path = run / "loss_trace.csv"
    if trace_path.exists():
        with open(trace_path) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            rep.loss_trace_final = {k: float(v) for k, v in rows[-1].items()}
    return rep


def cmd_generate(args) -> None:
    cfg = load_config(args)
    paths = write_dataset(_out_dir(args, cfg), cfg.bench)
    for p in paths.values():
        print(p)


def cmd_train(args) -> None:
    cfg = load_config(args)
    out = _out_dir(args, cfg)
    manifest = train_run(cfg, _data_dir(args, cfg), out)
    print(f"trained {manifest['variant']} for {manifest['steps']} steps -> {out}")


def cmd_eval(args) -> None:
    cfg = load_config(args)
    run = Path(args.run or args.out or cfg.paths.out)
    rep = evaluate_run(cfg, _data_dir(args, cfg), run)
    out = _out_dir(args, cfg) if args.out else run
    rep.to_json(out / "metrics.json")
    rep.to_csv(out / "metrics.csv")
    print(json.dumps({k: v for k, v in dataclasses.asdict(rep).items() if k != "loss_trace_final"}))


def cmd_attribute(args) -> None:
    cfg = load_config(args)
    data = _data_dir(args, cfg)
    run = Path(args.run or args.out or cfg.paths.out)
    state = load_checkpoint(run / "checkpoint.bin")
    _, target, spec = load_training_data(data)
    prep = prepare_split(target, state.model)
    idx = np.arange(min(cfg.eval.attribution_videos, len(target)))
    pred = predict_prepared(state, prep)
    ratio, maps = keyframe_ratio(state, prep, target.masks, idx, pred.labels[idx], (spec.H, spec.W),
                                 cfg.eval.threshold_coef, cfg.eval.ratio_denominator)
    out = _out_dir(args, cfg) if args.out else run
    dump_maps(out / "attribution", maps, idx)
    doc = dataclasses.asdict(ratio)
    (out / "human_ratio.json").write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc))


def ablate_rows(cfg: RunConfig, data: Path, out: Path, rows=ABLATION_ROWS) -> list[dict]:
    results = []
    for name, flags in rows:
        run_cfg = RunConfig.from_dict(cfg.to_dict())
        run_cfg.model.ablation = AblationFlags.parse(flags)
        run_dir = out / name.replace("+", "plus_").replace("(", "_").replace(")", "").replace("-", "_minus_")
        run_dir.mkdir(parents=True, exist_ok=True)
        train_run(run_cfg, data, run_dir)
        rep = evaluate_run(run_cfg, data, run_dir)
        rep.to_json(run_dir / "metrics.json")
        results.append({"row": name, "ablation": flags, "source_accuracy": rep.source_accuracy,
                        "target_accuracy": rep.target_accuracy, "human_ratio": rep.human_ratio,
                        "davies_bouldin_target": rep.davies_bouldin_target})
        log.info("%s: target accuracy %.3f", name, rep.target_accuracy)
    full = next((r for r in results if r["row"] == "Full"), None)
    if full is not None:
        for r in results:
            if r["row"] in ("Full-Prototypes", "Full-Masking") and r["target_accuracy"] > full["target_accuracy"]:
                log.warning("%s beats Full on target accuracy (%.3f > %.3f)", r["row"], r["target_accuracy"],
                            full["target_accuracy"])
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS)
        w.writeheader()
        w.writerows(results)
    return results


def cmd_ablate(args) -> None:
    cfg = load_config(args)
    out = _out_dir(args, cfg)
    ablate_rows(cfg, _data_dir(args, cfg), out)
    print(render_table(out / "comparison.csv"))


def render_table(path: Path) -> str:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    cols = ("row", "source_accuracy", "target_accuracy", "human_ratio", "davies_bouldin_target")
    heads = ("Variant", "Source acc", "Target acc", "Human ratio %", "DBI (target)")

    def fmt(col, v):
        if col == "row" or v in ("", None):
            return v or "-"
        x = float(v)
        return f"{100 * x:.1f}" if col.endswith("accuracy") else f"{x:.2f}"

    body = [[fmt(c, r[c]) for c in cols] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(heads)]
    line = "  ".join(h.ljust(w) for h, w in zip(heads, widths))
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line, sep] + ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body])


def cmd_report(args) -> None:
    cfg = load_config(args)
    path = Path(args.out or cfg.paths.out) / "comparison.csv"
    print(render_table(path))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hct", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("train", cmd_train), ("eval", cmd_eval),
                     ("attribute", cmd_attribute), ("ablate", cmd_ablate), ("report", cmd_report)):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config; defaults fill anything omitted")
        s.add_argument("--data", help="dataset directory")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int, help="overrides bench.seed and train.seed")
        s.add_argument("--ablation", help="comma list of ablation flags")
        if name in ("eval", "attribute"):
            s.add_argument("--run", help="training run directory holding checkpoint.bin")
        s.set_defaults(fn=fn)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
