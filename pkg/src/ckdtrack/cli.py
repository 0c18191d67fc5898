"""Command-line entry point: ``ckdtrack {train,eval,ablate,gap-report}``.

Any config key can be overridden as ``--key value`` (e.g. ``--train.steps 100``).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import SampleSource, load_dataset, synthetic_benchmark
from .elimination import EliminationConfig
from .errors import CKDError, ConfigError, DataError
from .evaluate import CKDTracker, EchoTracker, evaluate, gap_report
from .train import Trainer, load_checkpoint, save_checkpoint, variant_flags

log = logging.getLogger("ckdtrack")

# named flags -> config keys
FLAG_KEYS = {
    "seed": "seed",
    "steps": "train.steps",
    "variant": "train.variant",
    "mask_ratio": "train.mask_ratio",
    "keep_ratio": "elim.keep_ratio",
    "elim": "elim.mode",
    "tau": "eval.tau",
    "out": "out_dir",
    "data_root": "data.root",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--synthetic", action="store_true", help="use the synthetic benchmark")
    p.add_argument("--data-root", help="dataset directory (rgb/, tir/, groundtruth.txt per sequence)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ckdtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a four-branch model")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--variant")
    p.add_argument("--mask-ratio", type=float)

    p = sub.add_parser("eval", help="one-pass evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--tau", type=float, help="PR threshold in pixels (5 for small objects, 20 otherwise)")
    p.add_argument("--elim", choices=["none", "ce", "ce_rgb_only", "mce"])
    p.add_argument("--keep-ratio", type=float)
    p.add_argument("--echo-gt", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("ablate", help="train and evaluate several variants")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--variants", default="baseline,ckd")
    p.add_argument("--seeds", default="3", help="a count N (seeds 0..N-1) or a comma list")
    p.add_argument("--mask-ratios", help="comma list applied to variants with masked modelling")
    p.add_argument("--elims", default=None, help="comma list of elimination modes to evaluate")
    p.add_argument("--tau", type=float)
    p.add_argument("--keep-ratio", type=float)

    p = sub.add_parser("gap-report", help="style statistics of the two students")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--samples", type=int, default=64)
    return parser


def _parse_overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            val = extra[i + 1]
            i += 2
        out[key] = val
    return out


def resolve_config(args, extra: list[str]) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    values = {}
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    if getattr(args, "synthetic", False):
        values["data.synthetic"] = "true"
    elif getattr(args, "data_root", None):
        values["data.synthetic"] = "false"
    values.update(_parse_overrides(extra))
    return cfg.update(values).validate()


def _datasets(cfg: RunConfig):
    if cfg["data.synthetic"]:
        return synthetic_benchmark(cfg["data.n_train"], cfg["data.n_test"], cfg["data.length"],
                                   cfg["data.canvas"], cfg["data.seed"], cfg["data.style"])
    root = cfg["data.root"]
    if not root:
        raise DataError("no dataset: pass --synthetic or --data-root")
    seqs = load_dataset(root)
    test = load_dataset(cfg["data.test_root"]) if cfg["data.test_root"] else seqs
    if not seqs:
        raise DataError(f"no sequences under {root}")
    return seqs, test


def _train(cfg: RunConfig, train_seqs, out_dir: Path | None = None):
    trainer = Trainer(SampleSource(train_seqs, cfg.crop()), cfg.train(), cfg.model())
    log_path = out_dir / "loss.csv" if out_dir else None
    trainer.run(log_path=log_path)
    return trainer


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    train_seqs, _ = _datasets(cfg)
    trainer = _train(cfg, train_seqs, out)
    save_checkpoint(trainer.model, out / "checkpoint.npz")
    last = trainer.history[-1] if trainer.history else None
    print(f"trained {trainer.step_count} steps -> {out / 'checkpoint.npz'}"
          + (f" (final total loss {last.total:.4f})" if last else ""))
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: Path | None, echo_gt: bool = False) -> int:
    _, test = _datasets(cfg)
    if echo_gt:
        make = EchoTracker
    else:
        if checkpoint is None:
            raise ConfigError("eval needs --checkpoint")
        model = load_checkpoint(checkpoint)
        crop, elim = cfg.crop(), cfg.elim()
        make = lambda: CKDTracker(model, crop, elim)  # noqa: E731
    report = evaluate(make, test, cfg["eval.tau"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    agg = report.aggregate
    print(f"PR@{cfg['eval.tau']:g}={agg['pr']:.4f} NPR={agg['npr']:.4f} SR={agg['sr']:.4f} "
          f"-> {out / 'metrics.json'}")
    return 0


ABLATION_COLUMNS = ["variant", "mask_ratio", "elim", "seed", "pr", "npr", "sr",
                    "final_task", "final_cd", "final_sd"]


def _split(text: str | None, cast=str):
    return [cast(t.strip()) for t in text.split(",") if t.strip()] if text else []


def run_ablation(cfg: RunConfig, variants, seeds, mask_ratios=None, elims=None) -> list[dict]:
    train_seqs, test = _datasets(cfg)
    elims = elims or [cfg["elim.mode"]]
    rows = []
    for variant in variants:
        flags = variant_flags(variant)
        ratios = (mask_ratios or [cfg["train.mask_ratio"]]) if flags.mm else [0.0]
        for ratio in ratios:
            for seed in seeds:
                run = cfg.with_values(**{"train.variant": variant, "train.mask_ratio": ratio,
                                         "seed": seed})
                trainer = _train(run, train_seqs)
                last = trainer.history[-1]
                for mode in elims:
                    elim = None if mode == "none" else EliminationConfig(
                        cfg["elim.layers"], cfg["elim.keep_ratio"], mode)
                    rep = evaluate(lambda: CKDTracker(trainer.model, run.crop(), elim),
                                   test, cfg["eval.tau"])
                    rows.append({
                        "variant": variant, "mask_ratio": ratio, "elim": mode, "seed": seed,
                        **rep.aggregate, "final_task": last.task,
                        "final_cd": last.cd if flags.cd else "",
                        "final_sd": last.sd if (flags.sd or flags.fd) else "",
                    })
                    log.info("%s", rows[-1])
    return rows


def cmd_ablate(cfg: RunConfig, args) -> int:
    variants = _split(args.variants)
    for v in variants:
        variant_flags(v)
    seeds = (list(range(int(args.seeds))) if args.seeds.strip().isdigit()
             else _split(args.seeds, int))
    if not seeds or not variants:
        raise ConfigError("ablate needs at least one variant and one seed")
    rows = run_ablation(cfg, variants, seeds, _split(args.mask_ratios, float) or None,
                        _split(args.elims) or None)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows)} rows -> {out / 'ablation.csv'}")
    return 0


def cmd_gap_report(cfg: RunConfig, checkpoint: Path, n_samples: int) -> int:
    _, test = _datasets(cfg)
    model = load_checkpoint(checkpoint)
    samples = SampleSource(test, cfg.crop()).batch(np.random.default_rng(cfg["seed"]), n_samples)
    report = gap_report(model, samples, cfg["distill.epsilon"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "gap_report.csv").write_text(report.to_csv())
    for row in report.layer_rows():
        print("layer {layer}: style {style_distance:.6f} pre-IN {pre_in:.6f} "
              "post-IN {post_in:.6f}".format(**row))
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = resolve_config(args, extra)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.echo_gt)
        if args.command == "ablate":
            return cmd_ablate(cfg, args)
        return cmd_gap_report(cfg, args.checkpoint, args.samples)
    except (CKDError, OSError) as exc:
        print(f"ckdtrack {args.command}: error: {str(exc).splitlines()[0]}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
