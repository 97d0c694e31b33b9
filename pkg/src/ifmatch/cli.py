"""Command-line front door.

Subcommands:
  split         build a dataset split and write its manifest CSV
  train         run one training configuration; writes metrics.csv,
                curves.png, and checkpoint.bin
  eval          load a checkpoint and report (EMA) test accuracy
  perturb-demo  apply one feature-perturbation strategy to a fixture
                tensor; writes before/after CSVs and a heatmap PNG
  compare       run a configuration matrix over shared seeds; writes a
                ranked summary CSV and a bar chart

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
All file outputs are deterministic for a fixed config and seed (wall-time
metrics are zeroed unless ``metrics.timing = measured``); measured wall
time is reported on stdout.  ``IFMATCH_THREADS`` caps compare workers.
"""

import argparse
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import datahub, featperturb, nets, report, trainer
from .checkpoint import read_container, write_container
from .config import ExperimentConfig, build_policy, parse_config
from .errors import ConfigError, DataError, NumericAbort
from .streams import named_stream
from .tensor import Tensor


def _build_split(cfg: ExperimentConfig) -> datahub.DatasetSplit:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        source = datahub.gen_synthetic(
            classes=ds.classes,
            per_class=ds.per_class,
            image_size=ds.size,
            difficulty=ds.difficulty,
            seed=cfg.trainer.seed,
            channels=ds.channels,
            test_per_class=ds.test_per_class,
        )
    elif ds.kind == "idx":
        source = datahub.source_from_idx(
            ds.train_images, ds.train_labels, ds.test_images, ds.test_labels
        )
    else:
        source = datahub.source_from_csv(
            ds.train_csv, ds.test_csv, ds.channels, ds.size, ds.size
        )
    if ds.longtail:
        profile = datahub.LongTailConfig(ds.n1, ds.m1, ds.gamma, source.num_classes)
        return datahub.split_longtail(source, profile, cfg.trainer.seed)
    return datahub.split_balanced(
        source, ds.num_labels, cfg.trainer.seed, ds.include_labeled_in_unlabeled
    )


def _model_spec(cfg: ExperimentConfig, split: datahub.DatasetSplit) -> nets.ModelSpec:
    return nets.ModelSpec(
        stage_widths=tuple(cfg.model.widths),
        blocks_per_stage=cfg.model.blocks_per_stage,
        num_classes=split.num_classes,
        input_shape=split.image_shape(),
        kind=cfg.model.kind,
    )


def _run_training(cfg: ExperimentConfig, outdir: str, quiet: bool = False):
    os.makedirs(outdir, exist_ok=True)
    split = _build_split(cfg)
    spec = _model_spec(cfg, split)
    policy = build_policy(cfg, split.image_shape(), split.channel_means())
    log = None if quiet else (lambda msg: print(msg, flush=True))
    record, state = trainer.train(cfg.trainer, split, spec, policy=policy,
                                  feat_pool=cfg.feat_pool, log=log)
    for section in ("dataset", "aug"):
        for key, value in vars(getattr(cfg, section)).items():
            record.config[f"{section}.{key}"] = value
    record.config["feat.pool"] = cfg.feat_pool
    metrics_path = os.path.join(outdir, "metrics.csv")
    report.emit_metrics(record, metrics_path)
    report.render_training_figure(record, os.path.join(outdir, "curves.png"))
    write_container(os.path.join(outdir, "checkpoint.bin"), trainer.checkpoint_entries(state))
    with open(os.path.join(outdir, "ledger.csv"), "w", newline="") as fh:
        fh.write("id,h,M\n")
        for sid, h, m in state.ledger.dump_rows():
            fh.write(f"{sid},{float(h)!r},{m}\n")
    return record, state


def cmd_split(args) -> int:
    cfg = parse_config(args.config)
    split = _build_split(cfg)
    datahub.write_manifest(split, args.out)
    print(f"manifest: {args.out} ({split.labeled_ids.size} labeled, "
          f"{split.unlabeled_ids.size} unlabeled, {split.test_ids.size} test)")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    record, _ = _run_training(cfg, args.out, quiet=args.quiet)
    s = record.summary
    print(f"final ema_acc={s['final_ema_acc']:.4f} best={s['best_ema_acc']:.4f} "
          f"mean_naive_ratio={s['mean_naive_ratio']:.3f} wall={s['wall_seconds']:.1f}s")
    print(f"outputs: {args.out}/metrics.csv, curves.png, checkpoint.bin")
    return 0


def cmd_eval(args) -> int:
    cfg = parse_config(args.config)
    split = _build_split(cfg)
    spec = _model_spec(cfg, split)
    model = nets.build(spec, seed=cfg.trainer.seed)
    entries = read_container(args.checkpoint)
    prefix = "ema." if args.use_ema else "model."
    params = {}
    for name, p in model.param_items():
        arr = entries.get(prefix + name)
        if arr is None:
            raise DataError(f"checkpoint missing entry {prefix + name!r}")
        if arr.shape != p.data.shape:
            raise DataError(
                f"checkpoint/config shape mismatch for {name!r}: "
                f"{arr.shape} vs {p.data.shape}"
            )
        params[name] = Tensor(arr)
    acc, per_class = trainer.evaluate(
        model, split.test_images, split.test_classes,
        params=params, batch=cfg.trainer.eval_batch,
    )
    kind = "ema" if args.use_ema else "live"
    print(f"{kind} accuracy: {acc:.4f}")
    for c, a in per_class.items():
        print(f"  class {c}: {'absent' if a is None else f'{a:.4f}'}")
    return 0


def _fixture_tensor(channels: int, size: int, seed: int) -> np.ndarray:
    rng = named_stream(seed, "feat", 0)
    v, u = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    planes = []
    for c in range(channels):
        planes.append(np.sin(2 * np.pi * (u + v) * (c + 1)) + 0.1 * rng.standard_normal((size, size)))
    return np.stack(planes)[None, :, :, :]


def _dump_feature_csv(path: str, arr: np.ndarray):
    with open(path, "w", newline="") as fh:
        fh.write("channel,row,col,value\n")
        _, c, h, w = arr.shape
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    fh.write(f"{ci},{i},{j},{float(arr[0, ci, i, j])!r}\n")


def cmd_perturb_demo(args) -> int:
    if args.strategy not in featperturb.STRATEGIES:
        raise ConfigError(
            f"unknown strategy {args.strategy!r}; known: {featperturb.STRATEGIES}"
        )
    os.makedirs(args.out, exist_ok=True)
    fixture = _fixture_tensor(args.channels, args.size, args.seed)
    shape = fixture.shape[1:]
    if args.identity:
        draw = featperturb.PerturbDraw(
            "translate", "weak", shape, direction="right", length=0
        )
    else:
        rng = named_stream(args.seed, "feat", 1)
        draw = featperturb.sample_draw({args.strategy}, shape, args.intensity, rng)
    out = featperturb.apply(Tensor(fixture), draw).data
    before_path = os.path.join(args.out, "before.csv")
    after_path = os.path.join(args.out, "after.csv")
    _dump_feature_csv(before_path, fixture)
    _dump_feature_csv(after_path, out)
    report.render_perturb_figure(fixture[0, 0], out[0, 0], os.path.join(args.out, "heatmap.png"))
    print(f"draw: {draw}")
    print(f"outputs: {before_path}, {after_path}, heatmap.png")
    return 0


def _compare_cell(job):
    """One compare matrix cell for one seed (run in a worker process)."""
    cfg, outdir = job
    record, _ = _run_training(cfg, outdir, quiet=True)
    return record.summary["final_ema_acc"], record.summary["mean_naive_ratio"]


def _cell_name(paradigm, b1, b2, use_cbi) -> str:
    parts = [paradigm]
    if b1 != "constant":
        parts.append(f"b1-{b1}")
    parts.append(f"b2-{b2}")
    if paradigm == "ifmatch" and not use_cbi:
        parts.append("nocbi")
    return "+".join(parts)


def cmd_compare(args) -> int:
    cfg = parse_config(args.config)
    paradigms = args.paradigms.split(",") if args.paradigms else [cfg.trainer.paradigm]
    branch1 = args.branch1.split(",") if args.branch1 else [cfg.trainer.branch1_threshold]
    branch2 = args.branch2.split(",") if args.branch2 else [cfg.trainer.threshold_kind]
    cbis = [v == "true" for v in args.cbi.split(",")] if args.cbi else [cfg.trainer.cbi]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.trainer.seed]
    os.makedirs(args.out, exist_ok=True)

    jobs, keys = [], []
    for paradigm in paradigms:
        for b1 in branch1:
            for b2 in branch2:
                for use_cbi in cbis:
                    cell = _cell_name(paradigm, b1, b2, use_cbi)
                    for seed in seeds:
                        run_cfg = ExperimentConfig(
                            trainer=replace(
                                cfg.trainer, paradigm=paradigm, branch1_threshold=b1,
                                threshold_kind=b2, cbi=use_cbi, seed=seed,
                            ),
                            dataset=cfg.dataset, model=cfg.model, aug=cfg.aug,
                            feat_pool=cfg.feat_pool,
                        )
                        cell_dir = os.path.join(args.out, f"{cell.replace('+', '_')}_seed{seed}")
                        jobs.append((run_cfg, cell_dir))
                        keys.append((cell, seed))

    workers = int(os.environ.get("IFMATCH_THREADS", "0")) or (os.cpu_count() or 1)
    workers = max(1, min(workers, len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_compare_cell, jobs))
    else:
        results = [_compare_cell(job) for job in jobs]

    by_cell = {}
    for (cell, seed), (acc, ratio) in zip(keys, results):
        by_cell.setdefault(cell, []).append((seed, acc, ratio))
    table = []
    for cell, rows in by_cell.items():
        accs = [a for _, a, _ in rows]
        ratios = [r for _, _, r in rows]
        table.append({
            "cell": cell,
            "seeds": len(rows),
            "mean_ema_acc": sum(accs) / len(accs),
            "sd_ema_acc": statistics.stdev(accs) if len(accs) > 1 else 0.0,
            "mean_naive_ratio": sum(ratios) / len(ratios),
        })
    table.sort(key=lambda r: -r["mean_ema_acc"])

    summary_path = os.path.join(args.out, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        fh.write("rank,cell,seeds,mean_ema_acc,sd_ema_acc,mean_naive_ratio\n")
        for rank, row in enumerate(table, start=1):
            fh.write(
                f"{rank},{row['cell']},{row['seeds']},{row['mean_ema_acc']:.6g},"
                f"{row['sd_ema_acc']:.6g},{row['mean_naive_ratio']:.6g}\n"
            )
    report.render_compare_figure(table, os.path.join(args.out, "chart.png"))
    print(f"{'rank':<5}{'cell':<40}{'mean_ema_acc':<14}{'sd':<10}")
    for rank, row in enumerate(table, start=1):
        print(f"{rank:<5}{row['cell']:<40}{row['mean_ema_acc']:<14.4f}{row['sd_ema_acc']:<10.4f}")
    print(f"outputs: {summary_path}, chart.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ifmatch",
        description="Desk-scale semi-supervised consistency-training lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a dataset split manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="manifest CSV path")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--live", dest="use_ema", action="store_false",
                   help="evaluate live weights instead of the EMA shadow")
    p.set_defaults(fn=cmd_eval, use_ema=True)

    p = sub.add_parser("perturb-demo", help="apply one perturbation to a fixture")
    p.add_argument("--strategy", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--intensity", default="weak", choices=("weak", "strong"))
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identity", action="store_true",
                   help="use a degenerate draw (zero-length translate)")
    p.set_defaults(fn=cmd_perturb_demo)

    p = sub.add_parser("compare", help="run a config matrix over shared seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--paradigms", default="")
    p.add_argument("--branch1", default="", help="branch-1 threshold axis: constant,mirror")
    p.add_argument("--branch2", default="", help="branch-2 threshold axis: constant,flex,free,soft")
    p.add_argument("--cbi", default="", help="identification axis: true,false")
    p.add_argument("--seeds", default="", help="comma-separated seed list")
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        for key, value in sorted(exc.diagnostics.items()):
            print(f"  {key} = {value:.6g}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
