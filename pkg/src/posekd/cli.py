"""Experiment runner CLI.

Subcommands: gen-data, train, ablate-paths, sweep-beta, eval, report.
Every artifact this tool writes (datasets, metrics CSVs, checkpoints,
traces) is byte-identical across reruns with the same config and seeds;
wall-clock timings go to a separate timings.txt that is allowed to differ.

Output goes under --out, else $POSEKD_OUT, else ./runs.  --jobs fans the
per-seed work out to worker processes; results are merged in seed order,
so the artifacts do not depend on the job count.
"""

import argparse
import csv
import json
import multiprocessing
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from posekd.distill import (
    PATH_IDS,
    DistillationPlan,
    DivergenceError,
    PhaseCache,
    TrainConfig,
    build_models,
    dataset_fingerprint,
    make_plan,
    run_plan,
    validate_plan,
)
from posekd.evaluate import (
    OKSParams,
    evaluate_gt_oracle,
    evaluate_model,
)
from posekd.heatmaps import HeatmapSet, binarize, count_peaks
from posekd.losses import LossWeights
from posekd.nn.checkpoint import CheckpointError, load_model, load_params, save_params
from posekd.synthdata import (
    GenerationError,
    SceneConfig,
    SchemaError,
    read_dataset,
    write_dataset,
)


class ConfigError(ValueError):
    """Raised for unusable experiment configuration files."""


@dataclass(frozen=True)
class DataConfig:
    train_count: int = 256
    val_count: int = 64
    train_seed: int = 1000
    val_seed: int = 2000
    train_path: str = "data/train.jsonl"
    val_path: str = "data/val.jsonl"


@dataclass(frozen=True)
class PlanConfig:
    path: str = "j"
    mode: str = "phased"
    student_loss: str = "bce"
    teacher_epochs: int = 24
    student_epochs: int = 16


@dataclass(frozen=True)
class EvalSettings:
    falloff: float = 0.1
    area_boundary: float = 322.0
    flip: bool = True
    quarter_offset: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig
    data: DataConfig
    plan: PlanConfig
    weights: LossWeights
    train: TrainConfig
    eval: EvalSettings
    seeds: tuple[int, ...]


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config section {section!r} has unknown keys: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section {section!r}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    known_sections = {"scene", "data", "plan", "weights", "train", "eval", "seeds"}
    unknown = sorted(set(data) - known_sections)
    if unknown:
        raise ConfigError(f"config has unknown sections: {unknown}")
    cfg = ExperimentConfig(
        scene=_build_section(SceneConfig, data.get("scene", {}), "scene"),
        data=_build_section(DataConfig, data.get("data", {}), "data"),
        plan=_build_section(PlanConfig, data.get("plan", {}), "plan"),
        weights=_build_section(LossWeights, data.get("weights", {}), "weights"),
        train=_build_section(TrainConfig, data.get("train", {}), "train"),
        eval=_build_section(EvalSettings, data.get("eval", {}), "eval"),
        seeds=tuple(data.get("seeds", (0, 1, 2, 3, 4))),
    )
    problems = cfg.weights.validate() + cfg.train.validate()
    if not cfg.seeds:
        problems.append("seeds list is empty")
    if cfg.plan.path not in PATH_IDS:
        problems.append(f"plan.path {cfg.plan.path!r} not in {PATH_IDS!r}")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return cfg


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return config_from_dict(data)


def plan_from_config(cfg: ExperimentConfig, path_id: str | None = None,
                     student_loss: str | None = None,
                     weights: LossWeights | None = None) -> DistillationPlan:
    return make_plan(
        path_id or cfg.plan.path,
        weights=weights if weights is not None else cfg.weights,
        teacher_epochs=cfg.plan.teacher_epochs,
        student_epochs=cfg.plan.student_epochs,
        mode=cfg.plan.mode,
        student_loss=student_loss or cfg.plan.student_loss,
    )


def oks_from_config(cfg: ExperimentConfig, joint_count: int) -> OKSParams:
    return OKSParams.uniform(
        joint_count, k=cfg.eval.falloff, area_boundary=cfg.eval.area_boundary
    )


def out_root(explicit: str | None) -> str:
    return explicit or os.environ.get("POSEKD_OUT") or "runs"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str, schema: str, header: list[str], rows: list[list]) -> None:
    """CSV with a schema comment line; floats keep full repr precision."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# schema={schema}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str) -> tuple[str, list[str], list[list[str]]]:
    with open(path, newline="") as f:
        first = f.readline().strip()
        schema = first[len("# schema=") :] if first.startswith("# schema=") else ""
        reader = csv.reader(f)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} has no header row")
    return schema, rows[0], rows[1:]


def _load_datasets(cfg: ExperimentConfig):
    for path in (cfg.data.train_path, cfg.data.val_path):
        if not os.path.isfile(path):
            raise ConfigError(
                f"dataset {path} does not exist; generate it with: posekd gen-data"
            )
    return read_dataset(cfg.data.train_path), read_dataset(cfg.data.val_path)


def _history_rows(result, run_id: str) -> list[list]:
    rows = []
    for rec in result.state.history:
        rows.append(
            [
                run_id,
                rec["path"],
                rec["seed"],
                rec["segment"],
                rec["phase_label"],
                rec["trainee"],
                rec["epoch_in_phase"],
                rec["loss"],
                rec["val_ap"],
            ]
        )
    return rows


METRICS_HEADER = [
    "run", "path", "seed", "segment", "phase_label", "trainee", "epoch", "loss", "val_ap",
]

# Per-seed workers run either inline (--jobs 1) or in forked processes.
# The shared read-only inputs travel once per worker via the initializer
# instead of being pickled into every task.
_WORKER_CTX: dict | None = None


def _init_worker(ctx: dict | None) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _map_seeds(jobs: int, worker, seeds: list[int], ctx: dict) -> list:
    if jobs <= 1 or len(seeds) <= 1:
        _init_worker(ctx)
        try:
            return [worker(seed) for seed in seeds]
        finally:
            _init_worker(None)
    with multiprocessing.get_context("fork").Pool(
        min(jobs, len(seeds)), initializer=_init_worker, initargs=(ctx,)
    ) as pool:
        return pool.map(worker, seeds)


def _shared_ctx(cfg: ExperimentConfig, train_samples, val_samples) -> dict:
    joint_count = cfg.scene.joint_count
    return {
        "cfg": cfg,
        "train": train_samples,
        "val": val_samples,
        "models": build_models(joint_count, (cfg.scene.height, cfg.scene.width)),
        "oks": oks_from_config(cfg, joint_count),
        "dataset_key": dataset_fingerprint(train_samples),
    }


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    jobs = []
    if args.out is not None:
        count = args.count if args.count is not None else cfg.data.train_count
        seed = args.seed if args.seed is not None else cfg.data.train_seed
        jobs.append((args.out, count, seed))
    else:
        if args.count is not None or args.seed is not None:
            raise ConfigError("--count/--seed overrides need an explicit --out path")
        jobs.append((cfg.data.train_path, cfg.data.train_count, cfg.data.train_seed))
        jobs.append((cfg.data.val_path, cfg.data.val_count, cfg.data.val_seed))
    for path, count, seed in jobs:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        samples = write_dataset(cfg.scene, count, seed, path)
        n_inst = sum(len(s.instances) for s in samples)
        occluded = sum(
            1 for s in samples
            if any(kp.v == 1 for inst in s.instances for kp in inst.keypoints)
        )
        rate = occluded / len(samples) if samples else 0.0
        print(
            f"wrote {count} samples to {path} (seed {seed}): "
            f"{n_inst} instances, overlap rate {rate:.2f} "
            f"(samples with an occluded keypoint)"
        )
    return 0


def _train_seed(seed: int):
    ctx = _WORKER_CTX
    cfg = ctx["cfg"]
    plan = ctx["plan"]
    run_id = f"{plan.path_id}-{plan.mode}-{plan.student_loss}-s{seed}"
    started = time.monotonic()
    result = run_plan(
        plan, ctx["train"], ctx["val"], seed, cfg.train,
        models=ctx["models"], dataset_key=ctx["dataset_key"], oks_params=ctx["oks"],
    )
    seconds = time.monotonic() - started
    out_dir = ctx["out_dir"]
    write_csv(
        os.path.join(out_dir, f"metrics_seed{seed}.csv"),
        "posekd.metrics.v1",
        METRICS_HEADER,
        _history_rows(result, run_id),
    )
    with open(os.path.join(out_dir, f"trace_seed{seed}.json"), "w") as f:
        json.dump(result.state.trace, f, sort_keys=True)
    save_params(result.student, os.path.join(out_dir, f"student_seed{seed}"),
                ctx["models"]["S"])
    return seed, run_id, result.final_ap, seconds


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = os.path.join(out_root(args.out), "train")
    os.makedirs(out_dir, exist_ok=True)
    train_samples, val_samples = _load_datasets(cfg)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)

    plan = plan_from_config(cfg)
    problems = validate_plan(plan)
    if problems:
        raise ConfigError("invalid plan: " + "; ".join(problems))
    ctx = _shared_ctx(cfg, train_samples, val_samples)
    ctx["plan"] = plan
    ctx["out_dir"] = out_dir

    results = _map_seeds(args.jobs, _train_seed, seeds, ctx)
    results.sort(key=lambda r: r[0])
    for seed, run_id, ap, _ in results:
        print(f"{run_id}: final AP {ap:.4f}")

    aps = [r[2] for r in results]
    write_csv(
        os.path.join(out_dir, "summary.csv"),
        "posekd.train_summary.v1",
        ["path", "mode", "student_loss", "n_seeds", "mean_ap", "std_ap"],
        [[plan.path_id, plan.mode, plan.student_loss, len(aps),
          float(np.mean(aps)), float(np.std(aps))]],
    )
    with open(os.path.join(out_dir, "timings.txt"), "w") as f:
        for _, run_id, _, seconds in results:
            f.write(f"{run_id} {seconds:.2f}s\n")
    print(f"mean AP over {len(aps)} seed(s): {float(np.mean(aps)):.4f}")
    return 0


def _ablate_seed(seed: int):
    ctx = _WORKER_CTX
    cfg = ctx["cfg"]
    rows, failures, timings = [], [], []
    cache = PhaseCache()  # shared across paths so teachers train once per seed
    for path_id in ctx["paths"]:
        plan = plan_from_config(cfg, path_id=path_id)
        started = time.monotonic()
        try:
            result = run_plan(
                plan, ctx["train"], ctx["val"], seed, cfg.train,
                models=ctx["models"], cache=cache, dataset_key=ctx["dataset_key"],
                oks_params=ctx["oks"],
            )
        except Exception as exc:  # noqa: BLE001 - a cell failure must not kill the grid
            failures.append(f"path {path_id} seed {seed}: {exc}")
            continue
        finally:
            timings.append((path_id, seed, time.monotonic() - started))
        ev = result.final_eval
        rows.append([path_id, seed, ev.ap, ev.ar, ev.ap_medium, ev.ap_large])
    return rows, failures, timings


def cmd_ablate_paths(args) -> int:
    cfg = load_config(args.config)
    out_dir = os.path.join(out_root(args.out), "ablate")
    os.makedirs(out_dir, exist_ok=True)
    paths = list(args.paths.replace(",", "")) if args.paths else list(PATH_IDS)
    bad = [p for p in paths if p not in PATH_IDS]
    if bad:
        raise ConfigError(f"unknown path ids {bad}; valid ids are {PATH_IDS!r}")
    train_samples, val_samples = _load_datasets(cfg)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)

    ctx = _shared_ctx(cfg, train_samples, val_samples)
    ctx["paths"] = paths
    per_seed = _map_seeds(args.jobs, _ablate_seed, seeds, ctx)

    rows, failures, timings = [], [], []
    for seed_rows, seed_failures, seed_timings in per_seed:
        rows.extend(seed_rows)
        failures.extend(seed_failures)
        timings.extend(seed_timings)
    rows.sort(key=lambda r: (r[0], r[1]))
    write_csv(
        os.path.join(out_dir, "ablation.csv"),
        "posekd.ablation.v1",
        ["path", "seed", "ap", "ar", "ap_medium", "ap_large"],
        rows,
    )

    summary = []
    for path_id in paths:
        aps = [r[2] for r in rows if r[0] == path_id]
        if aps:
            summary.append([path_id, len(aps), float(np.mean(aps)), float(np.std(aps))])
    ranked = sorted(summary, key=lambda r: -r[2])
    rank_of = {row[0]: i + 1 for i, row in enumerate(ranked)}
    for row in summary:
        row.append(rank_of[row[0]])
    write_csv(
        os.path.join(out_dir, "ablation_summary.csv"),
        "posekd.ablation_summary.v1",
        ["path", "n_seeds", "mean_ap", "std_ap", "rank"],
        summary,
    )
    with open(os.path.join(out_dir, "timings.txt"), "w") as f:
        for path_id, seed, seconds in sorted(timings, key=lambda t: (t[1], t[0])):
            f.write(f"path={path_id} seed={seed} {seconds:.2f}s\n")

    for row in summary:
        print(f"path {row[0]}: mean AP {row[2]:.4f} over {row[1]} seed(s) (rank {row[4]})")
    if ranked:
        print("ranking: " + " > ".join(r[0] for r in ranked))
    if failures:
        for line in failures:
            print(f"failed: {line}", file=sys.stderr)
        return 1
    return 0


def _teacher_peak_means(models, state_params, samples, betas) -> dict[float, float]:
    """Mean connected-component count per joint of binarized teacher maps."""
    from posekd.distill import _frozen_teacher_maps  # shares the batched forward

    maps = []
    for name in ("ST", "PT"):
        if name in state_params:
            maps.append(_frozen_teacher_maps(name, models, state_params, samples))
    out = {}
    for beta in betas:
        counts = []
        for m in maps:
            for sample_maps in m:
                hs = binarize(HeatmapSet(sample_maps, "prob"), beta)
                counts.extend(count_peaks(hs))
        out[beta] = float(np.mean(counts)) if counts else float("nan")
    return out


def _sweep_seed(seed: int):
    ctx = _WORKER_CTX
    cfg = ctx["cfg"]
    betas = ctx["betas"]
    rows, failures = [], []
    peak_means = None
    cache = PhaseCache()
    # Binarized arms over the requested betas, then one control arm that
    # distills raw probability maps with an MSE loss (no binarization).
    arms = [("beta", b) for b in betas] + [("control", None)]
    for arm, beta in arms:
        if arm == "beta":
            weights = LossWeights(
                alpha0=cfg.weights.alpha0, alpha1=cfg.weights.alpha1,
                alpha2=cfg.weights.alpha2, temperature=cfg.weights.temperature,
                beta_gt=cfg.weights.beta_gt, beta_teacher=beta,
            )
            plan = plan_from_config(cfg, weights=weights)
        else:
            plan = plan_from_config(cfg, student_loss="mse")
        try:
            result = run_plan(
                plan, ctx["train"], ctx["val"], seed, cfg.train,
                models=ctx["models"], cache=cache, dataset_key=ctx["dataset_key"],
                oks_params=ctx["oks"],
            )
        except Exception as exc:  # noqa: BLE001
            failures.append(f"arm {arm} beta {beta} seed {seed}: {exc}")
            continue
        rows.append([arm, beta, seed, result.final_ap])
        if peak_means is None and "ST" in result.state.params:
            peak_means = _teacher_peak_means(
                ctx["models"], result.state.params, ctx["train"], betas
            )
    return rows, failures, peak_means


def cmd_sweep_beta(args) -> int:
    cfg = load_config(args.config)
    out_dir = os.path.join(out_root(args.out), "sweep")
    os.makedirs(out_dir, exist_ok=True)
    betas = [float(b) for b in args.betas.split(",")] if args.betas else [0.2, 0.3, 0.4, 0.5, 0.6]
    for beta in betas:
        if not 0.0 <= beta < 1.0:
            raise ConfigError(f"beta {beta} outside [0, 1)")
    train_samples, val_samples = _load_datasets(cfg)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)

    ctx = _shared_ctx(cfg, train_samples, val_samples)
    ctx["betas"] = betas
    per_seed = _map_seeds(args.jobs, _sweep_seed, seeds, ctx)

    rows, failures = [], []
    peak_sums: dict[float, list[float]] = {b: [] for b in betas}
    for seed_rows, seed_failures, peak_means in per_seed:
        rows.extend(seed_rows)
        failures.extend(seed_failures)
        if peak_means is not None:
            for b, m in peak_means.items():
                peak_sums[b].append(m)

    rows.sort(key=lambda r: (r[0], r[1] if r[1] is not None else -1.0, r[2]))
    write_csv(
        os.path.join(out_dir, "sweep.csv"),
        "posekd.sweep.v1",
        ["arm", "beta", "seed", "ap"],
        rows,
    )

    summary = []
    for beta in sorted(betas):
        aps = [r[3] for r in rows if r[0] == "beta" and r[1] == beta]
        peaks = float(np.mean(peak_sums[beta])) if peak_sums[beta] else None
        if aps:
            summary.append(["beta", beta, len(aps), float(np.mean(aps)),
                            float(np.std(aps)), peaks])
    control_aps = [r[3] for r in rows if r[0] == "control"]
    if control_aps:
        summary.append(["control", None, len(control_aps), float(np.mean(control_aps)),
                        float(np.std(control_aps)), None])
    write_csv(
        os.path.join(out_dir, "sweep_summary.csv"),
        "posekd.sweep_summary.v1",
        ["arm", "beta", "n_seeds", "mean_ap", "std_ap", "mean_teacher_peaks"],
        summary,
    )
    for row in summary:
        label = f"beta={row[1]}" if row[0] == "beta" else "no binarization (mse control)"
        print(f"{label}: mean AP {row[3]:.4f} over {row[2]} seed(s)")
    if failures:
        for line in failures:
            print(f"failed: {line}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if not os.path.isfile(args.dataset):
        raise ConfigError(f"dataset {args.dataset} does not exist")
    samples = read_dataset(args.dataset)
    if not samples:
        raise ConfigError(f"dataset {args.dataset} is empty")
    joint_count = samples[0].heatmaps[0].joint_count if samples[0].heatmaps else 5
    stride = samples[0].image.shape[1] // samples[0].heatmaps[0].grid_size[0]
    oks_params = oks_from_config(cfg, joint_count)
    flip = cfg.eval.flip and not args.no_flip
    offset = cfg.eval.quarter_offset and not args.no_offset

    if args.oracle_gt:
        result = evaluate_gt_oracle(samples, oks_params, stride, quarter_offset=offset)
        source = "gt-oracle"
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required unless --oracle-gt is given")
        model = load_model(args.checkpoint)
        store = load_params(args.checkpoint, model)
        result = evaluate_model(
            model, store, samples, oks_params, stride,
            flip=flip, quarter_offset=offset,
        )
        source = args.checkpoint

    payload = {"schema": "posekd.eval.v1", "source": source,
               "dataset": args.dataset, "flip": flip, "quarter_offset": offset}
    payload.update(result.to_dict())
    text = json.dumps(payload, sort_keys=True, indent=2)
    if args.out:
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_report(args) -> int:
    schema, header, rows = read_csv(args.csv)
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    if schema:
        print(f"[{schema}]")
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    print("  ".join("-" * w for w in widths))
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posekd",
        description="Dual-teacher distillation experiments for keypoint heatmaps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_jobs=True):
        p.add_argument("--config", help="experiment config JSON (defaults used if omitted)")
        p.add_argument("--out", help="output root (default $POSEKD_OUT or ./runs)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config list")
        if needs_jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="worker processes across seeds (default 1)")

    p = sub.add_parser("gen-data", help="generate synthetic datasets")
    common(p, needs_jobs=False)
    p.add_argument("--count", type=int, help="sample count (needs --out)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the configured path across seeds")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate-paths", help="compare distillation paths")
    common(p)
    p.add_argument("--paths", help="subset like 'a,j' (default: all ten)")
    p.set_defaults(func=cmd_ablate_paths)

    p = sub.add_parser("sweep-beta", help="sweep the teacher binarization threshold")
    common(p)
    p.add_argument("--betas", help="comma list like '0.2,0.3' (default 0.2..0.6)")
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config", help="experiment config JSON (for eval settings)")
    p.add_argument("--checkpoint", help="checkpoint directory to load")
    p.add_argument("--dataset", required=True, help="JSONL dataset to evaluate on")
    p.add_argument("--out", help="write the result JSON here as well")
    p.add_argument("--no-flip", action="store_true", help="disable flip averaging")
    p.add_argument("--no-offset", action="store_true", help="disable the quarter-cell offset")
    p.add_argument("--oracle-gt", action="store_true",
                   help="score decode() on each instance's own GT heatmaps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render one of the CSV artifacts as a table")
    p.add_argument("csv", help="CSV file written by another subcommand")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, SchemaError, GenerationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
