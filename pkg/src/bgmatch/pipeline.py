"""Experiment orchestration: staged runs, caching, sweeps, comparisons.

Each stage is cached under ``<outroot>/cache/<stage>-<hash>/`` where the
hash chains the stage's own config section with every upstream hash, so any
config change invalidates exactly that stage and everything downstream.
Reruns with an unchanged config are cache hits. The ``BGMATCH_OUT``
environment variable relocates the output root.
"""

from __future__ import annotations

import csv
import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, config_hash
from .datamodel import Dataset, load_dataset, save_dataset
from .evalkit import MetricsReport, SamplerSpec, evaluate
from .synthgen import (
    SplitSpec,
    generate_pgc,
    generate_ugc,
    genre_ratio_intervention,
    load_ground_truth,
    save_ground_truth,
    split_strong_generalization,
)
from .student import StudentModel, load_student, save_student, train_student
from .teacher import TeacherModel, load_teacher, save_teacher, train_teacher
from .nncore import parameter_fingerprint


class StageError(RuntimeError):
    """A pipeline stage failed; partial artifacts are kept on disk."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def output_root(config: ExperimentConfig) -> Path:
    root = os.environ.get("BGMATCH_OUT", ".")
    return Path(root) / config.outdir


def _stage_dir(root: Path, stage: str, key: str) -> Path:
    return root / "cache" / f"{stage}-{key}"


def _run_stage(root: Path, stage: str, key: str, builder) -> Path:
    """Run ``builder(dir)`` unless the stage directory is already complete."""
    directory = _stage_dir(root, stage, key)
    marker = directory / ".done"
    if marker.exists():
        return directory
    directory.mkdir(parents=True, exist_ok=True)
    try:
        builder(directory)
    except Exception as exc:
        raise StageError(stage, exc) from exc
    marker.write_text("ok\n")
    return directory


@dataclass
class PipelineArtifacts:
    """Paths and reports produced by one pipeline invocation."""

    root: Path
    generate_dir: Path | None = None
    split_dir: Path | None = None
    teacher_dirs: dict | None = None
    student_dirs: dict | None = None
    reports: tuple[MetricsReport, ...] = ()
    metrics_csv: Path | None = None


def _build_split(config: ExperimentConfig, dataset: Dataset) -> SplitSpec:
    method = config.flat["split.method"]
    ratios = tuple(float(r) for r in config.flat["split.ratios"])
    seed = int(config.flat["split.seed"])
    if method == "strong":
        return split_strong_generalization(
            dataset, ratios=ratios, seed=seed, n_strata=int(config.flat["split.n_strata"])
        )
    if method == "genre_ratio":
        return genre_ratio_intervention(
            dataset,
            X=float(config.flat["split.X"]),
            genre_a=int(config.flat["split.genre_a"]),
            genre_b=int(config.flat["split.genre_b"]),
            seed=seed,
            ratios=ratios,
        )
    raise StageError("split", ValueError(f"unknown split method {method!r}"))


def _sampler(config: ExperimentConfig, truth) -> SamplerSpec:
    kind = config.flat["eval.sampler"]
    fraction = float(config.flat["eval.fraction"])
    return SamplerSpec(
        kind=kind,
        fraction=fraction,
        ground_truth=truth if kind == "matching" else None,
    )


def _write_history_csv(path: Path, history: list[dict], seed: int, phase: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "phase", "epoch", "component", "value"])
        for row in history:
            epoch = row.get("epoch")
            for key in sorted(row):
                if key == "epoch":
                    continue
                writer.writerow([seed, phase, epoch, key, repr(row[key])])


def run_pipeline(config: ExperimentConfig, run_id: str = "run") -> PipelineArtifacts:
    """Execute generate -> split -> teacher -> student -> evaluate.

    Every stage is cached by its config-chain hash; the returned artifacts
    carry per-seed reports and the combined metrics CSV.
    """
    root = output_root(config)
    root.mkdir(parents=True, exist_ok=True)
    stages = config.stages
    art = PipelineArtifacts(root=root)

    gen_hash = config.section_hash("gen")

    def build_generate(directory: Path):
        ugc, truth = generate_ugc(config.gen_config())
        save_dataset(ugc, directory / "ugc.jsonl")
        save_ground_truth(truth, directory / "truth.jsonl")
        pgc = generate_pgc(config.gen_config())
        save_dataset(pgc, directory / "pgc.jsonl")

    if "generate" not in stages:
        return art
    art.generate_dir = _run_stage(root, "generate", gen_hash, build_generate)
    if stages[-1] == "generate":
        return art

    ugc = load_dataset(art.generate_dir / "ugc.jsonl")
    truth = load_ground_truth(art.generate_dir / "truth.jsonl")

    split_hash = config_hash({"up": gen_hash, "split": config.section_hash("split")})

    def build_split(directory: Path):
        spec = _build_split(config, ugc)
        spec.save(directory / "split.jsonl")

    art.split_dir = _run_stage(root, "split", split_hash, build_split)
    if stages[-1] == "split":
        return art
    split = SplitSpec.load(art.split_dir / "split.jsonl")

    teacher_by_seed: dict[int, TeacherModel | None] = {}
    art.teacher_dirs = {}
    if "teacher" in stages and config.teacher_enabled:
        pgc = load_dataset(art.generate_dir / "pgc.jsonl")
        for seed in config.seeds:
            t_hash = config_hash(
                {"up": gen_hash, "teacher": config.section_hash("teacher"), "seed": seed}
            )

            def build_teacher(directory: Path, seed=seed):
                model = train_teacher(pgc, config.teacher_hyper(), seed=seed)
                save_teacher(model, directory / "teacher.pt", config_hash=t_hash)
                _write_history_csv(directory / "losses.csv", model.history, seed, "teacher")

            directory = _run_stage(root, "teacher", t_hash, build_teacher)
            art.teacher_dirs[seed] = directory
            teacher_by_seed[seed] = load_teacher(directory / "teacher.pt")
    else:
        for seed in config.seeds:
            teacher_by_seed[seed] = None
    if stages[-1] == "teacher":
        return art

    art.student_dirs = {}
    students: dict[int, StudentModel] = {}
    for seed in config.seeds:
        teacher = teacher_by_seed.get(seed)
        teacher_hash = parameter_fingerprint(teacher)[:12] if teacher is not None else ""
        s_hash = config_hash(
            {
                "up": split_hash,
                "teacher": teacher_hash,
                "student": config.section_hash("student"),
                "seed": seed,
            }
        )

        def build_student(directory: Path, seed=seed, teacher=teacher, teacher_hash=teacher_hash, s_hash=s_hash):
            model = train_student(ugc, split, teacher, config.student_hyper(), seed=seed)
            save_student(model, directory / "student.pt", teacher_hash=teacher_hash, config_hash=s_hash)
            _write_history_csv(directory / "losses.csv", model.history, seed, "student")

        directory = _run_stage(root, "student", s_hash, build_student)
        art.student_dirs[seed] = directory
        students[seed] = load_student(directory / "student.pt")
    if stages[-1] == "student":
        return art

    reports = []
    for seed in config.seeds:
        e_hash = config_hash(
            {
                "up": config_hash({"student": str(art.student_dirs[seed])}),
                "eval": config.section_hash("eval"),
                "seed": seed,
            }
        )

        def build_eval(directory: Path, seed=seed):
            report = evaluate(
                students[seed],
                ugc,
                split,
                sampler=_sampler(config, truth),
                Ks=config.eval_ks,
                seed=seed,
                run_id=run_id,
                config_hash=config.hash(),
            )
            report.save_csv(directory / "metrics.csv")

        directory = _run_stage(root, "evaluate", e_hash, build_eval)
        reports.append(MetricsReport.from_csv(directory / "metrics.csv"))

    combined = MetricsReport.merge(reports)
    meta = {"intervention_X": config.flat["split.X"]} if config.flat["split.method"] == "genre_ratio" else {}
    combined.meta.update(meta)
    art.reports = tuple(reports)
    art.metrics_csv = root / "metrics.csv"
    art.metrics_csv.write_text(combined.to_csv_text())
    _plot_losses(art, config)
    return art


def _plot_losses(art: PipelineArtifacts, config: ExperimentConfig) -> None:
    if not art.student_dirs:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for seed, directory in art.student_dirs.items():
        losses = directory / "losses.csv"
        if not losses.exists():
            continue
        epochs, totals = [], []
        with open(losses, newline="") as fh:
            for rec in csv.DictReader(fh):
                if rec["component"] == "train_total":
                    epochs.append(int(rec["epoch"]))
                    totals.append(float(rec["value"]))
        if epochs:
            ax.plot(epochs, totals, label=f"seed {seed}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    plots = art.root / "plots"
    plots.mkdir(exist_ok=True)
    fig.savefig(plots / "student_loss.png", dpi=110)
    plt.close(fig)


def run_sweep(config: ExperimentConfig) -> tuple[MetricsReport, Path]:
    """Run the ablation grid: deconfounder modes x teacher weights x seeds.

    Teacher weight 0 cells skip knowledge transfer entirely; the expensive
    teacher stage is shared through the cache. Returns the merged report and
    the sweep CSV path.
    """
    modes = config.flat["ablation.deconfounder_modes"]
    modes = (modes,) if isinstance(modes, str) else modes
    weights = config.flat["ablation.teacher_weights"]
    weights = (weights,) if isinstance(weights, (int, float)) else weights
    reports = []
    for mode in modes:
        for w in weights:
            overrides = {
                "student.deconfounder_mode": mode,
                "student.kt_weight_video": float(w),
                "student.kt_weight_music": float(w),
                "teacher.enabled": config.teacher_enabled and float(w) > 0,
            }
            cell = config.with_overrides(overrides)
            label = f"mode={mode},kt={w:g}"
            art = run_pipeline(cell, run_id=label)
            reports.extend(art.reports)
    merged = MetricsReport.merge(reports)
    path = output_root(config) / "sweep_metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(merged.to_csv_text())
    return merged, path


def compare_runs(reports: list[MetricsReport], labels: list[str] | None = None, out_dir=None):
    """Align reports on shared (split, sampler, metric, K) keys.

    Returns aggregate rows with per-seed mean and std for each report, and
    when every report carries an ``intervention_X`` meta value, writes a
    metric-versus-X line plot.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    labels = labels or [rep.meta.get("run_id", f"run{i}") for i, rep in enumerate(reports)]
    key_sets = [
        {(r.split, r.sampler, r.metric, r.K) for r in rep.rows} for rep in reports
    ]
    shared = set.intersection(*key_sets)
    if not shared:
        detail = "; ".join(f"{lbl}: {sorted(ks)[:3]}" for lbl, ks in zip(labels, key_sets))
        raise ValueError(f"reports share no (split, sampler, metric, K) keys ({detail})")

    table = []
    for key in sorted(shared):
        split, sampler, metric, K = key
        entry = {"split": split, "sampler": sampler, "metric": metric, "K": K}
        for label, rep in zip(labels, reports):
            values = [
                r.value for r in rep.rows
                if (r.split, r.sampler, r.metric, r.K) == key
            ]
            mean = math.fsum(values) / len(values)
            var = math.fsum((v - mean) ** 2 for v in values) / len(values) if len(values) > 1 else 0.0
            entry[f"{label}_mean"] = mean
            entry[f"{label}_std"] = math.sqrt(var)
            entry[f"{label}_n"] = len(values)
        table.append(entry)

    plot_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "compare.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(table[0].keys()), lineterminator="\n")
            writer.writeheader()
            writer.writerows(table)
        xs = [rep.meta.get("intervention_X") for rep in reports]
        if all(x is not None for x in xs) and len(set(xs)) > 1:
            plot_path = _plot_metric_vs_x(reports, labels, out_dir)
    return table, plot_path


def _plot_metric_vs_x(reports, labels, out_dir: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_run: dict[str, list[tuple[float, float]]] = {}
    for rep, label in zip(reports, labels):
        x = float(rep.meta["intervention_X"])
        values = [r.value for r in rep.rows if r.metric == "recall" and r.K == min(ro.K for ro in rep.rows)]
        if not values:
            continue
        by_run.setdefault(label.split("@")[0], []).append((x, math.fsum(values) / len(values)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, points in sorted(by_run.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=label)
    ax.set_xlabel("training ratio X")
    ax.set_ylabel("recall")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "compare.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def clear_cache(config: ExperimentConfig) -> None:
    cache = output_root(config) / "cache"
    if cache.exists():
        shutil.rmtree(cache)
