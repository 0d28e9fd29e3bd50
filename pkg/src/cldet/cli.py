"""Config-driven experiment runner.

Subcommands cover the full desk-scale protocol: dataset generation, joint
and continual training, evaluation, tabular reports, figures, the
memory-size sensitivity table and the ablation grid. Every run directory
gets a manifest with the config hash, seed and library versions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

import click

from .config import ExperimentConfig, write_manifest
from .continual import (
    METHOD_NAMES,
    EvalEntry,
    MethodConfig,
    build_schedule,
    evaluate,
    method_from_name,
    parse_scenario,
    run_scenario,
    sensitivity_delta_percent,
    write_results_csv,
    write_summary_json,
)
from .data import AnnotationFile, dataset_items, generate_dataset
from .detector import ToyDetector
from .distill import DistillConfig


@click.group()
def main():
    """Continual-learning experiments for a toy anchor-free detector."""


config_opt = click.option(
    "--config", "config_path", type=click.Path(exists=True), default=None,
    help="YAML experiment config; defaults apply when omitted.",
)
out_opt = click.option("--out-dir", type=click.Path(), default="runs", show_default=True)
seed_opt = click.option("--seed", type=int, default=None, help="Override config seeds.")


def _load_data(data_dir: Path) -> tuple[AnnotationFile, AnnotationFile, Path]:
    ann_dir = data_dir / "annotations"
    train = AnnotationFile.load(ann_dir / "full_train.json")
    test = AnnotationFile.load(ann_dir / "full_test.json")
    return train, test, data_dir / "images"


def _distill_from(cfg: ExperimentConfig) -> DistillConfig:
    d = cfg.distill
    return DistillConfig(
        d.temperature, d.beta1, d.beta2,
        cfg.ablation.ce, cfg.ablation.wce, cfg.ablation.cls_iou,
    )


def _method(cfg: ExperimentConfig, name: str) -> MethodConfig:
    m = method_from_name(name, _distill_from(cfg))
    if m.distill_kind == "vanilla":
        m.vanilla_lambda = cfg.vanilla_lambda
    if m.distill_kind == "erd":
        m.erd_params = {
            "alpha1": cfg.erd.alpha1, "alpha2": cfg.erd.alpha2,
            "lambda1": cfg.erd.lambda1, "lambda2": cfg.erd.lambda2,
            "t": cfg.erd.t, "tau_kl": cfg.erd.tau_kl,
        }
    if m.name.startswith("yolo-lwf"):
        m.use_mask = cfg.ablation.mask
    return m


def _run_method(
    cfg: ExperimentConfig,
    data_dir: Path,
    out_dir: Path,
    method: MethodConfig,
    scenario: str,
    memory_size: int,
    seeds: list[int],
) -> list[EvalEntry]:
    train_ann, test_ann, images_root = _load_data(data_dir)
    n, m = parse_scenario(scenario)
    schedule = build_schedule(len(train_ann.categories), n, m)
    entries: list[EvalEntry] = []
    for seed in seeds:
        ckpt = out_dir / "checkpoints" / f"{method.name}_seed{seed}"
        ckpt.mkdir(parents=True, exist_ok=True)
        result = run_scenario(
            train_ann, test_ann, images_root, schedule, method,
            cfg.model.grid(), cfg.model.num_bins, cfg.model.width,
            cfg.train, seed=seed, memory_capacity=memory_size,
            metric=cfg.continual.metric, checkpoint_dir=ckpt,
        )
        entries.extend(result.entries)
    write_results_csv(out_dir / "results.csv", scenario, entries)
    write_summary_json(out_dir / f"summary_{method.name}.json", scenario, entries)
    return entries


@main.command("gen-data")
@config_opt
@out_opt
@seed_opt
def gen_data(config_path, out_dir, seed):
    """Generate the synthetic shapes benchmark (images + annotations)."""
    cfg = ExperimentConfig.from_yaml(config_path)
    if seed is not None:
        cfg.dataset.seed = seed
    out = Path(out_dir)
    spec = cfg.dataset.scene_spec()
    generate_dataset(spec, cfg.dataset.num_train, cfg.dataset.num_test, out)
    write_manifest(out, cfg, cfg.dataset.seed, {"command": "gen-data"})
    click.echo(f"wrote {cfg.dataset.num_train}+{cfg.dataset.num_test} images to {out}")


@main.command("train-joint")
@config_opt
@out_opt
@seed_opt
@click.option("--data-dir", type=click.Path(exists=True), required=True)
def train_joint(config_path, out_dir, seed, data_dir):
    """Train one model on all classes at once (the upper-bound baseline)."""
    cfg = ExperimentConfig.from_yaml(config_path)
    seeds = [seed] if seed is not None else list(cfg.continual.seeds)
    out = Path(out_dir)
    num_classes = cfg.dataset.num_classes
    method = MethodConfig("joint", "none", use_mask=False)
    entries = _run_method(
        cfg, Path(data_dir), out, method, f"{num_classes}p{num_classes}", 0, seeds
    )
    write_manifest(out, cfg, seeds[0], {"command": "train-joint"})
    for e in entries:
        click.echo(f"joint seed={e.seed} all mAP={e.all_map * 100:.1f}")


@main.command("train-cl")
@config_opt
@out_opt
@seed_opt
@click.option("--data-dir", type=click.Path(exists=True), required=True)
@click.option("--method", "method_name", required=True)
@click.option("--scenario", default=None, help="NpM string, e.g. 4p4; overrides config.")
@click.option("--memory-size", type=int, default=None)
def train_cl(config_path, out_dir, seed, data_dir, method_name, scenario, memory_size):
    """Run one continual-learning method through the task stream."""
    cfg = ExperimentConfig.from_yaml(config_path)
    if method_name not in METHOD_NAMES:
        raise click.UsageError(
            f"unknown method {method_name!r}; valid: {', '.join(METHOD_NAMES)}"
        )
    seeds = [seed] if seed is not None else list(cfg.continual.seeds)
    scenario = scenario or cfg.continual.scenario
    memory = memory_size if memory_size is not None else cfg.continual.memory_size
    out = Path(out_dir)
    method = _method(cfg, method_name)
    entries = _run_method(cfg, Path(data_dir), out, method, scenario, memory, seeds)
    write_manifest(out, cfg, seeds[0], {"command": "train-cl", "method": method_name})
    final = [e for e in entries if e.task_index == max(x.task_index for x in entries)]
    for e in final:
        click.echo(
            f"{method_name} seed={e.seed} old={e.old_map * 100:.1f} "
            f"new={e.new_map * 100:.1f} all={e.all_map * 100:.1f}"
        )


@main.command("eval")
@config_opt
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--data-dir", type=click.Path(exists=True), required=True)
def eval_cmd(config_path, checkpoint, data_dir):
    """Evaluate a stored checkpoint on the full test split."""
    cfg = ExperimentConfig.from_yaml(config_path)
    if not Path(checkpoint).exists():
        raise click.UsageError(f"checkpoint not found: {checkpoint}")
    model = ToyDetector.load(checkpoint)
    _train, test_ann, images_root = _load_data(Path(data_dir))
    items = dataset_items(test_ann, images_root)
    classes = {c["id"] for c in test_ann.categories}
    _old, _new, allm = evaluate(model, items, (set(), classes), cfg.continual.metric)
    click.echo(f"all-class mAP ({cfg.continual.metric}) = {allm * 100:.2f}")


def _read_results(path: Path) -> list[dict]:
    with path.open() as f:
        return list(csv.DictReader(f))


def _format_table(rows: list[dict]) -> str:
    """Mean over seeds of final-task old/new/all, one line per method."""
    from collections import defaultdict

    final: dict[str, int] = {}
    for r in rows:
        final[r["scenario"]] = max(final.get(r["scenario"], 0), int(r["task"]))
    acc = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if int(r["task"]) == final[r["scenario"]]:
            acc[(r["scenario"], r["method"])]["old"].append(float(r["old"]))
            acc[(r["scenario"], r["method"])]["new"].append(float(r["new"]))
            acc[(r["scenario"], r["method"])]["all"].append(float(r["all"]))
    lines = [f"{'scenario':<10}{'method':<18}{'old':>8}{'new':>8}{'all':>8}"]
    lines.append("-" * 52)
    for (scenario, method) in sorted(acc):
        v = acc[(scenario, method)]
        lines.append(
            f"{scenario:<10}{method:<18}"
            + "".join(
                f"{sum(v[k]) / len(v[k]) * 100:>8.1f}" for k in ("old", "new", "all")
            )
        )
    return "\n".join(lines) + "\n"


@main.command("report")
@click.option("--results", type=click.Path(exists=True), required=True,
              help="results.csv produced by train-cl / train-joint.")
@out_opt
def report(results, out_dir):
    """Format stored results as a table and render the standard figures."""
    rows = _read_results(Path(results))
    table = _format_table(rows)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(table)
    from .plots import plot_old_new_bars, plot_task_curves

    plot_task_curves(rows, out / "task_curves.png")
    plot_old_new_bars(rows, out / "final_bars.png")
    click.echo(table, nl=False)


@main.command("plot")
@click.option("--results", type=click.Path(exists=True), required=True)
@out_opt
def plot(results, out_dir):
    """Render per-task mAP curves and final old/new/all bars."""
    rows = _read_results(Path(results))
    from .plots import plot_old_new_bars, plot_task_curves

    out = Path(out_dir)
    p1 = plot_task_curves(rows, out / "task_curves.png")
    p2 = plot_old_new_bars(rows, out / "final_bars.png")
    click.echo(f"wrote {p1} and {p2}")


@main.command("sensitivity")
@config_opt
@out_opt
@seed_opt
@click.option("--data-dir", type=click.Path(exists=True), required=True)
@click.option("--method", "method_name", default="yolo-lwf+ocdm", show_default=True)
@click.option("--memory-size", type=int, required=True, help="Larger memory m1.")
@click.option("--memory-size-2", type=int, required=True, help="Smaller memory m2.")
@click.option("--scenario", default=None)
def sensitivity(config_path, out_dir, seed, data_dir, method_name, memory_size,
                memory_size_2, scenario):
    """Train at two memory sizes and report the relative drop (delta %)."""
    cfg = ExperimentConfig.from_yaml(config_path)
    seeds = [seed] if seed is not None else list(cfg.continual.seeds)
    scenario = scenario or cfg.continual.scenario
    out = Path(out_dir)
    method = _method(cfg, method_name)
    maps = {}
    for m_size in (memory_size, memory_size_2):
        entries = _run_method(
            cfg, Path(data_dir), out / f"m{m_size}", method, scenario, m_size, seeds
        )
        last = max(e.task_index for e in entries)
        finals = [e.all_map for e in entries if e.task_index == last]
        maps[m_size] = sum(finals) / len(finals)
    delta = sensitivity_delta_percent(maps[memory_size], maps[memory_size_2])
    table = (
        f"{'method':<18}{'m=' + str(memory_size):>10}{'m=' + str(memory_size_2):>10}{'delta%':>9}\n"
        f"{method_name:<18}{maps[memory_size] * 100:>10.1f}"
        f"{maps[memory_size_2] * 100:>10.1f}{delta:>8.1f}%\n"
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "sensitivity.txt").write_text(table)
    write_manifest(out, cfg, seeds[0], {"command": "sensitivity"})
    click.echo(table, nl=False)


ABLATION_ROWS = [
    {"ce": False, "wce": False, "mask": False, "cls_iou": False},
    {"ce": True, "wce": False, "mask": False, "cls_iou": False},
    {"ce": True, "wce": True, "mask": False, "cls_iou": False},
    {"ce": True, "wce": True, "mask": True, "cls_iou": False},
    {"ce": True, "wce": True, "mask": True, "cls_iou": True},
]


@main.command("ablate")
@config_opt
@out_opt
@seed_opt
@click.option("--data-dir", type=click.Path(exists=True), required=True)
@click.option("--scenario", default=None)
@click.option("--toggles", default=None,
              help="Comma-separated subset of ce,wce,mask,cls_iou to sweep "
                   "progressively; default runs the full five-row grid.")
def ablate(config_path, out_dir, seed, data_dir, scenario, toggles):
    """Progressive toggle grid for the self-distillation components."""
    cfg = ExperimentConfig.from_yaml(config_path)
    seeds = [seed] if seed is not None else list(cfg.continual.seeds)
    scenario = scenario or cfg.continual.scenario
    out = Path(out_dir)
    rows = ABLATION_ROWS
    if toggles:
        wanted = [t.strip() for t in toggles.split(",")]
        unknown = [t for t in wanted if t not in ("ce", "wce", "mask", "cls_iou")]
        if unknown:
            raise click.UsageError(f"unknown toggles: {unknown}")
        rows = [{k: False for k in ("ce", "wce", "mask", "cls_iou")}]
        state = dict(rows[0])
        for t in wanted:
            state = dict(state, **{t: True})
            rows.append(state)
    lines = [f"{'ce':<5}{'wce':<5}{'mask':<6}{'cls_iou':<8}{'old':>8}{'new':>8}{'all':>8}"]
    results = []
    for row in rows:
        run_cfg = ExperimentConfig.from_yaml(config_path)
        run_cfg.ablation = replace(run_cfg.ablation, **row)
        method = _method(run_cfg, "yolo-lwf")
        tag = "_".join(k for k, v in row.items() if v) or "none"
        entries = _run_method(
            run_cfg, Path(data_dir), out / tag, method, scenario, 0, seeds
        )
        last = max(e.task_index for e in entries)
        finals = [e for e in entries if e.task_index == last]
        old = sum(e.old_map for e in finals) / len(finals)
        new = sum(e.new_map for e in finals) / len(finals)
        allm = sum(e.all_map for e in finals) / len(finals)
        results.append({**row, "old": old, "new": new, "all": allm})
        mark = lambda b: "x" if b else "-"
        lines.append(
            f"{mark(row['ce']):<5}{mark(row['wce']):<5}{mark(row['mask']):<6}"
            f"{mark(row['cls_iou']):<8}{old * 100:>8.1f}{new * 100:>8.1f}{allm * 100:>8.1f}"
        )
    table = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(json.dumps(results, indent=2))
    write_manifest(out, cfg, seeds[0], {"command": "ablate"})
    click.echo(table, nl=False)


if __name__ == "__main__":
    main()
