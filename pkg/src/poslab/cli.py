"""Reproducible experiment driver.

Subcommands: gen-data, induce-bias, distill, eval, diagnose. Every run
directory contains the exact config used (config.echo); artifacts are
reproducible from (config, seed) alone. Exit codes: 0 success, 2 config
error, 3 IO error, 4 training divergence, 5 induction failure.

Report-writing commands emit JSON + CSV and render matplotlib figures
alongside (disable with figures=false).
"""
from __future__ import annotations

import json
import logging
import statistics
import sys
from pathlib import Path

import click
import torch

from . import figures as figmod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .distill_reasoning import (
    TrajectoryDistillConfig,
    build_trajectory_records,
    save_trajectory_records_jsonl,
    train_trajectory_distill,
)
from .distill_retrieval import (
    RetrievalDistillConfig,
    build_distill_records,
    train_retrieval_distill,
    train_seqkd_baseline,
    train_sft_baseline,
)
from .errors import ConfigError, InductionFailure, TrainingDiverged
from .evalharness import (
    PositionReport,
    attention_report,
    mode_report_csv,
    position_report_csv,
    positional_accuracy,
    reasoning_mode_eval,
    report_json,
    response_ppl,
    token_shift_profile,
)
from .induction import InductionConfig, induce_bias
from .model import clone_model, freeze, params_sha256
from .tasks import (
    REASONING,
    RETRIEVAL,
    CapacityError,
    generate_dataset,
    load_instances_jsonl,
    save_instances_jsonl,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_INDUCTION = 5

VARIANTS = ("r1", "r2", "sft", "seqkd")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map library exceptions onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, CapacityError) as exc:
            _fail(EXIT_CONFIG, str(exc))
        except TrainingDiverged as exc:
            _fail(EXIT_DIVERGED, str(exc))
        except InductionFailure as exc:
            _fail(EXIT_INDUCTION, str(exc))
        except OSError as exc:
            _fail(EXIT_IO, str(exc))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _prepare_run(cfg: ExperimentConfig) -> Path:
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.echo").write_text(cfg.echo_text())
    return run


def _load_split(run: Path, cfg: ExperimentConfig, split: str):
    path = run / "data" / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run gen-data first")
    instances = load_instances_jsonl(path)
    kinds = {type(i).__name__ for i in instances}
    expected = "RetrievalInstance" if cfg.kind == RETRIEVAL else "ReasoningInstance"
    if kinds != {expected}:
        raise ConfigError(f"dataset {path} holds {kinds}, config kind is {cfg.kind}")
    return instances


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_json(payload))


def _load_model(run: Path, checkpoint: str):
    path = Path(checkpoint)
    if not path.is_absolute():
        path = run / path
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    model, extra = load_checkpoint(path)
    return freeze(model), extra, path


@click.group()
@click.option("--config", "config_path", type=str, default=None, help="Flat key = value config file.")
@click.option("-O", "--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config key (repeatable; wins over the file).")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def main(ctx, config_path, overrides, verbose):
    """Positional-bias laboratory: induce bias in a toy transformer, distill
    it away, and measure the change."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
    )
    torch.set_num_threads(1)
    try:
        ctx.obj = load_config(config_path, _parse_overrides(overrides))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


@main.command("gen-data")
@click.pass_obj
@_guard
def gen_data(cfg: ExperimentConfig):
    """Generate seeded train/eval JSONL splits plus a manifest."""
    run = _prepare_run(cfg)
    train = generate_dataset(cfg.kind, cfg.train_size, cfg.n_docs, cfg.seed, cfg.vocab_size, start_id=0)
    eval_set = generate_dataset(
        cfg.kind, cfg.eval_size, cfg.n_docs, cfg.seed, cfg.vocab_size, start_id=cfg.train_size
    )
    n_train = save_instances_jsonl(run / "data" / "train.jsonl", train)
    n_eval = save_instances_jsonl(run / "data" / "eval.jsonl", eval_set)
    manifest = {
        "kind": cfg.kind,
        "n_docs": cfg.n_docs,
        "vocab_size": cfg.vocab_size,
        "seed": cfg.seed,
        "train_count": n_train,
        "eval_count": n_eval,
        "train_id_range": [0, cfg.train_size],
        "eval_id_range": [cfg.train_size, cfg.train_size + cfg.eval_size],
    }
    _write_json(run / "manifest.json", manifest)
    click.echo(f"wrote {n_train} train / {n_eval} eval instances under {run / 'data'}")


@main.command("induce-bias")
@click.pass_obj
@_guard
def induce_bias_cmd(cfg: ExperimentConfig):
    """Pre-train a teacher whose advantaged position dominates."""
    run = _prepare_run(cfg)
    train = _load_split(run, cfg, "train")
    eval_set = _load_split(run, cfg, "eval")
    icfg = InductionConfig(
        kind=cfg.kind,
        p_sink=cfg.p_sink,
        batch_size=cfg.induce_batch_size,
        learning_rate=cfg.induce_lr,
        max_steps=cfg.induce_max_steps,
        eval_every=cfg.induce_eval_every,
        target_accuracy=cfg.target_accuracy,
        min_steps=cfg.induce_min_steps,
        seed=cfg.seed,
        max_new=cfg.decode_budget,
    )
    try:
        model, history = induce_bias(cfg.model_config(), train, eval_set, icfg)
    except InductionFailure as exc:
        _write_json(run / "history.json", {"induction": exc.history})
        raise
    path = run / "checkpoints" / "teacher.ckpt"
    save_checkpoint(path, model, extra={"role": "teacher", "seed": cfg.seed, "kind": cfg.kind})
    _write_json(run / "history.json", {"induction": history})
    click.echo(
        f"teacher reached advantaged accuracy {history['final_accuracy']:.3f}; wrote {path}"
    )


def _distill_r1_family(cfg: ExperimentConfig, run: Path, teacher, variant: str):
    train = _load_split(run, cfg, "train")[: cfg.records]
    records, skipped = build_distill_records(
        teacher, train, k=cfg.k, seed=cfg.seed, max_new=cfg.decode_budget
    )
    if not records:
        raise ConfigError("no usable distillation records (all skipped)")
    student_init = clone_model(teacher, trainable=True)
    rcfg = RetrievalDistillConfig(
        k=cfg.k,
        anchor_weight=cfg.anchor_weight,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        use_align=cfg.use_align if variant == "r1" else False,
        use_anchor=cfg.use_anchor if variant == "r1" else False,
        seed=cfg.seed,
        max_new=cfg.decode_budget,
    )
    if variant == "r1":
        student, history = train_retrieval_distill(teacher, student_init, records, rcfg)
    elif variant == "sft":
        student, history = train_sft_baseline(student_init, records, train, rcfg)
    else:
        student, history = train_seqkd_baseline(student_init, records, rcfg)
    history["skipped_records"] = skipped
    return student, history


def _distill_r2(cfg: ExperimentConfig, run: Path, teacher):
    train = _load_split(run, cfg, "train")[: cfg.records]
    records, invalid = build_trajectory_records(
        teacher, train, k=cfg.k, seed=cfg.seed, max_new=cfg.decode_budget
    )
    save_trajectory_records_jsonl(run / "data" / "trajectory_records.jsonl", records)
    student_init = clone_model(teacher, trainable=True)
    tcfg = TrajectoryDistillConfig(
        k=cfg.k,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        filter_invalid=cfg.filter_invalid,
        seed=cfg.seed,
        max_new=cfg.decode_budget,
    )
    student, history = train_trajectory_distill(student_init, records, tcfg)
    history["invalid_records"] = invalid
    return student, history


@main.command("distill")
@click.option("--variant", type=click.Choice(VARIANTS), required=True,
              help="r1: soft-label positional distillation; r2: trajectory distillation; "
                   "sft / seqkd: baselines.")
@click.option("--checkpoint", default="checkpoints/teacher.ckpt", show_default=True,
              help="Teacher checkpoint (relative to the run directory).")
@click.pass_obj
@_guard
def distill(cfg: ExperimentConfig, variant: str, checkpoint: str):
    """Train a student from the frozen teacher with the chosen variant."""
    run = _prepare_run(cfg)
    teacher, _, _ = _load_model(run, checkpoint)
    if variant == "r2" and cfg.kind != REASONING:
        raise ConfigError("variant r2 needs kind = reasoning")
    if variant in ("r1", "sft", "seqkd") and cfg.kind != RETRIEVAL:
        raise ConfigError(f"variant {variant} needs kind = retrieval")
    teacher_hash = params_sha256(teacher)
    try:
        if variant == "r2":
            student, history = _distill_r2(cfg, run, teacher)
        else:
            student, history = _distill_r1_family(cfg, run, teacher, variant)
    except TrainingDiverged as exc:
        _write_json(run / f"history_{variant}_diverged.json", exc.history)
        raise
    assert params_sha256(teacher) == teacher_hash, "teacher parameters changed during distillation"
    path = run / "checkpoints" / f"student_{variant}.ckpt"
    save_checkpoint(path, student, extra={"role": "student", "variant": variant, "seed": cfg.seed})
    _write_json(run / f"history_{variant}.json", history)
    if cfg.figures:
        figmod.plot_history(history, run / "figures" / f"history_{variant}.png",
                            title=f"{variant} training loss")
    click.echo(f"wrote {path}")


def _eval_retrieval(cfg, model, instances, positions, seed):
    return positional_accuracy(
        model, instances, positions, max_new=cfg.decode_budget, seed=seed
    )


def _aggregate_reports(reports: list[PositionReport]) -> dict:
    accs = [r.accuracy for r in reports]
    mean = [float(statistics.mean(col)) for col in zip(*accs)]
    std = [float(statistics.pstdev(col)) for col in zip(*accs)]
    return {
        "positions": reports[0].positions,
        "mean_accuracy": mean,
        "stddev_accuracy": std,
        "mean_avg": float(statistics.mean(r.avg for r in reports)),
        "mean_gap": float(statistics.mean(r.gap for r in reports)),
        "per_seed": [r.to_dict() for r in reports],
    }


@main.command("eval")
@click.option("--checkpoint", default="checkpoints/teacher.ckpt", show_default=True)
@click.option("--positions", default=None, help="Comma-separated gold positions (retrieval).")
@click.option("--seeds", default=None,
              help="Comma-separated dataset seeds; emits per-seed reports plus mean/stddev.")
@click.option("--name", default=None, help="Report file stem (defaults to the checkpoint stem).")
@click.pass_obj
@_guard
def eval_cmd(cfg: ExperimentConfig, checkpoint: str, positions: str | None, seeds: str | None, name: str | None):
    """Positional accuracy sweep (retrieval) or placement-mode grid (reasoning)."""
    run = _prepare_run(cfg)
    model, _, ckpt_path = _load_model(run, checkpoint)
    stem = name or ckpt_path.stem
    reports_dir = run / "reports"
    positions_list = [int(p) for p in positions.split(",")] if positions else cfg.positions

    if seeds is not None:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        if not seed_list:
            raise ConfigError("--seeds given but empty")
        if cfg.kind != RETRIEVAL:
            raise ConfigError("--seeds aggregation is defined for retrieval runs")
        per_seed = []
        for s in seed_list:
            insts = generate_dataset(cfg.kind, cfg.eval_size, cfg.n_docs, s, cfg.vocab_size)
            per_seed.append(_eval_retrieval(cfg, model, insts, positions_list, s))
        payload = _aggregate_reports(per_seed)
        _write_json(reports_dir / f"{stem}_multiseed.json", payload)
        rows = ["position,mean_accuracy,stddev_accuracy"]
        rows += [
            f"{p},{m!r},{sd!r}"
            for p, m, sd in zip(payload["positions"], payload["mean_accuracy"], payload["stddev_accuracy"])
        ]
        (reports_dir / f"{stem}_multiseed.csv").write_text("\n".join(rows) + "\n")
        click.echo(f"wrote {reports_dir / f'{stem}_multiseed.json'}")
        return

    instances = _load_split(run, cfg, "eval")
    if cfg.kind == RETRIEVAL:
        report = _eval_retrieval(cfg, model, instances, positions_list, cfg.seed)
        _write_json(reports_dir / f"{stem}_positions.json", report.to_dict())
        (reports_dir / f"{stem}_positions.csv").write_text(position_report_csv(report))
        if cfg.figures:
            figmod.plot_position_report(report, run / "figures" / f"{stem}_positions.png",
                                        title=f"{stem}: accuracy by gold position")
        click.echo(f"avg {report.avg:.3f} gap {report.gap:.3f}; wrote {reports_dir / (stem + '_positions.json')}")
    else:
        report = reasoning_mode_eval(model, instances, cfg.n_docs, max_new=cfg.decode_budget, seed=cfg.seed)
        _write_json(reports_dir / f"{stem}_modes.json", report.to_dict())
        (reports_dir / f"{stem}_modes.csv").write_text(mode_report_csv(report))
        if cfg.figures:
            figmod.plot_mode_report(report, run / "figures" / f"{stem}_modes.png",
                                    title=f"{stem}: two-hop accuracy")
        click.echo(
            f"cross-mode gap {report.cross_mode_gap:.3f}; wrote {reports_dir / (stem + '_modes.json')}"
        )


@main.command("diagnose")
@click.option("--checkpoint", default="checkpoints/teacher.ckpt", show_default=True)
@click.option("--samples", default=16, show_default=True, help="Instances to profile.")
@click.pass_obj
@_guard
def diagnose(cfg: ExperimentConfig, checkpoint: str, samples: int):
    """Shift profiles, response perplexities and attention masses."""
    if cfg.kind != RETRIEVAL:
        raise ConfigError("diagnose operates on retrieval runs")
    run = _prepare_run(cfg)
    model, _, ckpt_path = _load_model(run, checkpoint)
    instances = _load_split(run, cfg, "eval")[:samples]
    records, skipped = build_distill_records(
        model, instances, k=min(cfg.k, 2), seed=cfg.seed, max_new=cfg.decode_budget
    )
    profiles = []
    ppl_rows = []
    self_check_max = 0.0
    for rec in records:
        profile = token_shift_profile(model, rec, 0)
        profiles.append(profile)
        spliced = object.__new__(type(rec))
        object.__setattr__(spliced, "__dict__", dict(rec.__dict__))
        object.__setattr__(spliced, "trivial_layouts", (rec.adv_layout,))
        self_check_max = max(self_check_max, token_shift_profile(model, spliced, 0).max_value)
        row = {
            "instance_id": rec.instance_id,
            "adv_ppl": response_ppl(model, rec.adv_layout, list(rec.adv_response)),
            "trivial_ppl": {
                str(lay.gold_positions): response_ppl(model, lay, list(rec.adv_response))
                for lay in rec.trivial_layouts
            },
        }
        ppl_rows.append(row)
    attn = attention_report(model, instances, cfg.positions)
    payload = {
        "checkpoint": ckpt_path.name,
        "n_records": len(records),
        "skipped_records": skipped,
        "self_profile_max": self_check_max,
        "profiles": [p.to_dict() for p in profiles],
        "ppl": ppl_rows,
        "attention": attn.to_dict(),
    }
    reports_dir = run / "reports"
    _write_json(reports_dir / "diagnostics.json", payload)
    rows = ["instance_id,token_index,kl"]
    for rec, profile in zip(records, profiles):
        rows += [f"{rec.instance_id},{i},{v!r}" for i, v in enumerate(profile.values)]
    (reports_dir / "diagnostics.csv").write_text("\n".join(rows) + "\n")
    if cfg.figures:
        figmod.plot_shift_profiles(profiles[:6], run / "figures" / "shift_profiles.png")
        figmod.plot_attention_report(attn, run / "figures" / "attention_masses.png")
    click.echo(f"wrote {reports_dir / 'diagnostics.json'} (self-profile max {self_check_max:.2e})")


if __name__ == "__main__":
    main()
