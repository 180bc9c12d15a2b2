"""Acceptance suite: every criterion printed as one PASS/FAIL line.

Heavy artifacts (induced teachers, distilled students, eval reports) are
built once per session at the default experiment scale and cached. Set
POSLAB_ACCEPT_CACHE to a directory to persist them across sessions —
everything is deterministic, so cached artifacts are identical to fresh
ones.

Run with `pytest tests/test_acceptance.py -v -s`.
"""
import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from poslab.checkpoint import load_checkpoint, save_checkpoint
from poslab.config import ExperimentConfig
from poslab.distill_reasoning import (
    TrajectoryDistillConfig,
    build_trajectory_records,
    train_trajectory_distill,
)
from poslab.distill_retrieval import (
    RetrievalDistillConfig,
    TrivialBin,
    alignment_weights,
    anchoring_loss,
    activation_loss_batch,
    build_distill_records,
    composite_loss,
    train_retrieval_distill,
    train_seqkd_baseline,
)
from poslab.evalharness import (
    positional_accuracy,
    reasoning_mode_eval,
    token_shift_profile,
)
from poslab.gradcheck import finite_difference_grad, max_relative_error
from poslab.induction import InductionConfig, induce_bias
from poslab.model import ModelConfig, TransformerLM, clone_model, params_sha256
from poslab.ops import kl_divergence
from poslab.tasks import generate_dataset, make_reasoning_instance, make_retrieval_instance

pytestmark = pytest.mark.acceptance

# ---------------------------------------------------------------------------
# Default experiment scale (criterion 4/5/7 configuration)
# ---------------------------------------------------------------------------
R1_SEEDS = [0, 1, 2, 3, 4]  # criteria 4/5 use the first 3, criterion 6 all 5
R2_SEEDS = [0, 1, 2]
N_DOCS = 20
P_SINK = 0.9
EVAL_POSITIONS = [1, 5, 10, 15, 20]
N_EVAL = 64
R1_RECORDS = 500
R2_RECORDS = 500

RETRIEVAL_EXP = dict(
    train_size=2000,
    induce=dict(
        kind="retrieval", p_sink=P_SINK, batch_size=16, learning_rate=1e-3,
        max_steps=5000, eval_every=100, target_accuracy=0.95, max_new=8,
    ),
    distill=dict(k=4, anchor_weight=1.0, epochs=2, batch_size=16, learning_rate=1e-3, max_new=8),
)
REASONING_EXP = dict(
    train_size=2000,
    induce=dict(
        kind="reasoning", p_sink=P_SINK, batch_size=16, learning_rate=1e-3,
        max_steps=5000, eval_every=100, target_accuracy=0.90, max_new=12,
    ),
    distill=dict(k=4, epochs=2, batch_size=16, learning_rate=1e-3, max_new=12),
)


def criterion(num: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# Cached experiment artifacts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def workdir(tmp_path_factory) -> Path:
    env = os.environ.get("POSLAB_ACCEPT_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("acceptance")


def _retrieval_data(seed):
    train = generate_dataset("retrieval", RETRIEVAL_EXP["train_size"], N_DOCS, seed)
    eval_set = generate_dataset(
        "retrieval", N_EVAL, N_DOCS, seed, start_id=RETRIEVAL_EXP["train_size"]
    )
    return train, eval_set


def _reasoning_data(seed):
    train = generate_dataset("reasoning", REASONING_EXP["train_size"], N_DOCS, seed)
    eval_set = generate_dataset(
        "reasoning", N_EVAL, N_DOCS, seed, start_id=REASONING_EXP["train_size"]
    )
    return train, eval_set


def _teacher(workdir: Path, kind: str, seed: int):
    """Induce (or load) the biased teacher for a seed; returns model + runtime."""
    path = workdir / f"teacher_{kind}_s{seed}.ckpt"
    if path.exists():
        model, extra = load_checkpoint(path)
        return model, extra["runtime_s"]
    exp = RETRIEVAL_EXP if kind == "retrieval" else REASONING_EXP
    train, eval_set = (_retrieval_data if kind == "retrieval" else _reasoning_data)(seed)
    cfg = InductionConfig(seed=seed, **exp["induce"])
    t0 = time.perf_counter()
    model, _history = induce_bias(ModelConfig(), train, eval_set, cfg)
    runtime = time.perf_counter() - t0
    save_checkpoint(path, model, extra={"runtime_s": runtime})
    return model, runtime


def _student(workdir: Path, variant: str, seed: int):
    """Train (or load) a retrieval student for a seed."""
    path = workdir / f"student_{variant}_s{seed}.ckpt"
    if path.exists():
        model, extra = load_checkpoint(path)
        return model, extra
    teacher, _ = _teacher(workdir, "retrieval", seed)
    train, _ = _retrieval_data(seed)
    records, skipped = build_distill_records(
        teacher, train[:R1_RECORDS], k=RETRIEVAL_EXP["distill"]["k"], seed=seed,
        max_new=RETRIEVAL_EXP["distill"]["max_new"],
    )
    hash_before = params_sha256(teacher)
    student_init = clone_model(teacher, trainable=True)
    dcfg = RetrievalDistillConfig(
        seed=seed,
        use_align=variant == "full",
        use_anchor=variant == "full",
        **RETRIEVAL_EXP["distill"],
    )
    t0 = time.perf_counter()
    if variant in ("full", "kl"):
        student, _ = train_retrieval_distill(teacher, student_init, records, dcfg)
    elif variant == "seqkd":
        student, _ = train_seqkd_baseline(student_init, records, dcfg)
    else:
        raise ValueError(variant)
    runtime = time.perf_counter() - t0
    extra = {
        "runtime_s": runtime,
        "teacher_hash_before": hash_before,
        "teacher_hash_after": params_sha256(teacher),
        "skipped_records": skipped,
    }
    save_checkpoint(path, student, extra=extra)
    return student, extra


def _eval_report(workdir: Path, tag: str, model, kind: str, seed: int) -> dict:
    path = workdir / f"report_{tag}_s{seed}.json"
    if path.exists():
        return json.loads(path.read_text())
    _, eval_set = (_retrieval_data if kind == "retrieval" else _reasoning_data)(seed)
    if kind == "retrieval":
        rep = positional_accuracy(model, eval_set, EVAL_POSITIONS, max_new=8, seed=seed)
        payload = rep.to_dict()
    else:
        rep = reasoning_mode_eval(model, eval_set, N_DOCS, max_new=12, seed=seed)
        payload = rep.to_dict()
    path.write_text(json.dumps(payload, sort_keys=True, indent=2))
    return payload


@pytest.fixture(scope="session")
def r1_suite(workdir):
    """Teachers + full/kl/seqkd students + reports for all R1 seeds."""
    suite = {}
    for seed in R1_SEEDS:
        teacher, induce_runtime = _teacher(workdir, "retrieval", seed)
        entry = {
            "teacher": teacher,
            "induce_runtime": induce_runtime,
            "teacher_report": _eval_report(workdir, "teacher", teacher, "retrieval", seed),
            "students": {},
        }
        for variant in ("full", "kl", "seqkd"):
            student, extra = _student(workdir, variant, seed)
            entry["students"][variant] = {
                "model": student,
                "extra": extra,
                "report": _eval_report(workdir, variant, student, "retrieval", seed),
            }
        suite[seed] = entry
    return suite


@pytest.fixture(scope="session")
def r2_suite(workdir):
    suite = {}
    for seed in R2_SEEDS:
        teacher, induce_runtime = _teacher(workdir, "reasoning", seed)
        path = workdir / f"student_r2_s{seed}.ckpt"
        if path.exists():
            student, extra = load_checkpoint(path)
        else:
            train, _ = _reasoning_data(seed)
            records, invalid = build_trajectory_records(
                teacher, train[:R2_RECORDS], k=REASONING_EXP["distill"]["k"], seed=seed,
                max_new=REASONING_EXP["distill"]["max_new"],
            )
            hash_before = params_sha256(teacher)
            student_init = clone_model(teacher, trainable=True)
            tcfg = TrajectoryDistillConfig(seed=seed, **REASONING_EXP["distill"])
            t0 = time.perf_counter()
            student, _ = train_trajectory_distill(student_init, records, tcfg)
            extra = {
                "runtime_s": time.perf_counter() - t0,
                "teacher_hash_before": hash_before,
                "teacher_hash_after": params_sha256(teacher),
                "invalid_records": invalid,
            }
            save_checkpoint(path, student, extra=extra)
        suite[seed] = {
            "teacher": teacher,
            "induce_runtime": induce_runtime,
            "teacher_report": _eval_report(workdir, "teacher", teacher, "reasoning", seed),
            "student": student,
            "student_extra": extra,
            "student_report": _eval_report(workdir, "r2", student, "reasoning", seed),
        }
    return suite


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------

def test_criterion_1_math_kernel_exactness():
    t0 = time.perf_counter()
    bins = [TrivialBin(2, ((0, 1.0),)), TrivialBin(3, ((1, 2.0),))]
    w = alignment_weights(bins)
    ok = np.allclose(w.inter, [0.26894, 0.73106], atol=1e-9 + 5e-6)
    exact_inter = np.allclose(
        w.inter, [math.exp(1) / (math.exp(1) + math.exp(2)), math.exp(2) / (math.exp(1) + math.exp(2))],
        atol=1e-9,
    )
    w2 = alignment_weights([TrivialBin(2, ((0, 1.0), (1, 3.0)))])
    ok_intra = np.allclose(w2.intra[0], [1.0 / 3.0, 1.0], atol=1e-9)

    bins3 = [TrivialBin(2, ((0, 1.0), (1, 3.0))), TrivialBin(3, ((0, 2.0),))]
    w3 = alignment_weights(bins3)
    batch_val = sum(
        float(a * l) for alpha, b in zip(w3.alpha, bins3) for a, (_, l) in zip(alpha, b.members)
    )
    ok_batch = abs(batch_val - 8.0 / 3.0) <= 1e-9

    kl_a = kl_divergence([0.5, 0.5], [0.25, 0.75])
    kl_b = kl_divergence([1.0, 0.0], [0.9, 0.1])
    ok_kl = (
        abs(kl_a - (0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0))) <= 1e-9
        and abs(kl_b - math.log(1.0 / 0.9)) <= 1e-9
        and abs(kl_a - 0.14384) <= 5e-6
        and abs(kl_b - 0.10536) <= 5e-6
    )
    runtime = time.perf_counter() - t0
    ok = ok and exact_inter and ok_intra and ok_batch and ok_kl and runtime < 1.0
    criterion(1, ok, f"alignment weights and KL values exact to 1e-9; runtime {runtime:.3f}s < 1s")


def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    cfg = ModelConfig(vocab_size=64, d_model=16, n_heads=2, n_layers=1, max_seq_len=96)
    teacher = TransformerLM(cfg, seed=0)
    student = TransformerLM(cfg, seed=1)
    rng = np.random.default_rng(0)

    inst = make_retrieval_instance(4, rng_seed=11)
    from poslab.distill_retrieval import DistillRecord
    from poslab.tasks import ANS, EOS, arrange

    record = DistillRecord(
        instance_id=0,
        adv_layout=arrange(inst, 1),
        adv_response=(ANS, inst.answer[0], EOS),
        truncated=False,
        trivial_layouts=(arrange(inst, 2), arrange(inst, 3)),
    )
    dcfg = RetrievalDistillConfig(k=2, anchor_weight=1.0, use_align=True, use_anchor=True)

    def r1_loss():
        act = activation_loss_batch(teacher, student, [record], dcfg)
        anc = anchoring_loss(teacher, student, record)
        return composite_loss(act, anc, dcfg.anchor_weight)

    loss = r1_loss()
    for p in student.parameters():
        p.grad = None
    loss.backward()
    params = list(student.parameters())
    sizes = np.array([p.numel() for p in params])
    coords = []
    for _ in range(60):
        pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
        coords.append((pi, int(rng.integers(params[pi].numel()))))
    fd = finite_difference_grad(lambda: r1_loss().item(), params, epsilon=1e-5, coords=coords)
    err_r1 = max_relative_error([p.grad for p in params], fd)

    rinst = make_reasoning_instance(5, rng_seed=3)
    from poslab.distill_reasoning import sample_trajectory, trajectory_loss
    from oracles import ChainOracle

    rec2 = sample_trajectory(ChainOracle(), rinst, k=2, seed=0)
    student2 = TransformerLM(cfg, seed=2)

    def r2_loss():
        return trajectory_loss(student2, rec2)

    loss2 = r2_loss()
    for p in student2.parameters():
        p.grad = None
    loss2.backward()
    params2 = list(student2.parameters())
    sizes2 = np.array([p.numel() for p in params2])
    coords2 = []
    for _ in range(60):
        pi = int(rng.choice(len(params2), p=sizes2 / sizes2.sum()))
        coords2.append((pi, int(rng.integers(params2[pi].numel()))))
    fd2 = finite_difference_grad(lambda: r2_loss().item(), params2, epsilon=1e-5, coords=coords2)
    err_r2 = max_relative_error([p.grad for p in params2], fd2)

    runtime = time.perf_counter() - t0
    ok = err_r1 <= 1e-4 and err_r2 <= 1e-4 and runtime < 60.0
    criterion(
        2, ok,
        f"composite loss fd-error {err_r1:.2e}, trajectory loss fd-error {err_r2:.2e} "
        f"(tol 1e-4, {len(coords) + len(coords2)} probes); runtime {runtime:.1f}s < 60s",
    )


def test_criterion_3_teacher_integrity(r1_suite, r2_suite):
    mismatches = []
    for seed, entry in r1_suite.items():
        for variant, info in entry["students"].items():
            if info["extra"]["teacher_hash_before"] != info["extra"]["teacher_hash_after"]:
                mismatches.append((seed, variant))
    for seed, entry in r2_suite.items():
        extra = entry["student_extra"]
        if extra["teacher_hash_before"] != extra["teacher_hash_after"]:
            mismatches.append((seed, "r2"))
    criterion(3, not mismatches, f"teacher hash identical before/after every distillation run "
                                 f"({len(R1_SEEDS) * 3 + len(R2_SEEDS)} runs checked); mismatches: {mismatches}")


def test_criterion_4_bias_induction(r1_suite):
    lines = []
    ok = True
    for seed in R1_SEEDS[:3]:
        rep = r1_suite[seed]["teacher_report"]
        pos1 = rep["accuracy"][0]
        runtime = r1_suite[seed]["induce_runtime"]
        good = rep["gap"] >= 0.20 and pos1 >= 0.95 and runtime <= 600.0
        ok = ok and good
        lines.append(f"seed {seed}: gap {rep['gap']:.3f} pos1 {pos1:.3f} ({runtime:.0f}s)")
    criterion(4, ok, "induced GAP >= 0.20 with position-1 accuracy >= 0.95 in <= 10 min/seed; "
                     + "; ".join(lines))


def test_criterion_5_r1_debiasing(r1_suite):
    lines = []
    ok = True
    for seed in R1_SEEDS[:3]:
        teacher_rep = r1_suite[seed]["teacher_report"]
        student = r1_suite[seed]["students"]["full"]
        student_rep = student["report"]
        runtime = student["extra"]["runtime_s"]
        gap_cut = student_rep["gap"] <= 0.5 * teacher_rep["gap"]
        anchored = student_rep["accuracy"][0] >= teacher_rep["accuracy"][0] - 0.05
        good = gap_cut and anchored and runtime <= 900.0
        ok = ok and good
        lines.append(
            f"seed {seed}: gap {teacher_rep['gap']:.3f}->{student_rep['gap']:.3f} "
            f"pos1 {teacher_rep['accuracy'][0]:.3f}->{student_rep['accuracy'][0]:.3f} ({runtime:.0f}s)"
        )
    criterion(5, ok, "full distillation halves the gap and keeps position-1 within 0.05; "
                     + "; ".join(lines))


def test_criterion_6_ablation_ordering(r1_suite):
    means = {}
    for variant in ("full", "kl", "seqkd"):
        per_seed = []
        for seed in R1_SEEDS:
            rep = r1_suite[seed]["students"][variant]["report"]
            trivial = [a for p, a in zip(rep["positions"], rep["accuracy"]) if p != 1]
            per_seed.append(statistics.mean(trivial))
        means[variant] = statistics.mean(per_seed)
    ok = means["full"] >= means["kl"] - 0.01 and means["kl"] >= means["seqkd"]
    criterion(
        6, ok,
        f"trivial-position accuracy over {len(R1_SEEDS)} seeds: full {means['full']:.3f} "
        f">= kl {means['kl']:.3f} (tie 0.01) >= seqkd {means['seqkd']:.3f}",
    )


def test_criterion_7_r2_debiasing(r2_suite):
    lines = []
    ok = True
    for seed in R2_SEEDS:
        base_gap = r2_suite[seed]["teacher_report"]["cross_mode_gap"]
        post_gap = r2_suite[seed]["student_report"]["cross_mode_gap"]
        runtime = r2_suite[seed]["student_extra"]["runtime_s"]
        good = post_gap <= 0.6 * base_gap and runtime <= 1200.0
        ok = ok and good
        lines.append(f"seed {seed}: cross-mode gap {base_gap:.3f}->{post_gap:.3f} ({runtime:.0f}s)")
    criterion(7, ok, "trajectory distillation cuts the cross-mode gap by >= 40%; " + "; ".join(lines))


def test_criterion_8_token_shift_concentration(r1_suite, workdir):
    cache = workdir / "criterion8.json"
    if cache.exists():
        ratios = json.loads(cache.read_text())["ratios"]
    else:
        teacher = r1_suite[0]["teacher"]
        train, eval_set = _retrieval_data(0)
        records, _ = build_distill_records(teacher, eval_set, k=4, seed=0, max_new=8)
        ratios = []
        from poslab.model import greedy_decode
        from poslab.tasks import EOS, contains_answer

        by_id = {inst.instance_id: inst for inst in eval_set}
        for rec in records:
            inst = by_id[rec.instance_id]
            for idx, lay in enumerate(rec.trivial_layouts):
                dec = greedy_decode(teacher, lay.tokens, max_new=8, stop_id=EOS)
                if contains_answer(dec.tokens, inst.answer):
                    continue  # only failing instances characterize the bias
                profile = token_shift_profile(teacher, rec, idx)
                if profile.median > 0:
                    ratios.append(profile.max_value / profile.median)
                if len(ratios) >= 80:
                    break
            if len(ratios) >= 80:
                break
        cache.write_text(json.dumps({"ratios": ratios}))
    med = statistics.median(ratios)
    ok = len(ratios) >= 50 and med >= 5.0
    criterion(8, ok, f"median (max/median per-token KL) over {len(ratios)} failing profiles = {med:.1f} >= 5")


def test_criterion_9_cli_determinism(tmp_path):
    from click.testing import CliRunner
    from poslab.cli import main

    overrides = {
        "kind": "retrieval", "n_docs": "4", "d_model": "16", "n_heads": "2", "n_layers": "1",
        "max_seq_len": "64", "train_size": "32", "eval_size": "8", "records": "8", "k": "2",
        "epochs": "1", "batch_size": "4", "induce_max_steps": "120", "induce_eval_every": "120",
        "induce_target_accuracy": "0.0", "eval_positions": "1,2,3,4",
    }

    def run_all(out):
        runner = CliRunner()
        opts = []
        for key, val in {**overrides, "out_dir": str(out)}.items():
            opts += ["-O", f"{key}={val}"]
        for args in (
            ["gen-data"],
            ["induce-bias"],
            ["distill", "--variant", "r1"],
            ["eval", "--checkpoint", "checkpoints/student_r1.ckpt", "--name", "student"],
            ["diagnose", "--samples", "4"],
        ):
            res = runner.invoke(main, opts + args)
            assert res.exit_code == 0, f"{args}: {res.output}"

    out_a, out_b = tmp_path / "a", tmp_path / "b"
    run_all(out_a)
    run_all(out_b)
    tracked = [
        "data/train.jsonl", "data/eval.jsonl", "manifest.json",
        "checkpoints/teacher.ckpt", "checkpoints/student_r1.ckpt",
        "history.json", "history_r1.json",
        "reports/student_positions.json", "reports/student_positions.csv",
        "reports/diagnostics.json", "reports/diagnostics.csv",
        "figures/student_positions.png", "figures/shift_profiles.png",
    ]
    diffs = [rel for rel in tracked if (out_a / rel).read_bytes() != (out_b / rel).read_bytes()]
    criterion(9, not diffs, f"re-running every command yields byte-identical artifacts "
                            f"({len(tracked)} files compared); differing: {diffs}")
