"""Trajectory distillation for the two-hop reasoning task.

Chain trajectories are greedy-sampled at the recent-position layout
(hops at slots n-1 and n) and distilled into K randomly positioned
layouts of the same instance with cross-entropy. No alignment weighting
and no anchoring term exist for this route.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .errors import TrainingDiverged
from .model import TransformerLM, clone_model, greedy_decode, teacher_force_logits_batch
from .ops import cross_entropy, cross_entropy_rows
from .optim import Optimizer
from .tasks import (
    EOS,
    PAD,
    PromptLayout,
    ReasoningInstance,
    answer_after_marker,
    arrange_two_hop,
    derive_seed,
    make_rng,
    sample_trivial_pairs,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectoryRecord:
    """Advantaged-position trajectory plus K alternative pair layouts."""
    instance_id: int
    adv_layout: PromptLayout
    trajectory: tuple[int, ...]
    valid: bool
    truncated: bool
    pair_layouts: tuple[PromptLayout, ...]

    def __post_init__(self):
        for lay in self.pair_layouts:
            i, j = lay.gold_positions
            if i == j:
                raise ValueError("hop pair positions must differ")


@dataclass
class TrajectoryDistillConfig:
    k: int = 4
    epochs: int = 2
    batch_size: int = 16
    learning_rate: float = 1e-3
    filter_invalid: bool = True
    seed: int = 0
    max_new: int = 12

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def sample_trajectory(
    teacher: TransformerLM,
    instance: ReasoningInstance,
    k: int = 4,
    seed: int = 0,
    max_new: int = 12,
) -> TrajectoryRecord:
    """Greedy-decode the teacher at the (n-1, n) layout; validity means
    the decoded chain names the correct answer after the answer marker
    and was not cut off by the budget."""
    n = instance.n_docs
    adv = arrange_two_hop(instance, n - 1, n)
    dec = greedy_decode(teacher, adv.tokens, max_new=max_new, stop_id=EOS)
    valid = (not dec.truncated) and answer_after_marker(dec.tokens, instance.answer)
    pairs = sample_trivial_pairs(k, n, derive_seed(seed, "trajectory", instance.instance_id))
    return TrajectoryRecord(
        instance_id=instance.instance_id,
        adv_layout=adv,
        trajectory=tuple(dec.tokens),
        valid=valid,
        truncated=dec.truncated,
        pair_layouts=tuple(arrange_two_hop(instance, i, j) for i, j in pairs),
    )


def build_trajectory_records(
    teacher: TransformerLM, instances, k: int, seed: int, max_new: int = 12
) -> tuple[list[TrajectoryRecord], int]:
    """Sample a record per instance; returns (records, invalid_count).
    Invalid records are retained in the list — the trainer's filter flag
    decides whether they contribute updates."""
    records = [sample_trajectory(teacher, inst, k, seed, max_new=max_new) for inst in instances]
    invalid = sum(1 for r in records if not r.valid)
    if invalid:
        logger.info("%d/%d trajectory records are invalid", invalid, len(records))
    return records, invalid


def trajectory_loss(student: TransformerLM, record: TrajectoryRecord) -> torch.Tensor:
    """Sum over the K pair prompts of token-mean CE on the trajectory."""
    traj = list(record.trajectory)
    if not traj:
        raise ValueError("empty trajectory")
    mask = [True] * len(traj)
    total = None
    for lay in record.pair_layouts:
        logits = teacher_force_logits_batch(
            student, torch.as_tensor([lay.tokens]), torch.as_tensor([traj])
        )[0]
        ce = cross_entropy(logits, traj, mask)
        total = ce if total is None else total + ce
    return total


def trajectory_record_to_dict(record: TrajectoryRecord) -> dict:
    return {
        "instance_id": record.instance_id,
        "adv_pair": list(record.adv_layout.gold_positions),
        "trajectory": list(record.trajectory),
        "valid": record.valid,
        "truncated": record.truncated,
        "pairs": [list(lay.gold_positions) for lay in record.pair_layouts],
    }


def trajectory_record_from_dict(rec: dict, instance: ReasoningInstance) -> TrajectoryRecord:
    """Rebuild a record; layouts are regenerated deterministically from the
    instance and the stored pairs."""
    if rec["instance_id"] != instance.instance_id:
        raise ValueError("record does not belong to this instance")
    i, j = rec["adv_pair"]
    return TrajectoryRecord(
        instance_id=rec["instance_id"],
        adv_layout=arrange_two_hop(instance, i, j),
        trajectory=tuple(rec["trajectory"]),
        valid=rec["valid"],
        truncated=rec["truncated"],
        pair_layouts=tuple(arrange_two_hop(instance, a, b) for a, b in rec["pairs"]),
    )


def save_trajectory_records_jsonl(path, records) -> None:
    import json
    from pathlib import Path

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w") as fh:
        for rec in records:
            fh.write(json.dumps(trajectory_record_to_dict(rec), sort_keys=True))
            fh.write("\n")


def load_trajectory_records_jsonl(path, instances) -> list[TrajectoryRecord]:
    import json

    by_id = {inst.instance_id: inst for inst in instances}
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(trajectory_record_from_dict(rec, by_id[rec["instance_id"]]))
    return out


def train_trajectory_distill(
    student_init: TransformerLM,
    records: list[TrajectoryRecord],
    config: TrajectoryDistillConfig,
    eval_hook=None,
) -> tuple[TransformerLM, dict]:
    """Optimize the summed pair-prompt CE over (by default) valid records
    only. Returns a trained copy and a JSON-able history."""
    usable = [r for r in records if r.valid or not config.filter_invalid]
    filtered = len(records) - len(usable)
    student = clone_model(student_init, trainable=True)
    history: dict = {
        "variant": "trajectory-distill",
        "epochs": [],
        "n_records": len(records),
        "filtered_records": filtered,
    }
    if not usable:
        return student, history
    opt = Optimizer(student.parameters(), kind="adam", learning_rate=config.learning_rate)
    width = max(len(r.trajectory) for r in usable)
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        n_batches = 0
        order = make_rng(config.seed, "epoch-order", epoch).permutation(len(usable))
        for start in range(0, len(usable), config.batch_size):
            batch = [usable[int(i)] for i in order[start : start + config.batch_size]]
            k = len(batch[0].pair_layouts)
            prompts = torch.as_tensor([lay.tokens for r in batch for lay in r.pair_layouts])
            tgt = torch.full((len(batch) * k, width), PAD, dtype=torch.long)
            mask = torch.zeros((len(batch) * k, width), dtype=torch.bool)
            for bi, rec in enumerate(batch):
                t = torch.as_tensor(rec.trajectory)
                for ki in range(k):
                    tgt[bi * k + ki, : len(t)] = t
                    mask[bi * k + ki, : len(t)] = True
            logits = teacher_force_logits_batch(student, prompts, tgt)
            ce_rows = cross_entropy_rows(logits, tgt, mask)
            # per record: sum over its K prompts; batch objective: mean over records
            loss = ce_rows.view(len(batch), k).sum(dim=1).mean()
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history=history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        entry = {"epoch": epoch, "trajectory_loss": total / max(n_batches, 1)}
        if eval_hook is not None:
            entry["eval_accuracy"] = eval_hook(student)
        history["epochs"].append(entry)
    return student, history
