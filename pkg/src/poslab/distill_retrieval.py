"""Position-to-position distillation for the retrieval task.

A frozen teacher is scored once on each advantaged prompt (gold document
first); the student is trained to reproduce that per-step distribution
over the same response while conditioning on trivial-position prompts
(activation loss), weighted by position-aware alignment, plus an
anchoring term that pins the student's behaviour on the advantaged
prompt itself. SFT and sequence-level hard-label KD trainers are
included as baselines.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateRecordError, TrainingDiverged
from .model import TransformerLM, clone_model, greedy_decode, teacher_force_logits_batch
from .ops import sequence_kl, sequence_kl_rows, cross_entropy_rows
from .optim import Optimizer
from .tasks import (
    EOS,
    PAD,
    PromptLayout,
    RetrievalInstance,
    arrange,
    derive_seed,
    gold_response,
    make_rng,
    sample_trivial_positions,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillRecord:
    """One instance's advantaged response plus its trivial-position prompts."""
    instance_id: int
    adv_layout: PromptLayout
    adv_response: tuple[int, ...]
    truncated: bool
    trivial_layouts: tuple[PromptLayout, ...]

    def __post_init__(self):
        if self.adv_layout.gold_positions != 1:
            raise ValueError("advantaged prompt must have the gold document at position 1")
        positions = [lay.gold_positions for lay in self.trivial_layouts]
        if len(set(positions)) != len(positions) or any(p == 1 for p in positions):
            raise ValueError("trivial positions must be distinct and != 1")


@dataclass(frozen=True)
class TrivialBin:
    """Per-position bucket of (instance_id, activation loss) members."""
    position: int
    members: tuple[tuple[int, float], ...]


@dataclass
class RetrievalDistillConfig:
    # Desk-scale defaults; the full-scale reference from the source setup
    # is lr 3e-6, batch 32 on 7B models.
    k: int = 4
    anchor_weight: float = 1.0
    epochs: int = 2
    batch_size: int = 16
    learning_rate: float = 1e-3
    use_align: bool = True
    use_anchor: bool = True
    seed: int = 0
    max_new: int = 8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.anchor_weight < 0:
            raise ValueError("anchor_weight must be >= 0")


def build_distill_record(
    teacher: TransformerLM, instance: RetrievalInstance, k: int, seed: int, max_new: int = 8
) -> DistillRecord:
    """Greedy-decode the teacher at the advantaged layout and attach k
    trivial-position prompts for the same instance."""
    adv = arrange(instance, 1)
    dec = greedy_decode(teacher, adv.tokens, max_new=max_new, stop_id=EOS)
    if not dec.tokens or dec.tokens == [EOS]:
        raise DegenerateRecordError(f"instance {instance.instance_id}: empty advantaged response")
    positions = sample_trivial_positions(k, instance.n_docs, derive_seed(seed, "record", instance.instance_id))
    return DistillRecord(
        instance_id=instance.instance_id,
        adv_layout=adv,
        adv_response=tuple(dec.tokens),
        truncated=dec.truncated,
        trivial_layouts=tuple(arrange(instance, p) for p in sorted(positions)),
    )


def build_distill_records(
    teacher: TransformerLM, instances, k: int, seed: int, max_new: int = 8
) -> tuple[list[DistillRecord], int]:
    """Build records for all instances, skipping degenerate or truncated
    advantaged responses; returns (records, skipped_count)."""
    records, skipped = [], 0
    for inst in instances:
        try:
            rec = build_distill_record(teacher, inst, k, seed, max_new=max_new)
        except DegenerateRecordError as exc:
            logger.info("skipping record: %s", exc)
            skipped += 1
            continue
        if rec.truncated:
            logger.info("skipping record: instance %d truncated response", inst.instance_id)
            skipped += 1
            continue
        records.append(rec)
    return records, skipped


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def activation_loss_single(
    teacher: TransformerLM, student: TransformerLM, record: DistillRecord, trivial_index: int
) -> torch.Tensor:
    """KL(teacher | advantaged prompt || student | trivial prompt) over the
    advantaged response, averaged per token."""
    resp = list(record.adv_response)
    with torch.no_grad():
        t_logits = teacher_force_logits_batch(
            teacher,
            torch.as_tensor([record.adv_layout.tokens]),
            torch.as_tensor([resp]),
        )[0]
    trivial = record.trivial_layouts[trivial_index]
    s_logits = teacher_force_logits_batch(
        student, torch.as_tensor([trivial.tokens]), torch.as_tensor([resp])
    )[0]
    return sequence_kl(t_logits, s_logits, [True] * len(resp))


def anchoring_loss(
    teacher: TransformerLM, student: TransformerLM, record: DistillRecord
) -> torch.Tensor:
    """Same KL with both sides conditioned on the advantaged prompt."""
    resp = list(record.adv_response)
    prompts = torch.as_tensor([record.adv_layout.tokens])
    resp_t = torch.as_tensor([resp])
    with torch.no_grad():
        t_logits = teacher_force_logits_batch(teacher, prompts, resp_t)[0]
    s_logits = teacher_force_logits_batch(student, prompts, resp_t)[0]
    return sequence_kl(t_logits, s_logits, [True] * len(resp))


@dataclass
class AlignmentWeights:
    """inter-position softmax weights, per-member intra weights and their product."""
    positions: list[int]
    inter: np.ndarray  # one weight per bin, sums to 1
    intra: list[np.ndarray]  # per bin, one weight per member in (0, 1]
    alpha: list[np.ndarray]  # inter_i * intra_ij


def alignment_weights(bins: list[TrivialBin]) -> AlignmentWeights:
    """Dynamic weights: softmax over per-bin mean losses (inter) times
    member loss normalized by the bin maximum (intra). Weights are plain
    floats — they never carry gradient."""
    if not bins:
        raise ValueError("no bins")
    losses = []
    for b in bins:
        if not b.members:
            raise ValueError(f"bin {b.position} is empty")
        vec = np.array([loss for _, loss in b.members], dtype=np.float64)
        if not np.all(np.isfinite(vec)) or bool((vec < 0).any()):
            raise ValueError(f"bin {b.position} has non-finite or negative losses")
        losses.append(vec)
    means = np.array([v.mean() for v in losses])
    z = np.exp(means - means.max())
    inter = z / z.sum()
    intra = []
    for vec in losses:
        mx = vec.max()
        intra.append(np.ones_like(vec) if mx == 0.0 else vec / mx)
    alpha = [inter[i] * intra[i] for i in range(len(bins))]
    return AlignmentWeights([b.position for b in bins], inter, intra, alpha)


def composite_loss(activation, anchoring, anchor_weight: float):
    """activation + anchor_weight * anchoring."""
    if anchor_weight < 0:
        raise ValueError("anchor_weight must be >= 0")
    return activation + anchor_weight * anchoring


def _pad_responses(records: list[DistillRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    lens = [len(r.adv_response) for r in records]
    width = max(lens)
    resp = torch.full((len(records), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(records), width), dtype=torch.bool)
    for i, r in enumerate(records):
        resp[i, : lens[i]] = torch.as_tensor(r.adv_response)
        mask[i, : lens[i]] = True
    return resp, mask


def _batch_losses(
    teacher: TransformerLM,
    student: TransformerLM,
    records: list[DistillRecord],
    use_anchor: bool,
):
    """Per-(record, trivial-prompt) KL tensor rows plus the mean anchor loss."""
    resp, resp_mask = _pad_responses(records)
    adv_prompts = torch.as_tensor([r.adv_layout.tokens for r in records])
    with torch.no_grad():
        t_logits = teacher_force_logits_batch(teacher, adv_prompts, resp)

    k = len(records[0].trivial_layouts)
    trivial_prompts = torch.as_tensor(
        [lay.tokens for r in records for lay in r.trivial_layouts]
    )
    rows_resp = resp.repeat_interleave(k, dim=0)
    rows_mask = resp_mask.repeat_interleave(k, dim=0)
    rows_t = t_logits.repeat_interleave(k, dim=0)
    s_logits = teacher_force_logits_batch(student, trivial_prompts, rows_resp)
    kl_rows = sequence_kl_rows(rows_t, s_logits, rows_mask)  # (B*k,)

    anchor = None
    if use_anchor:
        s_anchor = teacher_force_logits_batch(student, adv_prompts, resp)
        anchor = sequence_kl_rows(t_logits, s_anchor, resp_mask).mean()
    return kl_rows, anchor


def _bins_from_rows(records: list[DistillRecord], kl_values: np.ndarray):
    """Group rows into per-position bins, sorted by position then instance id."""
    k = len(records[0].trivial_layouts)
    grouped: dict[int, list[tuple[int, int]]] = {}
    for j, rec in enumerate(records):
        for t, lay in enumerate(rec.trivial_layouts):
            grouped.setdefault(int(lay.gold_positions), []).append((rec.instance_id, j * k + t))
    bins, row_order = [], []
    for pos in sorted(grouped):
        members = sorted(grouped[pos])
        bins.append(TrivialBin(pos, tuple((iid, float(kl_values[row])) for iid, row in members)))
        row_order.append([row for _, row in members])
    return bins, row_order


def activation_loss_batch(
    teacher: TransformerLM,
    student: TransformerLM,
    records: list[DistillRecord],
    config: RetrievalDistillConfig,
) -> torch.Tensor:
    """Weighted (or plain-mean) activation loss over a batch of records."""
    if not records:
        raise ValueError("empty batch")
    kl_rows, _ = _batch_losses(teacher, student, records, use_anchor=False)
    if not config.use_align:
        return kl_rows.mean()
    bins, row_order = _bins_from_rows(records, kl_rows.detach().numpy())
    weights = alignment_weights(bins)
    total = kl_rows.new_zeros(())
    for alpha_vec, rows in zip(weights.alpha, row_order):
        total = total + (torch.as_tensor(alpha_vec, dtype=kl_rows.dtype) * kl_rows[rows]).sum()
    return total


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------

def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = make_rng(seed, "epoch-order", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield [int(i) for i in order[start : start + batch_size]]


def train_retrieval_distill(
    teacher: TransformerLM,
    student_init: TransformerLM,
    records: list[DistillRecord],
    config: RetrievalDistillConfig,
    eval_hook=None,
) -> tuple[TransformerLM, dict]:
    """Optimize activation (+ anchoring) loss over the records.

    The teacher is read-only throughout. Returns a trained copy of
    ``student_init`` and a JSON-able history with per-epoch losses,
    per-bin means and inter-position weights.
    """
    student = clone_model(student_init, trainable=True)
    opt = Optimizer(student.parameters(), kind="adam", learning_rate=config.learning_rate)
    history: dict = {"variant": "distill", "epochs": [], "n_records": len(records)}
    for epoch in range(1, config.epochs + 1):
        act_sum = anc_sum = 0.0
        n_batches = 0
        bin_sums: dict[int, float] = {}
        bin_counts: dict[int, int] = {}
        inter_sums: dict[int, float] = {}
        inter_counts: dict[int, int] = {}
        for batch_idx in _epoch_batches(len(records), config.batch_size, config.seed, epoch):
            batch = [records[i] for i in batch_idx]
            kl_rows, anchor = _batch_losses(teacher, student, batch, config.use_anchor)
            if not bool(torch.isfinite(kl_rows).all()) or (
                anchor is not None and not bool(torch.isfinite(anchor))
            ):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history=history)
            bins, row_order = _bins_from_rows(batch, kl_rows.detach().numpy())
            if config.use_align:
                weights = alignment_weights(bins)
                act = kl_rows.new_zeros(())
                for alpha_vec, rows in zip(weights.alpha, row_order):
                    act = act + (torch.as_tensor(alpha_vec, dtype=kl_rows.dtype) * kl_rows[rows]).sum()
                for pos, w in zip(weights.positions, weights.inter):
                    inter_sums[pos] = inter_sums.get(pos, 0.0) + float(w)
                    inter_counts[pos] = inter_counts.get(pos, 0) + 1
            else:
                act = kl_rows.mean()
            for b in bins:
                for _, loss_val in b.members:
                    bin_sums[b.position] = bin_sums.get(b.position, 0.0) + loss_val
                    bin_counts[b.position] = bin_counts.get(b.position, 0) + 1
            loss = composite_loss(act, anchor, config.anchor_weight) if anchor is not None else act
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", history=history
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            act_sum += act.item()
            anc_sum += anchor.item() if anchor is not None else 0.0
            n_batches += 1
        entry = {
            "epoch": epoch,
            "act_loss": act_sum / max(n_batches, 1),
            "anchor_loss": anc_sum / max(n_batches, 1),
            "bin_mean_losses": {str(p): bin_sums[p] / bin_counts[p] for p in sorted(bin_sums)},
            "inter_weights": {str(p): inter_sums[p] / inter_counts[p] for p in sorted(inter_sums)},
        }
        if eval_hook is not None:
            entry["eval_accuracy"] = eval_hook(student)
        history["epochs"].append(entry)
    return student, history


def _train_ce(
    student_init: TransformerLM,
    samples: list[tuple[tuple[int, ...], tuple[int, ...]]],
    config: RetrievalDistillConfig,
    variant: str,
) -> tuple[TransformerLM, dict]:
    """Shared CE loop for the SFT / SeqKD baselines. Prompts must share a
    common length; targets are padded and masked."""
    student = clone_model(student_init, trainable=True)
    opt = Optimizer(student.parameters(), kind="adam", learning_rate=config.learning_rate)
    history: dict = {"variant": variant, "epochs": [], "n_samples": len(samples)}
    width = max((len(t) for _, t in samples), default=0)
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        n_batches = 0
        for batch_idx in _epoch_batches(len(samples), config.batch_size, config.seed, epoch):
            prompts = torch.as_tensor([samples[i][0] for i in batch_idx])
            tgt = torch.full((len(batch_idx), width), PAD, dtype=torch.long)
            mask = torch.zeros((len(batch_idx), width), dtype=torch.bool)
            for row, i in enumerate(batch_idx):
                t = samples[i][1]
                tgt[row, : len(t)] = torch.as_tensor(t)
                mask[row, : len(t)] = True
            logits = teacher_force_logits_batch(student, prompts, tgt)
            loss = cross_entropy_rows(logits, tgt, mask).mean()
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history=history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        history["epochs"].append({"epoch": epoch, "ce_loss": total / max(n_batches, 1)})
    return student, history


def train_sft_baseline(
    student_init: TransformerLM,
    records: list[DistillRecord],
    instances: list[RetrievalInstance],
    config: RetrievalDistillConfig,
) -> tuple[TransformerLM, dict]:
    """CE on the gold response with the gold document at the same sampled
    trivial positions the distill records use."""
    by_id = {inst.instance_id: inst for inst in instances}
    samples = [
        (lay.tokens, tuple(gold_response(by_id[rec.instance_id])))
        for rec in records
        for lay in rec.trivial_layouts
    ]
    return _train_ce(student_init, samples, config, variant="sft")


def train_seqkd_baseline(
    student_init: TransformerLM,
    records: list[DistillRecord],
    config: RetrievalDistillConfig,
) -> tuple[TransformerLM, dict]:
    """CE on the teacher's advantaged response (hard labels) conditioned
    on the trivial prompts."""
    samples = [
        (lay.tokens, rec.adv_response) for rec in records for lay in rec.trivial_layouts
    ]
    return _train_ce(student_init, samples, config, variant="seqkd")
