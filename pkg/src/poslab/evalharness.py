"""Positional-bias measurement: accuracy sweeps, gap summaries, per-token
divergence profiles, response perplexity and attention traces.

Everything here is read-only over the model and deterministic given
(model, instances, seed); reports serialize to JSON and flat CSV, one
row per position or mode cell, for external tooling.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field

import numpy as np
import torch

from .distill_retrieval import DistillRecord
from .model import TransformerLM, attention_trace, greedy_decode_batch, teacher_force_logits_batch
from .ops import kl_divergence
from .tasks import (
    ANS,
    CONNECTED,
    DISCONNECTED,
    EOS,
    MODES,
    REVERSED,
    PromptLayout,
    answer_after_marker,
    arrange,
    arrange_two_hop,
    contains_answer,
    position_configs,
)


@dataclass
class PositionReport:
    """Per-position accuracy sweep with avg and max-minus-min gap."""
    positions: list  # ints (retrieval) or [i, j] pairs (reasoning)
    accuracy: list[float]
    avg: float
    gap: float
    gap_first_min: float  # first-position-minus-minimum, logged alongside
    n_eval: int
    seed: int

    @classmethod
    def from_accuracy(cls, positions, accuracy, n_eval: int, seed: int) -> "PositionReport":
        acc = [float(a) for a in accuracy]
        return cls(
            positions=list(positions),
            accuracy=acc,
            avg=float(np.mean(acc)),
            gap=float(max(acc) - min(acc)),
            gap_first_min=float(acc[0] - min(acc)),
            n_eval=n_eval,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return {
            "positions": self.positions,
            "accuracy": self.accuracy,
            "avg": self.avg,
            "gap": self.gap,
            "gap_first_min": self.gap_first_min,
            "n_eval": self.n_eval,
            "seed": self.seed,
        }


@dataclass
class ModeReport:
    """Two-hop grid evaluation: one PositionReport per placement mode and
    the max-minus-min gap across every cell of every mode."""
    reports: dict[str, PositionReport]
    cross_mode_gap: float

    def to_dict(self) -> dict:
        return {
            "modes": {m: r.to_dict() for m, r in self.reports.items()},
            "cross_mode_gap": self.cross_mode_gap,
        }


@dataclass
class ShiftProfile:
    """Per-token KL along the advantaged response between the teacher's
    advantaged-prompt and trivial-prompt conditioning."""
    values: list[float]
    max_index: int
    max_value: float
    median: float

    @classmethod
    def from_values(cls, values) -> "ShiftProfile":
        vals = [float(v) for v in values]
        idx = int(np.argmax(vals))
        return cls(values=vals, max_index=idx, max_value=vals[idx], median=float(statistics.median(vals)))

    def to_dict(self) -> dict:
        return {
            "values": self.values,
            "max_index": self.max_index,
            "max_value": self.max_value,
            "median": self.median,
        }


def _decode_batch(model, layouts: list[PromptLayout], max_new: int):
    prompts = torch.as_tensor([lay.tokens for lay in layouts])
    return greedy_decode_batch(model, prompts, max_new=max_new, stop_id=EOS)


def positional_accuracy(
    model: TransformerLM,
    instances,
    positions,
    max_new: int = 8,
    seed: int = 0,
) -> PositionReport:
    """Accuracy of greedy decoding as the gold document moves through
    ``positions`` (answer-containment scoring)."""
    if not instances:
        raise ValueError("no instances to evaluate")
    if len(positions) < 2:
        raise ValueError("need at least two positions to measure a gap")
    acc = []
    for pos in positions:
        layouts = [arrange(inst, pos) for inst in instances]
        results = _decode_batch(model, layouts, max_new)
        hits = sum(
            contains_answer(res.tokens, inst.answer) for res, inst in zip(results, instances)
        )
        acc.append(hits / len(instances))
    return PositionReport.from_accuracy(positions, acc, n_eval=len(instances), seed=seed)


def pair_accuracy(
    model: TransformerLM, instances, pair: tuple[int, int], max_new: int = 12, seed: int = 0
) -> float:
    """Two-hop accuracy with hops arranged at the given 1-based pair."""
    layouts = [arrange_two_hop(inst, pair[0], pair[1]) for inst in instances]
    results = _decode_batch(model, layouts, max_new)
    hits = sum(
        answer_after_marker(res.tokens, inst.answer) for res, inst in zip(results, instances)
    )
    return hits / len(instances)


def reasoning_mode_eval(
    model: TransformerLM, instances, n: int, max_new: int = 12, seed: int = 0
) -> ModeReport:
    """Evaluate the scaled connected/disconnected/reversed grid. Grid pairs
    are 0-indexed template slots, converted to 1-based arrangement slots."""
    if not instances:
        raise ValueError("no instances to evaluate")
    reports: dict[str, PositionReport] = {}
    all_cells: list[float] = []
    for mode in MODES:
        pairs = position_configs(mode, n)
        acc = [
            pair_accuracy(model, instances, (i + 1, j + 1), max_new=max_new, seed=seed)
            for i, j in pairs
        ]
        reports[mode] = PositionReport.from_accuracy(
            [list(p) for p in pairs], acc, n_eval=len(instances), seed=seed
        )
        all_cells.extend(acc)
    return ModeReport(reports=reports, cross_mode_gap=float(max(all_cells) - min(all_cells)))


def token_shift_profile(
    teacher: TransformerLM, record: DistillRecord, trivial_index: int
) -> ShiftProfile:
    """Per-step KL between the teacher's distributions under the
    advantaged and one trivial conditioning, teacher-forced along the
    advantaged response."""
    resp = list(record.adv_response)
    trivial = record.trivial_layouts[trivial_index]
    with torch.no_grad():
        adv_logits = teacher_force_logits_batch(
            teacher, torch.as_tensor([record.adv_layout.tokens]), torch.as_tensor([resp])
        )[0]
        triv_logits = teacher_force_logits_batch(
            teacher, torch.as_tensor([trivial.tokens]), torch.as_tensor([resp])
        )[0]
    values = [
        kl_divergence(
            torch.softmax(adv_logits[t], dim=-1).numpy(),
            torch.softmax(triv_logits[t], dim=-1).numpy(),
        )
        for t in range(len(resp))
    ]
    return ShiftProfile.from_values(values)


def response_ppl(model: TransformerLM, layout: PromptLayout, response) -> float:
    """exp(mean token NLL) of the response under the prompt."""
    resp = list(response)
    if not resp:
        raise ValueError("empty response")
    with torch.no_grad():
        logits = teacher_force_logits_batch(
            model, torch.as_tensor([layout.tokens]), torch.as_tensor([resp])
        )[0]
        log_p = torch.log_softmax(logits, dim=-1)
        nll = -log_p.gather(1, torch.as_tensor(resp).view(-1, 1)).squeeze(1)
    return float(torch.exp(nll.mean()))


@dataclass
class AttentionReport:
    """Mean attention mass on the gold document per gold position."""
    positions: list[int]
    gold_mass: list[float]
    n_eval: int

    def to_dict(self) -> dict:
        return {"positions": self.positions, "gold_mass": self.gold_mass, "n_eval": self.n_eval}


def attention_report(model: TransformerLM, instances, positions) -> AttentionReport:
    masses = []
    for pos in positions:
        vals = []
        for inst in instances:
            layout = arrange(inst, pos)
            trace = attention_trace(model, layout)
            vals.append(float(trace[pos - 1]))
        masses.append(float(np.mean(vals)))
    return AttentionReport(positions=list(positions), gold_mass=masses, n_eval=len(instances))


# ---------------------------------------------------------------------------
# Serialization (deterministic bytes)
# ---------------------------------------------------------------------------

def report_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def position_report_csv(report: PositionReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["position", "accuracy", "avg", "gap", "gap_first_min", "n_eval", "seed"])
    for pos, acc in zip(report.positions, report.accuracy):
        label = "-".join(str(p) for p in pos) if isinstance(pos, (list, tuple)) else str(pos)
        writer.writerow([label, repr(acc), repr(report.avg), repr(report.gap),
                         repr(report.gap_first_min), report.n_eval, report.seed])
    return buf.getvalue()


def mode_report_csv(report: ModeReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mode", "pair", "accuracy", "mode_avg", "cross_mode_gap"])
    for mode in MODES:
        rep = report.reports[mode]
        for pos, acc in zip(rep.positions, rep.accuracy):
            label = "-".join(str(p) for p in pos)
            writer.writerow([mode, label, repr(acc), repr(rep.avg), repr(report.cross_mode_gap)])
    return buf.getvalue()
