"""Evaluation metrics: weighted accuracy, EER, intent accuracy, slot F1."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .heads import SemanticAnnotation

TARGET, NONTARGET = "target", "nontarget"


@dataclass(frozen=True)
class TrialScore:
    enroll_id: str
    test_id: str
    score: float
    label: str

    def __post_init__(self):
        if not self.enroll_id or not self.test_id:
            raise ValueError("trial ids must be non-empty")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for trial {self.enroll_id} {self.test_id}")
        if self.label not in (TARGET, NONTARGET):
            raise ValueError(f"label must be 'target' or 'nontarget', got {self.label!r}")


def _check_aligned(a, b):
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} hypotheses vs {len(b)} references")


def weighted_accuracy(predictions: Sequence, references: Sequence) -> float:
    """Overall accuracy in percent (each utterance counts once)."""
    _check_aligned(predictions, references)
    if not references:
        raise ValueError("empty reference list")
    correct = sum(p == r for p, r in zip(predictions, references))
    return 100.0 * correct / len(references)


def unweighted_accuracy(predictions: Sequence, references: Sequence) -> float:
    """Mean per-class recall in percent."""
    _check_aligned(predictions, references)
    if not references:
        raise ValueError("empty reference list")
    recalls = []
    for c in sorted(set(references), key=str):
        idx = [i for i, r in enumerate(references) if r == c]
        recalls.append(sum(predictions[i] == c for i in idx) / len(idx))
    return 100.0 * float(np.mean(recalls))


def roc_points(target_scores, nontarget_scores) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, FRR) at every distinct threshold, thresholds ascending.

    A trial is accepted when ``score >= threshold``. The first point rejects
    nothing; the last accepts nothing.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    thresholds = np.unique(np.concatenate([tar, non]))
    frr = np.searchsorted(tar, thresholds, side="left") / len(tar)
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / len(non)
    frr = np.concatenate([frr, [1.0]])
    far = np.concatenate([far, [0.0]])
    return far, frr


def eer_from_roc(far: np.ndarray, frr: np.ndarray) -> float:
    """Crossing of FAR and FRR, linearly interpolated between adjacent points."""
    diff = frr - far
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(far[i])
    da, db = diff[i - 1], diff[i]
    t = da / (da - db)
    return float(far[i - 1] + t * (far[i] - far[i - 1]))


def equal_error_rate(trials: Iterable[TrialScore]) -> float:
    trials = list(trials)
    tar = [t.score for t in trials if t.label == TARGET]
    non = [t.score for t in trials if t.label == NONTARGET]
    if not tar or not non:
        raise ValueError("EER needs at least one target and one nontarget trial")
    far, frr = roc_points(tar, non)
    return 100.0 * eer_from_roc(far, frr)


def _norm(s: str) -> str:
    return " ".join(str(s).lower().split())


def intent_accuracy(hyps: Sequence[SemanticAnnotation], refs: Sequence[SemanticAnnotation]) -> float:
    """Percent of utterances whose scenario and action both match."""
    _check_aligned(hyps, refs)
    if not refs:
        raise ValueError("empty reference list")
    correct = sum(
        _norm(h.scenario) == _norm(r.scenario) and _norm(h.action) == _norm(r.action)
        for h, r in zip(hyps, refs)
    )
    return 100.0 * correct / len(refs)


def slot_f1(hyps: Sequence[SemanticAnnotation], refs: Sequence[SemanticAnnotation]) -> float:
    """Micro F1 over exact (slot_type, slot_value) matches pooled across utterances."""
    _check_aligned(hyps, refs)
    tp = n_hyp = n_ref = 0
    for h, r in zip(hyps, refs):
        hs = {(_norm(t), _norm(v)) for t, v in h.entities}
        rs = {(_norm(t), _norm(v)) for t, v in r.entities}
        tp += len(hs & rs)
        n_hyp += len(hs)
        n_ref += len(rs)
    if n_hyp == 0 and n_ref == 0:
        return 100.0
    if tp == 0:
        return 0.0
    p, r = tp / n_hyp, tp / n_ref
    return 100.0 * 2 * p * r / (p + r)


# ---------------------------------------------------------------------------
# files


def write_scores(path: str | os.PathLike, trials: Iterable[TrialScore]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            f.write(f"{t.enroll_id} {t.test_id} {t.score!r} {t.label}\n")


def read_scores(path: str | os.PathLike) -> list[TrialScore]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise ValueError(f"{path}:{n}: expected 'enroll test score label'")
            out.append(TrialScore(fields[0], fields[1], float(fields[2]), fields[3]))
    return out


def write_decoded(path: str | os.PathLike, decoded: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt, text in decoded.items():
            f.write(f"{utt}\t{text}\n")


def read_decoded(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                utt, _, text = line.partition("\t")
                out[utt] = text
    return out
