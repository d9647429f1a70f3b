"""Pretraining objectives and offline cluster-target generation.

Contrastive loss over quantized targets with in-utterance distractors,
codebook diversity penalty, feature L2 penalty, masked cluster
prediction, MFCC front-end and Lloyd k-means used to build the targets.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.fft
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, TooShortError
from .masking import MaskSpec

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class PretrainLossConfig:
    diversity_weight: float = 0.1
    l2_weight: float = 10.0
    temperature: float = 0.1
    distractor_count: int = 100
    reduction: str = "sum"

    def __post_init__(self):
        if self.diversity_weight < 0 or self.l2_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.distractor_count < 0:
            raise ConfigError("distractor_count must be >= 0")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")


# ---------------------------------------------------------------------------
# contrastive objective


def sample_distractors(mask: MaskSpec, K: int, seed: int | np.random.Generator) -> np.ndarray:
    """Candidate index sets, one row per masked step: ``[positive, d_1..d_K']``.

    Distractors are drawn without replacement from the *other* masked frames
    of the same utterance; ``K' = min(K, |M| - 1)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = np.asarray(mask.indices, dtype=np.int64)
    n = len(idx)
    k = min(K, max(n - 1, 0))
    rows = np.empty((n, k + 1), dtype=np.int64)
    for r, t in enumerate(idx):
        rows[r, 0] = t
        if k:
            others = np.delete(idx, r)
            rows[r, 1:] = rng.choice(others, size=k, replace=False)
    return rows


@dataclass
class ContrastiveBatch:
    """One utterance worth of contrastive-loss inputs.

    ``candidate_sets[i]`` lists frame indices into ``quantized_targets`` for
    the i-th masked step; column 0 is the true target.
    """

    context_outputs: torch.Tensor
    quantized_targets: torch.Tensor
    mask: MaskSpec
    candidate_sets: torch.Tensor
    temperature: float = 0.1

    @property
    def distractor_count(self) -> int:
        return self.candidate_sets.shape[1] - 1

    @classmethod
    def build(cls, context_outputs, quantized_targets, mask: MaskSpec, distractor_count=100,
              temperature=0.1, seed=0) -> "ContrastiveBatch":
        cands = sample_distractors(mask, distractor_count, seed)
        return cls(context_outputs, quantized_targets, mask, torch.from_numpy(cands), temperature)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Cosine similarity along the last dim with ``eps`` added to each norm."""
    return (a * b).sum(-1) / ((a.norm(dim=-1) + eps) * (b.norm(dim=-1) + eps))


def contrastive_logits(batch: ContrastiveBatch) -> torch.Tensor:
    """``[|M|, K'+1]`` similarity logits divided by the temperature."""
    steps = torch.as_tensor(batch.mask.indices, dtype=torch.long)
    c = batch.context_outputs[steps]
    cands = batch.quantized_targets[batch.candidate_sets]
    return cosine_similarity(c[:, None, :], cands) / batch.temperature


def contrastive_loss(batch: ContrastiveBatch, reduction: str = "sum") -> torch.Tensor:
    if len(batch.mask) == 0:
        raise ValueError("contrastive loss needs at least one masked step")
    if batch.temperature <= 0:
        raise ConfigError("temperature must be > 0")
    logits = contrastive_logits(batch)
    per_step = torch.logsumexp(logits, dim=-1) - logits[:, 0]
    return per_step.sum() if reduction == "sum" else per_step.mean()


def diversity_loss(code_probs: torch.Tensor) -> torch.Tensor:
    """``(V - exp(H)) / V`` of batch-averaged codebook usage, averaged over groups.

    ``code_probs`` is ``[frames, groups, entries]``.
    """
    V = code_probs.shape[-1]
    avg = code_probs.reshape(-1, *code_probs.shape[-2:]).mean(0)
    entropy = -(avg * torch.log(avg.clamp_min(1e-12))).sum(-1)
    return ((V - torch.exp(entropy)) / V).mean()


def feature_l2_penalty(features: torch.Tensor, frame_lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared CNN-feature activation over valid frames."""
    if frame_lengths is None:
        return features.pow(2).mean()
    T = features.shape[1]
    valid = torch.arange(T)[None, :] < frame_lengths[:, None]
    return features.pow(2)[valid].mean()


# ---------------------------------------------------------------------------
# masked cluster prediction


@dataclass
class MaskedPredictionBatch:
    """Per-ensemble log-distributions ``[T, C_k]`` and targets ``[T]``."""

    log_probs: list[torch.Tensor]
    targets: list[torch.Tensor]
    mask: MaskSpec
    corrupted_input: torch.Tensor | None = None

    def __post_init__(self):
        if len(self.log_probs) != len(self.targets):
            raise ValueError("one target sequence per ensemble is required")
        for lp, z in zip(self.log_probs, self.targets):
            if z.numel() and (int(z.min()) < 0 or int(z.max()) >= lp.shape[-1]):
                raise ValueError(f"target label outside [0, {lp.shape[-1]})")

    @classmethod
    def from_logits(cls, logits, targets, mask, corrupted_input=None) -> "MaskedPredictionBatch":
        return cls([F.log_softmax(l, dim=-1) for l in logits], list(targets), mask, corrupted_input)

    @classmethod
    def from_probs(cls, probs, targets, mask, eps=1e-10, corrupted_input=None) -> "MaskedPredictionBatch":
        return cls([torch.log(p.clamp_min(eps)) for p in probs], list(targets), mask, corrupted_input)

    @property
    def predicted_distributions(self) -> list[torch.Tensor]:
        return [lp.exp() for lp in self.log_probs]


def masked_prediction_loss(batch: MaskedPredictionBatch) -> torch.Tensor:
    """Cross-entropy summed over masked steps and target ensembles."""
    if len(batch.mask) == 0:
        raise ValueError("masked prediction loss needs at least one masked step")
    steps = torch.as_tensor(batch.mask.indices, dtype=torch.long)
    total = 0.0
    for lp, z in zip(batch.log_probs, batch.targets):
        total = total - lp[steps, z[steps].long()].sum()
    return total


# ---------------------------------------------------------------------------
# MFCC front-end


@dataclass(frozen=True)
class MFCCConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 23
    n_ceps: int = 13
    log_floor: float = 1e-10
    delta_window: int = 2

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg: MFCCConfig) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft // 2 + 1]`` on the HTK mel scale."""
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.linspace(0, cfg.sample_rate / 2, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0), _hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def deltas(feats: np.ndarray, N: int = 2) -> np.ndarray:
    """Regression deltas along time with edge replication."""
    T = feats.shape[0]
    padded = np.pad(feats, ((N, N), (0, 0)), mode="edge")
    denom = 2 * sum(n * n for n in range(1, N + 1))
    out = np.zeros_like(feats)
    for n in range(1, N + 1):
        out += n * (padded[N + n : N + n + T] - padded[N - n : N - n + T])
    return out / denom


def mfcc_features(waveform, cfg: MFCCConfig = MFCCConfig()) -> np.ndarray:
    """13 cepstra plus first and second differences: ``[frames, 39]``."""
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    win = cfg.win_length
    if x.size < win:
        raise TooShortError(f"waveform of {x.size} samples is shorter than one {win}-sample window")
    n_frames = 1 + (x.size - win) // cfg.hop_length
    idx = np.arange(win)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    mel = np.log(np.maximum(power @ mel_filterbank(cfg).T, cfg.log_floor))
    ceps = scipy.fft.dct(mel, type=2, axis=1, norm="ortho")[:, : cfg.n_ceps]
    d1 = deltas(ceps, cfg.delta_window)
    d2 = deltas(d1, cfg.delta_window)
    return np.concatenate([ceps, d1, d2], axis=1)


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    centroids = [x[rng.integers(len(x))]]
    d = _sq_dists(x, np.asarray(centroids))[:, 0]
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            pick = rng.integers(len(x))
        else:
            pick = rng.choice(len(x), p=d / total)
        centroids.append(x[pick])
        d = np.minimum(d, _sq_dists(x, x[pick][None])[:, 0])
    return np.asarray(centroids, dtype=np.float64)


def _lloyd(x, centroids, max_iter):
    history = []
    labels = None
    for it in range(max_iter):
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(1)
        counts = np.bincount(new_labels, minlength=len(centroids))
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point farthest from its centroid
            far = d[np.arange(len(x)), new_labels].argmax()
            centroids[j] = x[far]
            d = _sq_dists(x, centroids)
            new_labels = d.argmin(1)
        history.append(float(d[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(len(centroids)):
            members = x[labels == j]
            if len(members):
                centroids[j] = members.mean(0)
    else:
        it = max_iter - 1
    return centroids, labels, history, it + 1


def kmeans_fit(features, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 10) -> KMeansResult:
    """Lloyd k-means with k-means++ seeding; the best of ``n_init`` restarts is kept.

    ``history`` holds the sum of squared distances after each assignment step
    of the winning restart.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(x) < k:
        raise DataError(f"need at least k={k} frames, got {len(x)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        c0 = _kmeans_pp(x, k, rng)
        centroids, labels, history, n_iter = _lloyd(x, c0.copy(), max_iter)
        obj = float(_sq_dists(x, centroids)[np.arange(len(x)), labels].sum())
        if best is None or obj < best.objective - 1e-12:
            best = KMeansResult(centroids, labels, obj, history, n_iter)
    return best


def assign_targets(features, centroids) -> np.ndarray:
    """Nearest-centroid label per frame; ties resolve to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if c.ndim == 1:
        c = c[:, None]
    if x.shape[1] != c.shape[1]:
        raise ValueError(f"feature dim {x.shape[1]} != centroid dim {c.shape[1]}")
    # exact squared distances, no expansion, so equidistant frames tie exactly
    d = ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    return d.argmin(1)


# ---------------------------------------------------------------------------
# target sets


@dataclass
class TargetProvenance:
    iteration: int
    k: int
    feature_source: str
    layer: int | None = None
    seed: int = 0


@dataclass
class TargetSet:
    """Frame-level cluster labels per utterance plus how they were made."""

    labels: dict[str, np.ndarray]
    provenance: TargetProvenance
    centroids: np.ndarray | None = None

    def save(self, path: str | os.PathLike) -> None:
        p = self.provenance
        with open(path, "w", encoding="utf-8") as f:
            layer = "-" if p.layer is None else p.layer
            f.write(f"# iteration={p.iteration} k={p.k} source={p.feature_source} layer={layer} seed={p.seed}\n")
            for utt in sorted(self.labels):
                f.write(utt + "\t" + " ".join(str(int(v)) for v in self.labels[utt]) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TargetSet":
        with open(path, encoding="utf-8") as f:
            header = f.readline()
            if not header.startswith("#"):
                raise DataError(f"{path}: missing provenance header")
            kv = dict(item.split("=", 1) for item in header[1:].split())
            prov = TargetProvenance(
                iteration=int(kv["iteration"]),
                k=int(kv["k"]),
                feature_source=kv["source"],
                layer=None if kv.get("layer", "-") == "-" else int(kv["layer"]),
                seed=int(kv.get("seed", 0)),
            )
            labels = {}
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                utt, _, seq = line.partition("\t")
                labels[utt] = np.array([int(v) for v in seq.split()], dtype=np.int64)
        return cls(labels, prov)


def _fit_and_assign(feats: dict[str, np.ndarray], k, seed, prov) -> TargetSet:
    stacked = np.concatenate([feats[u] for u in sorted(feats)], axis=0)
    km = kmeans_fit(stacked, k, seed=seed)
    labels = {u: assign_targets(feats[u], km.centroids) for u in feats}
    return TargetSet(labels, prov, km.centroids)


def initial_targets(corpus: dict[str, np.ndarray], k: int, seed: int = 0,
                    mfcc_cfg: MFCCConfig = MFCCConfig()) -> TargetSet:
    """First-iteration targets: k-means on 39-dim MFCC frames."""
    feats = {u: mfcc_features(w, mfcc_cfg) for u, w in corpus.items()}
    return _fit_and_assign(feats, k, seed, TargetProvenance(1, k, "mfcc", None, seed))


def refine_targets(model, corpus: dict[str, np.ndarray], layer_index: int, k: int, seed: int = 0,
                   iteration: int = 2) -> TargetSet:
    """Next-iteration targets from an intermediate layer of a trained model.

    ``model`` only needs ``layer_features(waveform, layer_index)``.
    """
    if iteration < 2:
        raise ConfigError("refinement produces iteration >= 2 targets")
    feats = {}
    for u, w in corpus.items():
        f = model.layer_features(torch.as_tensor(np.asarray(w), dtype=torch.float32), layer_index)
        feats[u] = f.detach().cpu().numpy().astype(np.float64) if torch.is_tensor(f) else np.asarray(f)
    return _fit_and_assign(feats, k, seed, TargetProvenance(iteration, k, "layer", layer_index, seed))


def align_labels(labels: np.ndarray, num_frames: int) -> np.ndarray:
    """Resample a label sequence to ``num_frames`` by nearest-earlier index."""
    labels = np.asarray(labels)
    if num_frames == len(labels):
        return labels
    src = np.minimum((np.arange(num_frames) * len(labels)) // max(num_frames, 1), len(labels) - 1)
    return labels[src]
