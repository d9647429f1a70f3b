"""Small-scale pretraining loops for both encoder variants."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, TrainingError
from .masking import MaskSpec, batch_mask_tensor, sample_mask
from .model import QuantizerTemperature, SpeechEncoder
from .objectives import (
    ContrastiveBatch,
    MaskedPredictionBatch,
    PretrainLossConfig,
    TargetSet,
    align_labels,
    contrastive_loss,
    diversity_loss,
    feature_l2_penalty,
    masked_prediction_loss,
)

logger = logging.getLogger(__name__)


def pad_waveforms(waves: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(w) for w in waves], dtype=torch.long)
    out = torch.zeros(len(waves), int(lengths.max()))
    for i, w in enumerate(waves):
        out[i, : len(w)] = torch.as_tensor(np.asarray(w), dtype=torch.float32)
    return out, lengths


def _sample_masks(model, flen, seed):
    return [sample_mask(int(n), model.cfg.mask_policy, seed + i) for i, n in enumerate(flen)]


def contrastive_step(model: SpeechEncoder, wav, wav_lengths, loss_cfg: PretrainLossConfig,
                     seed: int, tau: float = 2.0) -> dict[str, torch.Tensor]:
    """Total w2v loss for one batch: contrastive + diversity + feature L2."""
    feats, flen = model.extract_features(wav, wav_lengths)
    masks = _sample_masks(model, flen, seed)
    out = model.contextualize_features(feats, flen, batch_mask_tensor(masks, feats.shape[1]))
    c = model.final_proj(out)
    valid = torch.arange(feats.shape[1])[None, :] < flen[:, None]
    q, probs, _ = model.quantizer(feats[valid], hard=not model.training, tau=tau)
    q_full = torch.zeros(*feats.shape[:2], q.shape[-1], dtype=q.dtype)
    q_full[valid] = q
    q_full = model.project_q(q_full)

    rng = np.random.default_rng(seed)
    con = feats.new_zeros(())
    n_masked = 0
    for b, m in enumerate(masks):
        if not len(m):
            continue
        T = int(flen[b])
        batch = ContrastiveBatch.build(c[b, :T], q_full[b, :T], m, loss_cfg.distractor_count,
                                       loss_cfg.temperature, rng)
        con = con + contrastive_loss(batch, reduction="sum")
        n_masked += len(m)
    if n_masked and loss_cfg.reduction == "mean":
        con = con / n_masked
    scale = n_masked if loss_cfg.reduction == "sum" else 1
    div = diversity_loss(probs)
    l2 = feature_l2_penalty(feats, flen)
    total = con + loss_cfg.diversity_weight * div * scale + loss_cfg.l2_weight * l2
    return {"loss": total, "contrastive": con, "diversity": div, "l2": l2, "n_masked": n_masked}


def masked_prediction_step(model: SpeechEncoder, wav, wav_lengths, targets: list[list[np.ndarray]],
                           seed: int) -> dict[str, torch.Tensor]:
    """HuBERT-style loss; ``targets[b][k]`` is utterance b's label sequence for ensemble k."""
    feats, flen = model.extract_features(wav, wav_lengths)
    masks = _sample_masks(model, flen, seed)
    mask_t = batch_mask_tensor(masks, feats.shape[1])
    out = model.contextualize_features(feats, flen, mask_t)
    logits = [head(out) for head in model.cluster_heads]
    loss = feats.new_zeros(())
    n_masked = 0
    for b, m in enumerate(masks):
        if not len(m):
            continue
        T = int(flen[b])
        z = [torch.as_tensor(align_labels(targets[b][k], T)) for k in range(len(logits))]
        batch = MaskedPredictionBatch.from_logits([l[b, :T] for l in logits], z, m)
        loss = loss + masked_prediction_loss(batch)
        n_masked += len(m)
    return {"loss": loss, "n_masked": n_masked}


@dataclass
class PretrainConfig:
    epochs: int = 5
    lr: float = 5e-4
    warmup_fraction: float = 0.1
    batch_size: int = 8
    seed: int = 0
    loss: PretrainLossConfig = PretrainLossConfig()


def warmup_linear_decay(total_steps: int, warmup_fraction: float):
    warm = max(1, int(round(total_steps * warmup_fraction)))

    def factor(step):
        if step < warm:
            return (step + 1) / warm
        return max(0.0, (total_steps - step) / max(1, total_steps - warm))

    return factor


def pretrain(model: SpeechEncoder, waveforms: dict[str, np.ndarray], cfg: PretrainConfig = PretrainConfig(),
             targets: list[TargetSet] | None = None) -> list[float]:
    """Pretrain ``model`` in place; returns the mean loss per epoch.

    w2v models use the contrastive objective; hbt models need ``targets``
    (one :class:`TargetSet` per cluster ensemble).
    """
    if model.cfg.variant == "hbt":
        if not targets or len(targets) != len(model.cluster_heads):
            raise ConfigError("hbt pretraining needs one TargetSet per cluster ensemble")
    ids = sorted(waveforms)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(ids) / cfg.batch_size)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_linear_decay(cfg.epochs * n_batches, cfg.warmup_fraction))
    temp = QuantizerTemperature()
    history, step = [], 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ids))
        losses = []
        for bi in range(n_batches):
            batch_ids = [ids[i] for i in order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]]
            wav, lens = pad_waveforms([waveforms[u] for u in batch_ids])
            seed = int(rng.integers(2**31))
            if model.cfg.variant == "w2v":
                out = contrastive_step(model, wav, lens, cfg.loss, seed, tau=temp.at(step))
            else:
                tg = [[t.labels[u] for t in targets] for u in batch_ids]
                out = masked_prediction_step(model, wav, lens, tg, seed)
            if not out["n_masked"]:
                continue
            loss = out["loss"]
            if not torch.isfinite(loss):
                raise TrainingError(f"pretraining loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            losses.append(float(loss))
        history.append(float(np.mean(losses)) if losses else float("nan"))
        logger.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    return history
