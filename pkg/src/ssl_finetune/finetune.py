"""Freeze policies, validation-driven learning-rate annealing and the training loop."""

from __future__ import annotations

import copy
import enum
import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, TrainingError
from .heads import (
    AttentionalGRUDecoder,
    CharVocab,
    ClassifierHead,
    SemanticAnnotation,
    beam_search,
    classification_loss,
    greedy_search,
    parse_semantics,
    pool_mean_batch,
    serialize_semantics,
)
from .masking import batch_mask_tensor, sample_mask
from .metrics import intent_accuracy, slot_f1, weighted_accuracy
from .model import EncoderParams, SpeechEncoder, checksum
from .pretrain import pad_waveforms

logger = logging.getLogger(__name__)

# initial (encoder, downstream) learning rates per task
DEFAULT_LRS = {
    "SER": (1e-5, 1e-4),
    "SV": (1e-5, 1e-4),
    "SLU": (1e-5, 3e-4),
}


class FreezePolicy(str, enum.Enum):
    FROZEN = "Frozen"
    PARTIAL = "Partial"
    ENTIRE = "Entire"

    @property
    def tag(self) -> str:
        return {"Frozen": "Frozen", "Partial": "PF", "Entire": "EF"}[self.value]

    @classmethod
    def from_tag(cls, tag: str) -> "FreezePolicy":
        table = {"frozen": cls.FROZEN, "pf": cls.PARTIAL, "partial": cls.PARTIAL,
                 "ef": cls.ENTIRE, "entire": cls.ENTIRE}
        try:
            return table[tag.lower()]
        except KeyError:
            raise ConfigError(f"unknown freeze policy {tag!r}") from None


def apply_freeze_policy(params: EncoderParams, policy: FreezePolicy) -> dict[str, nn.Parameter]:
    """Encoder parameters left trainable by ``policy``.

    Pretraining auxiliaries (mask embedding, quantizer, cluster heads) are
    never part of downstream training.
    """
    policy = FreezePolicy(policy)
    if policy is FreezePolicy.FROZEN:
        return {}
    if policy is FreezePolicy.PARTIAL:
        return dict(params.transformer_params)
    return {**params.cnn_params, **params.transformer_params}


# ---------------------------------------------------------------------------
# scheduler


@dataclass(frozen=True)
class ScheduleState:
    encoder_lr: float
    downstream_lr: float
    anneal_factor: float = 0.5
    improvement_threshold: float = 0.0025
    patience: int = 10
    best_metric: float | None = None
    history: tuple[float, ...] = ()
    best_index: int | None = None

    def __post_init__(self):
        if self.encoder_lr < 0 or self.downstream_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0 < self.anneal_factor <= 1:
            raise ConfigError("anneal_factor must be in (0, 1]")

    @property
    def epochs_since_best(self) -> int:
        if self.best_index is None:
            return 0
        return len(self.history) - 1 - self.best_index


def scheduler_step(state: ScheduleState, new_val_metric: float, higher_is_better: bool = True) -> ScheduleState:
    """Anneal both rates unless validation improved by at least the threshold.

    The multiplier grows linearly from ``anneal_factor`` (no gain or worse)
    to 1 (gain equal to the threshold).
    """
    m = float(new_val_metric)
    if math.isnan(m):
        raise TrainingError("validation metric is NaN")
    history = state.history + (m,)
    if state.best_metric is None:
        return replace(state, best_metric=m, history=history, best_index=len(history) - 1)
    sign = 1.0 if higher_is_better else -1.0
    rel = sign * (m - state.best_metric) / max(abs(state.best_metric), 1e-12)
    if rel >= state.improvement_threshold:
        return replace(state, best_metric=m, history=history, best_index=len(history) - 1)
    a = state.anneal_factor
    factor = min(1.0, max(a, a + (1.0 - a) * max(rel, 0.0) / state.improvement_threshold))
    return replace(
        state,
        encoder_lr=state.encoder_lr * factor,
        downstream_lr=state.downstream_lr * factor,
        history=history,
    )


# ---------------------------------------------------------------------------
# run names


_RUN_RE = re.compile(r"^(EF|PF|Frozen)-(w2v|hbt)-(base|large|toy)(-960h)?$")


@dataclass(frozen=True)
class RunName:
    policy_tag: str
    variant_tag: str
    size_tag: str
    asr_tag: str | None = None

    def __post_init__(self):
        if not _RUN_RE.match(str(self)):
            raise ConfigError(f"invalid run name {str(self)!r}")

    def __str__(self) -> str:
        base = f"{self.policy_tag}-{self.variant_tag}-{self.size_tag}"
        return base + (f"-{self.asr_tag}" if self.asr_tag else "")

    @property
    def policy(self) -> FreezePolicy:
        return FreezePolicy.from_tag(self.policy_tag)

    @property
    def model_name(self) -> str:
        """Name of the pretrained checkpoint, e.g. ``hbt-large-960h``."""
        return str(self).split("-", 1)[1]

    @classmethod
    def parse(cls, text: str) -> "RunName":
        m = _RUN_RE.match(text)
        if not m:
            raise ConfigError(f"invalid run name {text!r}")
        return cls(m.group(1), m.group(2), m.group(3), "960h" if m.group(4) else None)


# ---------------------------------------------------------------------------
# task data and heads


@dataclass
class Example:
    utt_id: str
    waveform: np.ndarray
    target: object


@dataclass
class TaskData:
    train: list[Example]
    valid: list[Example]


def batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator | None = None):
    """Length-bucketed batches; batch order shuffled when ``rng`` is given."""
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i].waveform), examples[i].utt_id))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for chunk in chunks:
        yield [examples[i] for i in chunk]


def encode_batch(encoder: SpeechEncoder, examples: Sequence[Example], policy: FreezePolicy = FreezePolicy.FROZEN,
                 mask_seed: int | None = None):
    """Contextual outputs ``[B, T, D]`` and frame lengths, respecting the freeze policy."""
    wav, lens = pad_waveforms([e.waveform for e in examples])
    grad_cnn = policy is FreezePolicy.ENTIRE and torch.is_grad_enabled()
    grad_tr = policy is not FreezePolicy.FROZEN and torch.is_grad_enabled()
    with torch.set_grad_enabled(grad_cnn):
        feats, flen = encoder.extract_features(wav, lens)
    mask = None
    if mask_seed is not None:
        pol = encoder.cfg.mask_policy
        mask = batch_mask_tensor([sample_mask(int(n), pol, mask_seed + i) for i, n in enumerate(flen)],
                                 feats.shape[1])
    with torch.set_grad_enabled(grad_tr):
        out = encoder.contextualize_features(feats, flen, mask)
    return out, flen


class UtteranceClassifier(nn.Module):
    """Mean pooling over valid frames followed by a linear classifier."""

    kind = "classifier"
    higher_is_better = True

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.dim, self.num_classes = dim, num_classes
        self.head = ClassifierHead(dim, num_classes)

    def spec(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "num_classes": self.num_classes}

    def embed(self, enc, flen):
        return pool_mean_batch(enc, flen)

    def loss(self, enc, flen, examples):
        logits = self.head(self.embed(enc, flen))
        return classification_loss(logits, torch.tensor([e.target for e in examples]))

    @torch.no_grad()
    def predict(self, encoder, examples, batch_size=16):
        preds = {}
        for batch in batches(examples, batch_size):
            enc, flen = encode_batch(encoder, batch)
            logits = self.head(self.embed(enc, flen))
            for e, p in zip(batch, logits.argmax(-1).tolist()):
                preds[e.utt_id] = p
        return preds

    def evaluate(self, encoder, examples) -> float:
        preds = self.predict(encoder, examples)
        return weighted_accuracy([preds[e.utt_id] for e in examples], [e.target for e in examples])

    @torch.no_grad()
    def embeddings(self, encoder, examples, batch_size=16) -> dict[str, torch.Tensor]:
        """Pooled embeddings taken before the linear layer."""
        out = {}
        for batch in batches(examples, batch_size):
            enc, flen = encode_batch(encoder, batch)
            for e, v in zip(batch, self.embed(enc, flen)):
                out[e.utt_id] = v.clone()
        return out


class SLUHead(nn.Module):
    """Character-level attentional decoder emitting ``scenario|action|slots``."""

    kind = "slu"
    higher_is_better = True

    def __init__(self, dim: int, emb_dim: int = 32, hidden_dim: int = 128, attn_dim: int = 64,
                 beam_width: int = 80, max_len: int = 80):
        super().__init__()
        self.vocab = CharVocab()
        self.dim = dim
        self.cfg = dict(emb_dim=emb_dim, hidden_dim=hidden_dim, attn_dim=attn_dim)
        self.beam_width, self.max_len = beam_width, max_len
        # per-epoch validation may decode with a narrower beam than test
        self.validation_beam_width = None
        self.decoder = AttentionalGRUDecoder(dim, len(self.vocab), **self.cfg)

    def spec(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, **self.cfg, "beam_width": self.beam_width,
                "max_len": self.max_len}

    def loss(self, enc, flen, examples):
        targets = [self.vocab.encode(serialize_semantics(e.target)) for e in examples]
        return self.decoder.nll(enc, flen, targets)

    @torch.no_grad()
    def decode(self, encoder, examples, beam_width=None, batch_size=16) -> dict[str, str]:
        width = self.beam_width if beam_width is None else beam_width
        out = {}
        for batch in batches(examples, batch_size):
            enc, flen = encode_batch(encoder, batch)
            for b, e in enumerate(batch):
                e_b, l_b = enc[b : b + 1, : int(flen[b])], flen[b : b + 1]
                if width == 1:
                    hyp = greedy_search(self.decoder, e_b, self.max_len, l_b)
                else:
                    hyp = beam_search(self.decoder, e_b, width, self.max_len, l_b)
                out[e.utt_id] = self.vocab.decode(hyp.tokens)
        return out

    def scores(self, encoder, examples, beam_width=None) -> dict[str, float]:
        decoded = self.decode(encoder, examples, beam_width)
        hyps = [parse_semantics(decoded[e.utt_id]).annotation for e in examples]
        refs = [e.target for e in examples]
        return {"IC": intent_accuracy(hyps, refs), "SF": slot_f1(hyps, refs)}

    def evaluate(self, encoder, examples) -> float:
        return self.scores(encoder, examples, self.validation_beam_width)["IC"]


def build_head(spec: dict) -> nn.Module:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "classifier":
        return UtteranceClassifier(spec["dim"], spec["num_classes"])
    if kind == "slu":
        return SLUHead(**spec)
    raise ConfigError(f"unknown head kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints of fine-tuned systems

FINETUNED_FORMAT = "ssl_finetune.finetuned"


def save_finetuned(path, encoder: SpeechEncoder, head: nn.Module, meta: dict | None = None,
                   encoder_state=None, head_state=None) -> None:
    enc_state = encoder_state or encoder.state_dict()
    params = SpeechEncoder(encoder.cfg).params()
    payload = {
        "format": FINETUNED_FORMAT,
        "version": 1,
        "encoder": {
            "format": "ssl_finetune.encoder",
            "version": 1,
            "config": encoder.cfg.to_dict(),
            "cnn": {k: enc_state[k] for k in params.cnn_params},
            "transformer": {k: enc_state[k] for k in params.transformer_params},
            "auxiliaries": {k: enc_state[k] for k in params.auxiliaries},
        },
        "head": {"spec": head.spec(), "state": head_state or head.state_dict()},
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_finetuned(path):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != FINETUNED_FORMAT:
        raise ValueError(f"{path} is not a fine-tuned checkpoint")
    encoder = SpeechEncoder.from_payload(payload["encoder"])
    head = build_head(payload["head"]["spec"])
    head.load_state_dict(payload["head"]["state"])
    encoder.eval()
    head.eval()
    return encoder, head, payload.get("meta", {})


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    encoder_lr: float
    downstream_lr: float
    train_metric: float | None = None
    checksums: dict[str, str] = field(default_factory=dict)


@dataclass
class FitResult:
    history: list[EpochRecord]
    best_epoch: int
    best_metric: float
    encoder_state: dict
    head_state: dict
    final_schedule: ScheduleState

    def load_best(self, encoder: SpeechEncoder, head: nn.Module) -> None:
        encoder.load_state_dict(self.encoder_state)
        head.load_state_dict(self.head_state)


def fit(encoder: SpeechEncoder, head: nn.Module, data: TaskData, policy: FreezePolicy,
        init_lrs: tuple[float, float] = DEFAULT_LRS["SER"], seed: int = 0, epochs: int = 30,
        patience: int = 10, batch_size: int = 8, anneal_factor: float = 0.5,
        improvement_threshold: float = 0.0025, eval_train: bool = False, track_checksums: bool = False,
        restore_best: bool = True) -> FitResult:
    """Train ``head`` (and the encoder parts ``policy`` leaves free) on ``data``.

    Encoder and head get separate Adam optimizers; both rates are annealed
    on the validation metric after every epoch. The best-validation state
    is kept and, with ``restore_best``, loaded back at the end.
    """
    policy = FreezePolicy(policy)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    higher = head.higher_is_better

    trainable = apply_freeze_policy(encoder.params(), policy)
    saved_flags = {n: p.requires_grad for n, p in encoder.named_parameters()}
    for n, p in encoder.named_parameters():
        p.requires_grad_(n in trainable)

    sched = ScheduleState(init_lrs[0], init_lrs[1], anneal_factor, improvement_threshold, patience)
    enc_opt = torch.optim.Adam(list(trainable.values()), lr=sched.encoder_lr) if trainable else None
    head_opt = torch.optim.Adam(head.parameters(), lr=sched.downstream_lr)

    history: list[EpochRecord] = []
    best_metric, best_epoch = None, -1
    best_enc, best_head = copy.deepcopy(encoder.state_dict()), copy.deepcopy(head.state_dict())
    mask_ft = encoder.cfg.mask_during_finetune and policy is not FreezePolicy.FROZEN

    try:
        for epoch in range(epochs):
            encoder.train(bool(trainable))
            head.train()
            losses = []
            for batch in batches(data.train, batch_size, rng):
                mask_seed = int(rng.integers(2**31)) if mask_ft else None
                enc, flen = encode_batch(encoder, batch, policy, mask_seed)
                loss = head.loss(enc, flen, batch)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"loss diverged ({loss.item()}) at epoch {epoch} with encoder_lr="
                        f"{sched.encoder_lr:g}, downstream_lr={sched.downstream_lr:g}"
                    )
                if enc_opt is not None:
                    enc_opt.zero_grad()
                head_opt.zero_grad()
                loss.backward()
                if enc_opt is not None:
                    enc_opt.step()
                head_opt.step()
                losses.append(loss.item())

            encoder.eval()
            head.eval()
            val = head.evaluate(encoder, data.valid)
            train_metric = head.evaluate(encoder, data.train) if eval_train else None
            record = EpochRecord(epoch, float(np.mean(losses)), float(val), sched.encoder_lr,
                                 sched.downstream_lr, train_metric)
            if track_checksums:
                record.checksums = encoder.checksums()
            history.append(record)
            logger.info("epoch %d loss %.4f val %.3f lrs (%.3g, %.3g)", epoch, record.train_loss, val,
                        sched.encoder_lr, sched.downstream_lr)

            if best_metric is None or (val > best_metric if higher else val < best_metric):
                best_metric, best_epoch = val, epoch
                best_enc = copy.deepcopy(encoder.state_dict())
                best_head = copy.deepcopy(head.state_dict())

            sched = scheduler_step(sched, val, higher)
            if enc_opt is not None:
                for g in enc_opt.param_groups:
                    g["lr"] = sched.encoder_lr
            for g in head_opt.param_groups:
                g["lr"] = sched.downstream_lr
            if epoch - best_epoch >= patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    finally:
        for n, p in encoder.named_parameters():
            p.requires_grad_(saved_flags[n])

    result = FitResult(history, best_epoch, best_metric, best_enc, best_head, sched)
    if restore_best:
        result.load_best(encoder, head)
    encoder.eval()
    head.eval()
    return result
