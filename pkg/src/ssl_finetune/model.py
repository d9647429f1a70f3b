"""Two-part speech encoder: CNN feature encoder + transformer contextual encoder.

The wav2vec 2.0-style variant (``w2v``) carries a Gumbel-softmax quantizer
over the CNN features; the HuBERT-style variant (``hbt``) carries one
linear cluster-prediction head per target ensemble. Both share the
same feature/contextual encoder, so fine-tuning code never needs to know
which variant it is holding.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError, TooShortError, UnsupportedVariantError
from .masking import MaskSpec, batch_mask_tensor

CHECKPOINT_FORMAT = "ssl_finetune.encoder"
CHECKPOINT_VERSION = 1

CNN_PREFIX = "feature_encoder."
TRANSFORMER_PREFIX = "context_encoder."

# Released checkpoints the naming grid can refer to (no hbt-base-960h exists).
PRETRAINED_NAMES = (
    "w2v-base",
    "w2v-base-960h",
    "w2v-large",
    "w2v-large-960h",
    "hbt-base",
    "hbt-large",
    "hbt-large-960h",
)


@dataclass
class FrameSequence:
    """A ``[T, D]`` matrix of frames, of which the first ``length`` are valid."""

    values: torch.Tensor
    length: int

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ValueError(f"FrameSequence values must be 2-D, got shape {tuple(self.values.shape)}")
        if not 0 <= self.length <= self.values.shape[0]:
            raise ValueError(f"length {self.length} outside [0, {self.values.shape[0]}]")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def valid(self) -> torch.Tensor:
        return self.values[: self.length]


@dataclass
class EncoderParams:
    """Named parameter collections of a :class:`SpeechEncoder`."""

    cnn_params: dict[str, nn.Parameter]
    transformer_params: dict[str, nn.Parameter]
    auxiliaries: dict[str, nn.Parameter] = field(default_factory=dict)

    @property
    def mask_embedding(self) -> nn.Parameter:
        return self.auxiliaries["mask_embedding"]

    def collections(self) -> dict[str, dict[str, nn.Parameter]]:
        return {
            "cnn": self.cnn_params,
            "transformer": self.transformer_params,
            "auxiliaries": self.auxiliaries,
        }

    def numel(self, collection: str | None = None) -> int:
        cols = self.collections()
        pick = cols.values() if collection is None else [cols[collection]]
        return sum(p.numel() for c in pick for p in c.values())


def checksum(params: dict[str, torch.Tensor]) -> str:
    """SHA-256 over names and raw bytes of a parameter collection."""
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class FeatureEncoder(nn.Module):
    """Strided 1-D convolutions over the raw waveform.

    Each block is conv -> per-frame LayerNorm -> GELU. Per-frame
    normalization keeps valid frames independent of trailing padding.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        convs, norms = [], []
        in_ch = 1
        for layer in cfg.cnn_layers:
            convs.append(nn.Conv1d(in_ch, layer.channels, layer.kernel, stride=layer.stride, bias=False))
            norms.append(nn.LayerNorm(layer.channels))
            in_ch = layer.channels
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.out_channels = in_ch

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        # wav: [B, S] -> [B, T, C]
        x = wav.unsqueeze(1)
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x)
            x = F.gelu(norm(x.transpose(1, 2)).transpose(1, 2))
        return x.transpose(1, 2)


class ConvPositionalEncoding(nn.Module):
    def __init__(self, dim: int, kernel: int, groups: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=groups)
        self.trim = kernel % 2 == 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x.transpose(1, 2))
        if self.trim:
            y = y[:, :, :-1]
        return F.gelu(y.transpose(1, 2))


class TransformerBlock(nn.Module):
    """Pre-norm block, so a zeroed block is an exact identity map."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + self.dropout(h)
        return x + self.dropout(self.ffn(self.norm2(x)))


class ContextEncoder(nn.Module):
    """Input projection, positional information and transformer blocks."""

    def __init__(self, cfg: ModelConfig, in_channels: int):
        super().__init__()
        self.cfg = cfg
        self.feature_norm = nn.LayerNorm(in_channels)
        self.input_projection = nn.Linear(in_channels, cfg.embed_dim)
        if cfg.positional == "conv":
            self.pos = ConvPositionalEncoding(cfg.embed_dim, cfg.pos_conv_kernel, cfg.pos_conv_groups)
        else:
            self.pos = nn.Embedding(cfg.max_positions, cfg.embed_dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_attention_heads, cfg.ffn_dim, cfg.dropout)
            for _ in range(cfg.num_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.embed_dim)

    def project(self, feats: torch.Tensor) -> torch.Tensor:
        return self.input_projection(self.feature_norm(feats))

    def forward(self, x, frame_lengths, return_hidden=False):
        """``x`` is the projected (and possibly masked) input ``[B, T, D]``."""
        T = x.shape[1]
        pad = torch.arange(T, device=x.device)[None, :] >= frame_lengths[:, None]
        x = x.masked_fill(pad[..., None], 0.0)
        if self.cfg.positional == "conv":
            x = x + self.pos(x)
        else:
            if T > self.cfg.max_positions:
                raise ConfigError(f"{T} frames exceed max_positions={self.cfg.max_positions}")
            x = x + self.pos(torch.arange(T, device=x.device))[None]
        hidden = [x]
        kpm = pad if pad.any() else None
        for block in self.blocks:
            x = block(x, key_padding_mask=kpm)
            hidden.append(x)
        out = self.final_norm(x)
        return (out, hidden) if return_hidden else out


class GumbelQuantizer(nn.Module):
    """Product quantizer: one codebook entry selected per group, concatenated."""

    def __init__(self, in_dim: int, groups: int, entries: int, vq_dim: int):
        super().__init__()
        self.groups, self.entries = groups, entries
        self.weight_proj = nn.Linear(in_dim, groups * entries)
        self.codevectors = nn.Parameter(torch.randn(groups * entries, vq_dim // groups))
        nn.init.normal_(self.weight_proj.weight, std=1.0)
        nn.init.zeros_(self.weight_proj.bias)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.weight_proj(x).view(*x.shape[:-1], self.groups, self.entries)

    def forward(self, x: torch.Tensor, hard: bool = True, tau: float = 2.0):
        """``x``: ``[N, C]``. Returns (quantized ``[N, vq_dim]``, code_probs, indices)."""
        logits = self.logits(x)
        probs = logits.float().softmax(-1).to(x.dtype)
        if hard:
            idx = logits.argmax(-1)
            onehot = F.one_hot(idx, self.entries).to(x.dtype)
        else:
            onehot = F.gumbel_softmax(logits.float(), tau=tau, hard=True, dim=-1).to(x.dtype)
            idx = onehot.argmax(-1)
        book = self.codevectors.view(self.groups, self.entries, -1)
        q = torch.einsum("ngv,gvd->ngd", onehot, book)
        return q.reshape(*x.shape[:-1], -1), probs, idx


@dataclass
class QuantizerTemperature:
    """Exponentially decayed Gumbel temperature, floored at ``min_tau``."""

    max_tau: float = 2.0
    min_tau: float = 0.5
    decay: float = 0.999995

    def at(self, step: int) -> float:
        return max(self.max_tau * self.decay**step, self.min_tau)


class SpeechEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.feature_encoder = FeatureEncoder(cfg)
        self.context_encoder = ContextEncoder(cfg, self.feature_encoder.out_channels)
        self.mask_embedding = nn.Parameter(torch.empty(cfg.embed_dim).uniform_())
        self.final_proj = nn.Linear(cfg.embed_dim, cfg.final_dim)
        if cfg.variant == "w2v":
            self.quantizer = GumbelQuantizer(
                self.feature_encoder.out_channels, cfg.num_groups, cfg.entries_per_group, cfg.codevector_dim
            )
            self.project_q = nn.Linear(cfg.codevector_dim, cfg.final_dim)
            self.cluster_heads = None
        else:
            self.quantizer = None
            self.project_q = None
            self.cluster_heads = nn.ModuleList(nn.Linear(cfg.embed_dim, k) for k in cfg.num_clusters_per_ensemble)

    # -- parameter bookkeeping -------------------------------------------------

    def params(self) -> EncoderParams:
        cnn, tr, aux = {}, {}, {}
        for name, p in self.named_parameters():
            if name.startswith(CNN_PREFIX):
                cnn[name] = p
            elif name.startswith(TRANSFORMER_PREFIX):
                tr[name] = p
            else:
                aux[name] = p
        return EncoderParams(cnn, tr, aux)

    def checksums(self) -> dict[str, str]:
        return {k: checksum(v) for k, v in self.params().collections().items()}

    # -- batched forward ---------------------------------------------------------

    def frame_lengths(self, wav_lengths: torch.Tensor) -> torch.Tensor:
        return torch.tensor([self.cfg.num_frames(int(n)) for n in wav_lengths], dtype=torch.long)

    def extract_features(self, wav: torch.Tensor, wav_lengths: torch.Tensor | None = None):
        """CNN features ``[B, T, C]`` and per-utterance valid frame counts."""
        if wav.dim() == 1:
            wav = wav[None]
        if wav_lengths is None:
            wav_lengths = torch.full((wav.shape[0],), wav.shape[1], dtype=torch.long)
        short = int(wav_lengths.min())
        if short < self.cfg.receptive_field:
            raise TooShortError(
                f"waveform of {short} samples is shorter than the receptive field "
                f"({self.cfg.receptive_field} samples)"
            )
        return self.feature_encoder(wav), self.frame_lengths(wav_lengths)

    def contextualize_features(self, feats, frame_lengths, mask=None, return_hidden=False):
        """Project CNN features, replace masked frames, run the transformer.

        ``mask`` is a ``[B, T]`` bool tensor or ``None``.
        """
        x = self.context_encoder.project(feats)
        if mask is not None:
            x = torch.where(mask[..., None], self.mask_embedding.to(x.dtype), x)
        return self.context_encoder(x, frame_lengths, return_hidden=return_hidden)

    def forward(self, wav, wav_lengths=None, mask=None, return_hidden=False):
        feats, flen = self.extract_features(wav, wav_lengths)
        if isinstance(mask, list):
            mask = batch_mask_tensor(mask, feats.shape[1])
        out = self.contextualize_features(feats, flen, mask, return_hidden=return_hidden)
        if return_hidden:
            out, hidden = out
            return {"features": feats, "output": out, "frame_lengths": flen, "hidden": hidden}
        return {"features": feats, "output": out, "frame_lengths": flen}

    # -- single-utterance operations --------------------------------------------

    def encode_features(self, waveform: torch.Tensor) -> FrameSequence:
        if waveform.dim() != 1:
            raise ValueError("encode_features expects a 1-D waveform")
        feats, flen = self.extract_features(waveform[None])
        return FrameSequence(feats[0], int(flen[0]))

    def contextualize(self, frames: FrameSequence, mask: MaskSpec | None = None) -> FrameSequence:
        values = frames.values[None]
        m = None
        if mask is not None:
            if mask.length_T > frames.values.shape[0]:
                raise IndexError(f"mask covers {mask.length_T} frames but sequence has {frames.values.shape[0]}")
            m = batch_mask_tensor([mask], values.shape[1])
        out = self.contextualize_features(values, torch.tensor([frames.length]), m)
        return FrameSequence(out[0], frames.length)

    def quantize(self, frames: FrameSequence, hard: bool = True, tau: float = 2.0):
        if self.quantizer is None:
            raise UnsupportedVariantError("quantize is only defined for the w2v variant")
        q, probs, _ = self.quantizer(frames.values, hard=hard, tau=tau)
        return FrameSequence(q, frames.length), probs

    def layer_features(self, waveform: torch.Tensor, layer_index: int) -> torch.Tensor:
        """Hidden states after transformer block ``layer_index`` (0 = block input)."""
        if not 0 <= layer_index <= self.cfg.num_blocks:
            raise IndexError(f"layer_index must be in [0, {self.cfg.num_blocks}], got {layer_index}")
        with torch.no_grad():
            out = self.forward(waveform[None], return_hidden=True)
        return out["hidden"][layer_index][0]

    # -- persistence -------------------------------------------------------------

    def state_collections(self) -> dict[str, dict[str, torch.Tensor]]:
        return {k: {n: p.detach().clone() for n, p in v.items()} for k, v in self.params().collections().items()}

    def save(self, path: str | os.PathLike) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            **self.state_collections(),
        }
        torch.save(payload, path)

    @classmethod
    def from_payload(cls, payload: dict) -> "SpeechEncoder":
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not an encoder checkpoint (format={payload.get('format')!r})")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        model = cls(ModelConfig.from_dict(payload["config"]))
        state = {**payload["cnn"], **payload["transformer"], **payload["auxiliaries"]}
        model.load_state_dict(state, strict=True)
        return model

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SpeechEncoder":
        return cls.from_payload(torch.load(path, map_location="cpu", weights_only=True))


def load_pretrained(name: str, root: str | os.PathLike) -> SpeechEncoder:
    """Load an externally provided checkpoint by grid name, e.g. ``hbt-large-960h``.

    The file ``<root>/<name>.pt`` must already be in this package's
    checkpoint format; conversion from upstream toolkits happens elsewhere.
    """
    if name not in PRETRAINED_NAMES:
        raise ConfigError(f"unknown pretrained model {name!r}; expected one of {PRETRAINED_NAMES}")
    path = Path(root) / f"{name}.pt"
    if not path.exists():
        raise FileNotFoundError(f"pretrained checkpoint not found: {path}")
    model = SpeechEncoder.load(path)
    variant, size = name.split("-")[:2]
    if (model.cfg.variant, model.cfg.size_preset) != (variant, size):
        raise ConfigError(
            f"{path} holds a {model.cfg.variant}-{model.cfg.size_preset} model, expected {variant}-{size}"
        )
    return model
