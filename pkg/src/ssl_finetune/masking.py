"""Contiguous span masking over CNN-encoder output frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import MaskPolicy
from .errors import ConfigError


@dataclass(frozen=True)
class MaskSpec:
    """Masked frame indices of a length-``length_T`` sequence."""

    indices: tuple[int, ...]
    length_T: int

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if self.length_T < 0:
            raise ConfigError("length_T must be >= 0")
        if idx and (idx[0] < 0 or idx[-1] >= self.length_T):
            raise IndexError(f"mask index out of range [0, {self.length_T}): {idx[0]}..{idx[-1]}")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def __contains__(self, t):
        return t in set(self.indices)

    @classmethod
    def empty(cls, length_T: int) -> "MaskSpec":
        return cls((), length_T)

    @classmethod
    def full(cls, length_T: int) -> "MaskSpec":
        return cls(tuple(range(length_T)), length_T)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.length_T, dtype=bool)
        out[list(self.indices)] = True
        return out

    def to_text(self) -> str:
        return " ".join(str(v) for v in (self.length_T, *self.indices))

    @classmethod
    def from_text(cls, text: str) -> "MaskSpec":
        fields = text.split()
        if not fields:
            raise ValueError("empty mask text")
        return cls(tuple(int(v) for v in fields[1:]), int(fields[0]))


def sample_mask(length_T: int, policy: MaskPolicy, rng_seed: int) -> MaskSpec:
    """Every frame starts a span with probability ``span_start_prob``.

    Spans cover ``span_length`` frames, truncated at the sequence end, and
    overlapping spans merge.
    """
    if length_T < 1:
        raise ConfigError(f"length_T must be >= 1, got {length_T}")
    rng = np.random.default_rng(rng_seed)
    starts = np.flatnonzero(rng.random(length_T) < policy.span_start_prob)
    masked = np.zeros(length_T, dtype=bool)
    for s in starts:
        masked[s : s + policy.span_length] = True
    return MaskSpec(tuple(np.flatnonzero(masked).tolist()), length_T)


def apply_mask(frames, mask: MaskSpec, mask_embedding: torch.Tensor):
    """Return ``frames`` with rows in ``mask`` replaced by ``mask_embedding``.

    Accepts a ``FrameSequence`` or a ``[T, D]`` tensor and returns the same kind.
    """
    from .model import FrameSequence

    values = frames.values if isinstance(frames, FrameSequence) else frames
    length = frames.length if isinstance(frames, FrameSequence) else values.shape[0]
    if mask.length_T != length:
        raise ConfigError(f"mask length {mask.length_T} != frame count {length}")
    if mask_embedding.shape[-1] != values.shape[-1]:
        raise ValueError(
            f"mask embedding dim {mask_embedding.shape[-1]} != frame dim {values.shape[-1]}"
        )
    out = values.clone()
    if len(mask):
        idx = torch.as_tensor(mask.indices, dtype=torch.long)
        out[idx] = mask_embedding.to(out.dtype)
    if isinstance(frames, FrameSequence):
        return FrameSequence(out, length)
    return out


def batch_mask_tensor(masks: list[MaskSpec | None], max_len: int) -> torch.Tensor:
    """Stack per-utterance masks into a ``[B, max_len]`` boolean tensor."""
    out = torch.zeros(len(masks), max_len, dtype=torch.bool)
    for b, m in enumerate(masks):
        if m is not None and len(m):
            if m.length_T > max_len:
                raise IndexError("mask longer than padded sequence")
            out[b, list(m.indices)] = True
    return out
