"""Model configuration and the base/large/toy presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

from .errors import ConfigError

VARIANTS = ("w2v", "hbt")
SIZE_PRESETS = ("base", "large", "toy")


@dataclass(frozen=True)
class CNNLayer:
    kernel: int
    stride: int
    channels: int


@dataclass(frozen=True)
class MaskPolicy:
    span_start_prob: float = 0.065
    span_length: int = 10

    def __post_init__(self):
        if not 0.0 <= self.span_start_prob <= 1.0:
            raise ConfigError(f"span_start_prob must be in [0, 1], got {self.span_start_prob}")
        if self.span_length < 1:
            raise ConfigError(f"span_length must be >= 1, got {self.span_length}")


# upstream wav2vec 2.0 feature extractor: (512,10,5) + (512,3,2)*4 + (512,2,2)*2
FULL_CNN = tuple(
    [CNNLayer(10, 5, 512)] + [CNNLayer(3, 2, 512)] * 4 + [CNNLayer(2, 2, 512)] * 2
)
TOY_CNN = (CNNLayer(10, 5, 32), CNNLayer(3, 2, 32), CNNLayer(3, 2, 32))


@dataclass(frozen=True)
class ModelConfig:
    """Encoder hyperparameters.

    ``base`` and ``large`` pin the block count and width; ``toy`` takes
    ``num_blocks`` and ``embed_dim`` as given.
    """

    variant: str = "w2v"
    size_preset: str = "toy"
    num_blocks: int = 2
    embed_dim: int = 32
    ffn_dim: int = 64
    num_attention_heads: int = 4
    cnn_layers: tuple[CNNLayer, ...] = TOY_CNN
    # "conv" (relative, convolutional) or "absolute" (learned table)
    positional: str = "conv"
    pos_conv_kernel: int = 16
    pos_conv_groups: int = 4
    max_positions: int = 4096
    dropout: float = 0.0
    num_groups: int = 2
    entries_per_group: int = 8
    codevector_dim: int = 32
    final_dim: int = 32
    num_clusters_per_ensemble: tuple[int, ...] = (16,)
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    mask_during_finetune: bool = False
    sample_rate: int = 16000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.size_preset not in SIZE_PRESETS:
            raise ConfigError(f"size_preset must be one of {SIZE_PRESETS}, got {self.size_preset!r}")
        if self.size_preset == "base" and (self.num_blocks, self.embed_dim) != (12, 768):
            raise ConfigError("base preset requires 12 blocks and 768 dims; use ModelConfig.preset()")
        if self.size_preset == "large" and (self.num_blocks, self.embed_dim) != (24, 1024):
            raise ConfigError("large preset requires 24 blocks and 1024 dims; use ModelConfig.preset()")
        if not self.cnn_layers:
            raise ConfigError("at least one CNN layer is required")
        for layer in self.cnn_layers:
            if layer.kernel < 1 or layer.stride < 1 or layer.channels < 1:
                raise ConfigError(f"CNN kernel/stride/channels must be >= 1, got {layer}")
        if self.num_blocks < 0 or self.embed_dim < 1:
            raise ConfigError("num_blocks must be >= 0 and embed_dim >= 1")
        if self.embed_dim % self.num_attention_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_attention_heads} heads"
            )
        if self.positional not in ("conv", "absolute"):
            raise ConfigError(f"positional must be 'conv' or 'absolute', got {self.positional!r}")
        if self.positional == "conv" and self.embed_dim % self.pos_conv_groups:
            raise ConfigError("embed_dim must be divisible by pos_conv_groups")
        if self.variant == "w2v" and self.codevector_dim % self.num_groups:
            raise ConfigError("codevector_dim must be divisible by num_groups")
        if self.variant == "hbt" and (
            not self.num_clusters_per_ensemble or min(self.num_clusters_per_ensemble) < 1
        ):
            raise ConfigError("hbt variant needs at least one cluster ensemble with >= 1 cluster")

    @classmethod
    def preset(cls, variant: str, size: str, **overrides) -> "ModelConfig":
        if size == "base":
            kw = dict(
                num_blocks=12, embed_dim=768, ffn_dim=3072, num_attention_heads=12,
                cnn_layers=FULL_CNN, pos_conv_kernel=128, pos_conv_groups=16, dropout=0.1,
                num_groups=2, entries_per_group=320, codevector_dim=256, final_dim=256,
                num_clusters_per_ensemble=(500,),
            )
        elif size == "large":
            kw = dict(
                num_blocks=24, embed_dim=1024, ffn_dim=4096, num_attention_heads=16,
                cnn_layers=FULL_CNN, pos_conv_kernel=128, pos_conv_groups=16, dropout=0.1,
                num_groups=2, entries_per_group=320, codevector_dim=768, final_dim=768,
                num_clusters_per_ensemble=(500,),
            )
        elif size == "toy":
            kw = {}
        else:
            raise ConfigError(f"unknown size preset {size!r}")
        kw.update(overrides)
        return cls(variant=variant, size_preset=size, **kw)

    @property
    def receptive_field(self) -> int:
        r, jump = 1, 1
        for layer in self.cnn_layers:
            r += (layer.kernel - 1) * jump
            jump *= layer.stride
        return r

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.cnn_layers:
            s *= layer.stride
        return s

    def num_frames(self, num_samples: int) -> int:
        """Frames produced by the CNN stack; 0 when the input is too short."""
        n = num_samples
        for layer in self.cnn_layers:
            if n < layer.kernel:
                return 0
            n = (n - layer.kernel) // layer.stride + 1
        return n

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        if "cnn_layers" in d:
            d["cnn_layers"] = tuple(
                CNNLayer(**l) if isinstance(l, dict) else CNNLayer(*l) for l in d["cnn_layers"]
            )
        if "mask_policy" in d and isinstance(d["mask_policy"], dict):
            d["mask_policy"] = MaskPolicy(**d["mask_policy"])
        if "num_clusters_per_ensemble" in d:
            d["num_clusters_per_ensemble"] = tuple(d["num_clusters_per_ensemble"])
        return cls(**d)
