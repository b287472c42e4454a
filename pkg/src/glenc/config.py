"""Model configuration and presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


DEFAULT_STRUCTURAL_LABELS = (
    "segment-member",
    "segment-nonmember",
    "unordered",
    "mention-link",
    "neutral",
)

# Reserved vocabulary ids. Regular corpus tokens start after these.
PAD_ID = 0
MASK_ID = 1
DEFAULT_GLOBAL_TOKEN_IDS = {
    "sentence": 2,
    "context": 3,
    "cls": 4,
    "candidate": 5,
}
FIRST_REGULAR_ID = 6


@dataclass
class ModelConfig:
    """Hyperparameters of the global-local encoder.

    ``hidden`` must be divisible by ``heads``; ``local_radius`` bounds the
    long-to-long attention band and ``clip_distance`` the relative position
    label range.
    """

    layers: int = 2
    hidden: int = 64
    heads: int = 4
    local_radius: int = 8
    clip_distance: int = 8
    vocab_size: int = 512
    type_vocab_size: int = 2
    max_global: int = 32
    max_long: int = 256
    sharing: str = "separate"  # "shared" or "separate"
    structural_labels: tuple[str, ...] = DEFAULT_STRUCTURAL_LABELS
    global_token_ids: dict[str, int] = field(
        default_factory=lambda: dict(DEFAULT_GLOBAL_TOKEN_IDS)
    )
    pad_id: int = PAD_ID
    mask_id: int = MASK_ID
    first_regular_id: int = FIRST_REGULAR_ID
    layer_norm_eps: float = 1e-12
    ffn_multiplier: int = 4

    def __post_init__(self) -> None:
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if self.local_radius < 0:
            raise ValueError("local_radius must be >= 0")
        if self.clip_distance < 0:
            raise ValueError("clip_distance must be >= 0")
        if self.sharing not in ("shared", "separate"):
            raise ValueError(f"unknown sharing mode: {self.sharing!r}")
        if len(set(self.structural_labels)) != len(self.structural_labels):
            raise ValueError("structural label names must be unique")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_multiplier * self.hidden

    @property
    def num_sequence_labels(self) -> int:
        return 2 * self.clip_distance + 1

    @property
    def num_labels(self) -> int:
        return self.num_sequence_labels + len(self.structural_labels)

    def to_json(self) -> str:
        raw = dataclasses.asdict(self)
        raw["structural_labels"] = list(self.structural_labels)
        return json.dumps(raw, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "structural_labels" in raw:
            raw["structural_labels"] = tuple(raw["structural_labels"])
        return cls(**raw)


def base_config() -> ModelConfig:
    """12-layer, 768-hidden configuration (radius 84, clip distance 12)."""
    return ModelConfig(
        layers=12,
        hidden=768,
        heads=12,
        local_radius=84,
        clip_distance=12,
        vocab_size=30522,
        max_global=512,
        max_long=4096,
    )


def large_config() -> ModelConfig:
    """24-layer, 1024-hidden configuration (radius 169, clip distance 24)."""
    return ModelConfig(
        layers=24,
        hidden=1024,
        heads=16,
        local_radius=169,
        clip_distance=24,
        vocab_size=30522,
        max_global=512,
        max_long=4096,
    )


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration used by tests and the gradient checker."""
    defaults = dict(
        layers=2,
        hidden=8,
        heads=2,
        local_radius=1,
        clip_distance=2,
        vocab_size=32,
        max_global=8,
        max_long=16,
        sharing="shared",
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale configuration sized for the bundled toy corpus."""
    defaults = dict(
        layers=2,
        hidden=64,
        heads=4,
        local_radius=8,
        clip_distance=8,
        vocab_size=512,
        max_global=24,
        max_long=128,
        sharing="shared",
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)
