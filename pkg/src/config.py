"""Run configuration: environment settings plus model, training and decoding knobs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.errors import ConfigError

Ablation = Literal["none", "no-visual-guide", "no-ext", "no-both"]
ExtLossMode = Literal["bce", "softmax_nll"]


class Settings(BaseSettings):
    """Process-level settings loaded from the environment or a .env file."""

    model_config = SettingsConfigDict(
        env_prefix="UNIMS_", env_file=".env", env_file_encoding="utf-8"
    )

    # Worker cap used when --threads is not given
    threads: int = 1
    log_level: str = "INFO"

    @field_validator("threads")
    @classmethod
    def threads_positive(cls, v: int) -> int:
        """Validate the worker cap is at least one."""
        if v < 1:
            msg = "UNIMS_THREADS must be >= 1"
            raise ValueError(msg)
        return v


class ModelConfig(BaseModel, frozen=True):
    """Hyperparameters that shape the parameters and the forward pass."""

    d_model: int = 32
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 206
    patch_size: int = 8
    image_resolution: int = 32
    channels: Literal[1, 3] = 3
    max_images: int = 10
    max_text_tokens: int = 512
    max_summary_tokens: int = 64
    kd_temperature: float = 10.0
    # None taps the last encoder layer
    kd_tap_layer: int | None = None
    ext_loss_mode: ExtLossMode = "bce"
    max_decode_len: int = 40
    dropout: float = 0.0
    init_std: float = 0.02
    seed: int = 7
    # Ablation switches
    visual_guide: bool = True
    use_ext_loss: bool = True

    @field_validator("kd_temperature")
    @classmethod
    def temperature_positive(cls, v: float) -> float:
        """Validate the distillation temperature is positive."""
        if v <= 0:
            msg = "kd_temperature must be > 0"
            raise ValueError(msg)
        return v

    @field_validator("dropout")
    @classmethod
    def dropout_in_range(cls, v: float) -> float:
        """Validate dropout is a probability below one."""
        if not 0 <= v < 1:
            msg = "dropout must be in [0, 1)"
            raise ValueError(msg)
        return v

    @model_validator(mode="after")
    def check_shapes(self) -> ModelConfig:
        """Validate cross-field shape constraints."""
        if self.d_model % self.n_heads != 0:
            msg = f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            raise ValueError(msg)
        if self.kd_tap_layer is not None and not 1 <= self.kd_tap_layer <= self.n_enc_layers:
            msg = f"kd_tap_layer must be in [1, {self.n_enc_layers}], got {self.kd_tap_layer}"
            raise ValueError(msg)
        if self.image_resolution % self.patch_size != 0:
            msg = (
                f"image_resolution ({self.image_resolution}) must be divisible "
                f"by patch_size ({self.patch_size})"
            )
            raise ValueError(msg)
        if self.vocab_size <= 6:
            msg = "vocab_size must exceed the 6 reserved ids"
            raise ValueError(msg)
        return self

    @property
    def tap_layer(self) -> int:
        """Encoder layer (1-based) whose states feed the image-selection head."""
        return self.kd_tap_layer if self.kd_tap_layer is not None else self.n_enc_layers

    @property
    def patches_per_image(self) -> int:
        """Number of patches each resized image yields."""
        side = self.image_resolution // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        """Length of one flattened patch vector."""
        return self.patch_size * self.patch_size * self.channels

    @property
    def max_visual_tokens(self) -> int:
        """Visual stream length with every image slot filled."""
        return self.max_images * (1 + self.patches_per_image)

    @property
    def max_positions(self) -> int:
        """Size of the joint position table."""
        return self.max_text_tokens + self.max_visual_tokens

    @property
    def max_target_positions(self) -> int:
        """Size of the decoder position table (BOS plus summary or generation)."""
        return max(self.max_summary_tokens, self.max_decode_len) + 2


class TrainConfig(BaseModel, frozen=True):
    """Optimization schedule and checkpoint cadence."""

    total_steps: int = 2000
    warmup_steps: int = 50
    peak_lr: float = 1e-4
    batch_size: int = 8
    eval_every: int = 200
    keep_top_k: int = 3
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @model_validator(mode="after")
    def check_schedule(self) -> TrainConfig:
        """Validate the warmup fits inside the run."""
        if self.warmup_steps >= self.total_steps:
            msg = (
                f"warmup_steps ({self.warmup_steps}) must be < "
                f"total_steps ({self.total_steps})"
            )
            raise ValueError(msg)
        if self.batch_size < 1 or self.keep_top_k < 1 or self.eval_every < 1:
            msg = "batch_size, keep_top_k and eval_every must be >= 1"
            raise ValueError(msg)
        return self


class DecodeConfig(BaseModel, frozen=True):
    """Inference-time selection sizes."""

    beam_size: int = 5
    # Midpoint of the 1.6-2.0 tuning range
    length_penalty_alpha: float = 1.8
    top_k_sentences: int = 3
    top_k_images: int = 1


class DataConfig(BaseModel, frozen=True):
    """Vocabulary construction limits."""

    vocab_min_count: int = 1
    vocab_max_size: int = 200


class RunConfig(BaseModel, frozen=True):
    """Everything a command needs, loadable from one JSON file."""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    decode: DecodeConfig = DecodeConfig()
    data: DataConfig = DataConfig()


def apply_ablation(config: ModelConfig, ablation: Ablation) -> ModelConfig:
    """Map an ablation name onto the model switches.

    Args:
        config: Base model configuration.
        ablation: One of none, no-visual-guide, no-ext, no-both.

    Returns:
        Configuration with visual_guide / use_ext_loss set accordingly.
    """
    visual_guide = ablation not in ("no-visual-guide", "no-both")
    use_ext_loss = ablation not in ("no-ext", "no-both")
    return config.model_copy(update={"visual_guide": visual_guide, "use_ext_loss": use_ext_loss})


def load_run_config(path: Path | None) -> RunConfig:
    """Load a RunConfig from JSON, falling back to desk-scale defaults.

    Args:
        path: JSON file path, or None for defaults.

    Returns:
        Validated run configuration.

    Raises:
        ConfigError: If the file is unreadable or fails validation.
    """
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return RunConfig.model_validate(raw)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        msg = f"cannot read config {path}: {e}"
        raise ConfigError(msg) from e
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        msg = f"invalid config field {field}: {first['msg']}"
        raise ConfigError(msg) from e


def full_scale() -> RunConfig:
    """Configuration with full-size shapes and schedule.

    Returns:
        RunConfig using 224x224 images, patch 32, 10 images, 512 text tokens,
        30k steps with 750 warmup, and evaluation every 2,000 steps.
    """
    return RunConfig(
        model=ModelConfig(
            d_model=768,
            n_enc_layers=6,
            n_dec_layers=6,
            n_heads=12,
            ffn_dim=3072,
            vocab_size=50265,
            patch_size=32,
            image_resolution=224,
            max_images=10,
            max_text_tokens=512,
            max_summary_tokens=128,
            max_decode_len=128,
        ),
        train=TrainConfig(total_steps=30000, warmup_steps=750, eval_every=2000),
    )
