"""Learnable components: preference encoder, quality encoder, bias predictor, regressor.

Small seeded conv encoders stand in for the large pretrained backbones so the
whole pipeline trains on CPU; the forward contracts (normalized preference
embedding, D-dim quality feature, two-layer GELU heads, image-only predict)
are what the rest of the system depends on, so bigger backbones can be swapped
in behind them.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1
PREFERENCE_MODES = ("debias", "none", "concat")
COMPONENTS = ("preference", "quality", "bias", "regressor")


class CheckpointConfigError(ValueError):
    """Checkpoint config does not match what the caller expects."""


@dataclass
class ModelConfig:
    d: int = 64
    D: int = 128
    image_size: int = 48
    pref_widths: tuple[int, ...] = (16, 32, 64, 64)
    quality_widths: tuple[int, ...] = (16, 32, 64, 128)
    preference_mode: str = "debias"
    seed: int = 0
    mos_min: float = 0.0
    mos_max: float = 100.0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.preference_mode not in PREFERENCE_MODES:
            raise ValueError(f"unknown preference_mode {self.preference_mode!r}")
        if self.d < 1 or self.D < 1 or self.image_size < 8:
            raise ValueError("d, D must be >= 1 and image_size >= 8")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def _norm_groups(width: int) -> int:
    g = min(8, width)
    while width % g:
        g -= 1
    return g


def _make_norm(width: int) -> nn.Module:
    return nn.GroupNorm(_norm_groups(width), width)


class ConvEncoder(nn.Module):
    """Stride-2 conv blocks with GroupNorm + GELU, global average pooled."""

    def __init__(self, widths: tuple[int, ...]):
        super().__init__()
        blocks = []
        in_ch = 3
        for w in widths:
            blocks += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), _make_norm(w), nn.GELU()]
            in_ch = w
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).mean(dim=(2, 3))


class DebiasModel(nn.Module):
    """The four components and their composition.

    preference_forward -> unit-norm e; quality_forward -> q_raw;
    bias_predict -> b = g(e); debias -> q = q_raw - b; regress -> y_hat.
    predict composes them and takes nothing but the enhanced image.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.pref_backbone = ConvEncoder(cfg.pref_widths)
        w = self.pref_backbone.out_dim
        self.pref_head = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, cfg.d))
        self.quality_backbone = ConvEncoder(cfg.quality_widths)
        self.quality_head = nn.Linear(self.quality_backbone.out_dim, cfg.D)
        hidden = max(cfg.d, cfg.D)
        self.bias_mlp = nn.Sequential(nn.Linear(cfg.d, hidden), nn.GELU(), nn.Linear(hidden, cfg.D))
        reg_in = cfg.D + (cfg.d if cfg.preference_mode == "concat" else 0)
        self.regressor = nn.Sequential(nn.Linear(reg_in, hidden), nn.GELU(), nn.Linear(hidden, 1))
        self.frozen: dict[str, bool] = {name: False for name in COMPONENTS}

    # -- component forwards ------------------------------------------------
    def preference_forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self._check_images(images)
        raw = self.pref_head(self.pref_backbone(x))
        return raw / raw.norm(dim=1, keepdim=True).clamp_min(1e-12)

    def quality_forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self._check_images(images)
        return self.quality_head(self.quality_backbone(x))

    def bias_predict(self, embedding: torch.Tensor) -> torch.Tensor:
        if embedding.ndim != 2 or embedding.shape[1] != self.cfg.d:
            raise ValueError(f"expected (B, {self.cfg.d}) embedding, got {tuple(embedding.shape)}")
        return self.bias_mlp(embedding)

    def debias(self, q_raw: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        if q_raw.shape != bias.shape:
            raise ValueError(f"feature/bias shape mismatch: {tuple(q_raw.shape)} vs {tuple(bias.shape)}")
        return q_raw - bias

    def regress(self, q: torch.Tensor) -> torch.Tensor:
        return self.regressor(q).squeeze(-1)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        """Normalized-space MOS prediction from the enhanced image alone."""
        mode = self.cfg.preference_mode
        if mode == "none":
            return self.regress(self.quality_forward(images))
        e = self.preference_forward(images)
        q_raw = self.quality_forward(images)
        if mode == "concat":
            return self.regress(torch.cat([q_raw, e], dim=1))
        return self.regress(self.debias(q_raw, self.bias_predict(e)))

    def denormalize(self, y: torch.Tensor | np.ndarray) -> torch.Tensor | np.ndarray:
        return y * (self.cfg.mos_max - self.cfg.mos_min) + self.cfg.mos_min

    def _check_images(self, images: torch.Tensor) -> torch.Tensor:
        if not isinstance(images, torch.Tensor):
            raise ValueError("images must be a torch tensor")
        s = self.cfg.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != s or images.shape[3] != s:
            raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}")
        lo, hi = images.detach().min().item(), images.detach().max().item()
        if lo < -0.01 or hi > 1.01:  # tolerance keeps finite-difference probes valid
            raise ValueError(f"pixel values outside [0, 1]: range [{lo:.3f}, {hi:.3f}]")
        return images.to(self.cfg.torch_dtype)


def build_model(cfg: ModelConfig) -> DebiasModel:
    """Construct a model with fan-in-scaled init from cfg.seed."""
    torch.manual_seed(cfg.seed)
    model = DebiasModel(cfg)
    if cfg.dtype == "float64":
        model.double()
    return model


_COMPONENT_PREFIXES = {
    "preference": ("pref_backbone.", "pref_head."),
    "quality": ("quality_backbone.", "quality_head."),
    "bias": ("bias_mlp.",),
    "regressor": ("regressor.",),
}


def component_parameters(model: DebiasModel, component: str):
    prefixes = _COMPONENT_PREFIXES[component]
    for name, p in model.named_parameters():
        if name.startswith(prefixes):
            yield name, p


def freeze_component(model: DebiasModel, component: str) -> None:
    for _, p in component_parameters(model, component):
        p.requires_grad_(False)
    model.frozen[component] = True


def component_checksum(model: DebiasModel, component: str) -> str:
    h = hashlib.sha256()
    for name, p in sorted(component_parameters(model, component)):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: DebiasModel, path: str | Path) -> None:
    """Single-file checkpoint: version tag, config block, named parameter tensors."""
    cfg = asdict(model.cfg)
    cfg["pref_widths"] = list(cfg["pref_widths"])
    cfg["quality_widths"] = list(cfg["quality_widths"])
    meta = {"version": CHECKPOINT_VERSION, "config": cfg, "frozen": model.frozen}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expect: dict | None = None) -> DebiasModel:
    """Rebuild a model from a checkpoint.

    expect, when given, is compared against the stored config; any mismatch
    on keys like d, D or image_size raises CheckpointConfigError.
    """
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise CheckpointConfigError(f"unsupported checkpoint version {meta['version']}")
        cfg_dict = meta["config"]
        if expect:
            for key, want in expect.items():
                got = cfg_dict.get(key)
                if got != want:
                    raise CheckpointConfigError(f"checkpoint {key}={got} but expected {want}")
        cfg_dict["pref_widths"] = tuple(cfg_dict["pref_widths"])
        cfg_dict["quality_widths"] = tuple(cfg_dict["quality_widths"])
        cfg = ModelConfig(**cfg_dict)
        model = build_model(cfg)
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    model.frozen = dict(meta["frozen"])
    for component, frozen in model.frozen.items():
        if frozen:
            freeze_component(model, component)
    return model
