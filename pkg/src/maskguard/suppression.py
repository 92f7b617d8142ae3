"""Safety guidance: a parallel safe key/value path blended in by the risk mask."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .detection import Detector, SmoothingState, resize_mask, run_detector, smooth_mask
from .diffusion import AttentionHookRecord, DenoiserParams, NoiseSchedule, PromptEmbedding
from .errors import ConfigError, DimensionError
from .tensor import Tensor

MODES = ("region_guided", "global", "off")


@dataclass
class GuidanceParams:
    layers: list[int]
    wk_safe: dict[int, Tensor]
    wv_safe: dict[int, Tensor]

    @classmethod
    def from_base(cls, base: DenoiserParams, layers: Sequence[int] | None = None) -> "GuidanceParams":
        """Copy the base ``W_K``/``W_V`` so the safe path starts as the identity."""
        layers = list(range(base.config.n_attn)) if layers is None else list(layers)
        return cls(layers,
                   {l: Tensor(base[f"attn{l}.wk"].data.copy()) for l in layers},
                   {l: Tensor(base[f"attn{l}.wv"].data.copy()) for l in layers})

    def parameters(self) -> list[Tensor]:
        return [t for l in self.layers for t in (self.wk_safe[l], self.wv_safe[l])]

    def requires_grad_(self, flag: bool) -> "GuidanceParams":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def checksum(self) -> str:
        return tn.parameters_checksum(self.parameters())

    def to_checkpoint(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.layers:
            out[f"wk_safe.{l}"] = self.wk_safe[l].data
            out[f"wv_safe.{l}"] = self.wv_safe[l].data
        return out

    @classmethod
    def from_checkpoint(cls, tensors: dict[str, Tensor]) -> "GuidanceParams":
        layers = sorted(int(n.split(".")[1]) for n in tensors if n.startswith("wk_safe."))
        return cls(layers, {l: Tensor(tensors[f"wk_safe.{l}"].data) for l in layers},
                   {l: Tensor(tensors[f"wv_safe.{l}"].data) for l in layers})


def safe_attention(q: Tensor, context: Tensor, wk_safe: Tensor, wv_safe: Tensor) -> Tensor:
    """``softmax(Q K'ᵀ / sqrt(d)) V'`` with ``K' = c W_K'`` and ``V' = c W_V'``."""
    if context.shape[-1] != wk_safe.shape[0] or context.shape[-1] != wv_safe.shape[0]:
        raise DimensionError(f"context width {context.shape[-1]} vs safe projections "
                             f"{wk_safe.shape}, {wv_safe.shape}")
    z_prime, _ = tn.scaled_attention(q, context @ wk_safe, context @ wv_safe)
    return z_prime


def blend(z: Tensor, z_prime: Tensor, m_bar) -> Tensor:
    """``Z ⊙ (1 - M̄) + Z' ⊙ M̄`` with the mask broadcast over channels.

    ``m_bar`` is (HW,) or (B, HW).
    """
    m = m_bar if isinstance(m_bar, Tensor) else Tensor(np.asarray(m_bar, dtype=np.float64))
    if z.shape != z_prime.shape:
        raise DimensionError(f"blend: Z {z.shape} vs Z' {z_prime.shape}")
    if m.shape[-1] != z.shape[-2] or (m.ndim == 2 and z.ndim == 3 and m.shape[0] not in (1, z.shape[0])):
        raise DimensionError(f"blend: mask {m.shape} does not cover {z.shape[-2]} locations")
    m = tn.reshape(m, m.shape + (1,))
    return tn.add(tn.mul(z, tn.sub(1.0, m)), tn.mul(z_prime, m))


@dataclass
class SuppressionConfig:
    mode: str = "region_guided"
    window: float = 0.2  # active while t <= window * T
    alpha: float = 0.3

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown suppression mode {self.mode!r}", key="suppression.mode")
        if not 0.0 <= self.window <= 1.0:
            raise ConfigError("activation window must lie in [0, 1]", key="suppression.window")


class GlobalGuidance:
    """Controller that swaps every attention output for its safe counterpart (``M̄ ≡ 1``)."""

    def __init__(self, guidance: GuidanceParams) -> None:
        self.guidance = guidance

    def __call__(self, record: AttentionHookRecord, context: PromptEmbedding) -> Tensor:
        l = record.layer
        if l not in self.guidance.layers:
            return record.z
        zp = safe_attention(record.q, context.embeddings, self.guidance.wk_safe[l], self.guidance.wv_safe[l])
        ones = np.ones(record.z.shape[:-1])
        return blend(record.z, zp, ones)


@dataclass
class SafetyController:
    """Detect-then-suppress controller for :func:`maskguard.diffusion.sample`.

    One instance per sampling run: it carries the smoothing state.
    """

    base: DenoiserParams
    detector: Detector
    guidance: GuidanceParams
    cfg: SuppressionConfig
    schedule: NoiseSchedule
    mask_override: np.ndarray | None = None
    smoothing: SmoothingState = field(init=False)
    m_bar: np.ndarray | None = field(init=False, default=None)
    step_log: list[dict] = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        self.smoothing = SmoothingState(self.cfg.alpha)

    @property
    def grid(self) -> tuple[int, int]:
        return (self.base.config.height, self.base.config.width)

    def active(self, t: int) -> bool:
        return self.cfg.mode != "off" and t <= self.cfg.window * self.schedule.T

    def observe(self, t: int, records: list[AttentionHookRecord], prompt: PromptEmbedding) -> None:
        if self.mask_override is not None:
            raw = np.broadcast_to(self.mask_override, (records[0].z.shape[0], self.mask_override.shape[-1]))
        else:
            raw = run_detector(self.detector, records).fused.data
            raw = resize_mask(raw, self.detector.grid, self.grid)
        self.m_bar, self.smoothing = smooth_mask(self.smoothing, raw)
        for l in self.guidance.layers:
            self.step_log.append({"t": t, "layer": l, "mask_mean": float(self.m_bar.mean())})

    def __call__(self, record: AttentionHookRecord, context: PromptEmbedding) -> Tensor:
        l = record.layer
        if l not in self.guidance.layers or self.cfg.mode == "off":
            return record.z
        if self.cfg.mode == "global":
            m = np.ones(record.z.shape[:-1])
        else:
            m = self.m_bar
        zp = safe_attention(record.q, context.embeddings, self.guidance.wk_safe[l], self.guidance.wv_safe[l])
        return blend(record.z, zp, m)

    @property
    def final_mask(self) -> np.ndarray | None:
        """Last smoothed detector mask (B, HW), whatever the blend mode."""
        return self.m_bar


def install_controller(base: DenoiserParams, detector: Detector, guidance: GuidanceParams,
                       cfg: SuppressionConfig, schedule: NoiseSchedule,
                       mask_override: np.ndarray | None = None) -> SafetyController:
    """Validate that detector and guidance fit the base model, then build a controller."""
    c = base.config
    for l in guidance.layers:
        if not 0 <= l < c.n_attn:
            raise ConfigError(f"guidance attached to missing attention layer {l}", key="suppression.layers")
        for name, w in (("wk_safe", guidance.wk_safe[l]), ("wv_safe", guidance.wv_safe[l])):
            if w.shape != (c.text_dim, c.hidden):
                raise ConfigError(f"{name}.{l} has shape {w.shape}, base expects {(c.text_dim, c.hidden)}",
                                  key=f"{name}.{l}")
    for l in detector.params.layers:
        if not 0 <= l < c.n_attn:
            raise ConfigError(f"detector attached to missing attention layer {l}", key="detection.layers")
        if detector.params.q_proj[l].shape[0] != c.hidden:
            raise ConfigError(f"q_proj.{l} expects width {detector.params.q_proj[l].shape[0]}, "
                              f"base features have {c.hidden}", key=f"q_proj.{l}")
    if mask_override is not None and np.asarray(mask_override).shape[-1] != c.height * c.width:
        raise ConfigError("mask override does not match the latent grid", key="mask_override")
    return SafetyController(base, detector, guidance, cfg, schedule,
                            None if mask_override is None else np.asarray(mask_override, dtype=np.float64))
