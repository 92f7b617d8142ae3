"""Unsafe-concept detection on frozen denoiser features.

Learnable concept prototypes (plus one background prototype) are matched
against projected image features. The per-location concept distribution
``A_cross`` is propagated through a self-attention map ``A_self`` and
min-max normalised into a risk mask in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .diffusion import DenoiserParams, NoiseSchedule, denoise, embed_prompt, forward_noise
from .errors import ContractError, DimensionError, InputError, RangeError
from .optim import Adam
from .scenes import RenderedScene, mask_to_grid, to_latent
from .tensor import Tape, Tensor

# spreads below this are treated as a constant map
_FLAT = 1e-12


@dataclass
class UnsafeTokens:
    embeddings: Tensor  # (n_c, d_tok)
    background: Tensor  # (1, d_tok)
    concept_names: list[str]

    def __post_init__(self) -> None:
        if len(self.concept_names) < 1:
            raise InputError("need at least one unsafe concept")
        if len(set(self.concept_names)) != len(self.concept_names):
            raise InputError("concept names must be unique")
        if self.embeddings.shape[0] != len(self.concept_names):
            raise DimensionError("one token row per concept name is required")

    @property
    def n_concepts(self) -> int:
        return len(self.concept_names)

    def keys_input(self) -> Tensor:
        return tn.concat([self.embeddings, self.background], axis=0)


@dataclass
class DetectorParams:
    layers: list[int]
    q_proj: dict[int, Tensor]  # (d, d_a)
    k_proj: dict[int, Tensor]  # (d_tok, d_a)

    def __post_init__(self) -> None:
        widths = {self.q_proj[l].shape[1] for l in self.layers} | {self.k_proj[l].shape[1] for l in self.layers}
        if len(widths) != 1:
            raise DimensionError(f"projection widths differ across layers: {sorted(widths)}")


@dataclass
class Detector:
    tokens: UnsafeTokens
    params: DetectorParams
    grid: tuple[int, int]

    def parameters(self) -> list[Tensor]:
        ps = [self.tokens.embeddings, self.tokens.background]
        for l in self.params.layers:
            ps += [self.params.q_proj[l], self.params.k_proj[l]]
        return ps

    def requires_grad_(self, flag: bool) -> "Detector":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def checksum(self) -> str:
        return tn.parameters_checksum(self.parameters())

    def to_checkpoint(self) -> dict[str, np.ndarray]:
        out = {"unsafe_tokens": self.tokens.embeddings.data,
               "background_token": self.tokens.background.data,
               "meta.grid": np.array(self.grid, dtype=np.float64)}
        for l in self.params.layers:
            out[f"q_proj.{l}"] = self.params.q_proj[l].data
            out[f"k_proj.{l}"] = self.params.k_proj[l].data
        return out

    @classmethod
    def from_checkpoint(cls, tensors: dict[str, Tensor], concept_names: Sequence[str]) -> "Detector":
        layers = sorted(int(n.split(".")[1]) for n in tensors if n.startswith("q_proj."))
        tokens = UnsafeTokens(Tensor(tensors["unsafe_tokens"].data),
                              Tensor(tensors["background_token"].data), list(concept_names))
        params = DetectorParams(layers, {l: Tensor(tensors[f"q_proj.{l}"].data) for l in layers},
                                {l: Tensor(tensors[f"k_proj.{l}"].data) for l in layers})
        grid = tuple(int(v) for v in tensors["meta.grid"].data)
        return cls(tokens, params, grid)

    @classmethod
    def init(cls, concept_names: Sequence[str], base: DenoiserParams, layers: Sequence[int] | None = None,
             token_dim: int = 32, attn_dim: int = 32, seed: int = 0) -> "Detector":
        cfg = base.config
        layers = [cfg.n_attn - 1] if layers is None else list(layers)
        for l in layers:
            if not 0 <= l < cfg.n_attn:
                raise InputError(f"no attention layer {l} to attach to")
        rng = np.random.default_rng(seed)
        tokens = UnsafeTokens(Tensor(rng.standard_normal((len(concept_names), token_dim))),
                              Tensor(rng.standard_normal((1, token_dim))), list(concept_names))
        q = {l: Tensor(rng.standard_normal((cfg.hidden, attn_dim)) / math.sqrt(cfg.hidden)) for l in layers}
        k = {l: Tensor(rng.standard_normal((token_dim, attn_dim)) / math.sqrt(token_dim)) for l in layers}
        return cls(tokens, DetectorParams(layers, q, k), (cfg.height, cfg.width))


@dataclass
class RiskEstimate:
    a_cross: Tensor  # (B, HW, n_c + 1)
    a_self: Tensor  # (B, HW, HW)
    refined: Tensor  # (B, n_c, HW) before normalisation
    masks: Tensor  # (B, n_c, HW) in [0, 1]

    @property
    def fused(self) -> Tensor:
        return tn.amax(self.masks, axis=1)


def minmax_normalize(r: Tensor) -> Tensor:
    """Rescale the last axis to [0, 1]; constant rows map to all zeros."""
    lo = tn.amin(r, axis=-1)
    hi = tn.amax(r, axis=-1)
    spread = hi.data - lo.data
    flat = spread <= _FLAT * np.maximum(1.0, np.abs(hi.data))
    # constant rows: divide by 1 and zero the result
    denom = tn.add(tn.sub(hi, lo), Tensor(flat.astype(np.float64)))
    out = tn.mul(tn.sub(r, tn.reshape(lo, lo.shape + (1,))),
                 tn.reshape(tn.reciprocal(denom), lo.shape + (1,)))
    return tn.mul(out, Tensor((~flat).astype(np.float64)[..., None]))


def estimate_risk(features: Tensor, tokens: UnsafeTokens, q_proj: Tensor, k_proj: Tensor) -> RiskEstimate:
    """Cross/self attention fusion for one attached layer.

    ``features`` is (HW, d) or (B, HW, d).
    """
    if features.ndim == 2:
        features = tn.reshape(features, (1,) + features.shape)
    if features.shape[-1] != q_proj.shape[0]:
        raise DimensionError(f"features width {features.shape[-1]} vs q_proj {q_proj.shape}")
    keys_in = tokens.keys_input()
    if keys_in.shape[-1] != k_proj.shape[0]:
        raise DimensionError(f"token width {keys_in.shape[-1]} vs k_proj {k_proj.shape}")
    d_a = q_proj.shape[1]
    q = features @ q_proj  # (B, HW, d_a)
    k = keys_in @ k_proj  # (n_c + 1, d_a)
    scale = 1.0 / math.sqrt(d_a)
    a_cross = tn.softmax(tn.mul(q @ k.T, scale), axis=-1)
    a_self = tn.softmax_rows(tn.mul(q @ tn.swap_last(q), scale))
    n_c = tokens.n_concepts
    concept_maps = tn.swap_last(a_cross[:, :, :n_c])  # (B, n_c, HW)
    refined = concept_maps @ a_self  # row i: m_iᵀ A_self
    return RiskEstimate(a_cross, a_self, refined, minmax_normalize(refined))


def bilinear_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """(dst_h*dst_w, src_h*src_w) half-pixel-centred bilinear interpolation weights."""

    def axis(n_in, n_out):
        m = np.zeros((n_out, n_in))
        for o in range(n_out):
            x = (o + 0.5) * n_in / n_out - 0.5
            x = min(max(x, 0.0), n_in - 1)
            i0 = int(math.floor(x))
            i1 = min(i0 + 1, n_in - 1)
            w = x - i0
            m[o, i0] += 1.0 - w
            m[o, i1] += w
        return m

    return np.kron(axis(src[0], dst[0]), axis(src[1], dst[1]))


def resize_mask(mask: np.ndarray, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of flattened masks (..., src_h*src_w), clamped to [0, 1]."""
    if tuple(src) == tuple(dst):
        return mask.copy()
    return np.clip(mask @ bilinear_matrix(src, dst).T, 0.0, 1.0)


@dataclass
class DetectorOutput:
    masks: Tensor  # (B, n_c, HW) on the detector grid
    per_layer: dict[int, RiskEstimate]

    @property
    def fused(self) -> Tensor:
        return tn.amax(self.masks, axis=1)


def run_detector(detector: Detector, records, grids: dict[int, tuple[int, int]] | None = None) -> DetectorOutput:
    """Apply the detector to hook records from one denoiser pass.

    Masks from several attached layers are resized to the detector grid and
    averaged.
    """
    by_layer = {r.layer: r for r in records}
    per_layer: dict[int, RiskEstimate] = {}
    acc = None
    for l in detector.params.layers:
        if l not in by_layer:
            raise ContractError(f"no hook record for attached layer {l}")
        est = estimate_risk(by_layer[l].features, detector.tokens,
                            detector.params.q_proj[l], detector.params.k_proj[l])
        per_layer[l] = est
        m = est.masks
        src = (grids or {}).get(l, detector.grid)
        if tuple(src) != tuple(detector.grid):
            m = tn.matmul(m, Tensor(bilinear_matrix(src, detector.grid).T))
        acc = m if acc is None else tn.add(acc, m)
    masks = acc if len(per_layer) == 1 else tn.mul(acc, 1.0 / len(per_layer))
    return DetectorOutput(masks, per_layer)


# ---------------------------------------------------------------------------
# loss


@dataclass
class DetectLossConfig:
    lambda_ce: float = 1.0
    lambda_mse: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_ce < 0 or self.lambda_mse < 0:
            raise InputError("loss weights must be non-negative")
        if self.lambda_ce == 0 and self.lambda_mse == 0:
            raise InputError("at least one loss weight must be positive")


def labels_from_masks(m_prime: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-location class index: first labelled concept, else background (= n_concepts)."""
    m_prime = np.asarray(m_prime)
    if m_prime.ndim == 2:
        m_prime = m_prime[None]
    if not np.all((m_prime == 0) | (m_prime == 1)):
        raise InputError("ground-truth masks must be binary")
    n_c = m_prime.shape[1]
    if n_c + 1 > n_classes:
        raise RangeError(f"{n_c} labelled concepts but only {n_classes - 1} concept classes")
    labels = np.full((m_prime.shape[0], m_prime.shape[2]), n_c, dtype=np.int64)
    for i in range(n_c - 1, -1, -1):
        labels[m_prime[:, i] == 1] = i
    return labels


def detection_loss(a_cross: Tensor, m_fused: Tensor, m_prime: np.ndarray,
                   cfg: DetectLossConfig | None = None) -> Tensor:
    """``λ_ce · CE(A_cross, labels) + λ_mse · mean((M - M')^2)``.

    ``m_prime`` holds binary per-concept masks (B, n_c, HW); the background
    class is their complement. ``m_fused`` is the fused prediction (B, HW).
    """
    cfg = cfg or DetectLossConfig()
    m_prime = np.asarray(m_prime, dtype=np.float64)
    if m_prime.ndim == 2:
        m_prime = m_prime[None]
    if a_cross.ndim == 2:
        a_cross = tn.reshape(a_cross, (1,) + a_cross.shape)
    if m_fused.ndim == 1:
        m_fused = tn.reshape(m_fused, (1,) + m_fused.shape)
    B, HW, K = a_cross.shape
    if m_prime.shape[0] != B or m_prime.shape[2] != HW or m_fused.shape != (B, HW):
        raise DimensionError(f"A_cross {a_cross.shape}, M {m_fused.shape}, M' {m_prime.shape} disagree")
    labels = labels_from_masks(m_prime, K)
    bi, li = np.meshgrid(np.arange(B), np.arange(HW), indexing="ij")
    picked = a_cross[bi, li, labels]
    ce = tn.mul(tn.mean(tn.log(tn.clip_min(picked, 1e-300))), -1.0)
    target = m_prime.max(axis=1)
    mse = tn.mean(tn.square(tn.sub(m_fused, target)))
    return tn.add(tn.mul(ce, cfg.lambda_ce), tn.mul(mse, cfg.lambda_mse))


# ---------------------------------------------------------------------------
# temporal smoothing


@dataclass
class SmoothingState:
    alpha: float = 0.3
    prev: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise InputError("alpha must lie in [0, 1)")


def smooth_mask(state: SmoothingState, mask: np.ndarray) -> tuple[np.ndarray, SmoothingState]:
    """Exponential smoothing ``M̄_t = α M̄_prev + (1 - α) M_t``; the first call passes through."""
    mask = np.asarray(mask, dtype=np.float64)
    if state.prev is None:
        out = mask.copy()
    else:
        if state.prev.shape != mask.shape:
            raise ContractError(f"mask shape changed mid-run: {state.prev.shape} -> {mask.shape}")
        # written as an increment so a constant sequence is reproduced bit-exactly
        out = state.prev + (1.0 - state.alpha) * (mask - state.prev)
    out = np.clip(out, 0.0, 1.0)
    return out, SmoothingState(state.alpha, out)


# ---------------------------------------------------------------------------
# training and localisation


@dataclass
class DetectorTrainConfig:
    epochs: int = 300
    lr: float = 1e-2
    max_t_fraction: float = 0.2
    token_dim: int = 32
    attn_dim: int = 32
    layers: list[int] | None = None
    # the MSE term is what sharpens the self-attention refinement; at equal
    # weights the CE term keeps query norms small and the masks stay blurred
    loss: DetectLossConfig = field(default_factory=lambda: DetectLossConfig(lambda_mse=5.0))
    seed: int = 0


def _scene_tensors(scenes: Sequence[RenderedScene], concept_names: Sequence[str], vocab, channels: int):
    lat = np.stack([to_latent(s.image(), channels) for s in scenes])
    toks = np.array([vocab.encode(s.prompt) for s in scenes])
    gt = np.stack([np.stack([mask_to_grid(s.concept_mask(c)).reshape(-1) for c in concept_names])
                   for s in scenes]).astype(np.float64)
    return lat, toks, gt


def hook_features(base: DenoiserParams, latents: np.ndarray, tokens: np.ndarray, t, schedule: NoiseSchedule,
                  rng: np.random.Generator):
    """Noise clean latents to ``t`` and return the hook records of one plain denoiser pass."""
    eps = rng.standard_normal(latents.shape)
    xt = forward_noise(latents, t, eps, schedule)
    recs: list = []
    denoise(base, xt, t, embed_prompt(base, tokens), hooks=recs)
    for r in recs:
        r.features = Tensor(r.features.data)
    return recs


def train_detector(scenes: Sequence[RenderedScene], base: DenoiserParams, schedule: NoiseSchedule,
                   vocab, cfg: DetectorTrainConfig | None = None
                   ) -> tuple[Detector, list[tuple[int, float]]]:
    """Fit concept tokens and projection heads; the base model stays frozen."""
    cfg = cfg or DetectorTrainConfig()
    if len(scenes) == 0:
        raise InputError("detector training set is empty")
    names = vocab.concept_names
    before = base.checksum()
    det = Detector.init(names, base, cfg.layers, cfg.token_dim, cfg.attn_dim, cfg.seed).requires_grad_(True)
    lat, toks, gt = _scene_tensors(scenes, names, vocab, base.config.channels)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(det.parameters(), lr=cfg.lr)
    t_max = max(1, int(cfg.max_t_fraction * schedule.T))
    curve = []
    tape = Tape()
    for epoch in range(1, cfg.epochs + 1):
        t = rng.integers(1, t_max + 1, size=len(lat))
        recs = hook_features(base, lat, toks, t, schedule, rng)
        tape.reset()
        with tape:
            out = run_detector(det, recs)
            a_cross = out.per_layer[det.params.layers[-1]].a_cross
            loss = detection_loss(a_cross, out.fused, gt, cfg.loss)
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        curve.append((epoch, loss.item()))
    if base.checksum() != before:
        raise ContractError("base model parameters changed during detector training")
    return det.requires_grad_(False), curve


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"iou: {pred.shape} vs {truth.shape}")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def predict_canvas_masks(detector: Detector, base: DenoiserParams, scenes: Sequence[RenderedScene], t: int,
                         schedule: NoiseSchedule, vocab, rng: np.random.Generator,
                         canvas: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Per-concept soft masks upsampled to the canvas: (B, n_c, H, W)."""
    lat, toks, _ = _scene_tensors(scenes, detector.tokens.concept_names, vocab, base.config.channels)
    recs = hook_features(base, lat, toks, np.full(len(scenes), t), schedule, rng)
    masks = run_detector(detector, recs).masks.data
    up = resize_mask(masks, detector.grid, canvas)
    return up.reshape(up.shape[:-1] + canvas)


def predict_grid_masks(detector: Detector, base: DenoiserParams, scenes: Sequence[RenderedScene], t: int,
                       schedule: NoiseSchedule, vocab, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-concept soft masks and ground truth on the detector grid: both (B, n_c, HW)."""
    lat, toks, gt = _scene_tensors(scenes, detector.tokens.concept_names, vocab, base.config.channels)
    recs = hook_features(base, lat, toks, np.full(len(scenes), t), schedule, rng)
    return run_detector(detector, recs).masks.data, gt


def localize_over_timesteps(detector: Detector, base: DenoiserParams, scenes: Sequence[RenderedScene],
                            schedule: NoiseSchedule, vocab, timesteps: Sequence[int], seed: int = 0,
                            threshold: float = 0.5) -> list[tuple[int, str, float]]:
    """mIoU of thresholded concept masks against the grid ground truth at each timestep.

    Each scene contributes to the concept it contains; scenes without a
    hazard are skipped.
    """
    scenes = [s for s in scenes if s.hazard]
    if not scenes:
        raise InputError("no labelled hazard scenes to evaluate")
    names = detector.tokens.concept_names
    rows = []
    for t in timesteps:
        rng = np.random.default_rng([seed, int(t)])
        pred, gt = predict_grid_masks(detector, base, scenes, int(t), schedule, vocab, rng)
        for ci, name in enumerate(names):
            scores = [iou(pred[b, ci] >= threshold, gt[b, ci] > 0.5)
                      for b, s in enumerate(scenes) if s.hazard == name]
            if scores:
                rows.append((int(t), name, float(np.mean(scores))))
    return rows
