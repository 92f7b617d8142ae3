"""Preference (DPO) training of the safe key/value projections.

The loss is the diffusion-DPO noise-prediction form: with squared errors
``e = ||eps - eps_hat||^2`` for the guided model (θ) and the frozen base
(ref) on a preferred (w) and rejected (l) image,

    L = -log σ(-β [(e_w^θ - e_w^ref) - (e_l^θ - e_l^ref)])

so the guided model is rewarded for denoising preferred images better, and
rejected images worse, than the reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .detection import Detector
from .diffusion import DenoiserParams, NoiseSchedule, denoise, embed_prompt, forward_noise
from .errors import ContractError, DimensionError, InputError
from .optim import Adam
from .scenes import (ConceptVocabulary, RenderedScene, oracle_classify, random_scene, render,
                     safe_counterpart, to_latent)
from .suppression import GlobalGuidance, GuidanceParams
from .tensor import Tape, Tensor


@dataclass
class PreferencePair:
    y_w: np.ndarray  # preferred latent (C, H, W)
    y_l: np.ndarray  # rejected latent
    tokens: np.ndarray  # prompt ids, shared by both sides
    scene_w: RenderedScene | None = None
    scene_l: RenderedScene | None = None

    def __post_init__(self) -> None:
        if self.y_w.shape != self.y_l.shape:
            raise DimensionError(f"pair sides differ in shape: {self.y_w.shape} vs {self.y_l.shape}")


@dataclass
class DPOConfig:
    beta: float = 0.1
    lr: float = 2e-3
    epochs: int = 30
    batch: int = 16
    max_t_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise InputError("beta must be positive and finite")
        if self.epochs < 1:
            raise InputError("epochs must be at least 1")


def make_preference_pairs(n: int, vocab: ConceptVocabulary | None = None, seed: int = 0,
                          channels: int = 4) -> list[PreferencePair]:
    """Hazard scene (rejected) and its safe recolouring (preferred), same prompt."""
    if n < 1:
        raise InputError("need at least one preference pair")
    vocab = vocab or ConceptVocabulary()
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        concept = vocab.concept_names[i % len(vocab.concept_names)]
        spec = random_scene(int(rng.integers(0, 2**31 - 1)), vocab, concept=concept)
        lose = render(spec, vocab)
        win = render(safe_counterpart(spec, vocab), vocab)
        if not oracle_classify(lose.rgb, vocab).present or oracle_classify(win.rgb, vocab).present:
            raise ContractError(f"pair {i}: oracle disagrees with the construction")
        pairs.append(PreferencePair(to_latent(win.image(), channels), to_latent(lose.image(), channels),
                                    np.array(vocab.encode(lose.prompt)), win, lose))
    return pairs


def _sq_err(eps: np.ndarray, pred: Tensor) -> Tensor:
    """Per-sample ``||eps - pred||^2`` -> (B,)."""
    diff = tn.sub(pred, Tensor(eps))
    B = diff.shape[0]
    return tn.tsum(tn.reshape(tn.square(diff), (B, -1)), axis=1)


def reference_errors(base: DenoiserParams, x_t: np.ndarray, t, tokens, eps: np.ndarray) -> np.ndarray:
    pred = denoise(base, x_t, t, embed_prompt(base, tokens))
    return ((eps - pred.data) ** 2).reshape(len(eps), -1).sum(axis=1)


def dpo_loss(base: DenoiserParams, guidance: GuidanceParams, y_w, y_l, tokens, t, eps_w, eps_l,
             schedule: NoiseSchedule, beta: float = 0.1, ref: tuple[np.ndarray, np.ndarray] | None = None
             ) -> Tensor:
    """Mean DPO loss over a batch of pairs; the guided model runs in global blend mode.

    ``ref`` optionally supplies precomputed reference errors ``(e_w, e_l)``.
    """
    y_w, y_l = np.asarray(y_w, dtype=np.float64), np.asarray(y_l, dtype=np.float64)
    if y_w.ndim == 3:
        y_w, y_l = y_w[None], y_l[None]
        eps_w, eps_l = np.asarray(eps_w)[None], np.asarray(eps_l)[None]
    if y_w.shape != y_l.shape or np.shape(eps_w) != y_w.shape or np.shape(eps_l) != y_l.shape:
        raise DimensionError(f"pair/noise shapes disagree: {y_w.shape}, {y_l.shape}, "
                             f"{np.shape(eps_w)}, {np.shape(eps_l)}")
    B = len(y_w)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if len(tokens) == 1 and B > 1:
        tokens = np.repeat(tokens, B, axis=0)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    xw = forward_noise(y_w, t, eps_w, schedule)
    xl = forward_noise(y_l, t, eps_l, schedule)
    x = np.concatenate([xw, xl])
    tt = np.concatenate([t, t])
    toks = np.concatenate([tokens, tokens])
    eps = np.concatenate([eps_w, eps_l])
    if ref is None:
        e_ref = reference_errors(base, x, tt, toks, eps)
    else:
        e_ref = np.concatenate(ref)
    pred = denoise(base, x, tt, embed_prompt(base, toks), controller=GlobalGuidance(guidance))
    e_theta = _sq_err(eps, pred)
    diff = tn.sub(e_theta, Tensor(e_ref))  # (2B,)
    margin = tn.sub(diff[:B], diff[B:])
    return tn.mean(tn.softplus(tn.mul(margin, beta)))


def train_guidance(pairs: Sequence[PreferencePair], base: DenoiserParams, detector: Detector | None,
                   schedule: NoiseSchedule, cfg: DPOConfig | None = None,
                   guidance: GuidanceParams | None = None
                   ) -> tuple[GuidanceParams, list[tuple[int, float]]]:
    """Minimise the DPO loss over ``wk_safe``/``wv_safe`` only.

    The base model and detector are frozen; their checksums are compared
    before and after, and every step verifies that no gradient reached them.
    """
    cfg = cfg or DPOConfig()
    if len(pairs) == 0:
        raise InputError("preference dataset is empty")
    guidance = guidance or GuidanceParams.from_base(base)
    guidance.requires_grad_(True)
    frozen = base.parameters() + (detector.parameters() if detector is not None else [])
    before = tn.parameters_checksum(frozen)
    yw = np.stack([p.y_w for p in pairs])
    yl = np.stack([p.y_l for p in pairs])
    toks = np.stack([p.tokens for p in pairs])
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(guidance.parameters(), lr=cfg.lr)
    t_max = max(1, int(cfg.max_t_fraction * schedule.T))
    curve = []
    tape = Tape()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            step += 1
            t = rng.integers(1, t_max + 1, size=len(idx))
            eps_w = rng.standard_normal(yw[idx].shape)
            eps_l = rng.standard_normal(yl[idx].shape)
            tape.reset()
            with tape:
                loss = dpo_loss(base, guidance, yw[idx], yl[idx], toks[idx], t, eps_w, eps_l,
                                schedule, cfg.beta)
            opt.zero_grad()
            tape.backward(loss)
            if any(p.grad is not None for p in frozen):
                raise ContractError("gradient leaked into frozen parameters")
            opt.step()
            curve.append((step, loss.item()))
    if tn.parameters_checksum(frozen) != before:
        raise ContractError("frozen parameters changed during guidance training")
    return guidance.requires_grad_(False), curve


def preference_gap(base: DenoiserParams, guidance: GuidanceParams | None, pairs: Sequence[PreferencePair],
                   schedule: NoiseSchedule, timesteps: Sequence[int], seed: int = 0) -> float:
    """Mean ``e_w - e_l`` over pairs and timesteps; ``guidance=None`` measures the reference model."""
    rng = np.random.default_rng(seed)
    yw = np.stack([p.y_w for p in pairs])
    yl = np.stack([p.y_l for p in pairs])
    toks = np.stack([p.tokens for p in pairs])
    gaps = []
    prompt = embed_prompt(base, toks)
    ctrl = None if guidance is None else GlobalGuidance(guidance)
    for t in timesteps:
        eps_w = rng.standard_normal(yw.shape)
        eps_l = rng.standard_normal(yl.shape)
        tt = np.full(len(pairs), t)
        pw = denoise(base, forward_noise(yw, tt, eps_w, schedule), tt, prompt, controller=ctrl).data
        pl = denoise(base, forward_noise(yl, tt, eps_l, schedule), tt, prompt, controller=ctrl).data
        ew = ((eps_w - pw) ** 2).reshape(len(pairs), -1).sum(axis=1)
        el = ((eps_l - pl) ** 2).reshape(len(pairs), -1).sum(axis=1)
        gaps.append(np.mean(ew - el))
    return float(np.mean(gaps))
