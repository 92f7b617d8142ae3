"""Toy text-conditioned latent diffusion model.

The denoiser is a stack of residual 3x3 mixing blocks interleaved with
cross-attention layers over an embedding-table text encoder. Every
attention layer can report an :class:`AttentionHookRecord` and can have its
attention output replaced by a controller before the output projection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as tn
from .errors import DimensionError, InputError, RangeError
from .optim import Adam
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    """Linear beta schedule; timesteps are 1-based (``t = 1..T``)."""

    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    betas: np.ndarray = field(init=False, repr=False)
    alphas_cumprod: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.T < 1:
            raise InputError("T must be at least 1")
        if self.T == 1:
            self.betas = np.array([self.beta_end])
        else:
            self.betas = np.linspace(self.beta_start, self.beta_end, self.T)
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise InputError("betas must lie strictly in (0, 1)")
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t):
        """ᾱ_t with the convention ᾱ_0 = 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alphas_cumprod[np.maximum(t, 1) - 1])

    def check(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise RangeError(f"timestep outside 1..{self.T}: {t}")


def forward_noise(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps``; ``t`` is an int or one per batch row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"forward_noise: x0 {x0.shape} vs eps {eps.shape}")
    schedule.check(t)
    ab = schedule.alpha_bar(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ancestral_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule,
                   noise: np.ndarray | None, clip: bool = True) -> np.ndarray:
    """One DDPM posterior draw ``x_{t-1} ~ q(x_{t-1} | x_t, x0_hat)``."""
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t - 1))
    beta = float(schedule.betas[t - 1])
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if clip:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0_hat + ct * x_t
    if t == 1 or noise is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + math.sqrt(var) * noise


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 4
    height: int = 16
    width: int = 16
    hidden: int = 32
    text_dim: int = 32
    vocab_size: int = 13
    n_blocks: int = 2
    n_attn: int = 2

    def __post_init__(self) -> None:
        if not 1 <= self.n_attn <= self.n_blocks:
            raise InputError("n_attn must be between 1 and n_blocks")


def _layer_names(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    d, dc, C = cfg.hidden, cfg.text_dim, cfg.channels
    shapes = {
        "embed": (cfg.vocab_size, dc),
        "in_w": (9 * C, d), "in_b": (d,),
        "temb_w1": (d, d), "temb_b1": (d,), "temb_w2": (d, d), "temb_b2": (d,),
    }
    for i in range(cfg.n_blocks):
        shapes.update({
            f"block{i}.temb_w": (d, d),
            f"block{i}.pool_w": (d, d),
            f"block{i}.conv1_w": (9 * d, d), f"block{i}.conv1_b": (d,),
            f"block{i}.mix_w": (d, d), f"block{i}.mix_b": (d,),
        })
    for j in range(cfg.n_attn):
        shapes.update({
            f"attn{j}.wq": (d, d), f"attn{j}.wk": (dc, d), f"attn{j}.wv": (dc, d),
            f"attn{j}.wo": (d, d), f"attn{j}.bo": (d,),
        })
    shapes.update({"out_w": (9 * d, C), "out_b": (C,)})
    return shapes


class DenoiserParams:
    """Named parameter tensors of the base noise predictor."""

    def __init__(self, config: DenoiserConfig, tensors: dict[str, Tensor]) -> None:
        expected = _layer_names(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise DimensionError(f"denoiser parameters mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: DenoiserConfig, seed: int = 0) -> "DenoiserParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _layer_names(config).items():
            if name.endswith(("_b", ".bo", "_b1", "_b2")):
                arr = np.zeros(shape)
            elif name == "embed":
                arr = rng.standard_normal(shape)
            else:
                arr = rng.standard_normal(shape) / math.sqrt(shape[0])
                if name.endswith(("mix_w", ".wo")) or name == "out_w":
                    arr *= 0.1
            tensors[name] = Tensor(arr, name=name)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: DenoiserConfig) -> "DenoiserParams":
        return cls(config, {n: Tensor(np.zeros(s), name=n) for n, s in _layer_names(config).items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return [self.tensors[n] for n in sorted(self.tensors)]

    def requires_grad_(self, flag: bool) -> "DenoiserParams":
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def checksum(self) -> str:
        return tn.parameters_checksum(self.parameters())

    def to_checkpoint(self) -> dict[str, np.ndarray]:
        c = self.config
        out = {n: self.tensors[n].data for n in sorted(self.tensors)}
        out["meta.config"] = np.array([c.channels, c.height, c.width, c.hidden, c.text_dim,
                                       c.vocab_size, c.n_blocks, c.n_attn], dtype=np.float64)
        return out

    @classmethod
    def from_checkpoint(cls, tensors: dict[str, Tensor]) -> "DenoiserParams":
        tensors = dict(tensors)
        meta = tensors.pop("meta.config").data.astype(int)
        cfg = DenoiserConfig(*[int(v) for v in meta])
        return cls(cfg, {n: Tensor(t.data, name=n) for n, t in tensors.items()})


@dataclass
class PromptEmbedding:
    tokens: np.ndarray  # (B, L) ints
    embeddings: Tensor  # (B, L, text_dim)


def embed_prompt(params: DenoiserParams, tokens) -> PromptEmbedding:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] < 1:
        raise InputError("prompt must contain at least one token")
    if tokens.min() < 0 or tokens.max() >= params.config.vocab_size:
        raise RangeError(f"token id outside vocabulary of size {params.config.vocab_size}")
    return PromptEmbedding(tokens, tn.getitem(params["embed"], tokens))


@dataclass
class AttentionHookRecord:
    layer: int
    features: Tensor  # (B, HW, d): the layer input f
    z: Tensor  # (B, HW, d): base attention output
    q: Tensor
    k: Tensor
    v: Tensor
    weights: Tensor


class AttentionController(Protocol):
    def __call__(self, record: AttentionHookRecord, context: PromptEmbedding) -> Tensor: ...


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb


def _conv(h: Tensor, B: int, H: int, W: int, w: Tensor, b: Tensor) -> Tensor:
    d = h.shape[-1]
    return tn.patches3x3(tn.reshape(h, (B, H, W, d))) @ w + b


def denoise(params: DenoiserParams, x, t, prompt: PromptEmbedding,
            hooks: list | None = None,
            controller: AttentionController | None = None) -> Tensor:
    """Predict the noise in ``x`` (B, C, H, W) at timesteps ``t`` (B,).

    When ``hooks`` is a list, one :class:`AttentionHookRecord` per attention
    layer is appended to it. When ``controller`` is given, its return value
    replaces each layer's attention output ``Z`` before the output projection.
    """
    cfg = params.config
    x = tn.as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.height, cfg.width):
        raise DimensionError(f"latent shape {x.shape} does not match config "
                             f"({cfg.channels}, {cfg.height}, {cfg.width})")
    B, C, H, W = x.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    ctx = prompt.embeddings
    if ctx.shape[0] not in (1, B):
        raise DimensionError(f"{ctx.shape[0]} prompts for a batch of {B}")
    p = params.tensors

    temb = tn.silu(Tensor(timestep_embedding(t, cfg.hidden)) @ p["temb_w1"] + p["temb_b1"])
    temb = (temb @ p["temb_w2"] + p["temb_b2"]).reshape(B, 1, cfg.hidden)

    xs = tn.transpose(x, (0, 2, 3, 1))  # (B, H, W, C)
    h = tn.patches3x3(xs) @ p["in_w"] + p["in_b"] + temb
    for i in range(cfg.n_blocks):
        pre = f"block{i}."
        # the pooled term gives every location a view of the whole latent
        pooled = tn.mean(h, axis=1, keepdims=True) @ p[pre + "pool_w"]
        r = tn.silu(_conv(tn.silu(h), B, H, W, p[pre + "conv1_w"], p[pre + "conv1_b"])
                    + temb @ p[pre + "temb_w"] + pooled)
        h = h + r @ p[pre + "mix_w"] + p[pre + "mix_b"]
        if i < cfg.n_attn:
            a = f"attn{i}."
            q = h @ p[a + "wq"]
            k = ctx @ p[a + "wk"]
            v = ctx @ p[a + "wv"]
            z, weights = tn.scaled_attention(q, k, v)
            rec = None
            if hooks is not None or controller is not None:
                rec = AttentionHookRecord(i, h, z, q, k, v, weights)
                if hooks is not None:
                    hooks.append(rec)
            if controller is not None:
                z = controller(rec, prompt)
            h = h + z @ p[a + "wo"] + p[a + "bo"]
    eps = _conv(tn.silu(h), B, H, W, p["out_w"], p["out_b"])  # (B, HW, C)
    return tn.transpose(tn.reshape(eps, (B, H, W, C)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# sampling


class SamplingController(Protocol):
    """Optional hooks used by :func:`sample` for step-dependent control."""

    def active(self, t: int) -> bool: ...

    def observe(self, t: int, records: list[AttentionHookRecord], prompt: PromptEmbedding) -> None: ...

    def __call__(self, record: AttentionHookRecord, context: PromptEmbedding) -> Tensor: ...


@dataclass
class SampleResult:
    latents: np.ndarray  # (B, C, H, W)
    steps: list[dict] = field(default_factory=list)


def initial_noise(seeds: Sequence[int], shape: tuple[int, ...]) -> tuple[list, np.ndarray]:
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    return rngs, np.stack([r.standard_normal(shape) for r in rngs])


def sample(params: DenoiserParams, tokens, schedule: NoiseSchedule, seeds,
           controller: SamplingController | None = None,
           hooks: Callable[[int, list[AttentionHookRecord]], None] | None = None) -> SampleResult:
    """Ancestral DDPM sampling from ``t = T`` down to 1.

    ``tokens`` (B, L) and ``seeds`` (B,) pair up row by row; every row draws
    its noise from its own generator so batch composition never changes the
    random stream. With a controller active at step ``t`` a plain pass first
    collects hook records for ``controller.observe``, then a second pass runs
    with the controller replacing attention outputs.
    """
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if len(tokens) == 1 and len(seeds) > 1:
        tokens = np.repeat(tokens, len(seeds), axis=0)
    if len(tokens) != len(seeds):
        raise DimensionError(f"{len(tokens)} prompts but {len(seeds)} seeds")
    cfg = params.config
    prompt = embed_prompt(params, tokens)
    rngs, x = initial_noise(seeds, (cfg.channels, cfg.height, cfg.width))
    result = SampleResult(x)
    for t in range(schedule.T, 0, -1):
        tt = np.full(len(seeds), t)
        if controller is not None and controller.active(t):
            recs: list[AttentionHookRecord] = []
            denoise(params, x, tt, prompt, hooks=recs)
            controller.observe(t, recs, prompt)
            eps = denoise(params, x, tt, prompt, controller=controller).data
        elif hooks is not None:
            recs = []
            eps = denoise(params, x, tt, prompt, hooks=recs).data
            hooks(t, recs)
        else:
            eps = denoise(params, x, tt, prompt).data
        noise = np.stack([r.standard_normal(x.shape[1:]) for r in rngs])
        x = ancestral_step(x, eps, t, schedule, noise)
    result.latents = x
    if controller is not None and hasattr(controller, "step_log"):
        result.steps = list(controller.step_log)
    return result


# ---------------------------------------------------------------------------
# training


@dataclass
class BaseTrainConfig:
    steps: int = 6000
    batch: int = 16
    lr: float = 3e-3
    seed: int = 0
    log_every: int = 50


def train_base_model(latents: np.ndarray, tokens: np.ndarray, schedule: NoiseSchedule,
                     model: DenoiserConfig, cfg: BaseTrainConfig,
                     progress: Callable[[int, float], None] | None = None
                     ) -> tuple[DenoiserParams, list[tuple[int, float]]]:
    """Fit the noise predictor by minimising ``mean ||eps - eps_hat||^2``.

    Returns the parameters and a loss curve of ``(step, mean loss)`` points
    averaged over ``log_every`` steps.
    """
    latents = np.asarray(latents, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(latents) == 0:
        raise InputError("training set is empty")
    if len(latents) != len(tokens):
        raise DimensionError("latents and prompts differ in length")
    rng = np.random.default_rng(cfg.seed)
    params = DenoiserParams.init(model, seed=cfg.seed).requires_grad_(True)
    opt = Adam(params.parameters(), lr=cfg.lr, clip_norm=1.0)
    curve: list[tuple[int, float]] = []
    window: list[float] = []
    tape = Tape()
    for step in range(1, cfg.steps + 1):
        # cosine decay to 10% of the base rate
        opt.lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * (step - 1) / cfg.steps)))
        idx = rng.integers(0, len(latents), size=min(cfg.batch, len(latents)))
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal(latents[idx].shape)
        xt = forward_noise(latents[idx], t, eps, schedule)
        tape.reset()
        with tape:
            prompt = embed_prompt(params, tokens[idx])
            loss = tn.mse(denoise(params, xt, t, prompt), eps)
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        window.append(loss.item())
        if step % cfg.log_every == 0 or step == cfg.steps:
            curve.append((step, float(np.mean(window))))
            if progress:
                progress(step, curve[-1][1])
            window = []
    return params.requires_grad_(False), curve
