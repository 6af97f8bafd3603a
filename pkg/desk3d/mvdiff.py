"""Multi-view denoising diffusion with cross-view attention and a frozen-base control branch.

Images enter the denoiser as non-overlapping patch tokens. In every block the
tokens of all views form a single attention sequence, so each view attends to
every other view with the same weights it uses within itself. Per-view
conditioning is ``time_mlp(t) + pose_mlp(pose) + prompt_proj(prompt)``, added to
that view's tokens through a per-block projection. The denoiser predicts the
clean images directly (x0 parametrization).
"""

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import gradcore as G
from .camgeom import PoseSet
from .exceptions import Desk3DCheckpointError, Desk3DDatasetError, Desk3DShapeError, Desk3DValidationError
from .nn import (
    MLP,
    LayerNorm,
    Linear,
    ParamStore,
    TransformerBlock,
    ema_update,
    load_checkpoint,
    load_store,
    optimizer_step,
    save_store,
    sinusoidal_embedding,
)
from .promptgen import EMBEDDING_DIM, parse_prompt, prompt_embedding
from .render import ChannelImage, RenderedDataset

logger = logging.getLogger(__name__)

CONTROL_PREFIX = "control."


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture and schedule of the multi-view denoiser."""

    resolution: int = 32
    patch: int = 4
    channels: int = 3
    hint_channels: int = 3
    dim: int = 64
    heads: int = 4
    depth: int = 2
    timesteps: int = 200
    cosine_offset: float = 0.008
    background_weight: float = 0.1

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def tokens_per_view(self) -> int:
        return self.grid * self.grid


class NoiseSchedule:
    """Cosine DDPM schedule over ``timesteps`` discrete steps."""

    def __init__(self, timesteps: int = 200, offset: float = 0.008) -> None:
        steps = np.arange(timesteps + 1, dtype=np.float64) / timesteps
        f = np.cos((steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        self.betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.timesteps = timesteps

    def snr(self) -> np.ndarray:
        return np.asarray(self.alpha_bars / (1.0 - self.alpha_bars))

    def q_sample(self, x0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
        """Draw ``x_t ~ q(x_t | x0)``."""
        ab = self.alpha_bars[t]
        return np.asarray(math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise, dtype=np.float32)

    def posterior(self, x0: np.ndarray, xt: np.ndarray, t: int) -> Tuple[np.ndarray, float]:
        """Mean and variance of ``q(x_{t-1} | x_t, x0)`` for ``t >= 1``."""
        ab_t, ab_prev = self.alpha_bars[t], self.alpha_bars[t - 1]
        beta = self.betas[t]
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
        ct = math.sqrt(self.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
        variance = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        return np.asarray(c0 * x0 + ct * xt, dtype=np.float32), float(variance)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[V, R, R, C]`` images to ``[V, (R/p)^2, p*p*C]`` tokens."""
    views, size, _, channels = images.shape
    grid = size // patch
    x = images.reshape(views, grid, patch, grid, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(views, grid * grid, patch * patch * channels))


def unpatchify(tokens: G.Tensor, patch: int, channels: int) -> G.Tensor:
    views, count = tokens.shape[0], tokens.shape[1]
    grid = int(round(math.sqrt(count)))
    x = tokens.reshape(views, grid, grid, patch, patch, channels)
    x = G.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(views, grid * patch, grid * patch, channels)


def to_model_space(images: np.ndarray, channel: str) -> np.ndarray:
    """Map channel values into the diffusion space [-1, 1]."""
    if channel == "normal":
        return np.asarray(images, dtype=np.float32)
    return np.asarray(images, dtype=np.float32) * 2.0 - 1.0


def from_model_space(images: np.ndarray, channel: str) -> np.ndarray:
    if channel == "normal":
        return np.clip(images, -1.0, 1.0).astype(np.float32)
    return np.clip((images + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)


def view_images(views: Sequence[ChannelImage], channel: str) -> np.ndarray:
    return np.stack([getattr(v, channel) for v in views]).astype(np.float32)


class MultiViewDenoiser:
    """Patch-token transformer denoiser over a variable number of posed views.

    Args:
        config: Architecture hyper-parameters
        seed: Initialization seed
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> None:
        if config.resolution % config.patch != 0:
            raise Desk3DShapeError(f"patch {config.patch} does not divide resolution {config.resolution}")
        self.config = config
        self.schedule = NoiseSchedule(config.timesteps, config.cosine_offset)
        self.store = ParamStore()
        self.trained = False
        self.control_trained = False
        self._rng = np.random.default_rng(seed)
        rng, dim, store = self._rng, config.dim, self.store
        token_dim = config.patch * config.patch * config.channels
        self.patch_embed = Linear(store, "patch_embed", token_dim, dim, rng)
        self.pos_embed = store.add("pos_embed", rng.normal(0.0, 0.02, (config.tokens_per_view, dim)))
        self.time_mlp = MLP(store, "time_mlp", [dim, dim, dim], rng)
        self.pose_mlp = MLP(store, "pose_mlp", [12, dim, dim], rng)
        self.prompt_proj = Linear(store, "prompt_proj", EMBEDDING_DIM, dim, rng)
        self.blocks = [TransformerBlock(store, f"blocks.{i}", dim, config.heads, rng) for i in range(config.depth)]
        self.cond_proj = [Linear(store, f"cond.{i}", dim, dim, rng) for i in range(config.depth)]
        self.final_norm = LayerNorm(store, "final_norm", dim)
        self.unembed = Linear(store, "unembed", dim, token_dim, rng)
        self.control_blocks: List[TransformerBlock] = []
        self.control_cond: List[Linear] = []
        self.control_out: List[Linear] = []
        self.hint_embed: Optional[Linear] = None

    @property
    def has_control(self) -> bool:
        return self.hint_embed is not None

    def base_checksum(self) -> str:
        return self.store.checksum(exclude=CONTROL_PREFIX)

    def add_control_branch(self) -> None:
        """Clone the block stack into a control branch and freeze every base weight.

        The hint embedding and the per-block output projections start at zero, so
        the branch initially leaves the base output unchanged.

        Raises:
            Desk3DCheckpointError: If the base model has not been trained
        """
        if not self.trained:
            raise Desk3DCheckpointError("Control branch requires a trained base model (trained flag unset)")
        self._build_control()
        for name in self.store.names(CONTROL_PREFIX + "blocks."):
            self.store[name].data[...] = self.store[name[len(CONTROL_PREFIX) :]].data
        for name in self.store.names(CONTROL_PREFIX + "cond."):
            self.store[name].data[...] = self.store[name[len(CONTROL_PREFIX) :]].data
        self.store.freeze(exclude=CONTROL_PREFIX)
        logger.info("Added control branch (%d parameters)", self.store.num_parameters(CONTROL_PREFIX))

    def _build_control(self) -> None:
        if self.has_control:
            return
        cfg, store, rng = self.config, self.store, self._rng
        hint_dim = cfg.patch * cfg.patch * cfg.hint_channels
        self.hint_embed = Linear(store, CONTROL_PREFIX + "hint_embed", hint_dim, cfg.dim, rng, zero_init=True)
        for i in range(cfg.depth):
            self.control_blocks.append(TransformerBlock(store, f"{CONTROL_PREFIX}blocks.{i}", cfg.dim, cfg.heads, rng))
            self.control_cond.append(Linear(store, f"{CONTROL_PREFIX}cond.{i}", cfg.dim, cfg.dim, rng))
            self.control_out.append(Linear(store, f"{CONTROL_PREFIX}out.{i}", cfg.dim, cfg.dim, rng, zero_init=True))

    def _condition(self, pose_feats: np.ndarray, prompt: Optional[np.ndarray], t: int) -> G.Tensor:
        dim = self.config.dim
        time = self.time_mlp(sinusoidal_embedding(np.array([t]), dim))
        pose = self.pose_mlp(np.asarray(pose_feats, dtype=np.float32))
        text = np.zeros((1, EMBEDDING_DIM), np.float32) if prompt is None else np.asarray(prompt).reshape(1, -1)
        cond = time + pose + self.prompt_proj(text.astype(np.float32))
        return G.silu(cond).reshape(pose_feats.shape[0], 1, dim)

    @staticmethod
    def _run_block(block: TransformerBlock, x: G.Tensor, cross_view: bool) -> G.Tensor:
        if not cross_view:
            return block(x)
        views, count, dim = x.shape
        return block(x.reshape(views * count, dim)).reshape(views, count, dim)

    def denoise(
        self,
        noisy: np.ndarray,
        pose_feats: np.ndarray,
        t: int,
        prompt: Optional[np.ndarray] = None,
        hint: Optional[np.ndarray] = None,
        cross_view: bool = True,
    ) -> G.Tensor:
        """Predict clean views from noisy ones.

        Args:
            noisy: Noisy views ``[V, R, R, C]`` in model space
            pose_feats: Pose features ``[V, 12]``; row i belongs to view i
            t: Timestep in ``[0, timesteps)``
            prompt: Prompt embedding (zeros when absent)
            hint: Control-branch input ``[V, R, R, hint_channels]`` in model space
            cross_view: Attend across views (False runs each view independently)

        Returns:
            x0 prediction ``[V, R, R, C]``

        Raises:
            Desk3DShapeError: On zero views, mismatched pose count or wrong resolution
            Desk3DValidationError: On an out-of-range timestep
        """
        cfg = self.config
        noisy = np.asarray(noisy, dtype=np.float32)
        if noisy.ndim != 4 or noisy.shape[0] == 0:
            raise Desk3DShapeError(f"denoise needs [V, R, R, C] with V >= 1, got {noisy.shape}")
        if noisy.shape[1:] != (cfg.resolution, cfg.resolution, cfg.channels):
            raise Desk3DShapeError(f"Expected views of shape {(cfg.resolution, cfg.resolution, cfg.channels)}")
        if pose_feats.shape != (noisy.shape[0], 12):
            raise Desk3DShapeError(f"Need one 12-float pose per view, got {pose_feats.shape}")
        if not 0 <= t < cfg.timesteps:
            raise Desk3DValidationError(f"Timestep {t} outside [0, {cfg.timesteps})")
        cond = self._condition(pose_feats, prompt, t)
        tokens = self.patch_embed(patchify(noisy, cfg.patch)) + self.pos_embed
        control = None
        if self.hint_embed is not None and hint is not None:
            hint_tokens = patchify(np.asarray(hint, dtype=np.float32), cfg.patch)
            control = tokens + self.hint_embed(hint_tokens)
        for i, block in enumerate(self.blocks):
            h = self._run_block(block, tokens + self.cond_proj[i](cond), cross_view)
            if control is not None:
                control = self._run_block(self.control_blocks[i], control + self.control_cond[i](cond), cross_view)
                h = h + self.control_out[i](control)
            tokens = h
        return unpatchify(self.unembed(self.final_norm(tokens)), cfg.patch, cfg.channels)

    def save(self, path: Union[str, Path]) -> None:
        meta = {
            "kind": "mvdiff",
            "config": json.dumps(asdict(self.config), sort_keys=True),
            "trained": str(int(self.trained)),
            "control": str(int(self.has_control)),
            "control_trained": str(int(self.control_trained)),
        }
        save_store(path, self.store, meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MultiViewDenoiser":
        """Rebuild a denoiser (with its control branch, if saved) from a checkpoint.

        Raises:
            Desk3DCheckpointError: If the file is missing, corrupt or not a denoiser checkpoint
        """
        _, meta = load_checkpoint(path)
        if meta.get("kind") != "mvdiff":
            raise Desk3DCheckpointError(f"{path} is not a multi-view denoiser checkpoint")
        model = cls(DenoiserConfig(**json.loads(meta["config"])))
        if meta.get("control") == "1":
            model._build_control()
            model.store.freeze(exclude=CONTROL_PREFIX)
        load_store(path, model.store)
        model.trained = meta.get("trained") == "1"
        model.control_trained = meta.get("control_trained") == "1"
        return model


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _sample_view_count(rng: np.random.Generator, view_sampling: Dict[int, float]) -> int:
    counts = sorted(view_sampling)
    weights = np.array([view_sampling[c] for c in counts], dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise Desk3DValidationError(f"Invalid view sampling distribution: {view_sampling}")
    return int(counts[int(rng.choice(len(counts), p=weights / weights.sum()))])


def _asset_prompts(dataset: RenderedDataset) -> List[np.ndarray]:
    return [prompt_embedding(parse_prompt(a.prompt)) if a.prompt else prompt_embedding(None) for a in dataset.assets]


def _weighted_mse(pred: G.Tensor, target: np.ndarray, mask: np.ndarray, background: float) -> G.Tensor:
    weights = np.where(mask[..., None] > 0.5, 1.0, background).astype(np.float32)
    weights = np.broadcast_to(weights, target.shape)
    diff = pred - target
    return G.tsum(diff * diff * weights) * (1.0 / float(weights.sum()))


def _fit(
    model: MultiViewDenoiser,
    dataset: RenderedDataset,
    view_sampling: Dict[int, float],
    steps: int,
    lr: float,
    seed: int,
    channel: str,
    hint_channel: Optional[str],
    ema_decay: float,
    prompt_dropout: float,
    log_every: int,
) -> List[float]:
    if len(dataset) == 0:
        raise Desk3DDatasetError("Cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    cfg = model.config
    prompts = _asset_prompts(dataset)
    losses: List[float] = []
    for step in range(steps):
        index = int(rng.integers(len(dataset)))
        poses, views = dataset.assets[index].ring()
        count = min(_sample_view_count(rng, view_sampling), len(views))
        chosen = np.sort(rng.choice(len(views), size=count, replace=False))
        picked = [views[i] for i in chosen]
        x0 = to_model_space(view_images(picked, channel), channel)
        hint = to_model_space(view_images(picked, hint_channel), hint_channel) if hint_channel else None
        t = int(rng.integers(cfg.timesteps))
        noisy = model.schedule.q_sample(x0, t, rng.standard_normal(x0.shape).astype(np.float32))
        prompt = None if rng.random() < prompt_dropout else prompts[index]
        feats = poses.subset(chosen.tolist()).features()
        pred = model.denoise(noisy, feats, t, prompt, hint)
        mask = np.stack([v.mask for v in picked])
        loss = _weighted_mse(pred, x0, mask, cfg.background_weight)
        model.store.zero_grads()
        G.backward(loss)
        optimizer_step(model.store, lr=lr)
        ema_update(model.store, ema_decay)
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            logger.info("%s step %d/%d loss %.5f (views=%d)", channel, step + 1, steps, recent, count)
    return losses


def train_mvdiff(
    model: MultiViewDenoiser,
    dataset: RenderedDataset,
    view_sampling: Optional[Dict[int, float]] = None,
    steps: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
    channel: str = "rgb",
    ema_decay: float = 0.999,
    prompt_dropout: float = 0.1,
    log_every: int = 100,
) -> List[float]:
    """Train the denoiser with the x0 objective on ring views of the dataset.

    Each step draws one asset, a view count from ``view_sampling`` (default
    ``{1: 0.2, 4: 0.4, 8: 0.4}``), that many ring views, and a timestep.

    Returns:
        Per-step training losses (empty for zero steps; weights untouched)

    Raises:
        Desk3DDatasetError: If the dataset is empty
    """
    sampling = view_sampling or {1: 0.2, 4: 0.4, 8: 0.4}
    if steps <= 0:
        return []
    losses = _fit(model, dataset, sampling, steps, lr, seed, channel, None, ema_decay, prompt_dropout, log_every)
    model.trained = True
    return losses


def train_normal_controlnet(
    model: MultiViewDenoiser,
    dataset: RenderedDataset,
    view_sampling: Optional[Dict[int, float]] = None,
    steps: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
    ema_decay: float = 0.999,
    log_every: int = 100,
) -> List[float]:
    """Train the control branch of a normal-image denoiser on RGB hints.

    The base weights stay bit-identical; only ``control.*`` parameters move.

    Raises:
        Desk3DCheckpointError: If the base model is not trained
        Desk3DDatasetError: If the dataset is empty
    """
    if not model.trained:
        raise Desk3DCheckpointError("Normal control branch needs a trained base model (trained flag unset)")
    if not model.has_control:
        model.add_control_branch()
    sampling = view_sampling or {1: 0.2, 4: 0.4, 8: 0.4}
    if steps <= 0:
        return []
    losses = _fit(model, dataset, sampling, steps, lr, seed, "normal", "rgb", ema_decay, 0.0, log_every)
    model.control_trained = True
    return losses


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample(
    model: MultiViewDenoiser,
    poses: PoseSet,
    prompt: Optional[np.ndarray] = None,
    seed: int = 0,
    reference: Optional[np.ndarray] = None,
    hint: Optional[np.ndarray] = None,
    channel: str = "rgb",
    use_ema: bool = True,
) -> np.ndarray:
    """Ancestral DDPM sampling of ``len(poses)`` views.

    Args:
        model: Trained denoiser
        poses: Camera of every view to synthesize
        prompt: Prompt embedding (zeros when absent)
        seed: Sampling seed; identical seeds give identical samples
        reference: Image ``[R, R, C]`` for view 0 in channel space; view 0 is
            replaced by the suitably noised reference before every denoising step
            and equals the reference exactly in the output
        hint: Control-branch input ``[V, R, R, hint_channels]`` in channel space
        channel: ``"rgb"`` or ``"normal"``; selects the value range
        use_ema: Sample with EMA weights when available

    Returns:
        Views ``[V, R, R, C]`` in channel space

    Raises:
        Desk3DShapeError: On zero poses or a reference/hint of the wrong shape
    """
    cfg = model.config
    views = len(poses)
    if views == 0:
        raise Desk3DShapeError("Sampling needs at least one pose")
    shape = (cfg.resolution, cfg.resolution, cfg.channels)
    ref_model = None
    if reference is not None:
        if tuple(reference.shape) != shape:
            raise Desk3DShapeError(f"Reference shape {tuple(reference.shape)} does not match model views {shape}")
        ref_model = to_model_space(reference, channel)
    hint_model = None
    if hint is not None:
        expected = (views, cfg.resolution, cfg.resolution, cfg.hint_channels)
        if tuple(hint.shape) != expected:
            raise Desk3DShapeError(f"Hint shape {tuple(hint.shape)} does not match {expected}")
        hint_model = to_model_space(hint, "rgb")
    rng = np.random.default_rng(seed)
    feats = poses.features()
    schedule = model.schedule
    x = rng.standard_normal((views,) + shape).astype(np.float32)
    with G.no_grad(), (model.store.use_ema() if use_ema else contextlib.nullcontext()):
        for t in reversed(range(cfg.timesteps)):
            if ref_model is not None:
                x[0] = schedule.q_sample(ref_model, t, rng.standard_normal(shape).astype(np.float32))
            x0 = np.clip(model.denoise(x, feats, t, prompt, hint_model).data, -1.0, 1.0)
            if t == 0:
                x = x0
                break
            mean, variance = schedule.posterior(x0, x, t)
            x = mean + math.sqrt(variance) * rng.standard_normal(x.shape).astype(np.float32)
    out = from_model_space(x, channel)
    if reference is not None:
        out[0] = reference
    return out

