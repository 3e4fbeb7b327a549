"""Training recipe: feature reconstruction with a frozen (or EMA) target encoder.

The switches ``finetune``, ``improved_hp``, ``encoder_hp``, ``topk`` and
``hires`` reproduce the ablation rows: with ``finetune`` off the encoder gets
learning-rate multiplier 0 and the model is the frozen-feature baseline.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kvfile
from . import model as M
from .autodiff import Tensor
from .rng import stream

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when a run cannot continue (e.g. non-finite loss)."""


@dataclass
class TrainConfig:
    # optimisation
    total_steps: int = 5000
    batch_size: int = 16
    base_lr: float = 3e-4
    warmup_steps: int = 500
    schedule: str = "cosine"          # cosine | exponential
    half_life: int = 1667
    grad_clip_norm: float = 0.1
    encoder_lr_factor: float = 0.5
    layerwise_decay: float = 0.85
    encoder_weight_decay: float = 0.01
    ema_tau: float = 1.0
    topk: int | None = 2
    # ablation switches
    finetune: bool = True
    improved_hp: bool = True
    encoder_hp: bool = True
    # high-resolution stage
    hires: bool = False
    hires_steps: int = 500
    hires_lr: float = 1e-4
    hires_warmup: int = 17
    hires_batch_size: int = 8
    hires_image_size: int = 56
    # model shape
    image_size: int = 32
    patch_size: int = 4
    feature_dim: int = 64
    n_blocks: int = 3
    n_heads: int = 4
    encoder_mlp_hidden: int = 128
    n_slots: int = 7
    n_iterations: int = 3
    slot_dim: int = 32
    slot_mlp_hidden: int = 64
    input_mlp_hidden: int = 0
    decoder_hidden: int = 128
    decoder_layers: int = 4
    decoder_pos_std: float = 0.02
    # misc
    collapse_threshold: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_tau <= 1.0:
            raise ValueError(f"ema_tau must lie in [0, 1], got {self.ema_tau}")
        if not 0.0 < self.layerwise_decay <= 1.0:
            raise ValueError(f"layerwise_decay must lie in (0, 1], got {self.layerwise_decay}")
        if self.schedule not in ("cosine", "exponential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.topk is not None and not 1 <= self.topk <= self.n_slots:
            raise ValueError(f"topk={self.topk} outside [1, n_slots={self.n_slots}]")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} outside [0, total_steps={self.total_steps}]")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be positive")

    def model_config(self, image_size: int | None = None) -> M.ModelConfig:
        return M.ModelConfig(
            M.EncoderConfig(image_size=image_size or self.image_size, patch_size=self.patch_size,
                            feature_dim=self.feature_dim, n_blocks=self.n_blocks, n_heads=self.n_heads,
                            mlp_hidden=self.encoder_mlp_hidden),
            M.SlotConfig(n_slots=self.n_slots, n_iterations=self.n_iterations, slot_dim=self.slot_dim,
                         mlp_hidden=self.slot_mlp_hidden, input_mlp_hidden=self.input_mlp_hidden),
            M.DecoderConfig(hidden=self.decoder_hidden, n_layers=self.decoder_layers,
                            pos_init_std=self.decoder_pos_std),
        )

    def resolved(self) -> TrainConfig:
        """Apply the ablation switches to the underlying hyperparameters."""
        cfg = self
        if not cfg.improved_hp:
            cfg = replace(cfg, schedule="exponential", grad_clip_norm=1.0, base_lr=cfg.base_lr * 4.0 / 3.0)
        if not cfg.encoder_hp:
            cfg = replace(cfg, encoder_lr_factor=1.0, layerwise_decay=1.0, encoder_weight_decay=0.0)
        return cfg

    def hires_stage(self) -> TrainConfig:
        """Schedule parameters of the second (high-resolution) stage."""
        return replace(self, total_steps=self.hires_steps, warmup_steps=self.hires_warmup,
                       base_lr=self.hires_lr, batch_size=self.hires_batch_size, schedule="cosine",
                       improved_hp=True)


FULL_SCALE_CONFIG = TrainConfig(total_steps=300_000, batch_size=128, base_lr=3e-4, warmup_steps=10_000,
                           half_life=100_000, hires=True, hires_steps=10_000, hires_lr=1e-4,
                           hires_warmup=333, hires_batch_size=64, topk=3, n_slots=7,
                           slot_dim=256, slot_mlp_hidden=1024)


# ---------------------------------------------------------------------------
# config file IO

def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a config."""
    return kvfile.load_into(TrainConfig, text)


def load_config(path) -> TrainConfig:
    return kvfile.read(TrainConfig, path)


def dump_config(cfg: TrainConfig) -> str:
    return kvfile.dump(cfg)


# ---------------------------------------------------------------------------
# parameter groups and schedules

@dataclass
class ParamGroup:
    name: str
    lr_mult: float
    weight_decay: float = 0.0
    block: int | None = None
    params: list[str] = field(default_factory=list)


def assign_blockwise_lrs(encoder_blocks: int, cfg: TrainConfig) -> list[ParamGroup]:
    """Encoder block groups, bottom to top: block ``l`` gets ``factor * eta**(L-1-l)``."""
    if encoder_blocks < 1:
        raise ValueError("need at least one encoder block")
    cfg = cfg.resolved()
    factor, eta, wd = cfg.encoder_lr_factor, cfg.layerwise_decay, cfg.encoder_weight_decay
    groups = []
    mult = factor
    for l in reversed(range(encoder_blocks)):
        groups.append(ParamGroup(f"encoder.blocks.{l}", mult, wd, l))
        mult = eta * mult
    groups.reverse()
    return groups


def param_groups(params: M.Params, cfg: TrainConfig) -> list[ParamGroup]:
    """Partition every parameter into exactly one group.

    Patch/position embeddings sit one step below block 0; the final encoder
    norm shares the top block's group.  Without finetuning all encoder groups
    get multiplier 0.
    """
    n_blocks = cfg.n_blocks
    blocks = assign_blockwise_lrs(n_blocks, cfg)
    r = cfg.resolved()
    embed = ParamGroup("encoder.embed", blocks[0].lr_mult * r.layerwise_decay, r.encoder_weight_decay, -1)
    rest = ParamGroup("model", 1.0, 0.0, None)
    groups = [embed] + blocks + [rest]
    for name in params:
        if name.startswith("encoder.blocks."):
            blocks[int(name.split(".")[2])].params.append(name)
        elif name.startswith("encoder.norm"):
            blocks[-1].params.append(name)
        elif name.startswith("encoder."):
            embed.params.append(name)
        else:
            rest.params.append(name)
    if not cfg.finetune:
        for g in groups[:-1]:
            g.lr_mult = 0.0
    return groups


def lr_at_step(step: int, cfg: TrainConfig, group: ParamGroup | float = 1.0) -> float:
    """Linear warmup to ``base_lr * sqrt(batch / 64) * multiplier``, then decay."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    r = cfg.resolved()
    mult = group.lr_mult if isinstance(group, ParamGroup) else float(group)
    peak = r.base_lr * math.sqrt(r.batch_size / 64.0) * mult
    if step < r.warmup_steps:
        return peak * step / r.warmup_steps
    t = step - r.warmup_steps
    if r.schedule == "cosine":
        span = r.total_steps - r.warmup_steps
        if span == 0:
            return peak
        return peak * 0.5 * (1.0 + math.cos(math.pi * t / span))
    return peak * 0.5 ** (t / r.half_life)


# ---------------------------------------------------------------------------
# optimiser pieces

def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the (possibly) scaled gradients and the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = math.fsum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                   for g in grads.values())
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise FloatingPointError(f"non-finite gradients in {bad}")
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState | None, lr: float,
               weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One AdamW update; weight decay is decoupled and applied first."""
    if state is None:
        state = AdamState(np.zeros_like(param), np.zeros_like(param))
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"adamw: shapes param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    dtype = param.dtype
    p = param
    if weight_decay:
        p = p - lr * weight_decay * p
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p.astype(dtype, copy=False), AdamState(m.astype(dtype, copy=False), v.astype(dtype, copy=False), t)


def ema_update(teacher: M.Params, student: M.Params, tau: float) -> M.Params:
    """``teacher <- tau * teacher + (1 - tau) * student`` for every teacher parameter."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    missing = [k for k in teacher if k not in student]
    if missing:
        raise KeyError(f"ema_update: student lacks {missing}")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if s.shape != t.shape:
            raise ValueError(f"ema_update: {k} teacher {t.shape} vs student {s.shape}")
        if tau == 1.0:
            out[k] = t
        elif tau == 0.0:
            out[k] = Tensor(s.data.copy())
        else:
            out[k] = Tensor((tau * t.data + (1.0 - tau) * s.data).astype(t.dtype, copy=False))
    return out


def reconstruction_loss(pred: M.DecodeOutput, targets) -> Tensor:
    """Mean squared error between the combined reconstruction and the targets."""
    return ad.mse(pred.recon, targets)


# ---------------------------------------------------------------------------
# collapse detection

def feature_dispersion(features: np.ndarray) -> float:
    """Mean over feature dims of the std over patches (averaged over the batch)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    return float(f.std(axis=1).mean())


class CollapseDetector:
    """Flags target features whose dispersion falls below a fraction of the step-0 value."""

    def __init__(self, threshold: float = 0.1):
        self.threshold = threshold
        self.reference: float | None = None

    def __call__(self, features: np.ndarray) -> tuple[bool, float]:
        stat = feature_dispersion(features)
        if self.reference is None:
            self.reference = stat
        if self.reference == 0.0:
            return True, stat
        return stat < self.threshold * self.reference, stat


def detect_collapse(features: np.ndarray, reference: float | None = None,
                    threshold: float = 0.1) -> tuple[bool, float]:
    """Stateless form: compare against ``reference`` (the step-0 statistic)."""
    stat = feature_dispersion(features)
    ref = stat if reference is None else reference
    if ref == 0.0:
        return True, stat
    return stat < threshold * ref, stat


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: M.Params
    teacher: M.Params
    config: TrainConfig
    model_config: M.ModelConfig
    log: list[dict]
    collapse_step: int | None = None

    @property
    def log_columns(self) -> list[str]:
        return list(self.log[0].keys()) if self.log else []


def log_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


class _Stage:
    """Optimiser bookkeeping for one schedule stage."""

    def __init__(self, params: M.Params, cfg: TrainConfig):
        self.cfg = cfg
        self.groups = param_groups(params, cfg)
        self.state: dict[str, AdamState] = {}
        self.trainable = [n for g in self.groups if g.lr_mult > 0 for n in g.params]


def _target_batch(teacher: M.Params, enc_cfg: M.EncoderConfig, images: np.ndarray, idx: np.ndarray,
                  cache: dict | None) -> np.ndarray:
    if cache is None:
        return M.target_encode(images[idx], enc_cfg, teacher)
    missing = [i for i in idx if i not in cache]
    if missing:
        feats = M.target_encode(images[np.array(missing)], enc_cfg, teacher)
        for i, f in zip(missing, feats):
            cache[int(i)] = f
    return np.stack([cache[int(i)] for i in idx])


def train(cfg: TrainConfig, images: np.ndarray, hires_images: np.ndarray | None = None,
          params: M.Params | None = None, progress: Callable[[dict], None] | None = None,
          abort_on_collapse: bool = False) -> TrainResult:
    """Run stage 1 (and stage 2 when ``cfg.hires``) on an in-memory image array.

    ``images`` is (M, H, W, 3); ``hires_images`` holds the same scenes at
    ``cfg.hires_image_size`` and is required for the high-resolution stage.
    All randomness derives from ``cfg.seed`` through named streams.
    """
    images = np.asarray(images, dtype=np.float32)
    mcfg = cfg.model_config(images.shape[1])
    if params is None:
        params = M.init_params(mcfg, stream(cfg.seed, "init"))
    teacher = M.copy_params(params, "encoder.")
    rows: list[dict] = []
    detector = CollapseDetector(cfg.collapse_threshold)
    collapse_step = None

    stages = [(cfg, images, 0)]
    if cfg.hires:
        if hires_images is None:
            raise ValueError("hires stage needs hires_images")
        stages.append((cfg.hires_stage(), np.asarray(hires_images, dtype=np.float32), cfg.total_steps))

    for stage_no, (scfg, data, offset) in enumerate(stages, start=1):
        if stage_no == 2:
            M.resize_model_grid(teacher, mcfg, data.shape[1])
            mcfg = M.resize_model_grid(params, mcfg, data.shape[1])
        stage = _Stage(params, scfg)
        frozen_encoder = not any(p.startswith("encoder.") for p in stage.trainable)
        for name, p in params.items():
            p.requires_grad = name in stage.trainable
            p.grad = None
        cache = {} if scfg.ema_tau == 1.0 else None
        live_targets = scfg.ema_tau == 0.0 and not frozen_encoder
        order_rng = stream(cfg.seed, "data", stage_no)
        noise_rng = stream(cfg.seed, "slots", stage_no)
        order = np.empty(0, dtype=np.int64)
        for step in range(scfg.total_steps):
            while order.size < scfg.batch_size:
                order = np.concatenate([order, order_rng.permutation(len(data))])
            idx, order = order[:scfg.batch_size], order[scfg.batch_size:]
            if live_targets:
                # tau = 0: the student's own features are the targets, gradient included
                feats = M.encode(data[idx], mcfg.encoder, params)
                targets = feats
            else:
                targets = _target_batch(teacher, mcfg.encoder, data, idx, cache)
                # a frozen encoder equals the target encoder, so its features are the targets
                feats = Tensor(targets) if frozen_encoder and scfg.ema_tau == 1.0 else None
            collapsed, disp = detector(targets.data if live_targets else targets)
            if collapsed and collapse_step is None:
                collapse_step = offset + step
                log.warning("target collapse detected at step %d (dispersion %.4g)", collapse_step, disp)
            noise = M.sample_slot_noise(noise_rng, (len(idx),), mcfg.slots.n_slots, mcfg.slots.slot_dim)
            out = M.forward(data[idx], mcfg, params, noise, topk=scfg.topk, features=feats)
            loss = reconstruction_loss(out.decoded, targets)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise TrainingError(f"non-finite loss at step {offset + step}")
            ad.backward(loss)
            grads = {n: (params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data))
                     for n in stage.trainable}
            grads, gnorm = clip_grad_norm(grads, scfg.resolved().grad_clip_norm)
            lrs = []
            for g in stage.groups:
                lr = lr_at_step(step, scfg, g)
                lrs.append(lr)
                if g.lr_mult == 0:
                    continue
                for n in g.params:
                    new, stage.state[n] = adamw_step(params[n].data, grads[n], stage.state.get(n), lr,
                                                     g.weight_decay)
                    params[n] = Tensor(new, requires_grad=True)
            if scfg.ema_tau < 1.0:
                student = {k: params[k] for k in teacher}
                teacher = ema_update(teacher, student, scfg.ema_tau)
            row = {"step": offset + step, "loss": lval, "grad_norm": gnorm}
            for i, lr in enumerate(lrs):
                row[f"lr_group{i}"] = lr
            row["stage"] = stage_no
            row["target_dispersion"] = disp
            row["collapsed"] = int(collapsed)
            rows.append(row)
            if progress is not None:
                progress(row)
            if collapsed and abort_on_collapse:
                break
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    return TrainResult(params, teacher, cfg, mcfg, rows, collapse_step)
