"""Patch encoder, slot attention and MLP decoders (full and top-k).

All forward functions accept a leading batch axis and also work on a single
unbatched example.  Parameters live in a flat ``dict[str, Tensor]`` whose keys
are dotted names (``encoder.blocks.0.attn.q.w``); the encoder blocks are the
unit for blockwise learning-rate decay.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    feature_dim: int = 64
    n_blocks: int = 3
    n_heads: int = 4
    mlp_hidden: int = 128
    pixel_mean: float = 0.5           # inputs are standardised before patch embedding
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be positive")
        if self.feature_dim <= 0 or self.n_blocks < 0:
            raise ValueError("feature_dim must be positive and n_blocks non-negative")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.feature_dim % self.n_heads:
            raise ValueError("feature_dim must be divisible by n_heads")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def n_patches(self) -> int:
        h, w = self.grid
        return h * w


@dataclass
class SlotConfig:
    n_slots: int = 5
    n_iterations: int = 3
    slot_dim: int = 64
    mlp_hidden: int = 128
    input_mlp_hidden: int = 0     # 0 feeds features straight to slot attention
    eps: float = 1e-8

    def __post_init__(self):
        if self.n_slots < 1 or self.n_iterations < 1:
            raise ValueError("need at least one slot and one iteration")


@dataclass
class DecoderConfig:
    hidden: int = 128
    n_layers: int = 4
    pos_init_std: float = 0.02


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    slots: SlotConfig = field(default_factory=SlotConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(EncoderConfig(**d["encoder"]), SlotConfig(**d["slots"]), DecoderConfig(**d["decoder"]))


# full-scale reference values; the desk defaults are scaled down from these
FULL_SCALE_SLOTS = SlotConfig(n_slots=7, n_iterations=3, slot_dim=256, mlp_hidden=1024)
FULL_SCALE_DECODER = DecoderConfig(hidden=2048, n_layers=4)
FULL_SCALE_FEATURE_DIM = 384
FULL_SCALE_TOPK = 3


@dataclass
class SlotState:
    slots: Tensor        # (..., K, D_slots)
    attn: np.ndarray     # (..., N, K), rows sum to one over slots


@dataclass
class DecodeOutput:
    y_hat: Tensor        # (..., N, K_eff, D_feat)
    alpha: Tensor        # (..., N, K_eff)
    masks: Tensor        # (..., N, K_eff)
    recon: Tensor        # (..., N, D_feat)
    selected: np.ndarray  # (..., N, K_eff) slot index of each decoded column


class EvalCounter:
    """Counts per-(patch, slot) decoder MLP evaluations."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


MLP_EVALS = EvalCounter()


# ---------------------------------------------------------------------------
# initialisation

def _dense(rng, fan_in, fan_out, dtype, bias=True, scale=1.0):
    w = rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out)).astype(dtype)
    out = {"w": Tensor(w)}
    if bias:
        out["b"] = Tensor(np.zeros(fan_out, dtype=dtype))
    return out


def _norm(d, dtype):
    return {"g": Tensor(np.ones(d, dtype=dtype)), "b": Tensor(np.zeros(d, dtype=dtype))}


def _put(params: Params, prefix: str, group: dict) -> None:
    for k, v in group.items():
        params[f"{prefix}.{k}"] = v


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    d, p = cfg.feature_dim, cfg.patch_size
    params: Params = {}
    _put(params, "encoder.patch_embed", _dense(rng, p * p * 3, d, dtype))
    params["encoder.pos_embed"] = Tensor(rng.normal(0.0, 0.02, size=(cfg.n_patches, d)).astype(dtype))
    for l in range(cfg.n_blocks):
        pre = f"encoder.blocks.{l}"
        _put(params, f"{pre}.ln1", _norm(d, dtype))
        for nm in ("q", "k", "v", "proj"):
            # a key bias shifts every score of a query equally, so it never receives gradient
            _put(params, f"{pre}.attn.{nm}", _dense(rng, d, d, dtype, bias=nm != "k"))
        _put(params, f"{pre}.ln2", _norm(d, dtype))
        _put(params, f"{pre}.mlp.fc1", _dense(rng, d, cfg.mlp_hidden, dtype))
        _put(params, f"{pre}.mlp.fc2", _dense(rng, cfg.mlp_hidden, d, dtype))
    _put(params, "encoder.norm", _norm(d, dtype))
    return params


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    params = init_encoder(cfg.encoder, rng, dtype)
    df, ds, s = cfg.encoder.feature_dim, cfg.slots.slot_dim, cfg.slots
    params["slots.init_mean"] = Tensor(rng.normal(0.0, 0.1, size=ds).astype(dtype))
    params["slots.init_logstd"] = Tensor(np.zeros(ds, dtype=dtype))
    if s.input_mlp_hidden:
        _put(params, "slots.in_mlp.norm", _norm(df, dtype))
        _put(params, "slots.in_mlp.fc1", _dense(rng, df, s.input_mlp_hidden, dtype))
        _put(params, "slots.in_mlp.fc2", _dense(rng, s.input_mlp_hidden, df, dtype))
    _put(params, "slots.norm_in", _norm(df, dtype))
    for nm, fan_in in (("k", df), ("v", df), ("q", ds)):
        _put(params, f"slots.{nm}", _dense(rng, fan_in, ds, dtype, bias=False))
    # a shift of the normalised slots moves every slot's logit for a patch equally,
    # which the softmax over slots cancels, so this norm has no bias
    params["slots.norm_slots.g"] = Tensor(np.ones(ds, dtype=dtype))
    bound = 1.0 / np.sqrt(ds)
    params["slots.gru.w_ih"] = Tensor(rng.uniform(-bound, bound, size=(ds, 3 * ds)).astype(dtype))
    params["slots.gru.w_hh"] = Tensor(rng.uniform(-bound, bound, size=(ds, 3 * ds)).astype(dtype))
    params["slots.gru.b_ih"] = Tensor(np.zeros(3 * ds, dtype=dtype))
    params["slots.gru.b_hh"] = Tensor(np.zeros(3 * ds, dtype=dtype))
    _put(params, "slots.norm_mlp", _norm(ds, dtype))
    _put(params, "slots.mlp.fc1", _dense(rng, ds, s.mlp_hidden, dtype))
    _put(params, "slots.mlp.fc2", _dense(rng, s.mlp_hidden, ds, dtype))

    dec = cfg.decoder
    params["decoder.pos_embed"] = Tensor(rng.normal(0.0, dec.pos_init_std, size=(cfg.encoder.n_patches, ds)).astype(dtype))
    width = ds
    for i in range(dec.n_layers - 1):
        _put(params, f"decoder.layers.{i}", _dense(rng, width, dec.hidden, dtype))
        width = dec.hidden
    _put(params, "decoder.out_feat", _dense(rng, width, df, dtype))
    # alpha logits are softmaxed over slots; a shared bias would be inert
    _put(params, "decoder.out_alpha", _dense(rng, width, 1, dtype, bias=False))
    return params


def copy_params(params: Params, prefix: str = "") -> Params:
    """Detached deep copy of every parameter whose name starts with ``prefix``."""
    return {k: Tensor(v.data.copy()) for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# encoder

def _linear(x: Tensor, params: Params, name: str) -> Tensor:
    y = ad.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return y if b is None else ad.add(y, b)


def _ln(x: Tensor, params: Params, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.g"], params.get(f"{name}.b"))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) images -> (B, N, patch*patch*C) row-major patch vectors."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def _attention(x: Tensor, params: Params, pre: str, n_heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, params, f"{pre}.q"))
    k = heads(_linear(x, params, f"{pre}.k"))
    v = heads(_linear(x, params, f"{pre}.v"))
    scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    out = ad.matmul(ad.softmax(scores, axis=-1), v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return _linear(out, params, f"{pre}.proj")


def encode(images, cfg: EncoderConfig, params: Params) -> Tensor:
    """Patch features (B, N, D_feat) for images (B, H, W, 3); unbatched input gives (N, D_feat)."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    h, w = arr.shape[1:3]
    p = cfg.patch_size
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
    n = (h // p) * (w // p)
    pos = params["encoder.pos_embed"]
    if pos.shape[0] != n:
        raise ad.ShapeError(f"encode: {pos.shape[0]} position embeddings for {n} patches")
    dtype = params["encoder.patch_embed.w"].dtype
    pix = (patchify(arr, p).astype(dtype, copy=False) - dtype.type(cfg.pixel_mean)) / dtype.type(cfg.pixel_std)
    x = _linear(Tensor(pix), params, "encoder.patch_embed")
    x = ad.add(x, pos)
    for l in range(cfg.n_blocks):
        pre = f"encoder.blocks.{l}"
        x = ad.add(x, _attention(_ln(x, params, f"{pre}.ln1"), params, f"{pre}.attn", cfg.n_heads))
        hdn = ad.gelu(_linear(_ln(x, params, f"{pre}.ln2"), params, f"{pre}.mlp.fc1"))
        x = ad.add(x, _linear(hdn, params, f"{pre}.mlp.fc2"))
    x = _ln(x, params, "encoder.norm")
    if single:
        x = ad.reshape(x, x.shape[1:])
    return x


def target_encode(images, cfg: EncoderConfig, frozen: Params) -> np.ndarray:
    """Features from the frozen target encoder; never records graph nodes."""
    with ad.no_grad():
        return encode(images, cfg, frozen).data


# ---------------------------------------------------------------------------
# slot attention

def _mlp2(x: Tensor, params: Params, pre: str) -> Tensor:
    return _linear(ad.gelu(_linear(x, params, f"{pre}.fc1")), params, f"{pre}.fc2")


def sample_slot_noise(rng: np.random.Generator, batch: tuple, n_slots: int, slot_dim: int,
                      dtype=np.float32) -> np.ndarray:
    return rng.standard_normal(size=batch + (n_slots, slot_dim)).astype(dtype)


def slot_attention(features: Tensor, cfg: SlotConfig, params: Params,
                   rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> SlotState:
    """Iterative slot attention over patch features (B, N, D_feat) or (N, D_feat).

    Initial slots are ``init_mean + exp(init_logstd) * noise``; ``noise`` is
    drawn from ``rng`` when not given.  The returned attention is the final
    iteration's softmax over the slot axis.
    """
    single = features.ndim == 2
    if single:
        features = ad.reshape(features, (1,) + features.shape)
    b, n, _ = features.shape
    ds, k_slots = cfg.slot_dim, cfg.n_slots
    dtype = features.dtype
    if noise is None:
        if rng is None:
            raise ValueError("slot_attention needs rng or noise")
        noise = sample_slot_noise(rng, (b,), k_slots, ds, dtype)
    noise = np.asarray(noise, dtype=dtype).reshape(b, k_slots, ds)
    slots = ad.add(params["slots.init_mean"], ad.mul(ad.exp(params["slots.init_logstd"]), Tensor(noise)))

    if "slots.in_mlp.fc1.w" in params:
        features = _mlp2(_ln(features, params, "slots.in_mlp.norm"), params, "slots.in_mlp")
    inputs = _ln(features, params, "slots.norm_in")
    keys = ad.matmul(inputs, params["slots.k.w"])
    values = ad.matmul(inputs, params["slots.v.w"])
    keys_t = ad.transpose(keys, (0, 2, 1))
    scale = 1.0 / np.sqrt(ds)
    attn = None
    for it in range(cfg.n_iterations):
        prev = slots
        q = ad.matmul(_ln(slots, params, "slots.norm_slots"), params["slots.q.w"])
        logits = ad.scalar_mul(ad.transpose(ad.matmul(q, keys_t), (0, 2, 1)), scale)  # (B, N, K)
        if not np.all(np.isfinite(logits.data)):
            raise FloatingPointError(f"slot_attention: non-finite attention logits at iteration {it}")
        attn = ad.softmax(logits, axis=-1)
        weights = ad.add(attn, cfg.eps)
        denom = ad.broadcast_to(ad.sum(weights, axis=1, keepdims=True), weights.shape)
        weights = ad.div(weights, denom)
        updates = ad.matmul(ad.transpose(weights, (0, 2, 1)), values)  # (B, K, D)
        slots = ad.gru_cell(updates, prev, params["slots.gru.w_ih"], params["slots.gru.w_hh"],
                            params["slots.gru.b_ih"], params["slots.gru.b_hh"])
        slots = ad.add(slots, _mlp2(_ln(slots, params, "slots.norm_mlp"), params, "slots.mlp"))
    a = attn.data
    if single:
        slots = ad.reshape(slots, slots.shape[1:])
        a = a[0]
    return SlotState(slots=slots, attn=a)


# ---------------------------------------------------------------------------
# decoders

def _decoder_mlp(x: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    i = 0
    while f"decoder.layers.{i}.w" in params:
        x = ad.gelu(_linear(x, params, f"decoder.layers.{i}"))
        i += 1
    y_hat = _linear(x, params, "decoder.out_feat")
    alpha = _linear(x, params, "decoder.out_alpha")
    return y_hat, ad.reshape(alpha, alpha.shape[:-1])


def _combine(y_hat: Tensor, alpha: Tensor) -> tuple[Tensor, Tensor]:
    masks = ad.softmax(alpha, axis=-1)
    w = ad.broadcast_to(ad.reshape(masks, masks.shape + (1,)), y_hat.shape)
    return masks, ad.sum(ad.mul(y_hat, w), axis=-2)


def _batched(state: SlotState) -> tuple[Tensor, np.ndarray, bool]:
    slots, a = state.slots, np.asarray(state.attn)
    if slots.ndim == 2:
        return ad.reshape(slots, (1,) + slots.shape), a[None], True
    return slots, a, False


def _unbatch(out: DecodeOutput) -> DecodeOutput:
    def sq(t):
        return ad.reshape(t, t.shape[1:])
    return DecodeOutput(sq(out.y_hat), sq(out.alpha), sq(out.masks), sq(out.recon), out.selected[0])


def _pos_for(params: Params, n: int, shape: tuple) -> Tensor:
    pos = params["decoder.pos_embed"]
    if pos.shape[0] != n:
        raise ad.ShapeError(f"decoder: {pos.shape[0]} position embeddings for {n} patches")
    return ad.broadcast_to(ad.reshape(pos, (n, 1, pos.shape[1])), shape)


def decode_full(state: SlotState, params: Params, counter: EvalCounter | None = None) -> DecodeOutput:
    """Decode every slot at every patch and alpha-blend them."""
    slots, a, single = _batched(state)
    b, k, ds = slots.shape
    n = a.shape[1]
    shape = (b, n, k, ds)
    x = ad.add(ad.broadcast_to(ad.reshape(slots, (b, 1, k, ds)), shape), _pos_for(params, n, shape))
    (counter or MLP_EVALS).count += b * n * k
    y_hat, alpha = _decoder_mlp(x, params)
    masks, recon = _combine(y_hat, alpha)
    selected = np.broadcast_to(np.arange(k), (b, n, k)).copy()
    out = DecodeOutput(y_hat, alpha, masks, recon, selected)
    return _unbatch(out) if single else out


def topk_indices(a: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, highest first.

    Ties go to the lower slot index.
    """
    order = np.argsort(-a, axis=-1, kind="stable")
    return order[..., :k]


def decode_topk(state: SlotState, k: int, params: Params, counter: EvalCounter | None = None) -> DecodeOutput:
    """Decode only the ``k`` slots with the highest attention at each patch."""
    slots, a, single = _batched(state)
    b, n_slots, ds = slots.shape
    if not 1 <= k <= n_slots:
        raise ValueError(f"top-k: k={k} outside [1, {n_slots}]")
    n = a.shape[1]
    sel = topk_indices(a, k)  # (B, N, k)
    shape = (b, n, k, ds)
    picked = ad.gather(ad.reshape(slots, (b, 1, n_slots, ds)), sel[..., None], axis=2)
    x = ad.add(picked, _pos_for(params, n, shape))
    (counter or MLP_EVALS).count += b * n * k
    y_hat, alpha = _decoder_mlp(x, params)
    masks, recon = _combine(y_hat, alpha)
    out = DecodeOutput(y_hat, alpha, masks, recon, sel)
    return _unbatch(out) if single else out


def slot_masks(out: DecodeOutput, n_slots: int) -> np.ndarray:
    """Scatter decoder masks back to a dense (..., N, n_slots) array (zeros where not decoded)."""
    m = out.masks.data
    dense = np.zeros(m.shape[:-1] + (n_slots,), dtype=m.dtype)
    np.put_along_axis(dense, out.selected, m, axis=-1)
    return dense


# ---------------------------------------------------------------------------
# positional embedding resize

def interpolate_pos_embed(pos: np.ndarray, new_grid: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize an (H, W, D) grid to ``new_grid`` with corners aligned."""
    pos = np.asarray(pos)
    h, w, _ = pos.shape
    nh, nw = new_grid
    if min(h, w, nh, nw) < 1:
        raise ValueError("grids must be at least 1x1")
    if (nh, nw) == (h, w):
        return pos.copy()

    def coords(src, dst):
        if dst == 1 or src == 1:
            c = np.full(dst, (src - 1) / 2.0)
        else:
            c = np.arange(dst) * ((src - 1) / (dst - 1))
        lo = np.clip(np.floor(c).astype(int), 0, src - 1)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, (c - lo).astype(pos.dtype)

    y0, y1, fy = coords(h, nh)
    x0, x1, fx = coords(w, nw)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = pos[y0][:, x0] * (1 - fx) + pos[y0][:, x1] * fx
    bot = pos[y1][:, x0] * (1 - fx) + pos[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(pos.dtype)


def resize_model_grid(params: Params, cfg: ModelConfig, image_size: int) -> ModelConfig:
    """Resize encoder and decoder position embeddings in place for a new image size."""
    enc = cfg.encoder
    new_enc = replace(enc, image_size=image_size)
    old, new = enc.grid, new_enc.grid
    for name in ("encoder.pos_embed", "decoder.pos_embed"):
        if name in params:
            p = params[name].data
            grid = interpolate_pos_embed(p.reshape(old + (p.shape[-1],)), new)
            params[name] = Tensor(grid.reshape(new[0] * new[1], p.shape[-1]))
    return ModelConfig(new_enc, cfg.slots, cfg.decoder)


# ---------------------------------------------------------------------------
# full forward

@dataclass
class ForwardOutput:
    features: Tensor
    state: SlotState
    decoded: DecodeOutput


def forward(images, cfg: ModelConfig, params: Params, noise: np.ndarray, topk: int | None = None,
            features: Tensor | None = None, counter: EvalCounter | None = None) -> ForwardOutput:
    """Encoder -> slot attention -> decoder.  Precomputed ``features`` skip the encoder."""
    if features is None:
        features = encode(images, cfg.encoder, params)
    state = slot_attention(features, cfg.slots, params, noise=noise)
    if topk is None:
        dec = decode_full(state, params, counter)
    else:
        dec = decode_topk(state, topk, params, counter)
    return ForwardOutput(features, state, dec)
