"""A small joint-attention transformer predicting flow velocities.

Parameters live in a flat ``name -> tensor`` mapping so the same forward
function serves base weights, adapted weights, and float64 copies for
gradient checks. Instruction tokens, the noisy target, and every reference
share one self-attention stream; segment embeddings tell references apart
and a 2D rotary encoding carries cell positions.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .instructions import CELLS, MAX_REFS, PAD_ID, VOCAB_SIZE, Instruction, InstructionError
from .packing import PackedSequence


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    vocab: int = VOCAB_SIZE
    channels: int = 48
    max_refs: int = MAX_REFS
    ff_mult: int = 4
    rope_base: float = 100.0

    def __post_init__(self) -> None:
        for name in ("layers", "width", "heads", "vocab", "channels", "max_refs", "ff_mult"):
            if getattr(self, name) <= 0:
                raise BackboneError(f"config.{name} must be positive")
        if self.width % (2 * self.heads):
            raise BackboneError(f"width {self.width} is not divisible by 2*heads={2 * self.heads}")
        if self.head_dim % 4:
            raise BackboneError(f"head dimension {self.head_dim} must be divisible by 4 for 2D rotary encoding")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


SKIP_DATA_STD = 0.5
# head.skip starts at zero; the multiplier lets an adaptive optimizer reach unit gain in tens of steps
SKIP_GAIN = 10.0

ADAPTER_TARGETS = ("attn.qkv.w", "attn.out.w", "ff.fc1.w", "ff.fc2.w")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    w, c, ff = config.width, config.channels, config.width * config.ff_mult
    shapes: dict[str, tuple[int, ...]] = {
        "in_proj.w": (c, w),
        "in_proj.b": (w,),
        "text_embed": (config.vocab, w),
        "segment_embed": (config.max_refs + 2, w),
        "time.w1": (w, w),
        "time.b1": (w,),
        "time.w2": (w, w),
        "time.b2": (w,),
    }
    for i in range(config.layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (w,), p + "ln1.b": (w,),
            p + "attn.qkv.w": (w, 3 * w), p + "attn.qkv.b": (3 * w,),
            p + "attn.out.w": (w, w), p + "attn.out.b": (w,),
            p + "ln2.g": (w,), p + "ln2.b": (w,),
            p + "ff.fc1.w": (w, ff), p + "ff.fc1.b": (ff,),
            p + "ff.fc2.w": (ff, w), p + "ff.fc2.b": (w,),
        })
    shapes.update({"final_ln.g": (w,), "final_ln.b": (w,), "head.w": (w, c), "head.b": (c,), "head.skip": (c,)})
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.arrays[name]

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.arrays.values())).dtype

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            a = self.arrays[name].detach().cpu().to(torch.float32).contiguous().numpy()
            h.update(name.encode())
            h.update(str(a.shape).encode())
            h.update(a.astype("<f4").tobytes())
        return h.hexdigest()

    def to(self, dtype: torch.dtype) -> ModelParams:
        return ModelParams(self.config, {k: v.detach().to(dtype).clone() for k, v in self.arrays.items()})

    def clone(self) -> ModelParams:
        return ModelParams(self.config, {k: v.detach().clone() for k, v in self.arrays.items()})

    def check(self) -> None:
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.arrays):
            missing = sorted(set(shapes) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(shapes))
            raise BackboneError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, shape in shapes.items():
            if tuple(self.arrays[name].shape) != shape:
                raise BackboneError(f"{name} has shape {tuple(self.arrays[name].shape)}, expected {shape}")
            if not torch.isfinite(self.arrays[name]).all():
                raise BackboneError(f"{name} has non-finite values")


def init_params(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ModelParams:
    gen = torch.Generator().manual_seed(int(seed))
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("head.") or name.endswith(".b"):
            a = torch.zeros(shape, dtype=torch.float64)
        elif name.endswith(".g"):
            a = torch.ones(shape, dtype=torch.float64)
        else:
            a = torch.randn(shape, generator=gen, dtype=torch.float64) * 0.02
        arrays[name] = a.to(dtype)
    return ModelParams(config, arrays)


# -- rotary encoding -------------------------------------------------------

def _rope_freqs(head_dim: int, base: float, dtype) -> torch.Tensor:
    quarter = head_dim // 4
    return base ** (-torch.arange(quarter, dtype=torch.float64) / quarter).to(dtype)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, base: float = 100.0) -> torch.Tensor:
    """Rotate the last dim of ``x``: first half by row angle, second half by col angle.

    ``positions`` has shape ``x.shape[:-1] + (2,)`` up to broadcasting.
    """
    d = x.shape[-1]
    if d % 4:
        raise BackboneError(f"head dimension {d} must be divisible by 4")
    freqs = _rope_freqs(d, base, x.dtype)
    out = []
    for axis, chunk in enumerate(x.split(d // 2, dim=-1)):
        ang = positions[..., axis : axis + 1].to(x.dtype) * freqs
        cos, sin = torch.cos(ang), torch.sin(ang)
        even, odd = chunk[..., 0::2], chunk[..., 1::2]
        rot = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
        out.append(rot.flatten(-2))
    return torch.cat(out, dim=-1)


def rope_rotate(vector, position, base: float = 100.0) -> np.ndarray:
    v = torch.as_tensor(np.asarray(vector, dtype=np.float64))
    pos = torch.as_tensor(np.asarray(position, dtype=np.float64))
    return apply_rope(v, pos, base).numpy()


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    """Padded model inputs; the first ``target_len`` rows of every sample are the target."""

    tokens: torch.Tensor     # B x N x C
    positions: torch.Tensor  # B x (N + M) x 2, rotary coordinates on the target grid
    segments: torch.Tensor   # B x N
    text: torch.Tensor       # B x M
    mask: torch.Tensor       # B x (N + M), True = real token
    target_len: int

    @property
    def size(self) -> int:
        return int(self.tokens.shape[0])


def collate(packs: Sequence[PackedSequence], instructions: Sequence[Instruction], config: ModelConfig,
            dtype: torch.dtype = torch.float32) -> Batch:
    if len(packs) != len(instructions) or not packs:
        raise BackboneError("need one instruction per packed sequence and at least one sample")
    target_len = packs[0].target_len
    if any(p.target_len != target_len for p in packs):
        raise BackboneError("all samples in a batch must share target_len")
    for p in packs:
        if p.channels != config.channels:
            raise BackboneError(f"tokens have {p.channels} channels, model expects {config.channels}")
        if p.num_refs > config.max_refs:
            raise BackboneError(f"{p.num_refs} references exceed max_refs={config.max_refs}")
    texts = []
    for ins, p in zip(instructions, packs):
        ids = ins.token_ids
        if any(not 0 <= i < config.vocab for i in ids):
            raise InstructionError(f"instruction token outside vocabulary of size {config.vocab}")
        ins.check_refs(p.num_refs)
        texts.append(ids)
    b = len(packs)
    n = max(len(p) for p in packs)
    m = max(1, max(len(t) for t in texts))
    tokens = np.zeros((b, n, config.channels))
    positions = np.zeros((b, n + m, 2))
    segments = np.zeros((b, n), dtype=np.int64)
    text = np.full((b, m), PAD_ID, dtype=np.int64)
    mask = np.zeros((b, n + m), dtype=bool)
    for i, (p, ids, ins) in enumerate(zip(packs, texts, instructions)):
        tokens[i, : len(p)] = p.tokens
        positions[i, : len(p)] = rotary_positions(p)
        segments[i, : len(p)] = p.segments
        text[i, : len(ids)] = ids
        mask[i, : len(p)] = True
        mask[i, n : n + len(ids)] = True
        positions[i, n : n + len(ids)] = text_positions(ins, p)
    return Batch(
        tokens=torch.as_tensor(tokens, dtype=dtype),
        positions=torch.as_tensor(positions),
        segments=torch.as_tensor(segments),
        text=torch.as_tensor(text),
        mask=torch.as_tensor(mask),
        target_len=target_len,
    )


def _grid(positions: np.ndarray) -> np.ndarray:
    return positions.max(axis=0) + 1


def rotary_positions(packed: PackedSequence) -> np.ndarray:
    """Cell indices mapped onto the target grid.

    References are resized to fit the budget, so their grids differ from the
    target's. Scaling each segment's cell centres onto the target grid lets
    relative rotary offsets mean the same image displacement for every segment.
    """
    out = packed.positions.astype(np.float64)
    target = _grid(packed.positions[: packed.target_len])
    for k in range(1, packed.num_refs + 1):
        sel = packed.segments == k
        scale = target / _grid(packed.positions[sel])
        out[sel] = (out[sel] + 0.5) * scale - 0.5
    return out


def text_positions(instruction: Instruction, packed: PackedSequence) -> np.ndarray:
    """Instruction tokens sit at the centre of the target-grid quadrant they name."""
    rows, cols = _grid(packed.positions[: packed.target_len])
    out = np.zeros((len(instruction.token_ids), 2))
    for j, cell in enumerate(instruction.token_cells):
        qr, qc = divmod(CELLS.index(cell), 2)
        out[j] = (qr + 0.5) * rows / 2 - 0.5, (qc + 0.5) * cols / 2 - 0.5
    return out


def with_target(batch: Batch, target_tokens: torch.Tensor) -> Batch:
    """Replace the target rows (e.g. the current noisy state) of a collated batch."""
    tokens = torch.cat([target_tokens.to(batch.tokens.dtype), batch.tokens[:, batch.target_len :]], dim=1)
    return Batch(tokens, batch.positions, batch.segments, batch.text, batch.mask, batch.target_len)


def expand(batch: Batch, repeats: int) -> Batch:
    """Repeat every sample ``repeats`` times along the batch axis."""
    r = lambda x: x.repeat_interleave(repeats, dim=0)  # noqa: E731
    return Batch(r(batch.tokens), r(batch.positions), r(batch.segments), r(batch.text), r(batch.mask),
                 batch.target_len)


# -- forward ----------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)


def _layer_norm(x, g, b):
    return F.layer_norm(x, (x.shape[-1],), g, b, eps=1e-6)


def forward_batch(params: ModelParams, batch: Batch, t) -> torch.Tensor:
    """Predicted velocity for the target rows, shape ``B x target_len x C``."""
    cfg = params.config
    P = params.arrays
    dtype = P["in_proj.w"].dtype
    b = batch.size
    t = torch.as_tensor(t, dtype=dtype).reshape(-1)
    if t.numel() == 1:
        t = t.expand(b)

    lat = batch.tokens.to(dtype) @ P["in_proj.w"] + P["in_proj.b"]
    lat = lat + P["segment_embed"][batch.segments]
    txt = P["text_embed"][batch.text] + P["segment_embed"][cfg.max_refs + 1]
    temb = timestep_embedding(t, cfg.width)
    temb = F.gelu(temb @ P["time.w1"] + P["time.b1"]) @ P["time.w2"] + P["time.b2"]
    h = torch.cat([lat, txt], dim=1) + temb[:, None, :]

    heads, hd = cfg.heads, cfg.head_dim
    pos = batch.positions[:, :, None, :]
    attn_mask = batch.mask[:, None, None, :]
    for i in range(cfg.layers):
        p = f"layers.{i}."
        x = _layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
        qkv = (x @ P[p + "attn.qkv.w"] + P[p + "attn.qkv.b"]).view(b, -1, 3, heads, hd)
        q, k, v = qkv.unbind(dim=2)
        q = apply_rope(q, pos, cfg.rope_base).transpose(1, 2)
        k = apply_rope(k, pos, cfg.rope_base).transpose(1, 2)
        v = v.transpose(1, 2)
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        a = a.transpose(1, 2).reshape(b, -1, cfg.width)
        h = h + a @ P[p + "attn.out.w"] + P[p + "attn.out.b"]
        x = _layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
        x = F.gelu(x @ P[p + "ff.fc1.w"] + P[p + "ff.fc1.b"], approximate="tanh")
        h = h + x @ P[p + "ff.fc2.w"] + P[p + "ff.fc2.b"]

    h = _layer_norm(h[:, : batch.target_len], P["final_ln.g"], P["final_ln.b"])
    skip = skip_scale(t)[:, None, None] * batch.tokens[:, : batch.target_len].to(dtype)
    return h @ P["head.w"] + P["head.b"] + SKIP_GAIN * P["head.skip"] * skip


def skip_scale(t: torch.Tensor, data_std: float = SKIP_DATA_STD) -> torch.Tensor:
    """Least-squares coefficient of x_t in the velocity x0 - x1 for data of scale ``data_std``.

    It is -1 at pure noise, so the learned ``head.skip`` gain can pass the
    noise through directly instead of the network having to reproduce it.
    """
    s2 = data_std ** 2
    return (t * s2 - (1 - t)) / (t * t * s2 + (1 - t) ** 2)


def forward(params: ModelParams, packed: PackedSequence, t: float, instruction: Instruction) -> np.ndarray:
    """Velocity for one packed sequence, ``target_len x channels``."""
    if not 0.0 < float(t) < 1.0:
        raise BackboneError(f"timestep {t} outside (0, 1)")
    batch = collate([packed], [instruction], params.config, dtype=params.dtype)
    with torch.no_grad():
        return forward_batch(params, batch, float(t))[0].double().numpy()


# -- gradients ----------------------------------------------------------------

class NonFiniteLossError(FloatingPointError):
    pass


def grad(params: ModelParams, loss_fn: Callable[[ModelParams], torch.Tensor]):
    """Loss value and exact gradients of ``loss_fn`` w.r.t. every array of ``params``."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.arrays.items()}
    loss = loss_fn(ModelParams(params.config, leaves))
    if not torch.is_tensor(loss) or not loss.requires_grad:
        value = float(loss)
        if not math.isfinite(value):
            raise NonFiniteLossError(_non_finite_cause(params))
        return value, {k: torch.zeros_like(v) for k, v in params.arrays.items()}
    if not torch.isfinite(loss):
        raise NonFiniteLossError(_non_finite_cause(params))
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    out = {k: (g if g is not None else torch.zeros_like(leaves[k])).detach() for k, g in zip(names, grads)}
    return float(loss.detach()), out


def _non_finite_cause(params: ModelParams) -> str:
    for name in sorted(params.arrays):
        if not torch.isfinite(params.arrays[name]).all():
            return f"non-finite loss; first non-finite array: {name}"
    return "non-finite loss; all parameter arrays are finite (inputs or loss function produced it)"


# -- low-rank adapters ----------------------------------------------------

@dataclass
class AdapterParams:
    rank: int
    scale: float
    factors: dict[str, tuple[torch.Tensor, torch.Tensor]]  # name -> (down: in x r, up: r x out)

    def tensors(self) -> list[torch.Tensor]:
        return [t for pair in self.factors.values() for t in pair]


def init_adapter(params: ModelParams, rank: int = 4, alpha: float = 8.0, seed: int = 0,
                 targets: Sequence[str] = ADAPTER_TARGETS) -> AdapterParams:
    """Down factors random, up factors zero, so the adapter starts as a no-op."""
    if rank < 1:
        raise BackboneError("adapter rank must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    factors = {}
    for name in sorted(params.arrays):
        if not name.endswith(tuple(targets)):
            continue
        d_in, d_out = params.arrays[name].shape
        down = (torch.randn(d_in, rank, generator=gen, dtype=torch.float64) / math.sqrt(d_in)).to(params.dtype)
        up = torch.zeros(rank, d_out, dtype=params.dtype)
        factors[name] = (down, up)
    return AdapterParams(rank, alpha / rank, factors)


def apply_adapter(params: ModelParams, adapter: AdapterParams) -> ModelParams:
    """Effective weights ``W + scale * down @ up``; differentiable in the factors."""
    arrays = dict(params.arrays)
    for name, (down, up) in adapter.factors.items():
        if name not in arrays:
            raise BackboneError(f"adapter targets unknown array {name}")
        if not name.endswith(ADAPTER_TARGETS):
            raise BackboneError(f"adapters apply only to projection arrays, not {name}")
        base = arrays[name]
        if down.shape != (base.shape[0], adapter.rank) or up.shape != (adapter.rank, base.shape[1]):
            raise BackboneError(
                f"adapter factors {tuple(down.shape)} @ {tuple(up.shape)} do not match {name} {tuple(base.shape)}"
            )
        arrays[name] = base + adapter.scale * (down @ up)
    return ModelParams(params.config, arrays)


def merge_adapter(params: ModelParams, adapter: AdapterParams) -> ModelParams:
    with torch.no_grad():
        merged = apply_adapter(params, adapter)
    return ModelParams(params.config, {k: v.detach().clone() for k, v in merged.arrays.items()})
