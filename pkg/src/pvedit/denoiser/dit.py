"""Toy video diffusion transformer with cross-attention over prompt slots.

Videos are cut into ``patch x patch`` tiles per frame; every tile is a token.
Blocks run self-attention over all video tokens (temporal rotary embedding on
half of each head, additive learned spatial embedding at the input), then
cross-attention to the prompt-slot embeddings, then an MLP. The diffusion
step conditions the blocks through adaptive layer-norm modulation.

Training uses dense torch attention. Inference (``predict_eps``) sends every
cross-attention through the streaming kernels in :mod:`pvedit.attention`, so a
paired orig/edit pass can replace attention-map columns without ever
building a map.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..attention import AuxMeter, FrameWindow, ReplacementSpec, attn_amr, attn_streaming, build_window_mask, WindowSpec
from ..core import atomic_write_bytes
from ..errors import CapacityError, ContractError, FormatError, ShapeMismatchError, TruncationError
from ..synth import NULL_PROMPT, PROMPT_LEN, VOCAB_SIZE


@dataclass(frozen=True)
class ToyDiTConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 128
    heads: int = 4
    layers: int = 4
    vocab: int = VOCAB_SIZE
    prompt_len: int = PROMPT_LEN
    max_frames: int = 8
    mlp_ratio: int = 4
    steps: int = 1000
    # identity activations, no norms, uniform attention, additive time
    # conditioning: every weight enters the output linearly
    linear: bool = False

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"frame {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 4:
            raise ValueError("head width must be a multiple of 4 for the temporal rotary embedding")

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half).to(t.device)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _rotate(x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Rotary embedding on the first half of the last axis; ``pos`` broadcasts over tokens."""
    dh = x.shape[-1]
    rot = dh // 2
    half = rot // 2
    freqs = torch.exp(-math.log(100.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = (pos.to(torch.float64)[..., None] * freqs).to(x.dtype)
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2, rest = x[..., :half], x[..., half:rot], x[..., rot:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos, rest], dim=-1)


class CrossAttnRouter:
    """Default routing: dense softmax attention in torch (differentiable)."""

    def __call__(self, layer: int, q, k, v, linear: bool):
        if linear:
            return v.mean(dim=-2, keepdim=True).expand(*q.shape[:-1], v.shape[-1])
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return w @ v


class KernelRouter(CrossAttnRouter):
    """Inference routing through the numpy streaming kernels.

    ``pairs`` lists (source_row, target_row, spec) triples over the batch; a
    target row's cross-attention is computed by ``attn_amr`` together with its
    source row. Every other row uses ``attn_streaming``.
    """

    def __init__(self, pairs=(), meter: AuxMeter | None = None):
        self.pairs = list(pairs)
        self.meter = meter
        self.peak_aux = 0
        self.calls = 0

    def _meter(self):
        if self.meter is None:
            return None
        self.meter.reset()
        return self.meter

    def _note(self):
        self.calls += 1
        if self.meter is not None:
            self.peak_aux = max(self.peak_aux, self.meter.peak)

    def __call__(self, layer, q, k, v, linear):
        if linear:
            return super().__call__(layer, q, k, v, linear)
        qn = q.detach().cpu().numpy()
        kn = k.detach().cpu().numpy()
        vn = v.detach().cpu().numpy()
        B, H = qn.shape[:2]
        out = np.empty(qn.shape[:-1] + (vn.shape[-1],), dtype=np.float32)
        paired = {}
        for src, dst, spec in self.pairs:
            if dst in paired or src == dst:
                raise ContractError(f"batch row {dst} paired twice or with itself")
            paired[dst] = (src, spec)
        done = set()
        for dst, (src, spec) in paired.items():
            for h in range(H):
                o1, o2 = attn_amr(qn[src, h], kn[src, h], vn[src, h], qn[dst, h], kn[dst, h], vn[dst, h], spec,
                                  meter=self._meter())
                self._note()
                out[dst, h] = o2
                if src not in paired:
                    out[src, h] = o1
            done.update((src, dst))
        for b in range(B):
            if b in done:
                continue
            for h in range(H):
                out[b, h] = attn_streaming(qn[b, h], kn[b, h], vn[b, h], meter=self._meter())
                self._note()
        return torch.from_numpy(out).to(q.dtype)


class Block(nn.Module):
    def __init__(self, cfg: ToyDiTConfig):
        super().__init__()
        d = cfg.dim
        self.cfg = cfg
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.cq = nn.Linear(d, d)
        self.ckv = nn.Linear(d, 2 * d)
        self.cproj = nn.Linear(d, d)
        self.fc1 = nn.Linear(d, cfg.mlp_ratio * d)
        self.fc2 = nn.Linear(cfg.mlp_ratio * d, d)
        if not cfg.linear:
            self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
            self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
            self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
            self.mod = nn.Linear(d, 6 * d)

    def _norm(self, name, x):
        return x if self.cfg.linear else getattr(self, name)(x)

    def _act(self, x):
        return x if self.cfg.linear else F.gelu(x)

    def _heads(self, x):
        B, N, _ = x.shape
        return x.view(B, N, self.cfg.heads, -1).transpose(1, 2)

    def self_attention(self, x, frame_pos, window: FrameWindow | None):
        cfg = self.cfg
        B, N, d = x.shape
        q, k, v = (self._heads(t) for t in self.qkv(x).chunk(3, dim=-1))
        if cfg.linear:
            out = v.mean(dim=-2, keepdim=True).expand_as(v) if window is None else self._window_mean(v, window)
        elif window is None:
            q = _rotate(q, frame_pos)
            k = _rotate(k, frame_pos)
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            out = self._windowed(q, k, v, window)
        return self.proj(out.transpose(1, 2).reshape(B, N, d))

    def _window_mean(self, v, window: FrameWindow):
        t = window.tokens_per_frame
        mask = torch.from_numpy(window.token_mask()).to(v.dtype)
        return (mask @ v) / mask.sum(dim=-1, keepdim=True)

    def _windowed(self, q, k, v, window: FrameWindow):
        # per query frame: admitted key frames and their effective positions
        t = window.tokens_per_frame
        L = window.mask.shape[0]
        outs = []
        for f in range(L):
            cols = np.flatnonzero(window.mask[f])
            key_idx = torch.from_numpy((cols[:, None] * t + np.arange(t)[None, :]).reshape(-1))
            key_pos = torch.from_numpy(np.repeat(window.positions[f, cols], t))
            qf = _rotate(q[:, :, f * t:(f + 1) * t], torch.full((t,), float(f)))
            kf = _rotate(k[:, :, key_idx], key_pos)
            outs.append(F.scaled_dot_product_attention(qf, kf, v[:, :, key_idx]))
        return torch.cat(outs, dim=2)

    def cross_attention(self, x, ctx, router: CrossAttnRouter, layer: int):
        B, N, d = x.shape
        q = self._heads(self.cq(x))
        k, v = (self._heads(t) for t in self.ckv(ctx).chunk(2, dim=-1))
        out = router(layer, q, k, v, self.cfg.linear)
        return self.cproj(out.transpose(1, 2).reshape(B, N, d))

    def forward(self, x, temb, ctx, frame_pos, window, router, layer):
        if self.cfg.linear:
            x = x + self.self_attention(x, frame_pos, window)
            x = x + self.cross_attention(x, ctx, router, layer)
            return x + self.fc2(self.fc1(x))
        sh1, sc1, g1, sh2, sc2, g2 = self.mod(F.silu(temb))[:, None, :].chunk(6, dim=-1)
        x = x + g1 * self.self_attention(self.norm1(x) * (1 + sc1) + sh1, frame_pos, window)
        x = x + self.cross_attention(self.norm2(x), ctx, router, layer)
        h = self.norm3(x) * (1 + sc2) + sh2
        return x + g2 * self.fc2(self._act(self.fc1(h)))


class ToyDiT(nn.Module):
    """Noise predictor; also satisfies the denoiser protocol via :meth:`predict_eps`."""

    def __init__(self, cfg: ToyDiTConfig = ToyDiTConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.patch_in = nn.Linear(cfg.patch_dim, d)
        self.pos = nn.Parameter(torch.randn(cfg.tokens_per_frame, d) * 0.02)
        self.prompt_emb = nn.Embedding(cfg.vocab, d)
        self.t1 = nn.Linear(d, d)
        self.t2 = nn.Linear(d, d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        if not cfg.linear:
            self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
            self.final_mod = nn.Linear(d, 2 * d)
        self.patch_out = nn.Linear(d, cfg.patch_dim)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.5)

    @property
    def null_prompt(self):
        return NULL_PROMPT[: self.cfg.prompt_len]

    # -- tensor layout helpers

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        B, Fr, H, W, C = x.shape
        p = self.cfg.patch
        x = x.reshape(B, Fr, H // p, p, W // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, Fr * (H // p) * (W // p), p * p * C)

    def unpatchify(self, tokens: torch.Tensor, frames: int) -> torch.Tensor:
        cfg = self.cfg
        p = cfg.patch
        B = tokens.shape[0]
        x = tokens.reshape(B, frames, cfg.height // p, cfg.width // p, p, p, cfg.channels)
        return x.permute(0, 1, 2, 4, 3, 5, 6).reshape(B, frames, cfg.height, cfg.width, cfg.channels)

    def forward(self, x, t, prompt, window: FrameWindow | None = None, router: CrossAttnRouter | None = None):
        """``x``: (B, F, H, W, C); ``t``: (B,) steps; ``prompt``: (B, P) token ids."""
        cfg = self.cfg
        router = router or CrossAttnRouter()
        B, Fr = x.shape[:2]
        if x.shape[2:] != (cfg.height, cfg.width, cfg.channels):
            raise ShapeMismatchError(f"frame shape {tuple(x.shape[2:])} does not match the model config")
        if window is None and Fr > cfg.max_frames:
            raise CapacityError(f"{Fr} frames exceed max_frames={cfg.max_frames}; pass a WindowSpec")
        tpf = cfg.tokens_per_frame
        h = self.patch_in(self.patchify(x)) + self.pos.repeat(Fr, 1)[None]
        temb = self.t2(self._act(self.t1(timestep_embedding(t, cfg.dim).to(h.dtype))))
        ctx = self.prompt_emb(prompt)
        frame_pos = torch.arange(Fr, dtype=h.dtype).repeat_interleave(tpf)
        if cfg.linear:
            h = h + temb[:, None, :]
        for li, blk in enumerate(self.blocks):
            h = blk(h, temb, ctx, frame_pos, window, router, li)
        if not cfg.linear:
            shift, scale = self.final_mod(F.silu(temb))[:, None, :].chunk(2, dim=-1)
            h = self.final_norm(h) * (1 + scale) + shift
        return self.unpatchify(self.patch_out(h), Fr)

    def _act(self, x):
        return x if self.cfg.linear else F.silu(x)

    # -- inference (numpy in, numpy out)

    def _window_for(self, frames: int, window):
        if isinstance(window, WindowSpec):
            return build_window_mask(window)
        if window is None and frames > self.cfg.max_frames:
            raise CapacityError(f"{frames} frames exceed max_frames={self.cfg.max_frames}; pass a WindowSpec")
        return window

    @torch.no_grad()
    def eps_batch(self, videos: np.ndarray, steps, prompts, *, pairs=(), window=None, meter=None) -> np.ndarray:
        videos = np.asarray(videos, dtype=np.float32)
        B = videos.shape[0]
        t = torch.as_tensor(np.broadcast_to(np.asarray(steps), (B,)).copy(), dtype=torch.long)
        p = torch.as_tensor(np.asarray(prompts, dtype=np.int64).reshape(B, -1))
        if p.shape[1] != self.cfg.prompt_len:
            raise ShapeMismatchError(f"prompt length {p.shape[1]} != {self.cfg.prompt_len}")
        router = KernelRouter(pairs, meter)
        out = self(torch.from_numpy(videos), t, p, self._window_for(videos.shape[1], window), router)
        self.last_router = router
        return out.numpy().astype(np.float32)

    def predict_eps(self, v, i, prompt, attn_ctl: "AttnControl | None" = None, window=None) -> np.ndarray:
        """Noise prediction for one video; with ``attn_ctl`` it is the edit branch of a paired pass."""
        v = np.asarray(v, dtype=np.float32)
        if attn_ctl is None:
            return self.eps_batch(v[None], i, [prompt], window=window)[0]
        src = np.asarray(attn_ctl.source_video, dtype=np.float32)
        if src.shape != v.shape:
            raise ShapeMismatchError(f"paired branches differ in shape: {src.shape} vs {v.shape}")
        out = self.eps_batch(np.stack([src, v]), i, [attn_ctl.source_prompt, prompt],
                             pairs=[(0, 1, attn_ctl.spec)], window=window, meter=attn_ctl.meter)
        return out[1]


@dataclass
class AttnControl:
    """Pairs an edit-branch evaluation with a source branch whose cross-attention maps it borrows."""

    spec: ReplacementSpec
    source_video: np.ndarray
    source_prompt: tuple
    meter: AuxMeter | None = None


def predict_eps(model: ToyDiT, v, i, prompt, attn_ctl: AttnControl | None = None, window=None) -> np.ndarray:
    return model.predict_eps(v, i, prompt, attn_ctl, window)


def predict_eps_paired(model: ToyDiT, v_orig, v_edit, i, prompt_orig, prompt_edit, spec: ReplacementSpec,
                       *, guidance_scale: float | None = None, window=None, meter=None):
    """One paired pass returning ``(eps_orig, eps_edit)``.

    With guidance, the conditional edit row borrows maps from the conditional
    orig row; unconditional rows are evaluated plainly. All rows share one
    forward call.
    """
    v_orig = np.asarray(v_orig, np.float32)
    v_edit = np.asarray(v_edit, np.float32)
    if v_orig.shape != v_edit.shape:
        raise ShapeMismatchError(f"paired branches differ in shape: {v_orig.shape} vs {v_edit.shape}")
    if guidance_scale is None:
        out = model.eps_batch(np.stack([v_orig, v_edit]), i, [prompt_orig, prompt_edit],
                              pairs=[(0, 1, spec)], window=window, meter=meter)
        return out[0], out[1]
    null = model.null_prompt
    out = model.eps_batch(np.stack([v_orig, v_orig, v_edit, v_edit]), i,
                          [prompt_orig, null, prompt_edit, null], pairs=[(0, 2, spec)], window=window, meter=meter)
    from ..schedulers import cfg_combine
    return cfg_combine(out[1], out[0], guidance_scale), cfg_combine(out[3], out[2], guidance_scale)


# ---------------------------------------------------------------- checkpoints

VCKP_MAGIC = b"VCKP"


def save_checkpoint(model: ToyDiT, path, extra: dict | None = None) -> None:
    """``VCKP``, u32 config length + JSON config, u32 record count, then named f32 records."""
    cfg_blob = json.dumps({"model": dataclasses.asdict(model.cfg), "extra": extra or {}}, sort_keys=True).encode()
    parts = [VCKP_MAGIC, struct.pack("<I", len(cfg_blob)), cfg_blob]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<H", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> tuple[ToyDiT, dict]:
    buf = Path(path).read_bytes()

    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise TruncationError("checkpoint truncated")
        return struct.unpack_from(fmt, buf, off), off + size

    if buf[:4] != VCKP_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {VCKP_MAGIC!r}")
    (n,), off = take("<I", 4)
    meta = json.loads(buf[off:off + n].decode())
    off += n
    model = ToyDiT(ToyDiTConfig(**meta["model"]))
    (count,), off = take("<I", off)
    state = {}
    for _ in range(count):
        (ln,), off = take("<H", off)
        name = buf[off:off + ln].decode()
        off += ln
        (rank,), off = take("<H", off)
        dims, off = take(f"<{rank}I", off)
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if off + size > len(buf):
            raise TruncationError(f"parameter {name} truncated")
        state[name] = torch.from_numpy(np.frombuffer(buf, "<f4", int(np.prod(dims, dtype=np.int64)), off).reshape(dims).copy())
        off += size
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint records")
    model.load_state_dict(state)
    model.eval()
    return model, meta.get("extra", {})
