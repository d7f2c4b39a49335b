"""ViT encoder/decoder with boundary-parameterized denoising.

Encoder tokens are laid out as ``[CLS, TIME, CLASS?, PATCH...]``. The decoder
works on patch tokens only, receives mirror-paired skips from the encoder and
is conditioned on time (and class) through adaLN-Zero.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedules import DiffusionConfig, cin, cskip_cout


@dataclass
class NetworkConfig:
    enc_blocks: int = 4
    dec_blocks: int = 4
    dim_enc: int = 192
    dim_dec: int = 192
    heads_enc: int = 3
    heads_dec: int = 3
    patch: int = 4
    resolution: int = 32
    channels: int = 3
    num_classes: int = 10
    mlp_ratio: float = 4.0
    dec_dropout: float = 0.0
    time_freqs: int = 128

    def __post_init__(self):
        if self.resolution % self.patch:
            raise ValueError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        if self.dim_enc % self.heads_enc or self.dim_dec % self.heads_dec:
            raise ValueError("model dims must be divisible by head counts")
        if self.dec_blocks > self.enc_blocks:
            raise ValueError("decoder cannot have more blocks than the encoder has skips")

    @property
    def num_patches(self) -> int:
        return (self.resolution // self.patch) ** 2

    @property
    def conditional(self) -> bool:
        return self.num_classes > 0

    @property
    def extra_tokens(self) -> int:
        return 3 if self.conditional else 2


@dataclass
class EncoderOutput:
    cls_feature: torch.Tensor
    patch_features: torch.Tensor
    hidden: list[torch.Tensor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# tokenization


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, C, H, W)`` to ``(B, (H/p)*(W/p), C*p*p)``."""
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ValueError(f"image side {H}x{W} not divisible by patch {patch}")
    x = x.reshape(B, C, H // patch, patch, W // patch, patch)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(B, (H // patch) * (W // patch), C * patch * patch)


def unpatchify(tokens: torch.Tensor, patch: int, channels: int = 3) -> torch.Tensor:
    B, L, D = tokens.shape
    side = math.isqrt(L)
    if side * side != L or D != channels * patch * patch:
        raise ValueError(f"cannot unpatchify {tuple(tokens.shape)} with patch {patch}")
    x = tokens.reshape(B, side, side, channels, patch, patch)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(B, channels, side * patch, side * patch)


def sincos_pos_embed(dim: int, side: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine positional table of shape ``(side*side, dim)``."""
    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gy, gx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    half = dim // 2
    emb = np.concatenate([one_axis(half, gy.reshape(-1)), one_axis(dim - half, gx.reshape(-1))], axis=1)
    return torch.from_numpy(emb[:, :dim]).float()


class TimeEmbedding(nn.Module):
    """Sinusoidal features of ``log t`` followed by a two-layer MLP."""

    def __init__(self, dim: int, freqs: int = 128):
        super().__init__()
        self.freqs = freqs
        self.mlp = nn.Sequential(nn.Linear(freqs, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        # log(0) would poison the output; the boundary coefficients zero F at t=0 anyway
        u = torch.log(t.clamp_min(1e-8)) / 4
        half = self.freqs // 2
        k = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        args = u[:, None] * k[None] * 100
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.mlp(emb.to(self.mlp[0].weight.dtype))


# ---------------------------------------------------------------------------
# blocks


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DecoderBlock(nn.Module):
    """adaLN-Zero transformer block with a fused encoder skip."""

    def __init__(self, dim, heads, mlp_ratio, dropout=0.0):
        super().__init__()
        self.skip = nn.Linear(2 * dim, dim)
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.drop = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def branches(self, x, skip, c):
        """Returns the fused stream and the two gated residual branches."""
        x = self.skip(torch.cat([x, skip], dim=-1))
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        a = g1.unsqueeze(1) * self.drop(self.attn(modulate(self.norm1(x), sh1, sc1)))
        m = g2.unsqueeze(1) * self.mlp(modulate(self.norm2(x + a), sh2, sc2))
        return x, a, m

    def forward(self, x, skip, c):
        x, a, m = self.branches(x, skip, c)
        return x + a + m


class FinalLayer(nn.Module):
    def __init__(self, dim, out_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_dim)

    def forward(self, x, c):
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


# ---------------------------------------------------------------------------
# networks


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig, diffusion: DiffusionConfig = DiffusionConfig()):
        super().__init__()
        self.cfg = cfg
        self.diffusion = diffusion
        d = cfg.dim_enc
        self.patch_embed = nn.Linear(cfg.channels * cfg.patch**2, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.time_embed = TimeEmbedding(d, cfg.time_freqs)
        if cfg.conditional:
            # the extra row is the null label used for unconditional passes
            self.class_embed = nn.Embedding(cfg.num_classes + 1, d)
        side = cfg.resolution // cfg.patch
        pos = torch.cat([torch.zeros(cfg.extra_tokens, d), sincos_pos_embed(d, side)])
        self.register_buffer("pos_embed", pos.unsqueeze(0), persistent=False)
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.heads_enc, cfg.mlp_ratio) for _ in range(cfg.enc_blocks))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.cls_token, std=0.02)
        if self.cfg.conditional:
            nn.init.normal_(self.class_embed.weight, std=0.02)

    def forward(self, x_t: torch.Tensor, t, labels: torch.Tensor | None = None) -> EncoderOutput:
        cfg = self.cfg
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != (cfg.channels, cfg.resolution, cfg.resolution):
            raise ValueError(f"expected (B, {cfg.channels}, {cfg.resolution}, {cfg.resolution}), got {tuple(x_t.shape)}")
        B = x_t.shape[0]
        t = _per_sample(t, x_t)
        scale = cin(t, self.diffusion).reshape(B, 1, 1, 1)
        tokens = [self.cls_token.expand(B, -1, -1), self.time_embed(t).unsqueeze(1)]
        if cfg.conditional:
            tokens.append(self.class_embed(_label_index(labels, B, cfg.num_classes)).unsqueeze(1))
        tokens.append(self.patch_embed(patchify(x_t * scale, cfg.patch)))
        h = torch.cat(tokens, dim=1) + self.pos_embed
        e = cfg.extra_tokens
        hidden = [h[:, e:]]
        for blk in self.blocks:
            h = blk(h)
            hidden.append(h[:, e:])
        h = self.norm(h)
        return EncoderOutput(h[:, 0], h[:, e:], hidden)


def _label_index(labels, batch: int, num_classes: int) -> torch.Tensor:
    if labels is None:
        return torch.full((batch,), num_classes, dtype=torch.long)
    labels = torch.as_tensor(labels, dtype=torch.long)
    return torch.where(labels < 0, torch.full_like(labels, num_classes), labels)


class Decoder(nn.Module):
    """Decoder block ``i`` (1-based) fuses the output of encoder block ``L - i``."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim_dec
        self.proj_in = nn.Linear(cfg.dim_enc, d)
        self.skip_proj = nn.Linear(cfg.dim_enc, d) if cfg.dim_enc != d else nn.Identity()
        self.time_embed = TimeEmbedding(d, cfg.time_freqs)
        if cfg.conditional:
            self.class_embed = nn.Embedding(cfg.num_classes + 1, d)
        self.blocks = nn.ModuleList(
            DecoderBlock(d, cfg.heads_dec, cfg.mlp_ratio, cfg.dec_dropout) for _ in range(cfg.dec_blocks)
        )
        self.final = FinalLayer(d, cfg.channels * cfg.patch**2)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        if self.cfg.conditional:
            nn.init.normal_(self.class_embed.weight, std=0.02)
        # adaLN-Zero: every modulation starts at zero, so residual branches are off
        for blk in self.blocks:
            nn.init.zeros_(blk.ada[-1].weight)
            nn.init.zeros_(blk.ada[-1].bias)
        nn.init.zeros_(self.final.ada[-1].weight)
        nn.init.zeros_(self.final.ada[-1].bias)

    def condition(self, t, labels, batch):
        c = self.time_embed(t)
        if self.cfg.conditional:
            c = c + self.class_embed(_label_index(labels, batch, self.cfg.num_classes))
        return c

    def forward(self, enc: EncoderOutput, t, labels=None) -> torch.Tensor:
        cfg = self.cfg
        if len(enc.hidden) != cfg.enc_blocks + 1 or enc.patch_features.shape[-1] != cfg.dim_enc:
            raise ValueError("encoder output does not match the decoder configuration")
        B = enc.patch_features.shape[0]
        c = self.condition(t, labels, B)
        x = self.proj_in(enc.patch_features)
        L = cfg.enc_blocks
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x, self.skip_proj(enc.hidden[L - i]), c)
        x = self.final(x, c)
        return unpatchify(x, cfg.patch, cfg.channels)


class Projector(nn.Sequential):
    """Three-layer MLP head used only by the contrastive branch."""

    def __init__(self, dim: int, hidden_ratio: int = 4):
        h = dim * hidden_ratio
        super().__init__(nn.Linear(dim, h), nn.GELU(), nn.Linear(h, h), nn.GELU(), nn.Linear(h, dim))


class EPGNet(nn.Module):
    """Encoder plus optional decoder and projector.

    Pre-training builds ``decoder=False, projector=True``; fine-tuning the
    reverse.
    """

    def __init__(self, cfg: NetworkConfig, diffusion: DiffusionConfig = DiffusionConfig(),
                 decoder: bool = True, projector: bool = False):
        super().__init__()
        self.cfg = cfg
        self.diffusion = diffusion
        self.encoder = Encoder(cfg, diffusion)
        self.decoder = Decoder(cfg) if decoder else None
        self.projector = Projector(cfg.dim_enc) if projector else None

    def encode(self, x_t, t, labels=None) -> EncoderOutput:
        return self.encoder(x_t, t, labels)

    def decode(self, enc: EncoderOutput, t, labels=None) -> torch.Tensor:
        if self.decoder is None:
            raise RuntimeError("this network has no decoder")
        return self.decoder(enc, t, labels)

    def raw(self, x_t, t, labels=None) -> torch.Tensor:
        """Unscaled network output ``F(x_t, t)``."""
        t = _per_sample(t, x_t)
        return self.decode(self.encode(x_t, t, labels), t, labels)

    def denoise(self, x_t, t, labels=None) -> torch.Tensor:
        """``c_skip(t) x_t + c_out(t) F(x_t, t)``; returns ``x_t`` exactly at ``t = 0``."""
        t = _per_sample(t, x_t)
        c_skip, c_out = cskip_cout(t, self.diffusion)
        out = self.raw(x_t, t, labels)
        return c_skip.reshape(-1, 1, 1, 1) * x_t + c_out.reshape(-1, 1, 1, 1) * out

    def project(self, feature: torch.Tensor) -> torch.Tensor:
        if self.projector is None:
            raise RuntimeError("this network has no projector")
        return self.projector(feature)

    forward = denoise


def _per_sample(t, x):
    t = torch.as_tensor(t, dtype=x.dtype)
    return t.expand(x.shape[0]) if t.ndim == 0 else t


# ---------------------------------------------------------------------------
# parameter sets


@torch.no_grad()
def ema_update(target: nn.Module, source: nn.Module, m: float) -> nn.Module:
    """``target <- m * target + (1 - m) * source`` over the target's parameters.

    ``source`` may hold extra modules (e.g. the decoder) that the target lacks.
    """
    if not 0 <= m <= 1:
        raise ValueError("EMA coefficient must lie in [0, 1]")
    src = dict(source.named_parameters())
    for name, p in target.named_parameters():
        q = src.get(name)
        if q is None or q.shape != p.shape:
            raise ValueError(f"parameter trees differ at {name!r}")
        if m == 1:
            continue
        if m == 0:
            p.copy_(q)
        else:
            p.mul_(m).add_(q, alpha=1 - m)
    return target


def freeze_copy(module: nn.Module) -> nn.Module:
    """Deep, non-trainable copy in eval mode."""
    frozen = copy.deepcopy(module)
    frozen.requires_grad_(False)
    frozen.eval()
    return frozen


def momentum_copy(net: EPGNet) -> EPGNet:
    """Encoder+projector copy updated only through :func:`ema_update`."""
    m = EPGNet(net.cfg, net.diffusion, decoder=False, projector=net.projector is not None)
    m.load_state_dict({k: v for k, v in net.state_dict().items() if not k.startswith("decoder.")})
    m.requires_grad_(False)
    return m


@dataclass
class ModelBundle:
    online: EPGNet
    momentum: EPGNet | None = None
    frozen: Encoder | None = None
    ema: EPGNet | None = None

    def parameter_sets(self) -> dict[str, nn.Module]:
        return {k: v for k, v in vars(self).items() if v is not None}


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
