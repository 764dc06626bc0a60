"""
Plain ViT/DeiT-style vision transformer

Pre-norm blocks (LN -> MSA -> residual, LN -> MLP -> residual), class token, learned positional
embeddings, classifier head on the class token. Every block can hand back its per-head attention
outputs (before the concat-and-projection), which is what the patch-similarity metric consumes.

Activation quantization sites are `nn.Identity` placeholders in the full-precision model, in front
of every matmul operand and on the residual stream (embedding output, each residual add);
`calibration.wrap_model` swaps them for quantizers.
"""
import logging
from dataclasses import dataclass, asdict
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, ModelStateError, NumericalError, ContractError

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    num_layers: int
    num_heads: int
    head_dim: int
    patch_size: int
    image_side: int
    num_classes: int
    mlp_ratio: float = 4.0
    in_chans: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ['num_layers', 'num_heads', 'head_dim', 'patch_size', 'image_side', 'num_classes', 'in_chans']:
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value}")
            setattr(self, name, int(value))
        if self.image_side % self.patch_size != 0:
            raise ConfigurationError(f"image_side {self.image_side} is not divisible by patch_size {self.patch_size}")
        if self.mlp_ratio <= 0:
            raise ConfigurationError("mlp_ratio must be positive")

    @property
    def hidden_size(self):
        return self.num_heads * self.head_dim

    @property
    def num_patches(self):
        return (self.image_side // self.patch_size) ** 2

    @property
    def mlp_hidden(self):
        return int(self.hidden_size * self.mlp_ratio)

    def to_dict(self):
        d = asdict(self)
        d['hidden_size'] = self.hidden_size
        d['num_patches'] = self.num_patches
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        hidden_size = d.pop('hidden_size', None)
        num_patches = d.pop('num_patches', None)
        config = cls(**d)
        if hidden_size is not None and hidden_size != config.hidden_size:
            raise ConfigurationError(f"hidden_size {hidden_size} != num_heads * head_dim = {config.hidden_size}")
        if num_patches is not None and num_patches != config.num_patches:
            raise ConfigurationError(f"num_patches {num_patches} != (image_side / patch_size)^2 = {config.num_patches}")
        return config


def toy_config(num_classes=10):
    return ModelConfig(num_layers=4, num_heads=4, head_dim=16, patch_size=8, image_side=32, num_classes=num_classes)


class AttentionTrace:
    """ Per-layer attention outputs O_l, each [B, H, N, d], class-token row removed """

    def __init__(self, outputs: List[torch.Tensor]):
        if len(outputs) == 0:
            raise ContractError("attention trace is empty")
        shape = outputs[0].shape
        for i, o in enumerate(outputs):
            if o.dim() != 4 or o.shape != shape:
                raise ContractError(f"trace entry {i} has shape {tuple(o.shape)}, expected {tuple(shape)}")
        self.outputs = list(outputs)

    def __len__(self):
        return len(self.outputs)

    def __getitem__(self, item):
        return self.outputs[item]

    def __iter__(self):
        return iter(self.outputs)

    @property
    def shape(self):
        return tuple(self.outputs[0].shape)


@dataclass
class ForwardResult:
    logits: torch.Tensor
    trace: Optional[AttentionTrace] = None

    @property
    def probs(self):
        return self.logits.softmax(dim=-1)


def stable_softmax(scores):
    scores = scores - scores.amax(dim=-1, keepdim=True)
    e = scores.exp()
    return e / e.sum(dim=-1, keepdim=True)


class PatchEmbed(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.proj = nn.Conv2d(config.in_chans, config.hidden_size, kernel_size=config.patch_size,
                              stride=config.patch_size)

    def forward(self, image):
        c = self.config
        expected = (c.in_chans, c.image_side, c.image_side)
        if image.dim() != 4 or tuple(image.shape[1:]) != expected:
            raise ConfigurationError(f"image shape {tuple(image.shape)} does not match [B, {c.in_chans}, "
                                     f"{c.image_side}, {c.image_side}]")
        return self.proj(image).flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.scale = config.head_dim ** -0.5
        dim = config.hidden_size

        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

        # activation sites
        self.qkv_in = nn.Identity()
        self.q_site = nn.Identity()
        self.k_site = nn.Identity()
        self.v_site = nn.Identity()
        self.probs_site = nn.Identity()
        self.proj_in = nn.Identity()

    def qkv_heads(self, x):
        b, t, _ = x.shape
        qkv = self.qkv(self.qkv_in(x)).reshape(b, t, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return qkv.unbind(0)

    def heads(self, x):
        """ softmax(Q_i K_i^T / sqrt(d)) V_i for every head, [B, H, T, d] """
        q, k, v = self.qkv_heads(x)
        q, k, v = self.q_site(q), self.k_site(k), self.v_site(v)
        attn = stable_softmax((q @ k.transpose(-2, -1)) * self.scale)
        if not torch.isfinite(attn).all():
            raise NumericalError('attention softmax')
        return self.probs_site(attn) @ v

    def forward(self, x, capture=False):
        b, t, _ = x.shape
        heads = self.heads(x)
        out = self.proj(self.proj_in(heads.transpose(1, 2).reshape(b, t, -1)))
        return out, (heads[:, :, 1:, :] if capture else None)


class Mlp(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(config.hidden_size, config.mlp_hidden)
        self.fc2 = nn.Linear(config.mlp_hidden, config.hidden_size)
        self.fc1_in = nn.Identity()
        self.fc2_in = nn.Identity()

    def forward(self, x):
        x = F.gelu(self.fc1(self.fc1_in(x)))
        return self.fc2(self.fc2_in(x))


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.hidden_size, eps=config.ln_eps)
        self.attn = Attention(config)
        self.norm2 = nn.LayerNorm(config.hidden_size, eps=config.ln_eps)
        self.mlp = Mlp(config)
        # residual-stream activation sites
        self.attn_res = nn.Identity()
        self.mlp_res = nn.Identity()

    def forward(self, x, capture=False):
        y, o = self.attn(self.norm1(x), capture=capture)
        x = self.attn_res(x + y)
        x = self.mlp_res(x + self.mlp(self.norm2(x)))
        return x, o


class VisionTransformer(nn.Module):
    def __init__(self, config: ModelConfig, init_weights=True, seed=0):
        super().__init__()
        self.config = config
        dim = config.hidden_size

        self.patch_embed = PatchEmbed(config)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, dim))
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.num_layers)])
        self.norm = nn.LayerNorm(dim, eps=config.ln_eps)
        self.head = nn.Linear(dim, config.num_classes)
        self.embed_out = nn.Identity()

        self.loaded = False
        if init_weights:
            self.init_weights(seed)

    def init_weights(self, seed=0):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
            nn.init.trunc_normal_(self.cls_token, std=0.02)
            self.patch_embed.proj.reset_parameters()
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    nn.init.trunc_normal_(m.weight, std=0.02)
                    nn.init.zeros_(m.bias)
                elif isinstance(m, nn.LayerNorm):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)
        self.loaded = True

    def embed(self, image):
        x = self.patch_embed(image)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def forward(self, image, capture=False):
        if not self.loaded:
            raise ModelStateError("model has no weights; load a checkpoint or initialize it first")
        x = self.embed_out(self.embed(image))
        outputs = []
        for block in self.blocks:
            x, o = block(x, capture=capture)
            outputs.append(o)
        logits = self.head(self.norm(x)[:, 0])
        return ForwardResult(logits=logits, trace=AttentionTrace(outputs) if capture else None)

    def freeze(self):
        self.eval()
        self.requires_grad_(False)
        return self


def patch_embed(image, model: VisionTransformer):
    return model.embed(image)


def attention_layer(tokens, block: Block, capture=False):
    return block(tokens, capture=capture)


def forward_with_trace(image, model: Optional[VisionTransformer], capture=True):
    if model is None:
        raise ModelStateError("no model loaded")
    return model(image, capture=capture)
