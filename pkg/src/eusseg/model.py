"""ViT backbone with relative position bias and an attention-to-mask (ATM) head.

The backbone has no absolute position table; every block owns a learned
bias table indexed by the 2-D offset between patch positions. Outputs of
selected blocks ("taps") feed the decoder, one tap per decoder layer,
shallowest first. Class queries (one per class) cross-attend to the
tapped tokens; each layer emits per-class scores and mask logits taken
from query/pixel similarity on the token grid, bilinearly upsampled to
full resolution.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT = "eusseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 512
    patch_size: int = 16
    in_chans: int = 1
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    tap_layers: list[int] = field(default_factory=lambda: [5, 7, 11])
    decoder_embed_dim: int = 384
    decoder_layers: int = 3
    decoder_heads: int = 12
    num_classes: int = 2

    def __post_init__(self):
        self.tap_layers = [int(t) for t in self.tap_layers]
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.decoder_embed_dim % self.decoder_heads:
            raise ValueError(
                f"decoder_embed_dim {self.decoder_embed_dim} not divisible by decoder_heads {self.decoder_heads}")
        taps = self.tap_layers
        if any(b <= a for a, b in zip(taps, taps[1:])) or not taps or taps[0] < 0 or taps[-1] >= self.depth:
            raise ValueError(f"tap_layers {taps} must be strictly increasing within [0, {self.depth})")
        if len(taps) != self.decoder_layers:
            raise ValueError(f"{len(taps)} tap layers for {self.decoder_layers} decoder layers")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset: 64 px input, 8 px patches, 2 blocks."""
        params = dict(image_size=64, patch_size=8, embed_dim=32, depth=2, num_heads=4,
                      tap_layers=[0, 1], decoder_embed_dim=32, decoder_layers=2, decoder_heads=4)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


class DecoderLayerOutput(NamedTuple):
    class_logits: torch.Tensor  # B x C
    mask_logits: torch.Tensor  # B x C x H x W


# ---------------------------------------------------------------- backbone


def relative_position_index(grid_size: int) -> torch.Tensor:
    """N x N lookup of table rows for every (query, key) token pair on a G x G grid."""
    g = grid_size
    coords = torch.stack(torch.meshgrid(torch.arange(g), torch.arange(g), indexing="ij")).flatten(1)
    delta = coords[:, :, None] - coords[:, None, :]  # 2 x N x N
    return (delta[0] + g - 1) * (2 * g - 1) + (delta[1] + g - 1)


def relative_position_bias(grid_size: int, num_heads: int, table: torch.Tensor,
                           index: torch.Tensor | None = None) -> torch.Tensor:
    """Per-head N x N additive attention bias gathered from a (2G-1)^2 x heads table."""
    rows = (2 * grid_size - 1) ** 2
    if tuple(table.shape) != (rows, num_heads):
        raise ValueError(f"bias table has shape {tuple(table.shape)}, expected ({rows}, {num_heads})")
    if index is None:
        index = relative_position_index(grid_size).to(table.device)
    n = grid_size ** 2
    return table[index.reshape(-1)].reshape(n, n, num_heads).permute(2, 0, 1)


class PatchEmbed(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.image_size = cfg.image_size
        self.proj = nn.Conv2d(cfg.in_chans, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"input spatial size {tuple(x.shape[-2:])} != {self.image_size}")
        return self.proj(x).flatten(2).transpose(1, 2)  # B x N x D


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, grid_size: int):
        super().__init__()
        self.num_heads = num_heads
        self.grid_size = grid_size
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * grid_size - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(grid_size), persistent=False)

    def attention_logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        logits = (q * self.scale) @ k.transpose(-2, -1)
        bias = relative_position_bias(self.grid_size, self.num_heads,
                                      self.relative_position_bias_table, self.relative_position_index)
        return logits + bias.unsqueeze(0), v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        logits, v = self.attention_logits(x)
        out = (logits.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, grid_size: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads, grid_size)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTBackbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        # blocks past the deepest tap never reach the decoder
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.grid_size, cfg.mlp_ratio) for _ in range(cfg.depth))

    def forward(self, tokens: torch.Tensor) -> list[torch.Tensor]:
        if tokens.shape[1] != self.cfg.num_tokens:
            raise ValueError(f"got {tokens.shape[1]} tokens, expected {self.cfg.num_tokens}")
        taps = set(self.cfg.tap_layers)
        features = []
        x = tokens
        for i, block in enumerate(self.blocks[: self.cfg.tap_layers[-1] + 1]):
            x = block(x)
            if i in taps:
                features.append(x)
        return features


# ---------------------------------------------------------------- ATM head


def query_pixel_similarity(queries: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """Scaled dot product between B x C x D queries and B x N x D pixel embeddings."""
    return queries @ pixels.transpose(1, 2) / math.sqrt(queries.shape[-1])


class MultiheadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query, context):
        b, nq, d = query.shape
        h = self.num_heads
        q = self.q(query).reshape(b, nq, h, d // h).transpose(1, 2)
        k, v = self.kv(context).reshape(b, context.shape[1], 2, h, d // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1) * (d // h) ** -0.5).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, nq, d))


class ATMDecoderLayer(nn.Module):
    def __init__(self, embed_dim: int, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.feature_norm = nn.LayerNorm(embed_dim, eps=1e-6)
        self.feature_proj = nn.Linear(embed_dim, dim)
        self.norm_self = nn.LayerNorm(dim, eps=1e-6)
        self.self_attn = MultiheadAttention(dim, num_heads)
        self.norm_cross = nn.LayerNorm(dim, eps=1e-6)
        self.cross_attn = MultiheadAttention(dim, num_heads)
        self.norm_mlp = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm_out = nn.LayerNorm(dim, eps=1e-6)
        self.class_head = nn.Linear(dim, 1)
        self.mask_query = nn.Linear(dim, dim)
        self.mask_pixel = nn.Linear(dim, dim)

    def forward(self, queries, features):
        memory = self.feature_proj(self.feature_norm(features))
        queries = queries + self.self_attn(self.norm_self(queries), self.norm_self(queries))
        queries = queries + self.cross_attn(self.norm_cross(queries), memory)
        queries = queries + self.mlp(self.norm_mlp(queries))
        out = self.norm_out(queries)
        class_logits = self.class_head(out).squeeze(-1)
        similarity = query_pixel_similarity(self.mask_query(out), self.mask_pixel(memory))
        return queries, class_logits, similarity


class ATMHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.class_queries = nn.Parameter(torch.zeros(cfg.num_classes, cfg.decoder_embed_dim))
        self.layers = nn.ModuleList(
            ATMDecoderLayer(cfg.embed_dim, cfg.decoder_embed_dim, cfg.decoder_heads, cfg.mlp_ratio)
            for _ in range(cfg.decoder_layers))

    def forward(self, features: list[torch.Tensor]) -> list[DecoderLayerOutput]:
        if len(features) != len(self.layers):
            raise ValueError(f"{len(features)} feature maps for {len(self.layers)} decoder layers")
        b = features[0].shape[0]
        g = self.cfg.grid_size
        queries = self.class_queries.unsqueeze(0).expand(b, -1, -1)
        outputs = []
        for layer, feats in zip(self.layers, features):
            queries, class_logits, similarity = layer(queries, feats)
            grid = similarity.reshape(b, self.cfg.num_classes, g, g)
            masks = F.interpolate(grid, size=(self.cfg.image_size,) * 2, mode="bilinear", align_corners=False)
            outputs.append(DecoderLayerOutput(class_logits, masks))
        return outputs


# ---------------------------------------------------------------- full model


class EUSSegmenter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ViTBackbone(cfg)
        self.decode_head = ATMHead(cfg)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, Attention):
                nn.init.zeros_(m.relative_position_bias_table)
        nn.init.trunc_normal_(self.decode_head.class_queries, std=0.02)

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone.patch_embed(_as_bchw(images))

    def forward(self, images: torch.Tensor) -> list[DecoderLayerOutput]:
        return self.decode_head(self.backbone(self.patch_embed(images)))

    @torch.no_grad()
    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return assemble_logits(self(images))


def _as_bchw(images: torch.Tensor) -> torch.Tensor:
    if images.dim() == 2:
        return images[None, None]
    if images.dim() == 3:
        return images[:, None]
    return images


def patch_embed(image: torch.Tensor, model: EUSSegmenter) -> torch.Tensor:
    """N x embed_dim tokens for a single image (or B x N x D for a batch)."""
    tokens = model.patch_embed(image)
    return tokens[0] if image.dim() == 2 else tokens


def backbone_forward(tokens: torch.Tensor, model: EUSSegmenter) -> list[torch.Tensor]:
    return model.backbone(tokens)


def atm_decode(features: list[torch.Tensor], model: EUSSegmenter) -> list[DecoderLayerOutput]:
    return model.decode_head(features)


def assemble_logits(outputs: list[DecoderLayerOutput]) -> torch.Tensor:
    """Last layer's mask logits, each class channel weighted by its softmax probability."""
    last = outputs[-1]
    probs = last.class_logits.softmax(dim=-1)
    return last.mask_logits * probs[:, :, None, None]


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over classes; ties go to background. No post-processing."""
    if logits.shape[1] != 2:
        raise ValueError(f"binary prediction needs 2 class channels, got {logits.shape[1]}")
    return (logits[:, 1] > logits[:, 0]).to(torch.uint8)


# ---------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    total: torch.Tensor
    per_layer: list[dict[str, float]]


def soft_dice_loss(mask_logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    probs = mask_logits.sigmoid().flatten(1)
    target = target.flatten(1)
    inter = (probs * target).sum(1)
    return (1 - (2 * inter + smooth) / (probs.sum(1) + target.sum(1) + smooth)).mean()


def atm_loss(outputs: list[DecoderLayerOutput], gt_mask: torch.Tensor) -> LossBreakdown:
    """Unit-weighted sum over decoder layers of class CE + (BCE + soft Dice) mask loss.

    The image-level class target is foreground when the mask has any
    foreground pixel. Each class channel is supervised with its own binary
    mask (background channel with ``1 - gt``) so both channels stay
    meaningful for the softmax-weighted fusion in :func:`assemble_logits`.
    """
    gt = gt_mask
    if gt.dim() == 2:
        gt = gt[None]
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary")
    num_classes = outputs[0].mask_logits.shape[1]
    if num_classes not in (1, 2):
        raise ValueError(f"binary masks support 1 or 2 classes, got {num_classes}")
    if outputs[0].mask_logits.shape[-2:] != gt.shape[-2:]:
        raise ValueError(f"mask logits {tuple(outputs[0].mask_logits.shape[-2:])} vs gt {tuple(gt.shape[-2:])}")
    gt = gt.to(outputs[0].mask_logits.dtype)
    targets = gt[:, None] if num_classes == 1 else torch.stack([1 - gt, gt], dim=1)
    present = (gt.flatten(1).amax(1) > 0).long()

    total = outputs[0].mask_logits.new_zeros(())
    per_layer = []
    for out in outputs:
        if num_classes > 1:
            cls = F.cross_entropy(out.class_logits, present)
        else:
            cls = out.class_logits.new_zeros(())
        bce = F.binary_cross_entropy_with_logits(out.mask_logits, targets)
        dice = sum(soft_dice_loss(out.mask_logits[:, c], targets[:, c]) for c in range(num_classes)) / num_classes
        total = total + cls + bce + dice
        per_layer.append({"cls": cls.item(), "bce": bce.item(), "dice": dice.item()})
    return LossBreakdown(total=total, per_layer=per_layer)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: EUSSegmenter, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None,
                    map_location: str = "cpu") -> tuple[EUSSegmenter, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an eusseg checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig(**payload["model_config"])
    if expected is not None and cfg != expected:
        raise ValueError(f"{path}: checkpoint config {cfg} does not match {expected}")
    model = EUSSegmenter(cfg)
    state = payload["state_dict"]
    own = model.state_dict()
    for name, tensor in state.items():
        if name in own and own[name].shape != tensor.shape:
            raise ValueError(f"{path}: parameter {name} has shape {tuple(tensor.shape)}, "
                             f"model expects {tuple(own[name].shape)}")
    model.load_state_dict(state, strict=True)
    return model, payload.get("meta", {})
