"""From-scratch toy vision transformer with activation taps and checkpoints.

The block layout is the usual pre-LN form: each LayerNorm feeds only its
branch and residual additions bypass it, so zero block weights make every
block an identity map.  The classifier reads a mean-pool over patch tokens
(no class token).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blobio import read_tensor_file, write_tensor_file
from .errors import CheckpointError, ConfigError, ShapeError
from .quantizers import (
    QuantizedTensor,
    log2_fakequant,
    poq_linear_forward,
    uq_fakequant,
)
from .tensor_ops import Tensor, gelu, gemm, layernorm, make_rng, softmax

CKPT_FORMAT = "ADFQ-CKPT"
CKPT_VERSION = 1

# the quantization sites of the placement policy, in canonical order
SITE_KINDS = ("qkv_input", "q", "k", "post_softmax", "v", "attn_out_input",
              "fc1_input", "fc2_input")
WEIGHT_KINDS = ("w_qkv", "w_o", "w_fc1", "w_fc2")


def site_id(block: int, kind: str) -> str:
    return f"block{block}.{kind}"


@dataclass(frozen=True)
class ViTConfig:
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    patch_size: tuple[int, int] = (8, 8)
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_hidden: int | None = None
    num_classes: int = 10

    def __post_init__(self):
        h, w = self.image_size
        hp, wp = self.patch_size
        if h <= 0 or w <= 0 or hp <= 0 or wp <= 0 or self.channels <= 0:
            raise ConfigError("image/patch extents must be positive")
        if h % hp or w % wp:
            raise ConfigError(f"image {h}x{w} not divisible by patch {hp}x{wp}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by "
                              f"{self.heads} heads")
        if self.blocks < 0 or self.num_classes < 1:
            raise ConfigError("blocks must be >= 0 and num_classes >= 1")
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.embed_dim)
        if self.mlp_hidden <= 0:
            raise ConfigError("mlp hidden dim must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_size[0] // self.patch_size[0]) * \
               (self.image_size[1] // self.patch_size[1])

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size[0] * self.patch_size[1] * self.channels

    def to_dict(self) -> dict:
        return {"image_size": list(self.image_size), "channels": self.channels,
                "patch_size": list(self.patch_size), "embed_dim": self.embed_dim,
                "heads": self.heads, "blocks": self.blocks,
                "mlp_hidden": self.mlp_hidden, "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        try:
            return cls(image_size=tuple(d["image_size"]), channels=d["channels"],
                       patch_size=tuple(d["patch_size"]), embed_dim=d["embed_dim"],
                       heads=d["heads"], blocks=d["blocks"],
                       mlp_hidden=d["mlp_hidden"], num_classes=d["num_classes"])
        except KeyError as e:
            raise ConfigError(f"model config missing key {e}") from e


@dataclass
class BlockWeights:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_qkv: np.ndarray
    b_qkv: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_fc2: np.ndarray
    b_fc2: np.ndarray


@dataclass
class ViTModel:
    config: ViTConfig
    w_proj: np.ndarray
    b_proj: np.ndarray
    pos_embed: np.ndarray
    blocks: list[BlockWeights]
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def random_init(cls, config: ViTConfig, seed: int) -> "ViTModel":
        """Seeded init; parameters are snapped to float32 so checkpoint
        round trips are bit-exact even at 64-bit comparison."""
        r = make_rng(seed)
        d = config.embed_dim
        hd = config.mlp_hidden

        def f32(x):
            return np.asarray(x, dtype=np.float32).astype(np.float64)

        def init(shape, fan_in):
            return f32(r.standard_normal(shape) / np.sqrt(fan_in))

        blocks = []
        for _ in range(config.blocks):
            blocks.append(BlockWeights(
                ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
                w_qkv=init((d, 3 * d), d), b_qkv=np.zeros(3 * d),
                w_o=init((d, d), d), b_o=np.zeros(d),
                ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
                w_fc1=init((d, hd), d), b_fc1=np.zeros(hd),
                w_fc2=init((hd, d), hd), b_fc2=np.zeros(d)))
        return cls(config=config,
                   w_proj=init((config.patch_dim, d), config.patch_dim),
                   b_proj=np.zeros(d),
                   pos_embed=f32(0.02 * r.standard_normal((config.n_patches, d))),
                   blocks=blocks,
                   head_w=init((d, config.num_classes), d),
                   head_b=np.zeros(config.num_classes))

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("w_proj", self.w_proj), ("b_proj", self.b_proj),
               ("pos_embed", self.pos_embed)]
        for i, blk in enumerate(self.blocks):
            for fname in ("ln1_gamma", "ln1_beta", "w_qkv", "b_qkv", "w_o", "b_o",
                          "ln2_gamma", "ln2_beta", "w_fc1", "b_fc1", "w_fc2",
                          "b_fc2"):
                out.append((f"block{i}.{fname}", getattr(blk, fname)))
        out.append(("head_w", self.head_w))
        out.append(("head_b", self.head_b))
        return out

    def weight_matrix(self, block: int, kind: str) -> np.ndarray:
        return getattr(self.blocks[block], kind)

    def copy(self) -> "ViTModel":
        named = dict(self.named_tensors())
        return _model_from_tensors(self.config, {k: v.copy() for k, v in named.items()})


def expected_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, hd, n = config.embed_dim, config.mlp_hidden, config.n_patches
    shapes = {"w_proj": (config.patch_dim, d), "b_proj": (d,),
              "pos_embed": (n, d), "head_w": (d, config.num_classes),
              "head_b": (config.num_classes,)}
    for i in range(config.blocks):
        shapes.update({
            f"block{i}.ln1_gamma": (d,), f"block{i}.ln1_beta": (d,),
            f"block{i}.w_qkv": (d, 3 * d), f"block{i}.b_qkv": (3 * d,),
            f"block{i}.w_o": (d, d), f"block{i}.b_o": (d,),
            f"block{i}.ln2_gamma": (d,), f"block{i}.ln2_beta": (d,),
            f"block{i}.w_fc1": (d, hd), f"block{i}.b_fc1": (hd,),
            f"block{i}.w_fc2": (hd, d), f"block{i}.b_fc2": (d,)})
    return shapes


def _model_from_tensors(config: ViTConfig, tensors: dict[str, np.ndarray]) -> ViTModel:
    blocks = []
    for i in range(config.blocks):
        blocks.append(BlockWeights(**{f: tensors[f"block{i}.{f}"]
                                      for f in ("ln1_gamma", "ln1_beta", "w_qkv",
                                                "b_qkv", "w_o", "b_o", "ln2_gamma",
                                                "ln2_beta", "w_fc1", "b_fc1",
                                                "w_fc2", "b_fc2")}))
    return ViTModel(config=config, w_proj=tensors["w_proj"],
                    b_proj=tensors["b_proj"], pos_embed=tensors["pos_embed"],
                    blocks=blocks, head_w=tensors["head_w"],
                    head_b=tensors["head_b"])


def save_checkpoint(model: ViTModel, path: str) -> None:
    write_tensor_file(path, CKPT_FORMAT, CKPT_VERSION,
                      {"config": model.config.to_dict()}, model.named_tensors())


def load_checkpoint(path: str) -> ViTModel:
    manifest, tensors = read_tensor_file(path, CKPT_FORMAT, CKPT_VERSION)
    if "config" not in manifest:
        raise CheckpointError("manifest has no model config")
    config = ViTConfig.from_dict(manifest["config"])
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"config requires {shape}")
    extra = set(tensors) - set(shapes)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensors {sorted(extra)}")
    return _model_from_tensors(config, tensors)


@dataclass
class ActivationTap:
    block: int
    kind: str
    tensor: np.ndarray


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def extract_patches(image: Tensor, config: ViTConfig) -> Tensor:
    image = np.asarray(image, dtype=np.float64)
    h, w = config.image_size
    hp, wp = config.patch_size
    if image.shape != (h, w, config.channels):
        raise ShapeError(f"image shape {image.shape} does not match config "
                         f"({h}, {w}, {config.channels})")
    gh, gw = h // hp, w // wp
    tiles = image.reshape(gh, hp, gw, wp, config.channels)
    return np.ascontiguousarray(tiles.transpose(0, 2, 1, 3, 4)).reshape(
        config.n_patches, config.patch_dim)


def patch_embed(image: Tensor, model: ViTModel) -> Tensor:
    patches = extract_patches(image, model.config)
    return gemm(patches, model.w_proj) + model.b_proj + model.pos_embed


class _TapCollector:
    def __init__(self, kinds, taps):
        self.kinds = None if kinds is None else set(kinds)
        self.taps = taps

    def __call__(self, block, kind, tensor):
        if self.taps is None:
            return
        if self.kinds is None or kind in self.kinds:
            self.taps.append(ActivationTap(block=block, kind=kind,
                                           tensor=tensor.copy()))


def _site_fakequant(x, sp, errors, sid):
    """Apply a site's fake-quantizer to ``x``; records the site's MSE."""
    if sp.kind in ("log2", "shift-log2"):
        y, _ = log2_fakequant(x, sp.log2)
    elif sp.kind == "uniform":
        y, _ = uq_fakequant(x, sp.uniform)
    else:
        raise ConfigError(f"unexpected site quantizer kind {sp.kind!r}")
    if errors is not None:
        errors.setdefault(sid, []).append(float(np.mean((y - x) ** 2)))
    return y


def _linear_site(x, sp, w_q: QuantizedTensor, w_hat, bias, errors, sid):
    """Quantized linear layer input: outlier-aware when the site carries an
    outlier config, plain fake-quant GEMM otherwise."""
    if sp.outlier is not None:
        y = poq_linear_forward(x, w_q, bias, sp.uniform, sp.outlier)
        if errors is not None:
            from .quantizers import outlier_split
            dense, sparse = outlier_split(x, sp.outlier)
            x_hat = uq_fakequant(dense, sp.uniform)[0] + sparse.densify()
            errors.setdefault(sid, []).append(float(np.mean((x_hat - x) ** 2)))
        return y
    x_hat = _site_fakequant(x, sp, errors, sid)
    return gemm(x_hat, w_hat) + bias


def mha_forward(x: Tensor, model: ViTModel, block_idx: int, bundle=None,
                tap=None, errors=None) -> tuple[Tensor, Tensor]:
    """Attention branch (entry LayerNorm included); returns the branch
    output and the per-head softmax probabilities [H, n, n]."""
    blk = model.blocks[block_idx]
    cfg = model.config
    d, heads, dh = cfg.embed_dim, cfg.heads, cfg.head_dim
    x_ln = layernorm(x, blk.ln1_gamma, blk.ln1_beta)
    if tap:
        tap(block_idx, "qkv_input", x_ln)

    if bundle is None:
        qkv = gemm(x_ln, blk.w_qkv) + blk.b_qkv
    else:
        qkv = _linear_site(x_ln, bundle.site(block_idx, "qkv_input"),
                           bundle.weight_quantized(block_idx, "w_qkv"),
                           bundle.weight_dequant(block_idx, "w_qkv"),
                           blk.b_qkv, errors, site_id(block_idx, "qkv_input"))
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    if tap:
        tap(block_idx, "q", q)
        tap(block_idx, "k", k)
        tap(block_idx, "v", v)
    if bundle is not None:
        q = _site_fakequant(q, bundle.site(block_idx, "q"), errors,
                            site_id(block_idx, "q"))
        k = _site_fakequant(k, bundle.site(block_idx, "k"), errors,
                            site_id(block_idx, "k"))

    probs = np.empty((heads, x.shape[0], x.shape[0]))
    for h in range(heads):
        qh, kh = q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh]
        probs[h] = softmax(gemm(qh, kh.T) / np.sqrt(dh), axis=-1)
    if tap:
        tap(block_idx, "post_softmax", probs)

    p_used = probs
    if bundle is not None:
        p_used = _site_fakequant(probs, bundle.site(block_idx, "post_softmax"),
                                 errors, site_id(block_idx, "post_softmax"))
        v = _site_fakequant(v, bundle.site(block_idx, "v"), errors,
                            site_id(block_idx, "v"))
    heads_out = [gemm(p_used[h], v[:, h * dh:(h + 1) * dh]) for h in range(heads)]
    concat = np.hstack(heads_out)
    if tap:
        tap(block_idx, "attn_out_input", concat)
    if bundle is None:
        x_mha = gemm(concat, blk.w_o) + blk.b_o
    else:
        concat = _site_fakequant(concat, bundle.site(block_idx, "attn_out_input"),
                                 errors, site_id(block_idx, "attn_out_input"))
        x_mha = gemm(concat, bundle.weight_dequant(block_idx, "w_o")) + blk.b_o
    return x_mha, probs


def mlp_forward(x: Tensor, model: ViTModel, block_idx: int, bundle=None,
                tap=None, errors=None) -> Tensor:
    """MLP branch: entry LayerNorm, FC1, GELU, FC2."""
    blk = model.blocks[block_idx]
    x_ln = layernorm(x, blk.ln2_gamma, blk.ln2_beta)
    if tap:
        tap(block_idx, "fc1_input", x_ln)
    if bundle is None:
        pre = gemm(x_ln, blk.w_fc1) + blk.b_fc1
    else:
        pre = _linear_site(x_ln, bundle.site(block_idx, "fc1_input"),
                           bundle.weight_quantized(block_idx, "w_fc1"),
                           bundle.weight_dequant(block_idx, "w_fc1"),
                           blk.b_fc1, errors, site_id(block_idx, "fc1_input"))
    g = gelu(pre)
    if tap:
        tap(block_idx, "fc2_input", g)
    if bundle is None:
        return gemm(g, blk.w_fc2) + blk.b_fc2
    g = _site_fakequant(g, bundle.site(block_idx, "fc2_input"), errors,
                        site_id(block_idx, "fc2_input"))
    return gemm(g, bundle.weight_dequant(block_idx, "w_fc2")) + blk.b_fc2


def model_forward(image: Tensor, model: ViTModel, bundle=None,
                  tap_kinds=None, collect_taps: bool = False,
                  site_errors=None) -> tuple[Tensor, list[ActivationTap]]:
    """Full forward: patch embedding, L pre-LN blocks, mean-pool, head."""
    taps: list[ActivationTap] | None = [] if (collect_taps or tap_kinds) else None
    tap = _TapCollector(tap_kinds, taps) if taps is not None else None
    x = patch_embed(image, model)
    for l in range(model.config.blocks):
        x_mha, _ = mha_forward(x, model, l, bundle=bundle, tap=tap,
                               errors=site_errors)
        x = x + x_mha
        x = x + mlp_forward(x, model, l, bundle=bundle, tap=tap,
                            errors=site_errors)
    pooled = x.mean(axis=0)
    logits = pooled @ model.head_w + model.head_b
    return logits, (taps if taps is not None else [])
