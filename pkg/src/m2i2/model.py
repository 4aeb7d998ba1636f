"""The five transformer sub-networks and their parameters.

Sub-networks: image encoder, text encoder, multimodal fusion encoder
(text-stream self-attention + cross-attention to image features), image
reconstruction decoder, and the causal answer decoder. Plus the projection /
prediction heads and positional-embedding interpolation for resolution
changes.

All forward functions are batched ([b, ...]) and pure given (inputs, params);
dropout defaults to 0 so repeated passes are bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, concat, gather_rows, layer_norm, softmax
from .vision import resize_bilinear

NEG_BIAS = -1e9


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    depth_img_enc: int = 2
    depth_txt_enc: int = 2
    depth_fusion: int = 2
    depth_img_dec: int = 2
    depth_ans_dec: int = 2
    vocab_size: int = 512
    max_text_len: int = 24
    max_answer_len: int = 8
    image_size: int = 64
    patch_size: int = 16
    channels: int = 1
    proj_dim: int = 32
    dropout: float = 0.0
    answer_cross_mode: str = "full"  # "full" sequence memory or "cls" only

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def n_patches(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


# names of the sub-networks that keep a momentum copy (plus their embeddings
# and ITC heads); everything reachable by the momentum ITC forward pass
MOMENTUM_PREFIXES = (
    "img_enc.",
    "txt_enc.",
    "patch_embed.",
    "img_cls",
    "img_pos",
    "tok_embed",
    "txt_pos",
    "itc_img.",
    "itc_txt.",
)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class ModelParams:
    """Named parameter tensors plus a momentum copy of the unimodal subset."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._init(rng)
        self.momentum: dict[str, Tensor] = {
            name: Tensor(t.data.copy())
            for name, t in self.params.items()
            if name.startswith(MOMENTUM_PREFIXES)
        }

    def _add(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise ContractError(f"parameter {name} registered twice")
        self.params[name] = Tensor(data, requires_grad=True)

    def _init(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        d = cfg.dim

        def tn(shape):
            return _trunc_normal(rng, shape)

        self._add("patch_embed.w", tn((cfg.patch_dim, d)))
        self._add("patch_embed.b", np.zeros(d))
        self._add("img_cls", tn((1, d)))
        self._add("img_mask_tok", tn((1, d)))
        self._add("img_pos", tn((1 + cfg.n_patches, d)))
        self._add("img_dec_pos", tn((1 + cfg.n_patches, d)))
        self._add("tok_embed", tn((cfg.vocab_size, d)))
        self._add("txt_pos", tn((cfg.max_text_len, d)))
        self._add("ans_pos", tn((cfg.max_answer_len, d)))

        def stack(prefix: str, depth: int, cross: bool):
            for i in range(depth):
                p = f"{prefix}.{i}"
                for ln in ("ln1", "ln2") + (("ln_x",) if cross else ()):
                    self._add(f"{p}.{ln}.g", np.ones(d))
                    self._add(f"{p}.{ln}.b", np.zeros(d))
                for att in ("attn",) + (("xattn",) if cross else ()):
                    for w in ("wq", "wk", "wv", "wo"):
                        self._add(f"{p}.{att}.{w}", tn((d, d)))
                        self._add(f"{p}.{att}.{w[1]}b", np.zeros(d))
                self._add(f"{p}.mlp.w1", tn((d, cfg.mlp_ratio * d)))
                self._add(f"{p}.mlp.b1", np.zeros(cfg.mlp_ratio * d))
                self._add(f"{p}.mlp.w2", tn((cfg.mlp_ratio * d, d)))
                self._add(f"{p}.mlp.b2", np.zeros(d))
            self._add(f"{prefix}.ln_f.g", np.ones(d))
            self._add(f"{prefix}.ln_f.b", np.zeros(d))

        stack("img_enc", cfg.depth_img_enc, cross=False)
        stack("txt_enc", cfg.depth_txt_enc, cross=False)
        stack("fusion", cfg.depth_fusion, cross=True)
        stack("img_dec", cfg.depth_img_dec, cross=False)
        stack("ans_dec", cfg.depth_ans_dec, cross=True)

        self._add("itc_img.w", tn((d, cfg.proj_dim)))
        self._add("itc_img.b", np.zeros(cfg.proj_dim))
        self._add("itc_txt.w", tn((d, cfg.proj_dim)))
        self._add("itc_txt.b", np.zeros(cfg.proj_dim))
        # stored as log so optimizer updates are multiplicative in tau, which
        # keeps the temperature from crashing into its lower clamp
        self._add("itc.log_temp", np.asarray(np.log(0.07)))
        self._add("itm.w", tn((d, 2)))
        self._add("itm.b", np.zeros(2))
        self._add("mlm.w", tn((d, cfg.vocab_size)))
        self._add("mlm.b", np.zeros(cfg.vocab_size))
        self._add("mim.w", tn((d, cfg.patch_dim)))
        self._add("mim.b", np.zeros(cfg.patch_dim))
        self._add("ans_head.w", tn((d, cfg.vocab_size)))
        self._add("ans_head.b", np.zeros(cfg.vocab_size))

    def source(self, use_momentum: bool) -> dict[str, Tensor]:
        return self.momentum if use_momentum else self.params

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


# ---- building blocks -----------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def attention(
    x: Tensor,
    P: dict[str, Tensor],
    prefix: str,
    heads: int,
    bias: np.ndarray | None = None,
    kv: Tensor | None = None,
    capture: list | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention; pre-normalized input expected.

    bias is an additive attention mask broadcastable to [b, h, Lq, Lk];
    kv switches to cross-attention. capture, when given, receives the
    post-softmax attention tensor.
    """
    b, Lq, d = x.shape
    hd = d // heads
    src = kv if kv is not None else x
    if src.shape[-1] != d:
        raise ContractError(f"stream dims differ: {d} vs {src.shape[-1]}")
    Lk = src.shape[1]

    def split(t: Tensor, L: int) -> Tensor:
        return t.reshape(b, L, heads, hd).transpose((0, 2, 1, 3))

    q = split(linear(x, P[f"{prefix}.wq"], P[f"{prefix}.qb"]), Lq)
    k = split(linear(src, P[f"{prefix}.wk"], P[f"{prefix}.kb"]), Lk)
    v = split(linear(src, P[f"{prefix}.wv"], P[f"{prefix}.vb"]), Lk)
    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    if bias is not None:
        scores = scores + bias
    probs = softmax(scores, axis=-1)
    if capture is not None:
        capture.append(probs)
    out = (probs @ v).transpose((0, 2, 1, 3)).reshape(b, Lq, d)
    return linear(out, P[f"{prefix}.wo"], P[f"{prefix}.ob"])


def _mlp(x: Tensor, P: dict[str, Tensor], p: str) -> Tensor:
    return linear(linear(x, P[f"{p}.mlp.w1"], P[f"{p}.mlp.b1"]).gelu(), P[f"{p}.mlp.w2"], P[f"{p}.mlp.b2"])


def _ln(x: Tensor, P: dict[str, Tensor], name: str) -> Tensor:
    return layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def transformer_stack(
    x: Tensor,
    P: dict[str, Tensor],
    prefix: str,
    depth: int,
    heads: int,
    self_bias: np.ndarray | None = None,
    memory: Tensor | None = None,
    memory_bias: np.ndarray | None = None,
    capture: list | None = None,
) -> Tensor:
    """Pre-LN transformer; optional cross-attention to ``memory`` per layer."""
    for i in range(depth):
        p = f"{prefix}.{i}"
        x = x + attention(_ln(x, P, f"{p}.ln1"), P, f"{p}.attn", heads, bias=self_bias)
        if memory is not None:
            x = x + attention(
                _ln(x, P, f"{p}.ln_x"),
                P,
                f"{p}.xattn",
                heads,
                bias=memory_bias,
                kv=memory,
                capture=capture,
            )
        x = x + _mlp(_ln(x, P, f"{p}.ln2"), P, p)
    return _ln(x, P, f"{prefix}.ln_f")


# ---- sub-network forward passes ------------------------------------------


def encode_image(
    mp: ModelParams,
    visible_patches: np.ndarray,
    positions: np.ndarray,
    use_momentum: bool = False,
) -> Tensor:
    """Image encoder over visible patches.

    visible_patches [b, N_vis, patch_dim], positions [b, N_vis] grid slots.
    Returns [b, 1+N_vis, dim]; row 0 is the image summary (CLS).
    """
    P = mp.source(use_momentum)
    cfg = mp.cfg
    positions = np.asarray(positions, dtype=np.int64)
    if positions.min(initial=0) < 0 or positions.max(initial=-1) >= cfg.n_patches:
        raise IndexError(f"patch position out of grid range [0, {cfg.n_patches})")
    b = visible_patches.shape[0]
    x = linear(Tensor(visible_patches), P["patch_embed.w"], P["patch_embed.b"])
    x = x + P["img_pos"][1 + positions]
    cls = (P["img_cls"] + P["img_pos"][0:1]).broadcast_to((b, 1, cfg.dim))
    x = concat([cls, x], axis=1)
    return transformer_stack(x, P, "img_enc", cfg.depth_img_enc, cfg.heads)


def decode_image(
    mp: ModelParams,
    encoder_features: Tensor,
    visible_positions: np.ndarray,
    mask_positions: np.ndarray,
) -> Tensor:
    """Reconstruct masked patches; returns predicted pixels [b, k, patch_dim].

    The learnable mask embedding fills each masked grid slot, full-grid order
    is restored with decoder positional embeddings, and the pixel head is
    applied to masked rows only.
    """
    P = mp.params
    cfg = mp.cfg
    visible_positions = np.asarray(visible_positions, dtype=np.int64)
    mask_positions = np.asarray(mask_positions, dtype=np.int64)
    b, n_vis = visible_positions.shape
    k = mask_positions.shape[1]
    if k == 0:
        return Tensor(np.zeros((b, 0, cfg.patch_dim)))
    for i in range(b):
        if np.intersect1d(visible_positions[i], mask_positions[i]).size:
            raise ContractError("mask_positions overlap visible positions")

    mask_row = (P["img_mask_tok"] + Tensor(np.zeros((b, 1, cfg.dim)))).reshape(b, 1, cfg.dim)
    table = concat([encoder_features, mask_row], axis=1)  # [b, 2+n_vis, d]
    idx = np.full((b, cfg.n_patches), 1 + n_vis, dtype=np.int64)
    rows = np.repeat(np.arange(b), n_vis)
    idx[rows, visible_positions.ravel()] = np.tile(1 + np.arange(n_vis), b)
    seq = concat([table[:, 0:1, :], gather_rows(table, idx)], axis=1)  # [b, 1+N, d]
    seq = seq + P["img_dec_pos"]
    out = transformer_stack(seq, P, "img_dec", cfg.depth_img_dec, cfg.heads)
    masked_rows = gather_rows(out, 1 + mask_positions)  # [b, k, d]
    flat = masked_rows.reshape(b * k, cfg.dim)
    return linear(flat, P["mim.w"], P["mim.b"]).reshape(b, k, cfg.patch_dim)


def pad_bias(ids: np.ndarray) -> np.ndarray:
    """Additive attention bias masking PAD key positions; [b,1,1,L]."""
    return np.where(ids == 0, NEG_BIAS, 0.0)[:, None, None, :]


def encode_text(mp: ModelParams, ids: np.ndarray, use_momentum: bool = False) -> Tensor:
    """Text encoder; ids [b, L] with CLS first, PAD tail. Returns [b, L, dim]."""
    P = mp.source(use_momentum)
    cfg = mp.cfg
    ids = np.asarray(ids, dtype=np.int64)
    if ids.max(initial=0) >= cfg.vocab_size:
        raise IndexError(f"token id >= vocab size {cfg.vocab_size}")
    L = ids.shape[1]
    x = P["tok_embed"][ids] + P["txt_pos"][:L]
    return transformer_stack(
        x, P, "txt_enc", cfg.depth_txt_enc, cfg.heads, self_bias=pad_bias(ids)
    )


def fuse(
    mp: ModelParams,
    text_features: Tensor,
    image_features: Tensor,
    text_ids: np.ndarray,
    capture: list | None = None,
) -> Tensor:
    """Multimodal encoder: text-stream self-attention + cross-attention to
    image features. Returns fused text-stream features [b, L, dim]; row 0
    (CLS) is the joint representation. capture collects per-layer
    cross-attention tensors [b, heads, L, S]."""
    cfg = mp.cfg
    if text_features.shape[-1] != image_features.shape[-1]:
        raise ContractError("text/image feature dims differ")
    return transformer_stack(
        text_features,
        mp.params,
        "fusion",
        cfg.depth_fusion,
        cfg.heads,
        self_bias=pad_bias(text_ids),
        memory=image_features,
        capture=capture,
    )


def decode_answer(
    mp: ModelParams,
    fused_context: Tensor,
    text_ids: np.ndarray,
    prefix_ids: np.ndarray,
) -> Tensor:
    """Causal answer decoder under teacher forcing.

    prefix_ids [b, Lp] must start with BOS. Cross-attention memory is the
    full fused sequence with the fused CLS additionally prepended as the
    first slot ("full" mode), or the CLS row alone ("cls" mode).
    Returns next-token logits for every prefix position: [b, Lp, vocab].
    """
    P = mp.params
    cfg = mp.cfg
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    if prefix_ids.ndim != 2 or prefix_ids.shape[1] == 0:
        raise ContractError("answer prefix must be a nonempty [b, Lp] id array")
    from .text import BOS

    if (prefix_ids[:, 0] != BOS).any():
        raise ContractError("answer prefix must start with BOS")
    b, Lp = prefix_ids.shape
    if cfg.answer_cross_mode == "cls":
        memory = fused_context[:, 0:1, :]
        mem_bias = None
    else:
        memory = concat([fused_context[:, 0:1, :], fused_context], axis=1)
        mem_bias = np.concatenate(
            [np.zeros((b, 1)), np.where(text_ids == 0, NEG_BIAS, 0.0)], axis=1
        )[:, None, None, :]
    causal = np.where(np.tril(np.ones((Lp, Lp))) > 0, 0.0, NEG_BIAS)[None, None]
    x = P["tok_embed"][prefix_ids] + P["ans_pos"][:Lp]
    out = transformer_stack(
        x,
        P,
        "ans_dec",
        cfg.depth_ans_dec,
        cfg.heads,
        self_bias=causal,
        memory=memory,
        memory_bias=mem_bias,
    )
    return linear(out, P["ans_head.w"], P["ans_head.b"])


def project_itc(mp: ModelParams, cls_features: Tensor, which: str, use_momentum: bool = False) -> Tensor:
    """Unit-normalized contrastive projection of CLS features [b, dim]."""
    P = mp.source(use_momentum)
    v = linear(cls_features, P[f"itc_{which}.w"], P[f"itc_{which}.b"])
    norm = ((v * v).sum(axis=-1, keepdims=True) + 1e-12).sqrt()
    return v / norm


def itm_logits(mp: ModelParams, joint_cls: Tensor) -> Tensor:
    return linear(joint_cls, mp.params["itm.w"], mp.params["itm.b"])


def mlm_logits(mp: ModelParams, fused: Tensor, batch_idx: np.ndarray, positions: np.ndarray) -> Tensor:
    """MLM head on fused features at the masked positions; [m, vocab]."""
    rows = fused[np.asarray(batch_idx, dtype=np.int64), np.asarray(positions, dtype=np.int64)]
    return linear(rows, mp.params["mlm.w"], mp.params["mlm.b"])


def interpolate_positional(pos: np.ndarray, old_grid: tuple[int, int], new_grid: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample grid positional embeddings; CLS row passes through."""
    r, c = old_grid
    r2, c2 = new_grid
    if pos.shape[0] != 1 + r * c:
        raise ContractError(f"expected {1 + r * c} rows for grid {old_grid}, got {pos.shape[0]}")
    if (r2, c2) == (r, c):
        return pos.copy()
    body = pos[1:].reshape(r, c, pos.shape[1])
    out = resize_bilinear(body, r2, c2).reshape(r2 * c2, pos.shape[1])
    return np.concatenate([pos[0:1], out], axis=0)


def resize_model(mp: ModelParams, new_image_size: int) -> ModelParams:
    """Return params adapted to a new input resolution via positional
    interpolation; all other tensors are shared by value (copied)."""
    old = mp.cfg
    new_cfg = replace(old, image_size=new_image_size)
    rng = np.random.default_rng(0)
    out = ModelParams(new_cfg, rng)
    for name, t in mp.params.items():
        if name in ("img_pos", "img_dec_pos"):
            out.params[name].data = interpolate_positional(t.data, old.grid, new_cfg.grid)
        else:
            out.params[name].data = t.data.copy()
    for name, t in mp.momentum.items():
        if name == "img_pos":
            out.momentum[name].data = interpolate_positional(t.data, old.grid, new_cfg.grid)
        else:
            out.momentum[name].data = t.data.copy()
    return out
