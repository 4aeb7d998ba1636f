"""Finite-difference verification of every differentiable op and each loss.

Central differences (eps=1e-5, float64) against the tape gradients, on random
probe inputs in [-2, 2]. Op-level tolerance 1e-4; end-to-end (through the
full sub-network depth) 1e-3.
"""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .model import ModelParams, decode_answer, decode_image, encode_image, encode_text, fuse, itm_logits, mlm_logits, project_itc
from .momentum import FeatureQueue, enqueue
from .objectives import cond_lm_loss, itc_loss, itm_loss, mim_loss, mlm_loss
from .tensor import Tensor, concat, cross_entropy, layer_norm, log_softmax, softmax

OP_TOL = 1e-4
E2E_TOL = 1e-3
EPS = 1e-5


def fd_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def _check(build, x0: np.ndarray) -> float:
    t = Tensor(x0.copy(), requires_grad=True)
    build(t).backward()
    num = fd_grad(lambda x: float(build(Tensor(x)).data), x0)
    return rel_err(t.grad, num)


def op_checks(rng: np.random.Generator) -> list[tuple[str, float, float]]:
    def r(*s):
        return rng.uniform(-2, 2, size=s)

    w34, w45, g5, b5, w35 = r(3, 4), r(4, 5), r(5), r(5), r(3, 5)
    tgt = np.array([1, 0, 3])
    cases = [
        ("matmul", lambda t: ((t @ Tensor(w45)) * Tensor(w35)).sum(), r(3, 4)),
        ("add_mul_div", lambda t: ((t * Tensor(w34) + t) / (Tensor(w34) * Tensor(w34) + 1.5)).sum(), r(3, 4)),
        ("exp_log", lambda t: ((t * 0.3).exp() + (t * t + 1.0).log()).sum(), r(3, 4)),
        ("tanh", lambda t: t.tanh().sum(), r(3, 4)),
        ("gelu", lambda t: t.gelu().sum(), r(3, 4)),
        ("relu", lambda t: t.relu().sum(), r(3, 4) + 0.1),
        ("softmax", lambda t: (softmax(t, axis=-1) * Tensor(w34)).sum(), r(3, 4)),
        ("log_softmax", lambda t: (log_softmax(t, axis=-1) * Tensor(w34)).sum(), r(3, 4)),
        ("layer_norm", lambda t: (layer_norm(t, Tensor(g5), Tensor(b5)) * Tensor(w35)).sum(), r(3, 5)),
        ("cross_entropy", lambda t: cross_entropy(t, tgt), r(3, 5)),
        ("reductions", lambda t: (t.sum(axis=0) * t.mean(axis=0)).sum(), r(3, 4)),
        ("reshape_transpose", lambda t: (t.reshape(4, 3).transpose((1, 0)) * Tensor(w34)).sum(), r(3, 4)),
        ("indexing", lambda t: (t[np.array([0, 2]), 1:] ** 2.0).sum(), r(3, 4)),
        ("concat", lambda t: (concat([t, t * 0.5], axis=1) * Tensor(np.concatenate([w34, w34], axis=1))).sum(), r(3, 4)),
    ]
    return [(f"op/{name}", _check(build, x0), OP_TOL) for name, build, x0 in cases]


def _probe_param_errs(mp: ModelParams, loss_fn, names: list[str], rng: np.random.Generator, n_probe: int = 6) -> float:
    mp.zero_grads()
    loss_fn().backward()
    worst = 0.0
    for name in names:
        p = mp.params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + EPS
            fp = float(loss_fn().data)
            flat[i] = orig - EPS
            fm = float(loss_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * EPS)
            denom = max(abs(num), abs(g.reshape(-1)[i]), 1e-8)
            worst = max(worst, abs(num - g.reshape(-1)[i]) / denom)
    return worst


def loss_checks(rng: np.random.Generator) -> list[tuple[str, float, float]]:
    cfg = TrainConfig.from_dict(
        {
            **TrainConfig().to_dict(),
            "dim": 16,
            "heads": 2,
            "depth_img_enc": 1,
            "depth_txt_enc": 1,
            "depth_fusion": 1,
            "depth_img_dec": 1,
            "depth_ans_dec": 1,
            "vocab_size": 32,
            "max_text_len": 8,
            "max_answer_len": 4,
            "image_size": 8,
            "patch_size": 4,
            "proj_dim": 8,
            "queue_capacity": 8,
            "batch_size": 2,
        }
    )
    mp = ModelParams(cfg.model_config(), np.random.default_rng(0))
    b = 2
    vis_pos = np.tile(np.array([0, 2]), (b, 1))
    msk_pos = np.tile(np.array([1, 3]), (b, 1))
    patches = rng.random((b, 2, cfg.patch_size**2))
    targets = rng.random((b, 2, cfg.patch_size**2))
    ids = rng.integers(7, 32, size=(b, 8))
    ids[:, 0] = 1
    mlm_b = np.array([0, 1, 1])
    mlm_p = np.array([2, 1, 4])
    mlm_lab = np.array([9, 12, 30])
    itm_lab = np.array([1, 0])
    ans_prefix = np.array([[5, 8, 9], [5, 10, 11]])
    ans_tgt = np.array([8, 9, 6, 10])
    queue = FeatureQueue(8, cfg.proj_dim)
    negs = rng.normal(size=(4, cfg.proj_dim))
    negs /= np.linalg.norm(negs, axis=-1, keepdims=True)
    enqueue(queue, negs, negs)

    def img_feats():
        return encode_image(mp, patches, vis_pos)

    def fused():
        return fuse(mp, encode_text(mp, ids), img_feats(), ids)

    def loss_mim():
        return mim_loss(decode_image(mp, img_feats(), vis_pos, msk_pos), targets)

    def loss_mlm():
        return mlm_loss(mlm_logits(mp, fused(), mlm_b, mlm_p), mlm_lab)

    def loss_itm():
        return itm_loss(itm_logits(mp, fused()[:, 0, :]), itm_lab)

    def loss_itc():
        ip = project_itc(mp, img_feats()[:, 0, :], "img")
        tp = project_itc(mp, encode_text(mp, ids)[:, 0, :], "txt")
        ipm = project_itc(mp, encode_image(mp, patches, vis_pos, use_momentum=True)[:, 0, :], "img", use_momentum=True)
        tpm = project_itc(mp, encode_text(mp, ids, use_momentum=True)[:, 0, :], "txt", use_momentum=True)
        return itc_loss(ip, tp, ipm, tpm, queue, mp.params["itc.log_temp"].exp())

    def loss_lm():
        logits = decode_answer(mp, fused(), ids, ans_prefix)
        flat = logits[np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])]
        return cond_lm_loss(flat, ans_tgt)

    suites = [
        ("loss/mim", loss_mim, ["img_dec.0.attn.wq", "mim.w", "img_mask_tok", "patch_embed.w"]),
        ("loss/mlm", loss_mlm, ["mlm.w", "fusion.0.xattn.wv", "txt_enc.0.mlp.w1", "tok_embed"]),
        ("loss/itm", loss_itm, ["itm.w", "fusion.0.attn.wo", "img_enc.0.ln1.g"]),
        ("loss/itc", loss_itc, ["itc_img.w", "itc_txt.w", "itc.log_temp", "txt_enc.0.attn.wq"]),
        ("loss/cond_lm", loss_lm, ["ans_head.w", "ans_dec.0.xattn.wk", "ans_pos", "fusion.0.mlp.w2"]),
    ]
    return [
        (name, _probe_param_errs(mp, fn, names, rng), E2E_TOL) for name, fn, names in suites
    ]


def run_all(seed: int = 0) -> list[tuple[str, float, float, bool]]:
    rng = np.random.default_rng(seed)
    results = op_checks(rng) + loss_checks(rng)
    return [(name, err, tol, err < tol) for name, err, tol in results]
