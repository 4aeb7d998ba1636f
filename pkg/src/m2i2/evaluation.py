"""Generative answer decoding, closed/open accuracy reporting, and
gradient-weighted cross-attention heatmaps.
"""

from __future__ import annotations

import json
import os
import re
import string
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .errors import ConfigError
from .model import ModelParams, decode_answer, encode_image, encode_text, fuse
from .synth import VqaSample
from .tensor import log_softmax
from .text import BOS, EOS, Vocab, detokenize, tokenize
from .vision import Image, augment, load_image, patchify, write_image


def normalize_answer(text: str) -> str:
    """Lowercase, trim, collapse whitespace, strip terminal punctuation."""
    out = re.sub(r"\s+", " ", text.lower()).strip()
    return out.rstrip(string.punctuation + " ")


@dataclass
class EvalReport:
    closed_correct: int = 0
    closed_n: int = 0
    open_correct: int = 0
    open_n: int = 0
    predictions: list[dict] = field(default_factory=list)

    @property
    def closed_acc(self) -> float:
        return self.closed_correct / self.closed_n if self.closed_n else 0.0

    @property
    def open_acc(self) -> float:
        return self.open_correct / self.open_n if self.open_n else 0.0

    @property
    def overall_acc(self) -> float:
        n = self.closed_n + self.open_n
        return (self.closed_correct + self.open_correct) / n if n else 0.0

    def table(self) -> str:
        return (
            "answer_type  correct  total  accuracy\n"
            f"closed       {self.closed_correct:7d}  {self.closed_n:5d}  {self.closed_acc:.4f}\n"
            f"open         {self.open_correct:7d}  {self.open_n:5d}  {self.open_acc:.4f}\n"
            f"overall      {self.closed_correct + self.open_correct:7d}  "
            f"{self.closed_n + self.open_n:5d}  {self.overall_acc:.4f}\n"
        )


def _encode_full_image(mp: ModelParams, cfg: TrainConfig, img: Image):
    p = patchify(augment(img, cfg.image_size, train=False), cfg.patch_size)
    vis = p.patches[None]
    pos = np.arange(p.n_patches)[None]
    return encode_image(mp, vis, pos), p.grid


def fuse_question(
    mp: ModelParams,
    cfg: TrainConfig,
    img: Image,
    question: str,
    vocab: Vocab,
    capture: list | None = None,
):
    img_feats, grid = _encode_full_image(mp, cfg, img)
    ids = tokenize(question, vocab, cfg.max_text_len)[None]
    fused = fuse(mp, encode_text(mp, ids), img_feats, ids, capture=capture)
    return fused, ids, grid


def generate_answer(
    mp: ModelParams,
    cfg: TrainConfig,
    img: Image,
    question: str,
    vocab: Vocab,
    max_len: int | None = None,
) -> list[int]:
    """Greedy decoding from BOS; stops at EOS or max_len tokens."""
    max_len = max_len if max_len is not None else cfg.max_answer_len - 1
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    fused, ids, _ = fuse_question(mp, cfg, img, question, vocab)
    prefix = [BOS]
    out: list[int] = []
    for _ in range(max_len):
        logits = decode_answer(mp, fused, ids, np.array([prefix]))
        # the head covers cfg.vocab_size slots; only ids the vocab defines
        # are decodable (ties resolve to lowest id)
        nxt = int(np.argmax(logits.data[0, -1, : len(vocab)]))
        if nxt == EOS:
            break
        out.append(nxt)
        prefix.append(nxt)
        if len(prefix) >= cfg.max_answer_len:
            break
    return out


def evaluate(
    mp: ModelParams,
    cfg: TrainConfig,
    samples: list[VqaSample],
    data_root,
    vocab: Vocab,
    answer_type_filter: str = "all",  # all | free (freeform question_form only)
) -> EvalReport:
    """Exact-match accuracy after normalization, split by answer type."""
    if answer_type_filter == "free":
        samples = [s for s in samples if s.question_form == "freeform"]
    if not samples:
        raise ConfigError("no samples left after filtering")
    report = EvalReport()
    cache: dict[str, Image] = {}
    for s in samples:
        if s.image not in cache:
            cache[s.image] = load_image(os.path.join(data_root, s.image), channels=cfg.channels)
        toks = generate_answer(mp, cfg, cache[s.image], s.question, vocab)
        pred = detokenize(toks, vocab)
        correct = normalize_answer(pred) == normalize_answer(s.answer)
        if s.answer_type == "closed":
            report.closed_n += 1
            report.closed_correct += int(correct)
        else:
            report.open_n += 1
            report.open_correct += int(correct)
        report.predictions.append(
            {"question": s.question, "gold": s.answer, "prediction": pred, "correct": correct}
        )
    return report


def write_report(report: EvalReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval_report.txt"), "w", encoding="utf-8") as f:
        f.write(report.table())
    with open(os.path.join(out_dir, "predictions.jsonl"), "w", encoding="utf-8") as f:
        for p in report.predictions:
            f.write(json.dumps(p, sort_keys=True) + "\n")


def attention_map(
    mp: ModelParams,
    cfg: TrainConfig,
    img: Image,
    question: str,
    vocab: Vocab,
    layer: int = -1,
    grad_weighted: bool = True,
) -> np.ndarray:
    """Cross-attention heatmap over the patch grid, min-max scaled to [0,1].

    Takes the chosen fusion layer's attention from the question CLS row to
    the image patch tokens. With grad_weighted, attention is scaled by the
    positive part of its gradient w.r.t. the generated answer's first-token
    log-probability before head reduction.
    """
    capture: list = []
    fused, ids, grid = fuse_question(mp, cfg, img, question, vocab, capture=capture)
    if not -len(capture) <= layer < len(capture):
        raise IndexError(f"fusion layer {layer} out of range for depth {len(capture)}")
    attn = capture[layer]  # [1, heads, L, 1+N]
    if grad_weighted:
        logits = decode_answer(mp, fused, ids, np.array([[BOS]]))
        first = int(np.argmax(logits.data[0, -1]))
        mp.zero_grads()
        log_softmax(logits[0, -1])[first].backward()
        g = attn.grad if attn.grad is not None else np.zeros(attn.shape)
        weighted = attn.data * np.maximum(g, 0.0)
    else:
        weighted = attn.data
    rows = weighted[0, :, 0, 1:].mean(axis=0)  # CLS query row, patch keys only
    lo, hi = rows.min(), rows.max()
    rows = (rows - lo) / (hi - lo) if hi > lo else np.zeros_like(rows)
    return rows.reshape(grid)


def write_heatmap(path, heat: np.ndarray, upsample: int = 16) -> None:
    """Nearest-neighbor upsampled PGM overlay-free heatmap."""
    big = np.repeat(np.repeat(heat, upsample, axis=0), upsample, axis=1)
    write_image(path, Image(big[:, :, None]))
