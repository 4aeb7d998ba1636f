"""Subword vocabulary learning and masked-token sampling on a toy corpus."""

import numpy as np

from m2i2.text import build_vocab, detokenize, mask_tokens, tokenize

corpus = [
    "a small bright circle in the upper left",
    "a large dark square in the center",
    "a small dark cross in the lower right",
    "a large bright circle in the lower left",
]

vocab = build_vocab(corpus, max_size=64)
print(f"learned {len(vocab)} pieces; the last ten:")
print("  " + " ".join(vocab.tokens[-10:]))

ids = tokenize(corpus[0], vocab, max_len=16)
print(f"\nencoded: {ids.tolist()}")
print(f"decoded: {detokenize(ids, vocab)!r}")

rng = np.random.default_rng(7)
masked = mask_tokens(ids, vocab, rate=0.15, rng=rng)
print(f"\nmasked positions {masked.mask_positions.tolist()} "
      f"(labels {masked.mask_labels.tolist()})")
print(f"masked view: {masked.ids.tolist()}")
