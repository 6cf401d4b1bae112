"""Synthetic masked-prediction tasks generated in-process.

masked-copy: each sequence is a random half repeated twice; some positions
are replaced by the mask token and must be recovered from the visible twin
in the other half. Attention across the sequence is necessary and
sufficient, which makes accuracy a direct probe of the attention variant.

associative recall: key/value pairs followed by a probe key and a masked
slot that must be filled with the probed value.

The mask token is always the last vocabulary id; regular tokens never use it.
"""

import numpy as np

from .model import Batch
from .tensor import ShapeError

TASKS = ("masked-copy", "assoc-recall")


def mask_token(vocab):
    return vocab - 1


def masked_copy_batch(rng, batch_size, n, vocab, mask_rate=0.15):
    """Twin-copy sequences with one side of each chosen pair masked.

    Masking picks pair indices without replacement and hides exactly one
    twin, so every masked token stays recoverable from its visible copy.
    """
    if n % 2 != 0:
        raise ShapeError(f"masked-copy: sequence length must be even, got {n}")
    half = n // 2
    m = max(1, round(mask_rate * n))
    if m > half:
        raise ShapeError(f"masked-copy: mask rate {mask_rate} exceeds one per pair")
    ids = np.empty((batch_size, n), dtype=np.int64)
    pos = np.empty((batch_size, m), dtype=np.int64)
    tgt = np.empty((batch_size, m), dtype=np.int64)
    for s in range(batch_size):
        base = rng.integers(0, vocab - 1, size=half)
        seq = np.concatenate([base, base])
        pairs = rng.choice(half, size=m, replace=False)
        side = rng.integers(0, 2, size=m)
        where = pairs + side * half
        tgt[s] = seq[where]
        seq[where] = mask_token(vocab)
        ids[s] = seq
        pos[s] = where
    return Batch(ids, pos, tgt)


def assoc_recall_batch(rng, batch_size, n, vocab):
    """Key/value pair list, then a probe key whose value is masked.

    Keys live in the lower half of the vocabulary, values in the upper half
    (final id reserved for the mask). One masked position per sequence.
    """
    n_keys = (vocab - 1) // 2
    n_vals = vocab - 1 - n_keys
    pairs = min((n - 2) // 2, n_keys)
    if pairs < 1:
        raise ShapeError(
            f"assoc-recall: cannot fit any key/value pair in length {n} "
            f"with vocab {vocab}"
        )
    ids = np.full((batch_size, n), mask_token(vocab), dtype=np.int64)
    pos = np.empty((batch_size, 1), dtype=np.int64)
    tgt = np.empty((batch_size, 1), dtype=np.int64)
    for s in range(batch_size):
        keys = rng.choice(n_keys, size=pairs, replace=False)
        vals = n_keys + rng.integers(0, n_vals, size=pairs)
        seq = np.empty(2 * pairs, dtype=np.int64)
        seq[0::2] = keys
        seq[1::2] = vals
        probe = rng.integers(0, pairs)
        ids[s, :2 * pairs] = seq
        ids[s, -2] = keys[probe]
        pos[s, 0] = n - 1
        tgt[s, 0] = vals[probe]
    return Batch(ids, pos, tgt)


def make_batch(task, rng, batch_size, n, vocab, mask_rate=0.15):
    if task == "masked-copy":
        return masked_copy_batch(rng, batch_size, n, vocab, mask_rate)
    if task == "assoc-recall":
        return assoc_recall_batch(rng, batch_size, n, vocab)
    raise ShapeError(f"unknown task {task!r}, expected one of {TASKS}")
