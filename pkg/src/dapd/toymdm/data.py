"""Synthetic modular-sum dataset and the forward masking process."""
import numpy as np

from ..decode import MASK, SequenceState

NUM_SYMBOLS = 3
NUM_X = 5
SEQ_LEN = 9
LABELS = ("X1", "X2", "X3", "X4", "X5", "Y1", "Y2", "Y3", "Y4")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}


def complete(xs):
    """Append Y_i = (X_i + X_{i+1}) mod 3 to an (..., 5) array of X values."""
    xs = np.asarray(xs, dtype=np.int64)
    ys = (xs[..., :-1] + xs[..., 1:]) % NUM_SYMBOLS
    return np.concatenate([xs, ys], axis=-1)


def gen_dataset(n, seed):
    """``n`` valid sequences as an (n, 9) int array, reproducible per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return complete(rng.integers(0, NUM_SYMBOLS, size=(n, NUM_X)))


def is_valid(seqs):
    """Elementwise validity of (..., 9) sequences over {0,1,2}."""
    seqs = np.asarray(seqs)
    if seqs.shape[-1] != SEQ_LEN:
        raise ValueError(f"expected length-{SEQ_LEN} sequences, got {seqs.shape[-1]}")
    if np.any((seqs < 0) | (seqs >= NUM_SYMBOLS)):
        raise ValueError("sequence entries must lie in {0, 1, 2}")
    want = (seqs[..., :4] + seqs[..., 1:5]) % NUM_SYMBOLS
    return np.all(seqs[..., 5:] == want, axis=-1)


def sample_mask(t, rng, length=SEQ_LEN):
    """Bernoulli(t) masks of shape (len(t), length) with >= 1 mask per row.

    Rows that came out empty are redrawn with their own t until non-empty.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t <= 0) | (t > 1)):
        raise ValueError("t must lie in (0, 1]")
    mask = rng.random((t.size, length)) < t[:, None]
    empty = ~mask.any(axis=1)
    while empty.any():
        idx = np.flatnonzero(empty)
        mask[idx] = rng.random((idx.size, length)) < t[idx, None]
        empty[idx] = ~mask[idx].any(axis=1)
    return mask


def corrupt(x0, t, rng):
    """Mask each position of one example independently with probability t."""
    x0 = np.asarray(x0, dtype=np.int64)
    mask = sample_mask([t], rng, x0.size)[0]
    tokens = np.where(mask, MASK, x0)
    return SequenceState(tokens=tokens, prompt_len=0)


def save_dataset(path, data):
    with open(path, "w") as fh:
        for row in np.asarray(data):
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_dataset(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = [int(tok) for tok in line.split()]
            if len(vals) != SEQ_LEN:
                raise ValueError(f"{path}:{lineno}: expected {SEQ_LEN} integers")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: empty dataset")
    return np.array(rows, dtype=np.int64)
