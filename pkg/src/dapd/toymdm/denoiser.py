"""Adapter exposing a trained checkpoint as a decode-loop denoiser."""
import numpy as np

from ..decode import MASK, DenoiserOutput
from . import model as M


def forward(ckpt, tokens):
    """Batched forward on (B, L) tokens that use ``MASK`` for masked slots.

    Returns ``(probs, attention)``: (B, L, V-1) float64 marginals over the
    data symbols at every position, and one (B, H, L, L) array per layer.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] != ckpt.config.seq_len:
        raise ValueError(f"expected length {ckpt.config.seq_len}, got {tokens.shape[1]}")
    ids = np.where(tokens == MASK, ckpt.config.mask_id, tokens)
    logits, attn, _ = M.forward(ckpt.params, ckpt.config, ids)
    probs = np.exp(M.log_marginals(logits.astype(np.float64), ckpt.config.mask_id))
    return probs, attn


class ToyDenoiser:
    """Callable ``SequenceState -> DenoiserOutput`` backed by a checkpoint."""

    def __init__(self, ckpt):
        self.ckpt = ckpt

    def __call__(self, state):
        masked = state.masked
        if masked.size == 0:
            raise ValueError("state has no masked positions")
        probs, attn = forward(self.ckpt, state.tokens[None])
        return DenoiserOutput(
            positions=masked,
            marginals=probs[0, masked],
            attention=[a[0] for a in attn],
        )
