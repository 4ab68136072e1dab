"""MDM objective and AdamW training loop for the toy denoiser."""
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import model as M
from .checkpoint import Checkpoint
from .data import sample_mask

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    lr: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    t_min: float = 1e-3
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.t_min < 1:
            raise ValueError("t_min must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


def sample_t(n, rng, t_min=1e-3):
    """Noise levels uniform on (t_min, 1]."""
    return 1.0 - (1.0 - t_min) * rng.random(n)


def mdm_loss(params, cfg, x0, rng=None, t=None, mask=None, grad=False):
    """Batch-mean of -(1/t) * sum over masked i of log p(x0_i | x_t).

    ``t`` and ``mask`` are drawn from ``rng`` unless given.  With
    ``grad=True`` returns ``(loss, grads)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.int64))
    B = x0.shape[0]
    if t is None:
        t = sample_t(B, rng)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if mask is None:
        mask = sample_mask(t, rng, x0.shape[1])
    mask = np.asarray(mask, dtype=bool)
    xt = np.where(mask, cfg.mask_id, x0)

    logits, _, cache = M.forward(params, cfg, xt, keep_cache=grad)
    logp = M.log_marginals(logits.astype(np.float64), cfg.mask_id)
    true_logp = np.take_along_axis(logp, x0[..., None], axis=-1)[..., 0]
    weight = mask / t[:, None]
    loss = float(-(weight * true_logp).sum() / B)
    if not grad:
        return loss

    # d/dlogits of -w * log softmax over data symbols; MASK column gets zero
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, x0[..., None], 1.0, axis=-1)
    dz = (probs - onehot) * (weight / B)[..., None]
    dlogits = np.insert(dz, cfg.mask_id, 0.0, axis=-1).astype(logits.dtype)
    return loss, M.backward(params, cfg, cache, dlogits)


def sample_noise(n, rng, t_min=1e-3, length=9):
    """Draw (t, mask) pairs, redrawing both jointly until each row has a mask.

    Zero-mask draws contribute nothing to the objective, so conditioning on
    >= 1 mask only rescales it; unlike a fixed-t mask redraw it does not
    produce single-mask rows with huge 1/t weights.
    """
    t = sample_t(n, rng, t_min)
    mask = rng.random((n, length)) < t[:, None]
    empty = ~mask.any(axis=1)
    while empty.any():
        idx = np.flatnonzero(empty)
        t[idx] = sample_t(idx.size, rng, t_min)
        mask[idx] = rng.random((idx.size, length)) < t[idx, None]
        empty[idx] = ~mask[idx].any(axis=1)
    return t, mask


def uniform_baseline_loss(t_min=1e-3, seq_len=9, num_symbols=3):
    """Expected loss of the uniform model under :func:`sample_noise`.

    Unconditionally E[#masked / t] = L; conditioning on >= 1 mask divides by
    P(>= 1 mask) = 1 - (1 - t_min)^L / (L + 1).
    """
    p_none = (1.0 - t_min) ** seq_len / (seq_len + 1)
    return math.log(num_symbols) * seq_len / (1.0 - p_none)


class AdamW:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.wd and p.ndim >= 2:
                p *= 1.0 - self.lr * self.wd
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads, max_norm):
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def train(data, model_cfg, train_cfg, log_rows=None, progress=None):
    """Train a fresh model; returns a :class:`Checkpoint`.

    ``log_rows`` (a list) receives ``(step, mean_loss)`` every
    ``train_cfg.log_every`` steps.  ``progress`` is an optional callback
    ``(step, mean_loss)`` invoked at the same cadence.
    """
    data = np.asarray(data, dtype=np.int64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty (n, L) array")
    rng = np.random.default_rng(train_cfg.seed)
    params = M.init_params(model_cfg, rng)
    opt = AdamW(
        params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps,
        train_cfg.weight_decay,
    )
    window = []
    last = float("nan")
    started = time.perf_counter()
    for step in range(1, train_cfg.steps + 1):
        idx = rng.integers(0, data.shape[0], size=train_cfg.batch_size)
        x0 = data[idx]
        t, mask = sample_noise(x0.shape[0], rng, train_cfg.t_min, x0.shape[1])
        loss, grads = mdm_loss(params, model_cfg, x0, t=t, mask=mask, grad=True)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        clip_grads(grads, train_cfg.grad_clip)
        opt.step(params, grads)
        window.append(loss)
        if step % train_cfg.log_every == 0 or step == train_cfg.steps:
            last = float(np.mean(window))
            window = []
            if log_rows is not None:
                log_rows.append((step, last))
            if progress is not None:
                progress(step, last)
            log.debug("step %d loss %.4f (%.1fs)", step, last, time.perf_counter() - started)
    meta = {
        "steps": train_cfg.steps,
        "final_loss": last,
        "seed": train_cfg.seed,
        "train": train_cfg.to_dict(),
    }
    return Checkpoint(config=model_cfg, params=params, train_meta=meta)
