"""Serial training loop with deterministic per-step randomness and resumable checkpoints."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint
from .data import window
from .metrics import LossWeights, loss

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 100
    min_lr_frac: float = 0.05
    clip: float = 1.0
    train_alphas: tuple = (0.05, 0.10, 0.20, 0.30)
    beta_model: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    log_every: int = 50
    ckpt_every: int = 500

    def lr_at(self, step):
        """Linear warmup then cosine decay to ``min_lr_frac * lr``."""
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(self.steps - self.warmup, 1)
        t = min((step - self.warmup) / span, 1.0)
        return self.lr * (self.min_lr_frac + (1 - self.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * t)))


def sample_batch(episodes, cfg, step):
    """Episodes and windows for ``step``; depends only on (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step, 11])
    idx = rng.integers(len(episodes), size=cfg.batch_size)
    alphas = rng.choice(np.asarray(cfg.train_alphas), size=cfg.batch_size)
    eps = [episodes[i] for i in idx]
    wins = [window(ep, float(a), cfg.beta_model) for ep, a in zip(eps, alphas)]
    return eps, wins


def train_step(model, opt, episodes, cfg, step):
    eps, wins = sample_batch(episodes, cfg, step)
    batch = model.prepare(eps, wins)
    bundle = model.forward(batch, training=True, rng=np.random.default_rng([cfg.seed, step, 17]))
    total, parts = loss(bundle, batch, cfg.weights)
    value = total.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step} (parts: {parts})")
    opt.zero_grad()
    ag.backward(total)
    gnorm = ag.clip_grad_norm(opt.params.values(), cfg.clip)
    opt.step(cfg.lr_at(step))
    return value, parts, gnorm


def save_training_state(path, model, opt, step):
    arrays = dict(model.state_dict())
    arrays.update(opt.state())
    arrays["train.step"] = np.array([step], dtype=np.float32)
    checkpoint.save(path, arrays)


def load_training_state(path, model, opt=None):
    arrays = checkpoint.load(path)
    params = {k: v for k, v in arrays.items() if k in model.params}
    model.load_state_dict(params)
    step = int(arrays["train.step"][0]) if "train.step" in arrays else 0
    if opt is not None and "train.step" in arrays:
        opt.load_state(arrays, step)
    return step


def fit(model, episodes, cfg, out_dir=None, start_step=0, opt=None, curve=None, log_fn=None):
    """Train ``model`` in place for ``cfg.steps`` total steps.

    Returns ``(history, opt)`` where history holds (step, loss, obs, act,
    dur, grad_norm, lr).  With ``out_dir`` set, writes ``final.ckpt``,
    ``best.ckpt`` (lowest running-mean loss at a logging step),
    periodic ``step<k>.ckpt`` and ``curve.tsv``.
    """
    opt = opt or ag.Adam(model.params, lr=cfg.lr)
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    best = math.inf
    window_losses = []
    t0 = time.perf_counter()
    for step in range(start_step, cfg.steps):
        value, parts, gnorm = train_step(model, opt, episodes, cfg, step)
        history.append((step, value, parts["obs"], parts["act"], parts["dur"], gnorm, cfg.lr_at(step)))
        window_losses.append(value)
        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.steps:
            mean_loss = float(np.mean(window_losses))
            window_losses.clear()
            msg = (f"step {done:5d}  loss {mean_loss:.4f}  obs {parts['obs']:.3f}  act {parts['act']:.3f}"
                   f"  dur {parts['dur']:.4f}  |g| {gnorm:.2f}  {time.perf_counter() - t0:.0f}s")
            (log_fn or log.info)(msg)
            if out is not None and mean_loss < best:
                best = mean_loss
                save_training_state(out / "best.ckpt", model, opt, done)
        if out is not None and cfg.ckpt_every and done % cfg.ckpt_every == 0:
            save_training_state(out / f"step{done}.ckpt", model, opt, done)
    if out is not None:
        save_training_state(out / "final.ckpt", model, opt, cfg.steps)
        rows = list(curve or []) + history
        with open(out / "curve.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("step\tloss\tobs\tact\tdur\tgrad_norm\tlr\n")
            for r in rows:
                fh.write(f"{r[0]}\t{r[1]:.6f}\t{r[2]:.6f}\t{r[3]:.6f}\t{r[4]:.6f}\t{r[5]:.6f}\t{r[6]:.6g}\n")
    return history, opt
