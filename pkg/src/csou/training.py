"""MSE trainer for the unfolded network.

Single-process, deterministic: shuffling is keyed by (seed, epoch) through a
counter-based generator, so two runs with the same seed visit identical
batches and produce bitwise-identical parameters.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .network import NetworkParams, named_params, net_forward, save_checkpoint
from .scene import SceneConfig, embed_scene


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    clip_norm: float = 10.0
    checkpoint_interval: int = 0  # epochs between snapshots; 0 = final only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        # lr = 0 is legal: a frozen run is the cheapest determinism probe.
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")


class Adam:
    """Standard Adam with bias correction; state matches parameter dtype."""

    def __init__(self, tensors, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.tensors]
        self._v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.tensors, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self):
        for p in self.tensors:
            p.zero_grad()


def mse_loss(pred, target):
    d = ad.sub(pred, target)
    return ad.tmean(ad.mul(d, d))


def clip_gradients(tensors, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    sq = 0.0
    for p in tensors:
        if p.grad is not None:
            sq += float(np.vdot(p.grad, p.grad).real)
    norm = float(np.sqrt(sq))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in tensors:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def epoch_permutation(seed, epoch, n):
    """Shuffle order for one epoch; independent of prior epochs."""
    key = np.array([seed, epoch], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.permutation(n)


def prepare_arrays(records, scene_cfg: SceneConfig, dtype=np.float32):
    """Stack measurements and embedded truth grids for the train loop."""
    ys = np.stack([r.y for r in records]).astype(dtype)
    targets = np.stack(
        [embed_scene(r.scene, scene_cfg).astype(dtype) for r in records]
    )[:, None]
    return ys, targets


def train(
    params: NetworkParams,
    ys,
    targets,
    cfg: TrainConfig,
    log_path=None,
    ckpt_dir=None,
    progress=None,
):
    """Run the full loop; returns per-epoch mean losses.

    ``ys`` is (N, m1, m2) and ``targets`` is (N, 1, n1, n2); both are cast to
    the parameter dtype.  When ``ckpt_dir`` is given, a snapshot lands there
    every ``cfg.checkpoint_interval`` epochs plus one at the end.  A NaN loss
    aborts immediately rather than burning the remaining epochs.  ``progress``
    is called with (epoch, mean_loss) after every epoch when given.
    """
    tensors = [t for _, t in named_params(params)]
    dtype = tensors[-1].dtype
    ys = np.asarray(ys, dtype=dtype)
    targets = np.asarray(targets, dtype=dtype)
    n = ys.shape[0]
    if targets.shape[0] != n:
        raise ValueError("measurement/target counts differ")
    opt = Adam(tensors, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    if ckpt_dir is not None:
        os.makedirs(ckpt_dir, exist_ok=True)
    log = open(log_path, "w") if log_path else None
    if log:
        log.write("epoch,step,loss\n")
    history = []
    try:
        for epoch in range(cfg.epochs):
            order = epoch_permutation(cfg.seed, epoch, n)
            total = 0.0
            for step, lo in enumerate(range(0, n, cfg.batch_size)):
                idx = order[lo : lo + cfg.batch_size]
                out = net_forward(params, ys[idx])
                loss = mse_loss(out, ad.Tensor(targets[idx]))
                loss.backward()
                clip_gradients(tensors, cfg.clip_norm)
                opt.step()
                opt.zero_grad()
                val = loss.item()
                if not np.isfinite(val):
                    raise FloatingPointError(
                        "training diverged: loss=%r at epoch %d step %d"
                        % (val, epoch, step)
                    )
                total += val * len(idx)
                if log:
                    log.write("%d,%d,%.9g\n" % (epoch, step, val))
            mean = total / n
            history.append(mean)
            if ckpt_dir is not None and cfg.checkpoint_interval > 0:
                if (epoch + 1) % cfg.checkpoint_interval == 0:
                    save_checkpoint(
                        params,
                        os.path.join(ckpt_dir, "checkpoint_ep%03d.csoc" % (epoch + 1)),
                    )
            if progress is not None:
                progress(epoch, mean)
        if ckpt_dir is not None:
            save_checkpoint(params, os.path.join(ckpt_dir, "checkpoint.csoc"))
    finally:
        if log:
            log.close()
    return history
