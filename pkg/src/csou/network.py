"""Deep-unfolded reconstruction network.

Each stage mirrors one ADMM iteration on the block-average measurement model:
a closed-form x-update, a learned z-update built from a dynamic convolution
(attention-mixed basis kernels), SiLU, a static convolution and shrinkage with
a learned threshold, then the multiplier update.  After the last stage a
reconstruction head combines

    - per-pixel thresholds generated from the multiplier/auxiliary gap
      (threshold generator), and
    - a fusion of late-stage auxiliary iterates with the upsampled
      measurement (history reorganization),

through one more closed-form solve, clamped to nonnegative intensities.

Parameters live in plain dataclasses of ``autodiff.Tensor`` leaves so the
trainer and the checkpoint code can walk them by name in a fixed order.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backend
from .scene import SceneConfig


@dataclass
class NetConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    n_stages: int = 6
    channels: int = 16  # feature width inside the z-path
    n_bases: int = 4  # dynamic-conv basis kernels
    mlp_hidden: int = 8  # attention MLP width
    ksize: int = 3
    alpha: float = 0.7  # dynamic/static kernel blend
    history: int = 3  # max auxiliary iterates fused by the head
    dir_pos: int = 3  # first stage whose iterate may enter the head

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be at least 1")
        if not 1 <= self.dir_pos <= self.n_stages:
            raise ValueError("dir_pos must lie in [1, n_stages]")
        if self.history < 1:
            raise ValueError("history must be at least 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.ksize % 2 != 1:
            raise ValueError("ksize must be odd")

    @property
    def pad(self):
        return (self.ksize - 1) // 2

    @property
    def history_start(self):
        """First stage (1-indexed) whose auxiliary iterate feeds the head."""
        return max(self.dir_pos, self.n_stages - self.history + 1)

    @property
    def history_len(self):
        return self.n_stages - self.history_start + 1


@dataclass
class StageParams:
    c1_basis: ad.Tensor  # (n_bases, L, 1, k, k)
    c1_static: ad.Tensor  # (L, 1, k, k)
    c1_bias: ad.Tensor  # (L,)
    mlp_w1: ad.Tensor  # (1, hidden)
    mlp_b1: ad.Tensor  # (hidden,)
    mlp_w2: ad.Tensor  # (hidden, n_bases)
    mlp_b2: ad.Tensor  # (n_bases,)
    c2_w: ad.Tensor  # (1, L, k, k)
    c2_bias: ad.Tensor  # (1,)
    mu1: ad.Tensor  # scalar mixing weights
    mu2: ad.Tensor
    theta_raw: ad.Tensor  # softplus -> shrinkage threshold
    rho_raw: ad.Tensor  # softplus -> penalty weight


@dataclass
class DtgParams:
    conv1_w: ad.Tensor  # (L, 1, k, k) parallel branch 1
    conv1_b: ad.Tensor
    conv2_w: ad.Tensor  # (L, 1, k, k) parallel branch 2
    conv2_b: ad.Tensor
    fuse_w: ad.Tensor  # (1, 2, k, k) over [channel-avg; channel-max]
    fuse_b: ad.Tensor


@dataclass
class DirParams:
    enh_w: ad.Tensor  # (1, 1, k, k) shared history enhancement
    enh_b: ad.Tensor
    fuse_logits: ad.Tensor  # (history_len,) softmax fusion weights
    feat_w: ad.Tensor  # (L, 1, k, k) measurement-branch lift
    feat_b: ad.Tensor
    mix1_w: ad.Tensor  # (L, L+1, k, k)
    mix1_b: ad.Tensor
    mix2_w: ad.Tensor  # (1, L, k, k)
    mix2_b: ad.Tensor


@dataclass
class NetworkParams:
    cfg: NetConfig
    stages: list
    dtg: DtgParams
    dir: DirParams
    rho_final_raw: ad.Tensor


def inv_softplus(y):
    """Raw value r with softplus(r) = y, for positive init targets."""
    if y <= 0:
        raise ValueError("softplus targets must be positive")
    return math.log(math.expm1(y))


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return ad.param(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def _zeros(shape, dtype):
    return ad.param(np.zeros(shape), dtype=dtype)


def _scalar(v, dtype):
    return ad.param(np.asarray(v), dtype=dtype)


def init_params(cfg: NetConfig, seed=0, dtype=np.float32) -> NetworkParams:
    """Variance-scaled symmetric uniform kernels, zero biases, neutral scalars."""
    rng = np.random.default_rng(seed)
    L, k, nb, hid = cfg.channels, cfg.ksize, cfg.n_bases, cfg.mlp_hidden
    kk = k * k
    stages = []
    for _ in range(cfg.n_stages):
        stages.append(
            StageParams(
                c1_basis=_uniform(rng, (nb, L, 1, k, k), kk, dtype),
                c1_static=_uniform(rng, (L, 1, k, k), kk, dtype),
                c1_bias=_zeros((L,), dtype),
                mlp_w1=_uniform(rng, (1, hid), 1, dtype),
                mlp_b1=_zeros((hid,), dtype),
                mlp_w2=_uniform(rng, (hid, nb), hid, dtype),
                mlp_b2=_zeros((nb,), dtype),
                c2_w=_uniform(rng, (1, L, k, k), L * kk, dtype),
                c2_bias=_zeros((1,), dtype),
                mu1=_scalar(0.9, dtype),
                mu2=_scalar(0.1, dtype),
                theta_raw=_scalar(inv_softplus(0.01), dtype),
                rho_raw=_scalar(inv_softplus(1.0), dtype),
            )
        )
    dtg = DtgParams(
        conv1_w=_uniform(rng, (L, 1, k, k), kk, dtype),
        conv1_b=_zeros((L,), dtype),
        conv2_w=_uniform(rng, (L, 1, k, k), kk, dtype),
        conv2_b=_zeros((L,), dtype),
        fuse_w=_uniform(rng, (1, 2, k, k), 2 * kk, dtype),
        fuse_b=_zeros((1,), dtype),
    )
    dirp = DirParams(
        enh_w=_uniform(rng, (1, 1, k, k), kk, dtype),
        enh_b=_zeros((1,), dtype),
        fuse_logits=_zeros((cfg.history_len,), dtype),
        feat_w=_uniform(rng, (L, 1, k, k), kk, dtype),
        feat_b=_zeros((L,), dtype),
        mix1_w=_uniform(rng, (L, L + 1, k, k), (L + 1) * kk, dtype),
        mix1_b=_zeros((L,), dtype),
        mix2_w=_uniform(rng, (1, L, k, k), L * kk, dtype),
        mix2_b=_zeros((1,), dtype),
    )
    return NetworkParams(
        cfg=cfg,
        stages=stages,
        dtg=dtg,
        dir=dirp,
        rho_final_raw=_scalar(inv_softplus(1.0), dtype),
    )


def named_params(params: NetworkParams):
    """(name, tensor) pairs in a fixed walk order."""
    out = []
    for i, sp in enumerate(params.stages):
        for f in (
            "c1_basis",
            "c1_static",
            "c1_bias",
            "mlp_w1",
            "mlp_b1",
            "mlp_w2",
            "mlp_b2",
            "c2_w",
            "c2_bias",
            "mu1",
            "mu2",
            "theta_raw",
            "rho_raw",
        ):
            out.append(("stage%d.%s" % (i, f), getattr(sp, f)))
    for f in ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fuse_w", "fuse_b"):
        out.append(("dtg.%s" % f, getattr(params.dtg, f)))
    for f in (
        "enh_w",
        "enh_b",
        "fuse_logits",
        "feat_w",
        "feat_b",
        "mix1_w",
        "mix1_b",
        "mix2_w",
        "mix2_b",
    ):
        out.append(("dir.%s" % f, getattr(params.dir, f)))
    out.append(("rho_final_raw", params.rho_final_raw))
    return out


def init_layer(y_batch, cfg: NetConfig, dtype=None):
    """Initial state from the measurement: replicated upsample, zero z/beta.

    Returns (x1, z1, beta1, phity) where phity is the measurement pulled
    back through the adjoint of block averaging (replicate / c^2), reused
    by every stage's data term.
    """
    y = np.asarray(y_batch)
    if y.ndim == 2:
        y = y[None]
    if dtype is not None:
        y = y.astype(dtype, copy=False)
    c = cfg.scene.c
    up = backend.block_replicate(y[:, None], c)
    x1 = ad.Tensor(up)
    phity = ad.Tensor(up / (c * c))
    z1 = ad.Tensor(np.zeros_like(up))
    beta1 = ad.Tensor(np.zeros_like(up))
    return x1, z1, beta1, phity


def dynamic_conv(x, sp: StageParams, cfg: NetConfig):
    """Sample-conditioned convolution: softmax-attended basis kernels blended
    with a static kernel, then a per-sample convolution."""
    pooled = ad.global_avg(x)  # (B, 1)
    hidden = ad.silu(ad.linear(pooled, sp.mlp_w1, sp.mlp_b1))
    attn = ad.softmax(ad.linear(hidden, sp.mlp_w2, sp.mlp_b2), axis=-1)  # (B, nb)
    nb = sp.c1_basis.shape[0]
    flat = ad.reshape(sp.c1_basis, (nb, -1))
    mixed = ad.reshape(ad.matmul(attn, flat), (x.shape[0],) + sp.c1_static.shape)
    w_eff = ad.add(ad.scale(mixed, cfg.alpha), ad.scale(sp.c1_static, 1.0 - cfg.alpha))
    return ad.conv2d(x, w_eff, sp.c1_bias, pad=cfg.pad)


def stage_forward(x, z, beta, phity, sp: StageParams, cfg: NetConfig):
    """One unfolded iteration; state tensors are (B,1,N1,N2)."""
    rho = ad.softplus(sp.rho_raw)
    theta = ad.softplus(sp.theta_raw)
    x_new = ad.grid_solve(ad.add(phity, ad.mul(rho, ad.sub(z, beta))), rho, cfg.scene.c)
    v = ad.add(x_new, beta)
    t = ad.conv2d(ad.silu(dynamic_conv(v, sp, cfg)), sp.c2_w, sp.c2_bias, pad=cfg.pad)
    z_new = ad.add(ad.mul(sp.mu1, z), ad.mul(sp.mu2, ad.soft_threshold(t, theta)))
    beta_new = ad.add(beta, ad.mul(rho, ad.sub(x_new, z_new)))
    return x_new, z_new, beta_new


def dtg_forward(delta, dp: DtgParams, cfg: NetConfig):
    """Per-pixel nonnegative thresholds from the beta-z gap."""
    u1 = ad.conv2d(delta, dp.conv1_w, dp.conv1_b, pad=cfg.pad)
    u2 = ad.conv2d(delta, dp.conv2_w, dp.conv2_b, pad=cfg.pad)
    u = ad.concat([u1, u2], axis=1)
    pooled = ad.concat([ad.channel_avg(u), ad.channel_max(u)], axis=1)
    return ad.softplus(ad.conv2d(pooled, dp.fuse_w, dp.fuse_b, pad=cfg.pad))


def dir_forward(z_history, inp, dp: DirParams, cfg: NetConfig):
    """Fuse tanh-enhanced auxiliary iterates with the upsampled measurement."""
    enh = [ad.tanh(ad.conv2d(zi, dp.enh_w, dp.enh_b, pad=cfg.pad)) for zi in z_history]
    stacked = ad.concat(enh, axis=1) if len(enh) > 1 else enh[0]
    h = len(enh)
    wts = ad.softmax(ad.reshape(dp.fuse_logits, (1, h)), axis=-1)
    fused = ad.scale(ad.channel_avg(ad.mul(stacked, ad.reshape(wts, (1, h, 1, 1)))), h)
    feat = ad.silu(ad.conv2d(inp, dp.feat_w, dp.feat_b, pad=cfg.pad))
    cat = ad.concat([fused, feat], axis=1)
    mixed = ad.silu(ad.conv2d(cat, dp.mix1_w, dp.mix1_b, pad=cfg.pad))
    return ad.conv2d(mixed, dp.mix2_w, dp.mix2_b, pad=cfg.pad)


def final_reconstruction(z, beta, z_history, inp, params: NetworkParams):
    """Reconstruction head: one more closed-form solve on fused features minus
    the shrunken multiplier gap, clamped to nonnegative intensities."""
    cfg = params.cfg
    delta = ad.sub(beta, z)
    theta_map = dtg_forward(delta, params.dtg, cfg)
    shrunk = ad.soft_threshold(delta, theta_map)
    rho_f = ad.softplus(params.rho_final_raw)
    rhs = ad.sub(dir_forward(z_history, inp, params.dir, cfg), ad.mul(rho_f, shrunk))
    return ad.relu(ad.grid_solve(rhs, rho_f, cfg.scene.c))


def net_forward(params: NetworkParams, y_batch, collect_states=False):
    """Run all stages plus the head; returns the output tensor, and the list
    of per-stage (x, z, beta) states when asked."""
    cfg = params.cfg
    dtype = params.rho_final_raw.dtype
    x, z, beta, phity = init_layer(y_batch, cfg, dtype=dtype)
    history = []
    states = []
    for k, sp in enumerate(params.stages, start=1):
        x, z, beta = stage_forward(x, z, beta, phity, sp, cfg)
        if k >= cfg.history_start:
            history.append(z)
        if collect_states:
            states.append((x, z, beta))
    out = final_reconstruction(z, beta, history, phity_to_input(phity, cfg), params)
    return (out, states) if collect_states else out


def phity_to_input(phity, cfg: NetConfig):
    """Measurement branch of the head: the replicated measurement itself."""
    return ad.scale(phity, float(cfg.scene.c * cfg.scene.c))


def prox_equivalent_stage(cfg: NetConfig, lam, rho, dtype=np.float64) -> StageParams:
    """Stage parameters that collapse the learned z-update onto the exact
    shrinkage iteration z' = soft_threshold(x' + beta, lam/rho).

    Uses the identity SiLU(t) - SiLU(-t) = t: the first convolution emits the
    channel pair (v, -v), and the second recombines the SiLU'd pair with
    weights (+1, -1), so the conv/activation sandwich is the identity map.
    """
    L, k, nb, hid = cfg.channels, cfg.ksize, cfg.n_bases, cfg.mlp_hidden
    if L < 2:
        raise ValueError("need at least two channels for the (+v, -v) pair")
    ctr = (k - 1) // 2
    pair = np.zeros((L, 1, k, k))
    pair[0, 0, ctr, ctr] = 1.0
    pair[1, 0, ctr, ctr] = -1.0
    c2 = np.zeros((1, L, k, k))
    c2[0, 0, ctr, ctr] = 1.0
    c2[0, 1, ctr, ctr] = -1.0
    return StageParams(
        c1_basis=ad.param(np.broadcast_to(pair, (nb,) + pair.shape).copy(), dtype=dtype),
        c1_static=ad.param(pair, dtype=dtype),
        c1_bias=_zeros((L,), dtype),
        mlp_w1=_zeros((1, hid), dtype),
        mlp_b1=_zeros((hid,), dtype),
        mlp_w2=_zeros((hid, nb), dtype),
        mlp_b2=_zeros((nb,), dtype),
        c2_w=ad.param(c2, dtype=dtype),
        c2_bias=_zeros((1,), dtype),
        mu1=_scalar(0.0, dtype),
        mu2=_scalar(1.0, dtype),
        theta_raw=_scalar(inv_softplus(lam / rho), dtype),
        rho_raw=_scalar(inv_softplus(rho), dtype),
    )


def prox_equivalent_params(cfg: NetConfig, lam, rho, dtype=np.float64) -> NetworkParams:
    """Full parameter set whose every stage runs the exact shrinkage ADMM
    iteration on the block-average operator (head parameters are random)."""
    params = init_params(cfg, seed=0, dtype=dtype)
    params.stages = [prox_equivalent_stage(cfg, lam, rho, dtype) for _ in range(cfg.n_stages)]
    return params


_CKPT_MAGIC = "csou-checkpoint 1"

_CFG_FIELDS = (
    ("m1", int),
    ("m2", int),
    ("c", int),
    ("sigma_psf", float),
    ("kernel_radius", int),
    ("n_stages", int),
    ("channels", int),
    ("n_bases", int),
    ("mlp_hidden", int),
    ("ksize", int),
    ("alpha", float),
    ("history", int),
    ("dir_pos", int),
)


class CheckpointFormatError(Exception):
    pass


def save_checkpoint(params: NetworkParams, path):
    """Single file: ASCII manifest (config + tensor table), then a packed
    little-endian float32 blob.  Offsets count elements into the blob."""
    cfg = params.cfg
    sc = cfg.scene
    lines = [_CKPT_MAGIC]
    values = {
        "m1": sc.m1,
        "m2": sc.m2,
        "c": sc.c,
        "sigma_psf": repr(sc.sigma_psf),
        "kernel_radius": sc.radius,
        "n_stages": cfg.n_stages,
        "channels": cfg.channels,
        "n_bases": cfg.n_bases,
        "mlp_hidden": cfg.mlp_hidden,
        "ksize": cfg.ksize,
        "alpha": repr(cfg.alpha),
        "history": cfg.history,
        "dir_pos": cfg.dir_pos,
    }
    for key, _ in _CFG_FIELDS:
        lines.append("cfg %s=%s" % (key, values[key]))
    chunks = []
    offset = 0
    for name, t in named_params(params):
        shape = ",".join(str(d) for d in t.data.shape) or "scalar"
        lines.append("tensor %s %s %d" % (name, shape, offset))
        flat = np.ascontiguousarray(t.data, dtype="<f4").ravel()
        chunks.append(flat)
        offset += flat.size
    blob = np.concatenate(chunks) if chunks else np.empty(0, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\nend\n").encode("ascii"))
        fh.write(blob.tobytes())


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\nend\n")
    if sep < 0:
        raise CheckpointFormatError("no manifest terminator found")
    manifest = raw[:sep].decode("ascii").splitlines()
    blob = np.frombuffer(raw[sep + len(b"\nend\n"):], dtype="<f4")
    if not manifest or manifest[0] != _CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    cfg_vals = {}
    table = {}
    for line in manifest[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "cfg":
            key, val = rest.split("=", 1)
            cfg_vals[key] = val
        elif kind == "tensor":
            name, shape_s, off_s = rest.rsplit(" ", 2)
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
            table[name] = (shape, int(off_s))
        else:
            raise CheckpointFormatError("unknown manifest entry %r" % kind)
    missing = [k for k, _ in _CFG_FIELDS if k not in cfg_vals]
    if missing:
        raise CheckpointFormatError("manifest missing config keys: %s" % missing)
    conv = {k: fn(cfg_vals[k]) for k, fn in _CFG_FIELDS}
    scene = SceneConfig(
        m1=conv["m1"],
        m2=conv["m2"],
        c=conv["c"],
        sigma_psf=conv["sigma_psf"],
        kernel_radius=conv["kernel_radius"],
    )
    cfg = NetConfig(
        scene=scene,
        n_stages=conv["n_stages"],
        channels=conv["channels"],
        n_bases=conv["n_bases"],
        mlp_hidden=conv["mlp_hidden"],
        ksize=conv["ksize"],
        alpha=conv["alpha"],
        history=conv["history"],
        dir_pos=conv["dir_pos"],
    )
    params = init_params(cfg, seed=0, dtype=np.float32)
    for name, t in named_params(params):
        if name not in table:
            raise CheckpointFormatError("checkpoint missing tensor %r" % name)
        shape, off = table.pop(name)
        if shape != t.data.shape:
            raise CheckpointFormatError(
                "shape mismatch for %s: file %s vs model %s" % (name, shape, t.data.shape)
            )
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if off + n > blob.size:
            raise CheckpointFormatError("blob truncated at tensor %r" % name)
        t.data = blob[off : off + n].reshape(shape).astype(np.float32)
    if table:
        raise CheckpointFormatError("checkpoint has extra tensors: %s" % sorted(table))
    return params
