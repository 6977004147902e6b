"""Synthetic scene datasets: sampling, binary serialization, CSV export.

File format (all little-endian):

    header:  magic  4 bytes  b"CSOU"
             u32    version, currently 1
             u32    record count
             u16    m1, u16 m2, u16 c
             f32    sigma_psf, f32 noise_sigma
    record:  u16    k  (number of targets)
             k   *  (f32 x, f32 y, f32 s)
             m1*m2  f32 measurement, row-major

Sampling is deterministic and splittable: record ``i`` of a dataset seeded
with ``seed`` draws from a Philox counter-based generator keyed with
``(seed, i)``, so any record can be regenerated (or generated in parallel)
without replaying the stream.  Positions are uniform in the margin-inset
rectangle and rejection-resampled until every pair is separated by at least
``min_separation`` pixels and no two targets share a sub-pixel cell.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .scene import SceneConfig, SparseScene, embed_cell, simulate

MAGIC = b"CSOU"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHHff")
_REJECT_BUDGET = 10_000


class DatasetFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedRecordError(DatasetFormatError):
    pass


class InfeasibleConfigError(ValueError):
    """Rejection sampling exhausted its budget for one record."""


@dataclass
class DatasetConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    k_min: int = 1
    k_max: int = 5
    s_lo: float = 100.0
    s_hi: float = 255.0
    margin: float = 2.0  # pixels kept clear at every patch edge
    min_separation: float = 0.5  # pixels, pairwise
    noise_sigma: float = 2.0
    count: int = 100
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.s_lo <= 50.0:
            raise ValueError("intensity floor must exceed the detection threshold 50")
        if self.s_lo > self.s_hi:
            raise ValueError("need s_lo <= s_hi")
        if self.margin < 2.5 * self.scene.sigma_psf:
            raise ValueError("margin must cover the blur's effective support (2.5 sigma)")
        if 2 * self.margin >= min(self.scene.m1, self.scene.m2):
            raise ValueError("margin leaves no room for targets")
        if self.min_separation < 0 or self.noise_sigma < 0:
            raise ValueError("min_separation and noise_sigma must be nonnegative")
        if self.count < 0:
            raise ValueError("count must be nonnegative")


@dataclass
class DatasetRecord:
    scene: SparseScene
    y: np.ndarray  # (m1, m2) float32 measurement


def record_rng(seed, index):
    """Counter-based generator for one record: Philox keyed with (seed, index)."""
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_scene(cfg: DatasetConfig, index, rng=None) -> SparseScene:
    """Draw record ``index``'s scene (positions, intensities) for this config."""
    if rng is None:
        rng = record_rng(cfg.seed, index)
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    lo_x, hi_x = cfg.margin, cfg.scene.m2 - cfg.margin
    lo_y, hi_y = cfg.margin, cfg.scene.m1 - cfg.margin
    xs, ys, cells = [], [], set()
    tries = 0
    while len(xs) < k:
        if tries >= _REJECT_BUDGET:
            raise InfeasibleConfigError(
                "could not place %d targets after %d tries (record %d)"
                % (k, _REJECT_BUDGET, index)
            )
        tries += 1
        xv = float(rng.uniform(lo_x, hi_x))
        yv = float(rng.uniform(lo_y, hi_y))
        cell = embed_cell(xv, yv, cfg.scene.c)
        if cell in cells:
            continue
        ok = True
        for xo, yo in zip(xs, ys):
            if (xv - xo) ** 2 + (yv - yo) ** 2 < cfg.min_separation**2:
                ok = False
                break
        if not ok:
            continue
        xs.append(xv)
        ys.append(yv)
        cells.add(cell)
    s = rng.uniform(cfg.s_lo, cfg.s_hi, size=k)
    return SparseScene(
        x=np.asarray(xs, dtype=np.float32),
        y=np.asarray(ys, dtype=np.float32),
        s=s.astype(np.float32),
    )


def make_record(cfg: DatasetConfig, index) -> DatasetRecord:
    """Scene plus its noisy measurement; the same rng stream drives the noise."""
    rng = record_rng(cfg.seed, index)
    sc = sample_scene(cfg, index, rng=rng)
    y = simulate(sc, cfg.scene, noise_sigma=cfg.noise_sigma, rng=rng)
    return DatasetRecord(scene=sc, y=y.astype(np.float32))


def _pack_record(rec: DatasetRecord):
    k = rec.scene.k
    coords = np.empty((k, 3), dtype="<f4")
    coords[:, 0] = rec.scene.x
    coords[:, 1] = rec.scene.y
    coords[:, 2] = rec.scene.s
    return struct.pack("<H", k) + coords.tobytes() + rec.y.astype("<f4").tobytes()


def write_dataset(path, cfg: DatasetConfig, records):
    """Serialize records in the binary layout documented above."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC,
                VERSION,
                len(records),
                cfg.scene.m1,
                cfg.scene.m2,
                cfg.scene.c,
                cfg.scene.sigma_psf,
                cfg.noise_sigma,
            )
        )
        for rec in records:
            fh.write(_pack_record(rec))


def write_manifest(path, cfg: DatasetConfig, data_file):
    lines = [
        "split = %s" % cfg.split,
        "file = %s" % data_file,
        "count = %d" % cfg.count,
        "seed = %d" % cfg.seed,
        "m1 = %d" % cfg.scene.m1,
        "m2 = %d" % cfg.scene.m2,
        "c = %d" % cfg.scene.c,
        "sigma_psf = %g" % cfg.scene.sigma_psf,
        "noise_sigma = %g" % cfg.noise_sigma,
        "k_min = %d" % cfg.k_min,
        "k_max = %d" % cfg.k_max,
        "s_lo = %g" % cfg.s_lo,
        "s_hi = %g" % cfg.s_hi,
        "margin = %g" % cfg.margin,
        "min_separation = %g" % cfg.min_separation,
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def generate_dataset(cfg: DatasetConfig, out_dir):
    """Generate cfg.count records and write ``<split>.csou`` plus a manifest.

    Returns the data file path.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    data_path = os.path.join(out_dir, "%s.csou" % cfg.split)
    records = [make_record(cfg, i) for i in range(cfg.count)]
    write_dataset(data_path, cfg, records)
    write_manifest(os.path.join(out_dir, "%s.manifest.txt" % cfg.split), cfg, data_path)
    return data_path


@dataclass
class DatasetHeader:
    version: int
    count: int
    m1: int
    m2: int
    c: int
    sigma_psf: float
    noise_sigma: float

    def scene_config(self) -> SceneConfig:
        return SceneConfig(m1=self.m1, m2=self.m2, c=self.c, sigma_psf=self.sigma_psf)


def read_header(fh) -> DatasetHeader:
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise TruncatedRecordError("file too short for header")
    magic, version, count, m1, m2, c, sigma_psf, noise_sigma = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagicError("bad magic %r" % magic)
    if version != VERSION:
        raise VersionMismatchError("unsupported version %d (expected %d)" % (version, VERSION))
    return DatasetHeader(version, count, m1, m2, c, float(sigma_psf), float(noise_sigma))


def _read_exact(fh, n, index, what):
    raw = fh.read(n)
    if len(raw) < n:
        raise TruncatedRecordError("record %d truncated reading %s" % (index, what))
    return raw


def iter_records(fh, header: DatasetHeader):
    m = header.m1 * header.m2
    for i in range(header.count):
        (k,) = struct.unpack("<H", _read_exact(fh, 2, i, "target count"))
        coords = np.frombuffer(_read_exact(fh, 12 * k, i, "targets"), dtype="<f4")
        coords = coords.reshape(k, 3)
        y = np.frombuffer(_read_exact(fh, 4 * m, i, "measurement"), dtype="<f4")
        scene = SparseScene(
            x=coords[:, 0].copy(), y=coords[:, 1].copy(), s=coords[:, 2].copy()
        )
        yield DatasetRecord(scene=scene, y=y.reshape(header.m1, header.m2).copy())


def load_dataset(path):
    """Read a dataset file; returns (header, list of records)."""
    with open(path, "rb") as fh:
        header = read_header(fh)
        records = list(iter_records(fh, header))
    return header, records


def export_csv(records, path):
    """One row per target: sample_id, x, y, s."""
    with open(path, "w") as fh:
        fh.write("sample_id,x,y,s\n")
        for i, rec in enumerate(records):
            for j in range(rec.scene.k):
                fh.write(
                    "%d,%.9g,%.9g,%.9g\n"
                    % (i, rec.scene.x[j], rec.scene.y[j], rec.scene.s[j])
                )
