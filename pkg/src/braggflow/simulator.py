"""Synthetic forward model: cell parameters -> Bragg profile on a log ToF grid.

The profile is a sum of Gaussian peaks at t = difc * d(hkl) with amplitude
d(hkl)^2 and width linear in t, max-normalized, with optional additive
Gaussian noise.  Batch simulation runs on a per-call thread pool and is
order-stable and deterministic for a fixed seed.
"""

import math
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .lattice import CellParams, ParamBatch, ParamSpace, SymmetryClass, d_spacings

__all__ = [
    "TofGrid",
    "DEFAULT_GRID",
    "BraggProfile",
    "SimConfig",
    "SimulationError",
    "SimulationCancelled",
    "simulate_profile",
    "simulate_batch",
    "batch_seeds",
    "save_profile_dataset",
    "load_profile_dataset",
    "save_param_batch",
    "load_param_batch",
]


class SimulationError(RuntimeError):
    pass


class SimulationCancelled(RuntimeError):
    pass


@dataclass(frozen=True)
class TofGrid:
    """Logarithmic time-of-flight grid: bin i is centered at t0 * exp(i * delta)."""

    t0: float = 1360.0
    delta: float = 0.0009381
    n_bins: int = 2807

    def __post_init__(self):
        if self.t0 <= 0 or self.delta <= 0 or self.n_bins < 2:
            raise ValueError(f"invalid ToF grid: {self}")

    def centers(self) -> np.ndarray:
        return self.t0 * np.exp(np.arange(self.n_bins) * self.delta)

    @property
    def t_last(self) -> float:
        return self.t0 * math.exp((self.n_bins - 1) * self.delta)

    def index_of(self, t: float) -> int:
        """Nearest bin index for a time inside the grid."""
        return int(round(math.log(t / self.t0) / self.delta))


DEFAULT_GRID = TofGrid()


@dataclass
class BraggProfile:
    """One simulated diffraction pattern: intensity per ToF bin, max-normalized."""

    grid: TofGrid
    intensity: np.ndarray


@dataclass
class SimConfig:
    """Forward-model knobs.

    artificial_cost_ms is a per-sample stall used by the workflow timing
    experiments to emulate an expensive external simulator; it sleeps rather
    than burns CPU so that simulation pools and the training thread can
    genuinely overlap regardless of host core count.
    """

    difc: float = 5000.0
    w0: float = 5.0
    w1: float = 0.002
    hkl_bound: int = 6
    noise_std: float = 0.01
    artificial_cost_ms: float = 0.0
    pool_size: int = 1
    grid: TofGrid = field(default_factory=TofGrid)

    def validate(self) -> None:
        if self.difc <= 0:
            raise ValueError("difc must be positive")
        if self.w0 < 0 or self.w1 < 0 or (self.w0 == 0 and self.w1 == 0):
            raise ValueError("peak width coefficients must be >= 0 and not both zero")
        if self.hkl_bound < 1:
            raise ValueError("hkl_bound must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.artificial_cost_ms < 0:
            raise ValueError("artificial_cost_ms must be >= 0")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


@lru_cache(maxsize=8)
def _hkl_indices(bound: int) -> np.ndarray:
    axis = np.arange(-bound, bound + 1)
    h, k, l = np.meshgrid(axis, axis, axis, indexing="ij")
    hkl = np.stack([h.ravel(), k.ravel(), l.ravel()], axis=1)
    return hkl[np.any(hkl != 0, axis=1)]

# Peaks closer than this (in microseconds) count as symmetry-equivalent.
_PEAK_MERGE_TOL_US = 1e-9


def simulate_profile(cell: CellParams, cfg: SimConfig, rng_seed, *, space: ParamSpace = None) -> BraggProfile:
    """Simulate one Bragg profile; deterministic for a fixed seed."""
    cfg.validate()
    cell.validate()
    if space is not None and not space.contains(cell):
        raise ValueError(f"cell outside parameter space: {cell}")

    d = d_spacings(cell, _hkl_indices(cfg.hkl_bound))
    t_peak = cfg.difc * d
    grid = cfg.grid
    in_range = (t_peak >= grid.t0) & (t_peak <= grid.t_last)
    if not in_range.any():
        raise SimulationError(
            f"no Bragg peaks fall inside the ToF grid for {cell} "
            f"(difc={cfg.difc}, grid=[{grid.t0}, {grid.t_last:.1f}])"
        )
    t_peak = t_peak[in_range]
    amp = d[in_range] ** 2

    # Merge symmetry-equivalent reflections (equal t within tolerance).
    keys = np.round(t_peak / _PEAK_MERGE_TOL_US).astype(np.int64)
    uniq, inverse = np.unique(keys, return_inverse=True)
    merged_t = np.zeros(uniq.size)
    merged_amp = np.zeros(uniq.size)
    np.add.at(merged_amp, inverse, amp)
    np.maximum.at(merged_t, inverse, t_peak)

    centers = grid.centers()
    intensity = np.zeros(grid.n_bins)
    sigma = cfg.w0 + cfg.w1 * merged_t
    for t, s, a in zip(merged_t, sigma, merged_amp):
        lo = np.searchsorted(centers, t - 6.0 * s)
        hi = np.searchsorted(centers, t + 6.0 * s)
        window = centers[lo:hi]
        intensity[lo:hi] += a * np.exp(-0.5 * ((window - t) / s) ** 2)

    peak = intensity.max()
    if peak <= 0:
        raise SimulationError(f"degenerate profile (all-zero intensity) for {cell}")
    intensity /= peak

    if cfg.noise_std > 0:
        rng = np.random.default_rng(rng_seed)
        intensity = np.maximum(intensity + rng.normal(0.0, cfg.noise_std, grid.n_bins), 0.0)

    if cfg.artificial_cost_ms > 0:
        time.sleep(cfg.artificial_cost_ms / 1000.0)

    return BraggProfile(grid, intensity)


def batch_seeds(rng_seed, n: int):
    """Per-sample seeds used by simulate_batch, exposed for serial replay."""
    if isinstance(rng_seed, np.random.SeedSequence):
        return rng_seed.spawn(n)
    return np.random.SeedSequence(rng_seed).spawn(n)


def simulate_batch(batch: ParamBatch, cfg: SimConfig, rng_seed: int, *,
                   space: ParamSpace = None, cancel: threading.Event = None):
    """Simulate every cell of a batch, preserving input order.

    Results are identical to looping simulate_profile over batch_seeds()
    regardless of pool_size.  An optional cancel event aborts between samples.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    cfg.validate()
    seeds = batch_seeds(rng_seed, len(batch))
    cells = batch.cells()

    def worker(args):
        cell, seed = args
        if cancel is not None and cancel.is_set():
            raise SimulationCancelled("simulation batch cancelled")
        return simulate_profile(cell, cfg, seed, space=space)

    if cfg.pool_size == 1:
        profiles = [worker(args) for args in zip(cells, seeds)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.pool_size) as pool:
            profiles = list(pool.map(worker, zip(cells, seeds)))
    return list(zip(profiles, cells))


# ---------------------------------------------------------------------------
# Binary dataset persistence.  np.savez embeds zip timestamps, so a custom
# fixed layout is used to keep equal-seed outputs byte-identical.
# ---------------------------------------------------------------------------

_DATASET_MAGIC = b"BFDS"
_PARAMS_MAGIC = b"BFPB"
_FORMAT_VERSION = 1


def _write_batch_columns(fh, batch: ParamBatch) -> None:
    fh.write(batch.symmetry.astype("<i8").tobytes())
    fh.write(batch.a.astype("<f8").tobytes())
    fh.write(batch.c.astype("<f8").tobytes())
    fh.write(batch.alpha.astype("<f8").tobytes())


def _read_batch_columns(fh, count: int) -> ParamBatch:
    sym = np.frombuffer(fh.read(8 * count), dtype="<i8")
    a = np.frombuffer(fh.read(8 * count), dtype="<f8")
    c = np.frombuffer(fh.read(8 * count), dtype="<f8")
    alpha = np.frombuffer(fh.read(8 * count), dtype="<f8")
    return ParamBatch(sym, a, c, alpha)


def save_profile_dataset(path, grid: TofGrid, batch: ParamBatch, intensities: np.ndarray) -> None:
    """Write profiles + labels: header (grid, count) then per-sample columns."""
    intensities = np.asarray(intensities, dtype=np.float64)
    if intensities.shape != (len(batch), grid.n_bins):
        raise ValueError(
            f"intensity matrix shape {intensities.shape} does not match "
            f"{len(batch)} samples x {grid.n_bins} bins"
        )
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<IddII", _FORMAT_VERSION, grid.t0, grid.delta, grid.n_bins, len(batch)))
        _write_batch_columns(fh, batch)
        fh.write(intensities.astype("<f8").tobytes())


def load_profile_dataset(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _DATASET_MAGIC:
            raise ValueError(f"{path}: not a braggflow profile dataset")
        version, t0, delta, n_bins, count = struct.unpack("<IddII", fh.read(28))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        grid = TofGrid(t0, delta, n_bins)
        batch = _read_batch_columns(fh, count)
        intensities = np.frombuffer(fh.read(8 * count * n_bins), dtype="<f8").reshape(count, n_bins)
    return grid, batch, intensities


def save_param_batch(path, batch: ParamBatch) -> None:
    """Write a parameter batch without profiles (AL sample dumps)."""
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(batch)))
        _write_batch_columns(fh, batch)


def load_param_batch(path) -> ParamBatch:
    with open(path, "rb") as fh:
        if fh.read(4) != _PARAMS_MAGIC:
            raise ValueError(f"{path}: not a braggflow parameter batch")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported parameter batch version {version}")
        return _read_batch_columns(fh, count)
