"""Batch-mode uncertainty sampling policy.

Model variance is probed on a fixed, equally spaced study set; the next batch
of cell parameters is drawn from a Gaussian mixture whose component weights
are the normalized predicted variances and whose per-dimension spread tracks
the study-grid spacing, multiplied by a user prior.  Mixture components are
confined to their own symmetry class, so the policy samples across both the
continuous parameter space and the discrete class space.
"""

import threading
from dataclasses import dataclass

import numpy as np

from .lattice import (
    FREE_PARAMS,
    CellParams,
    ParamBatch,
    ParamSpace,
    SymmetryClass,
    sweep_counts_for_total,
    sweep_grid,
)
from .nnet import ModelState, forward, pool_inputs
from .simulator import SimConfig, simulate_batch

__all__ = [
    "Prior",
    "UniformPrior",
    "TruncGaussianPrior",
    "StudySet",
    "ALDensity",
    "ALSamplingError",
    "compute_weights",
    "build_density",
    "density",
    "sample",
    "sample_with_components",
    "next_batch",
    "write_al_diagnostics",
]

_DIM_NAMES = ("a", "c", "alpha")


class ALSamplingError(RuntimeError):
    pass


class Prior:
    """User prior over cell parameters; support is the parameter space."""

    space: ParamSpace

    def density_rows(self, symmetry, a, c, alpha) -> np.ndarray:
        raise NotImplementedError

    def density(self, cell: CellParams) -> float:
        return float(
            self.density_rows(
                np.array([int(cell.symmetry)]),
                np.array([cell.a]),
                np.array([cell.c]),
                np.array([cell.alpha]),
            )[0]
        )

    def max_density(self) -> float:
        raise NotImplementedError

    def _in_support(self, symmetry, a, c, alpha) -> np.ndarray:
        values = {"a": a, "c": c, "alpha": alpha}
        ok = np.zeros(len(symmetry), dtype=bool)
        for sym in SymmetryClass:
            sel = symmetry == int(sym)
            if not sel.any():
                continue
            inside = np.ones(sel.sum(), dtype=bool)
            for param in FREE_PARAMS[sym]:
                lo, hi = self.space.range_of(sym, param)
                v = values[param][sel]
                inside &= (v >= lo) & (v < hi)
            ok[sel] = inside
        return ok


@dataclass
class UniformPrior(Prior):
    """Flat (unnormalized density 1) over the parameter space."""

    space: ParamSpace

    def density_rows(self, symmetry, a, c, alpha) -> np.ndarray:
        return self._in_support(symmetry, a, c, alpha).astype(np.float64)

    def max_density(self) -> float:
        return 1.0


@dataclass
class TruncGaussianPrior(Prior):
    """Gaussian kernel per free dimension, truncated to the parameter space.

    center_frac/scale_frac position the kernel relative to each range:
    mu = lo + center_frac * width, sigma = scale_frac * width.
    """

    space: ParamSpace
    center_frac: float = 0.5
    scale_frac: float = 0.25

    def __post_init__(self):
        if self.scale_frac <= 0:
            raise ValueError("scale_frac must be positive")

    def density_rows(self, symmetry, a, c, alpha) -> np.ndarray:
        values = {"a": a, "c": c, "alpha": alpha}
        out = self._in_support(symmetry, a, c, alpha).astype(np.float64)
        for sym in SymmetryClass:
            sel = symmetry == int(sym)
            if not sel.any():
                continue
            logq = np.zeros(sel.sum())
            for param in FREE_PARAMS[sym]:
                lo, hi = self.space.range_of(sym, param)
                width = hi - lo
                mu = lo + self.center_frac * width
                sig = self.scale_frac * width
                logq -= 0.5 * ((values[param][sel] - mu) / sig) ** 2
            out[sel] *= np.exp(logq)
        return out

    def max_density(self) -> float:
        # The kernel form is bounded by 1; a loose but valid rejection bound.
        return 1.0


@dataclass
class StudySet:
    """Equally spaced study points with their simulated profiles.

    spacing[symmetry][param] is the sweep step used to derive the mixture
    spread; profiles are kept at raw grid resolution and pooled on demand to
    match a model's input dimension.
    """

    params: ParamBatch
    intensities: np.ndarray  # (N0, n_bins)
    spacing: dict

    def __post_init__(self):
        if len(self.params) != self.intensities.shape[0]:
            raise ValueError("study params and profiles must have equal length")

    def __len__(self) -> int:
        return len(self.params)

    def inputs_for(self, model: ModelState) -> np.ndarray:
        return pool_inputs(self.intensities, model.input_dim)

    @staticmethod
    def build(space: ParamSpace, n_total: int, sim_cfg: SimConfig, rng_seed: int,
              cancel: threading.Event = None) -> "StudySet":
        """Sweep the space with ~n_total points and simulate their profiles."""
        counts = sweep_counts_for_total(n_total)
        batch, spacing = sweep_grid(space, counts)
        pairs = simulate_batch(batch, sim_cfg, rng_seed, space=space, cancel=cancel)
        intensities = np.stack([p.intensity for p, _ in pairs])
        return StudySet(batch, intensities, spacing)


@dataclass
class ALDensity:
    """Unnormalized sampling density: prior times the variance-weighted mixture."""

    study: StudySet
    weights: np.ndarray
    tau: dict  # {SymmetryClass: {param: spread}}
    prior: Prior

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.study),):
            raise ValueError("weights length must match the study set")
        if abs(w.sum() - 1.0) > 1e-12 or (w < 0).any():
            raise ValueError("weights must be nonnegative and sum to 1")
        for sym, dims in self.tau.items():
            for param, t in dims.items():
                if not t > 0:
                    raise ValueError(f"tau must be positive, got {t} for {sym}.{param}")


def compute_weights(m: ModelState, study: StudySet) -> np.ndarray:
    """Normalized predicted variances over the study set.

    A constant shift of every log-variance cancels exactly, so the weights are
    invariant under global rescaling of sigma^2.
    """
    _, _, log_var = forward(m, study.inputs_for(m))
    if not np.isfinite(log_var).all():
        raise ValueError("non-finite predicted log-variance over the study set (model diverged)")
    shifted = np.exp(log_var - log_var.max())
    return shifted / shifted.sum()


def build_density(study: StudySet, weights: np.ndarray, prior: Prior,
                  tau_scale: float = 1.0) -> ALDensity:
    tau = {
        sym: {param: tau_scale * step for param, step in dims.items()}
        for sym, dims in study.spacing.items()
    }
    return ALDensity(study, np.asarray(weights, dtype=np.float64), tau, prior)


def density(y: CellParams, d: ALDensity) -> float:
    """Unnormalized density at y; only study components of y's class contribute."""
    sel = d.study.params.symmetry == int(y.symmetry)
    if not sel.any():
        return 0.0
    quad = np.zeros(sel.sum())
    for param in FREE_PARAMS[y.symmetry]:
        centers = getattr(d.study.params, param)[sel]
        quad += ((y.value(param) - centers) / d.tau[y.symmetry][param]) ** 2
    mixture = float(np.dot(d.weights[sel], np.exp(-0.5 * quad)))
    return d.prior.density(y) * mixture


def sample_with_components(d: ALDensity, n: int, rng_seed: int):
    """Draw n parameters plus the mixture component each one came from.

    Component-then-offset sampling with full resampling at the support
    boundary; non-uniform priors add a rejection test against the uniform-
    prior mixture.  Deterministic per seed.
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    study = d.study.params
    n0 = len(study)

    tau_a = np.zeros(n0)
    tau_c = np.zeros(n0)
    tau_alpha = np.zeros(n0)
    for sym in SymmetryClass:
        sel = study.symmetry == int(sym)
        dims = d.tau[sym]
        if "a" in dims:
            tau_a[sel] = dims["a"]
        if "c" in dims:
            tau_c[sel] = dims["c"]
        if "alpha" in dims:
            tau_alpha[sel] = dims["alpha"]

    uniform_prior = isinstance(d.prior, UniformPrior)
    max_p = d.prior.max_density()
    out_parts, comp_parts = [], []
    accepted = trials = 0
    while accepted < n:
        chunk = max(2 * (n - accepted), 1024)
        comp = rng.choice(n0, size=chunk, p=d.weights)
        z = rng.standard_normal((3, chunk))
        sym = study.symmetry[comp]
        a_new = study.a[comp] + tau_a[comp] * z[0]
        alpha_new = study.alpha[comp] + tau_alpha[comp] * z[1]
        c_new = np.where(sym == int(SymmetryClass.TETRAGONAL),
                         study.c[comp] + tau_c[comp] * z[2], a_new)
        ok = d.prior._in_support(sym, a_new, c_new, alpha_new)
        if not uniform_prior:
            u = rng.uniform(size=chunk)
            ok &= u * max_p < d.prior.density_rows(sym, a_new, c_new, alpha_new)
        trials += chunk
        accepted += int(ok.sum())
        out_parts.append(ParamBatch(sym[ok], a_new[ok], c_new[ok], alpha_new[ok]))
        comp_parts.append(comp[ok])
        if trials >= 1_000_000 and accepted < max(1, trials * 1e-4):
            raise ALSamplingError(
                f"acceptance rate {accepted / trials:.2e} after {trials} trials; "
                "check the spread, prior and parameter-space bounds"
            )
    batch = ParamBatch.concat(out_parts)
    comps = np.concatenate(comp_parts)
    return batch.take(np.arange(n)), comps[:n]


def sample(d: ALDensity, n: int, rng_seed: int) -> ParamBatch:
    batch, _ = sample_with_components(d, n, rng_seed)
    return batch


def next_batch(m: ModelState, study: StudySet, prior: Prior, n: int, rng_seed: int,
               tau_scale: float = 1.0) -> ParamBatch:
    """One policy step: weights from the model, density, then a fresh batch."""
    weights = compute_weights(m, study)
    return sample(build_density(study, weights, prior, tau_scale), n, rng_seed)


def write_al_diagnostics(path, d: ALDensity) -> None:
    """Per-component weights plus per-class weight mass, one CSV."""
    sym = d.study.params.symmetry
    with open(path, "w") as fh:
        fh.write("row,index,symmetry,weight\n")
        for i, w in enumerate(d.weights):
            fh.write(f"component,{i},{SymmetryClass(int(sym[i])).name},{w!r}\n")
        for s in SymmetryClass:
            mass = float(d.weights[sym == int(s)].sum())
            fh.write(f"class_mass,,{s.name},{mass!r}\n")
