"""Symmetry classes, unit-cell parameters and parameter-space sampling.

Three crystallographic symmetry classes are supported (cubic, trigonal,
tetragonal).  Each class constrains the six unit-cell parameters
(a, b, c, alpha, beta, gamma) down to one or two free parameters; d-spacings
are computed through the general reciprocal metric tensor so all classes share
a single code path.
"""

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

__all__ = [
    "SymmetryClass",
    "CellParams",
    "ParamSpace",
    "ParamBatch",
    "FREE_PARAMS",
    "d_spacing",
    "d_spacings",
    "sample_uniform",
    "sweep_grid",
    "sweep_counts_for_total",
]


class SymmetryClass(IntEnum):
    """Symmetry classes; the value doubles as the classifier target index."""

    CUBIC = 0
    TRIGONAL = 1
    TETRAGONAL = 2


# Free parameters per class, in (a, c, alpha) order.
FREE_PARAMS = {
    SymmetryClass.CUBIC: ("a",),
    SymmetryClass.TRIGONAL: ("a", "alpha"),
    SymmetryClass.TETRAGONAL: ("a", "c"),
}


@dataclass(frozen=True)
class CellParams:
    """Unit-cell parameters of one sample.

    Constrained fields are stored explicitly and must equal their
    class-implied values: c == a for cubic/trigonal, alpha == 90 for
    cubic/tetragonal.
    """

    symmetry: SymmetryClass
    a: float
    c: float
    alpha: float

    @staticmethod
    def cubic(a: float) -> "CellParams":
        return CellParams(SymmetryClass.CUBIC, a, a, 90.0)

    @staticmethod
    def trigonal(a: float, alpha: float) -> "CellParams":
        return CellParams(SymmetryClass.TRIGONAL, a, a, alpha)

    @staticmethod
    def tetragonal(a: float, c: float) -> "CellParams":
        return CellParams(SymmetryClass.TETRAGONAL, a, c, 90.0)

    def validate(self) -> None:
        if not (math.isfinite(self.a) and math.isfinite(self.c) and math.isfinite(self.alpha)):
            raise ValueError(f"non-finite cell parameters: {self}")
        if self.a <= 0 or self.c <= 0:
            raise ValueError(f"cell lengths must be positive: {self}")
        if not 0.0 < self.alpha < 180.0:
            raise ValueError(f"alpha must lie in (0, 180) degrees: {self}")
        if self.symmetry in (SymmetryClass.CUBIC, SymmetryClass.TRIGONAL) and self.c != self.a:
            raise ValueError(f"c must equal a for {self.symmetry.name}: {self}")
        if self.symmetry in (SymmetryClass.CUBIC, SymmetryClass.TETRAGONAL) and self.alpha != 90.0:
            raise ValueError(f"alpha must be 90 for {self.symmetry.name}: {self}")

    def value(self, name: str) -> float:
        return getattr(self, name)

    def free_values(self) -> tuple:
        return tuple(getattr(self, p) for p in FREE_PARAMS[self.symmetry])


def _from_free(symmetry: SymmetryClass, values) -> CellParams:
    if symmetry == SymmetryClass.CUBIC:
        return CellParams.cubic(float(values[0]))
    if symmetry == SymmetryClass.TRIGONAL:
        return CellParams.trigonal(float(values[0]), float(values[1]))
    return CellParams.tetragonal(float(values[0]), float(values[1]))


# Table-driven parameter-range presets (lengths in angstrom, angles in degrees).
_PRESET_RANGES = {
    "E1": {
        SymmetryClass.CUBIC: {"a": (3.5, 4.5)},
        SymmetryClass.TRIGONAL: {"a": (3.8, 4.2), "alpha": (60.0, 120.0)},
        SymmetryClass.TETRAGONAL: {"a": (3.8, 4.2), "c": (3.8, 4.2)},
    },
    "E2": {
        SymmetryClass.CUBIC: {"a": (2.5, 5.5)},
        SymmetryClass.TRIGONAL: {"a": (3.5, 4.5), "alpha": (30.0, 120.0)},
        SymmetryClass.TETRAGONAL: {"a": (3.5, 4.5), "c": (3.5, 4.5)},
    },
}


@dataclass(frozen=True)
class ParamSpace:
    """Half-open ranges [lo, hi) for every free parameter of every class."""

    ranges: dict

    def __post_init__(self):
        for sym in SymmetryClass:
            if sym not in self.ranges:
                raise ValueError(f"missing ranges for {sym.name}")
            for param in FREE_PARAMS[sym]:
                if param not in self.ranges[sym]:
                    raise ValueError(f"missing range for {sym.name}.{param}")
                lo, hi = self.ranges[sym][param]
                if not lo < hi:
                    raise ValueError(f"empty range for {sym.name}.{param}: [{lo}, {hi})")

    @staticmethod
    def preset(name: str) -> "ParamSpace":
        try:
            ranges = _PRESET_RANGES[name]
        except KeyError:
            raise ValueError(f"unknown ParamSpace preset {name!r}; choose from {sorted(_PRESET_RANGES)}")
        return ParamSpace({sym: dict(r) for sym, r in ranges.items()})

    def range_of(self, symmetry: SymmetryClass, param: str) -> tuple:
        return self.ranges[symmetry][param]

    def contains(self, cell: CellParams) -> bool:
        for param in FREE_PARAMS[cell.symmetry]:
            lo, hi = self.ranges[cell.symmetry][param]
            if not lo <= cell.value(param) < hi:
                return False
        return True


class ParamBatch:
    """Ordered batch of cell parameters, stored as parallel arrays."""

    def __init__(self, symmetry, a, c, alpha):
        self.symmetry = np.asarray(symmetry, dtype=np.int64)
        self.a = np.asarray(a, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        self.alpha = np.asarray(alpha, dtype=np.float64)
        n = len(self.symmetry)
        if not (len(self.a) == len(self.c) == len(self.alpha) == n):
            raise ValueError("ParamBatch arrays must have equal length")

    @staticmethod
    def from_cells(cells) -> "ParamBatch":
        cells = list(cells)
        return ParamBatch(
            [c.symmetry for c in cells],
            [c.a for c in cells],
            [c.c for c in cells],
            [c.alpha for c in cells],
        )

    @staticmethod
    def empty() -> "ParamBatch":
        return ParamBatch([], [], [], [])

    @staticmethod
    def concat(batches) -> "ParamBatch":
        batches = list(batches)
        return ParamBatch(
            np.concatenate([b.symmetry for b in batches]) if batches else [],
            np.concatenate([b.a for b in batches]) if batches else [],
            np.concatenate([b.c for b in batches]) if batches else [],
            np.concatenate([b.alpha for b in batches]) if batches else [],
        )

    def __len__(self) -> int:
        return len(self.symmetry)

    def __getitem__(self, i: int) -> CellParams:
        return CellParams(
            SymmetryClass(int(self.symmetry[i])),
            float(self.a[i]),
            float(self.c[i]),
            float(self.alpha[i]),
        )

    def cells(self):
        return [self[i] for i in range(len(self))]

    def take(self, idx) -> "ParamBatch":
        return ParamBatch(self.symmetry[idx], self.a[idx], self.c[idx], self.alpha[idx])

    def validate_in(self, space: ParamSpace) -> None:
        for i in range(len(self)):
            cell = self[i]
            cell.validate()
            if not space.contains(cell):
                raise ValueError(f"sample {i} outside parameter space: {cell}")


def _metric_tensor(a: float, b: float, c: float, alpha: float, beta: float, gamma: float) -> np.ndarray:
    ca, cb, cg = (math.cos(math.radians(x)) for x in (alpha, beta, gamma))
    return np.array(
        [
            [a * a, a * b * cg, a * c * cb],
            [a * b * cg, b * b, b * c * ca],
            [a * c * cb, b * c * ca, c * c],
        ]
    )


def reciprocal_metric(cell: CellParams) -> np.ndarray:
    """Reciprocal metric tensor G* = inv(G) for the cell's full six parameters."""
    g = _metric_tensor(cell.a, cell.a, cell.c, cell.alpha, cell.alpha, cell.alpha)
    return np.linalg.inv(g)


def d_spacing(cell: CellParams, hkl) -> float:
    """Plane spacing d for Miller indices hkl, via 1/d^2 = h.G*.h."""
    h = np.asarray(hkl, dtype=np.float64)
    if h.shape != (3,):
        raise ValueError(f"hkl must be a 3-vector, got shape {h.shape}")
    if not h.any():
        raise ValueError("hkl must not be (0, 0, 0)")
    cell.validate()
    inv_d2 = float(h @ reciprocal_metric(cell) @ h)
    return 1.0 / math.sqrt(inv_d2)


def d_spacings(cell: CellParams, hkl_array: np.ndarray) -> np.ndarray:
    """Vectorized d-spacings for an (N, 3) array of Miller indices."""
    gstar = reciprocal_metric(cell)
    h = np.asarray(hkl_array, dtype=np.float64)
    inv_d2 = np.einsum("ij,jk,ik->i", h, gstar, h)
    return 1.0 / np.sqrt(inv_d2)


def sample_uniform(space: ParamSpace, class_counts, rng_seed: int) -> ParamBatch:
    """Draw independent uniform samples inside each class's free-parameter box.

    class_counts is a (n_cubic, n_trigonal, n_tetragonal) triple; samples are
    emitted grouped by class, cubic first.  Deterministic for a fixed seed.
    """
    counts = tuple(int(n) for n in class_counts)
    if len(counts) != 3 or any(n < 0 for n in counts):
        raise ValueError(f"class_counts must be three nonnegative ints, got {class_counts}")
    rng = np.random.default_rng(rng_seed)
    parts = []
    for sym, n in zip(SymmetryClass, counts):
        if n == 0:
            continue
        cols = {}
        for param in FREE_PARAMS[sym]:
            lo, hi = space.range_of(sym, param)
            cols[param] = rng.uniform(lo, hi, size=n)
        a = cols["a"]
        c = cols.get("c", a)
        alpha = cols.get("alpha", np.full(n, 90.0))
        parts.append(ParamBatch(np.full(n, int(sym)), a, c, alpha))
    if not parts:
        return ParamBatch.empty()
    return ParamBatch.concat(parts)


def sweep_grid(space: ParamSpace, class_counts):
    """Cell-centered, equally spaced parameter sweeps per class.

    class_counts maps each class to its per-free-dimension point counts (an int
    for cubic, a pair for trigonal/tetragonal).  Points along a dimension with
    n counts over [lo, hi) sit at lo + (i + 1/2) * (hi - lo) / n, so every grid
    point stays strictly inside the half-open range.

    Returns (batch, spacing) where spacing[symmetry][param] is the constant
    per-dimension step, needed downstream for the sampling-density spread.
    """
    parts = []
    spacing = {}
    for sym in SymmetryClass:
        counts = class_counts.get(sym) if isinstance(class_counts, dict) else class_counts[int(sym)]
        params = FREE_PARAMS[sym]
        if isinstance(counts, (int, np.integer)):
            counts = (counts,) * len(params)
        if len(counts) != len(params):
            raise ValueError(f"{sym.name} needs {len(params)} per-dimension counts, got {counts}")
        if any(n < 1 for n in counts):
            raise ValueError(f"sweep counts must be >= 1, got {counts} for {sym.name}")
        axes = []
        spacing[sym] = {}
        for param, n in zip(params, counts):
            lo, hi = space.range_of(sym, param)
            step = (hi - lo) / n
            axes.append(lo + (np.arange(n) + 0.5) * step)
            spacing[sym][param] = step
        mesh = np.meshgrid(*axes, indexing="ij")
        cols = {p: m.ravel() for p, m in zip(params, mesh)}
        n_pts = cols["a"].size
        a = cols["a"]
        c = cols.get("c", a)
        alpha = cols.get("alpha", np.full(n_pts, 90.0))
        parts.append(ParamBatch(np.full(n_pts, int(sym)), a, c, alpha))
    return ParamBatch.concat(parts), spacing


def sweep_counts_for_total(n_total: int) -> dict:
    """Per-class sweep counts whose grid sizes sum to ~n_total (equal class split)."""
    per_class = n_total / 3.0
    side = max(1, round(math.sqrt(per_class)))
    return {
        SymmetryClass.CUBIC: max(1, round(per_class)),
        SymmetryClass.TRIGONAL: (side, side),
        SymmetryClass.TETRAGONAL: (side, side),
    }
