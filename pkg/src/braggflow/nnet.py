"""Multitask model: shared tanh trunk -> class logits, lattice-parameter
regression, and a heteroscedastic log-variance head.

The training objective is cross-entropy plus an uncertainty-weighted
regression term, mean over a batch of ||mask * (target - y_hat)||^2 / sigma^2
+ log sigma^2 with sigma^2 = exp(log_var).  Gradients are analytic (verified
against central finite differences in the test suite) and the optimizer is
Adam.
"""

import struct
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .lattice import FREE_PARAMS, CellParams, ParamBatch, ParamSpace, SymmetryClass

__all__ = [
    "ModelState",
    "LabeledSample",
    "Dataset",
    "TrainConfig",
    "TrainingDiverged",
    "TrainingCancelled",
    "pool_inputs",
    "normalize_cells",
    "forward",
    "loss",
    "grad",
    "train",
    "evaluate",
    "save_model",
    "load_model",
    "write_history",
]

N_CLASSES = 3
N_TARGETS = 3  # (a, c, alpha), min-max normalized per class

_PARAM_FIELDS = ("W1", "b1", "W2", "b2", "Wc", "bc", "Wr", "br", "Wv", "bv")


class TrainingDiverged(RuntimeError):
    pass


class TrainingCancelled(RuntimeError):
    pass


@dataclass
class ModelState:
    """All weights of the multitask network."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray
    Wr: np.ndarray
    br: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> tuple:
        return (self.W1.shape[1], self.W2.shape[1])

    @staticmethod
    def init(input_dim: int, hidden=(256, 64), seed: int = 0) -> "ModelState":
        """Glorot-normal weights, zero biases; deterministic per seed."""
        h1, h2 = hidden
        rng = np.random.default_rng(seed)

        def glorot(fan_in, fan_out):
            return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))

        return ModelState(
            W1=glorot(input_dim, h1), b1=np.zeros(h1),
            W2=glorot(h1, h2), b2=np.zeros(h2),
            Wc=glorot(h2, N_CLASSES), bc=np.zeros(N_CLASSES),
            Wr=glorot(h2, N_TARGETS), br=np.zeros(N_TARGETS),
            Wv=glorot(h2, 1), bv=np.zeros(1),
        )

    @staticmethod
    def zeros(input_dim: int, hidden=(256, 64)) -> "ModelState":
        h1, h2 = hidden
        return ModelState(
            W1=np.zeros((input_dim, h1)), b1=np.zeros(h1),
            W2=np.zeros((h1, h2)), b2=np.zeros(h2),
            Wc=np.zeros((h2, N_CLASSES)), bc=np.zeros(N_CLASSES),
            Wr=np.zeros((h2, N_TARGETS)), br=np.zeros(N_TARGETS),
            Wv=np.zeros((h2, 1)), bv=np.zeros(1),
        )

    def copy(self) -> "ModelState":
        return ModelState(**{f: getattr(self, f).copy() for f in _PARAM_FIELDS})

    def arrays(self):
        return [(f, getattr(self, f)) for f in _PARAM_FIELDS]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in _PARAM_FIELDS])

    def with_vector(self, vec: np.ndarray) -> "ModelState":
        out, off = {}, 0
        for f in _PARAM_FIELDS:
            arr = getattr(self, f)
            out[f] = vec[off:off + arr.size].reshape(arr.shape).copy()
            off += arr.size
        return ModelState(**out)


@dataclass
class LabeledSample:
    """One training example: pooled profile, class index, masked targets."""

    x: np.ndarray
    class_idx: int
    target: np.ndarray
    mask: np.ndarray


@dataclass
class Dataset:
    """Column layout of labeled samples."""

    X: np.ndarray          # (N, D) pooled intensities
    class_idx: np.ndarray  # (N,)
    target: np.ndarray     # (N, 3)
    mask: np.ndarray       # (N, 3)

    def __len__(self) -> int:
        return self.X.shape[0]

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.X[i], int(self.class_idx[i]), self.target[i], self.mask[i])

    def take(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.class_idx[idx], self.target[idx], self.mask[idx])

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        return Dataset(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.class_idx for p in parts]),
            np.concatenate([p.target for p in parts]),
            np.concatenate([p.mask for p in parts]),
        )

    @staticmethod
    def from_pairs(pairs, space: ParamSpace, input_bins: int = 0) -> "Dataset":
        """Build from simulate_batch output [(BraggProfile, CellParams), ...]."""
        intensities = np.stack([p.intensity for p, _ in pairs])
        batch = ParamBatch.from_cells(cell for _, cell in pairs)
        target, mask = normalize_cells(batch, space)
        return Dataset(pool_inputs(intensities, input_bins), batch.symmetry.copy(), target, mask)


def pool_inputs(intensities: np.ndarray, target_bins: int = 0) -> np.ndarray:
    """Mean-pool profile bins down to target_bins (0 keeps the raw binning)."""
    intensities = np.asarray(intensities, dtype=np.float64)
    n_bins = intensities.shape[-1]
    if not target_bins or target_bins == n_bins:
        return intensities.copy()
    if target_bins > n_bins:
        raise ValueError(f"cannot pool {n_bins} bins up to {target_bins}")
    edges = (np.arange(target_bins + 1) * n_bins) // target_bins
    sums = np.add.reduceat(intensities, edges[:-1], axis=-1)
    return sums / np.diff(edges)


_CLASS_MASKS = {
    SymmetryClass.CUBIC: (1.0, 0.0, 0.0),
    SymmetryClass.TRIGONAL: (1.0, 0.0, 1.0),
    SymmetryClass.TETRAGONAL: (1.0, 1.0, 0.0),
}


def normalize_cells(batch: ParamBatch, space: ParamSpace):
    """Min-max normalized (a, c, alpha) targets plus free-parameter masks.

    Constrained dimensions carry their class-implied values: c inherits the
    a-range normalization when c == a; a fixed angle normalizes to 0.  They are
    masked out of every loss and metric.
    """
    n = len(batch)
    target = np.zeros((n, N_TARGETS))
    mask = np.zeros((n, N_TARGETS))
    for sym in SymmetryClass:
        sel = batch.symmetry == int(sym)
        if not sel.any():
            continue
        a_lo, a_hi = space.range_of(sym, "a")
        a_norm = (batch.a[sel] - a_lo) / (a_hi - a_lo)
        if sym == SymmetryClass.TETRAGONAL:
            c_lo, c_hi = space.range_of(sym, "c")
            c_norm = (batch.c[sel] - c_lo) / (c_hi - c_lo)
        else:
            c_norm = a_norm
        if sym == SymmetryClass.TRIGONAL:
            al_lo, al_hi = space.range_of(sym, "alpha")
            al_norm = (batch.alpha[sel] - al_lo) / (al_hi - al_lo)
        else:
            al_norm = np.zeros(sel.sum())
        target[sel, 0] = a_norm
        target[sel, 1] = c_norm
        target[sel, 2] = al_norm
        mask[sel] = _CLASS_MASKS[sym]
    return target, mask


@dataclass
class TrainConfig:
    batch_size: int = 512
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_per_phase: tuple = (400, 300, 250, 200)
    input_bins: int = 0
    hidden: tuple = (256, 64)
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment coefficients must lie in [0, 1)")
        if len(self.epochs_per_phase) < 1 or any(e < 1 for e in self.epochs_per_phase):
            raise ValueError("epochs_per_phase entries must be >= 1")
        if self.input_bins < 0:
            raise ValueError("input_bins must be >= 0")


def _trunk(m: ModelState, X: np.ndarray):
    H1 = np.tanh(X @ m.W1 + m.b1)
    H2 = np.tanh(H1 @ m.W2 + m.b2)
    return H1, H2


def forward(m: ModelState, x):
    """Heads output for one input vector or a batch: (logits, y_hat, log_var)."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != m.input_dim:
        raise ValueError(f"input dim {X.shape[1]} does not match model dim {m.input_dim}")
    _, H2 = _trunk(m, X)
    logits = H2 @ m.Wc + m.bc
    y_hat = H2 @ m.Wr + m.br
    log_var = (H2 @ m.Wv + m.bv)[:, 0]
    if single:
        return logits[0], y_hat[0], float(log_var[0])
    return logits, y_hat, log_var


def _cross_entropy(logits: np.ndarray, class_idx: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(class_idx)), class_idx]
    return float(np.mean(lse - picked))


def loss(m: ModelState, batch: Dataset):
    """(total, class_loss, reg_loss) over a batch; total is their exact sum."""
    if len(batch) == 0:
        raise ValueError("loss needs a nonempty batch")
    logits, y_hat, log_var = forward(m, batch.X)
    class_loss = _cross_entropy(logits, batch.class_idx)
    resid = batch.mask * (batch.target - y_hat)
    r2 = (resid ** 2).sum(axis=1)
    reg_loss = float(np.mean(r2 * np.exp(-log_var) + log_var))
    return class_loss + reg_loss, class_loss, reg_loss


def grad(m: ModelState, batch: Dataset):
    """Analytic gradients of the total loss; returns (grads, total, class, reg)."""
    n = len(batch)
    if n == 0:
        raise ValueError("grad needs a nonempty batch")
    X = batch.X
    H1, H2 = _trunk(m, X)
    logits = H2 @ m.Wc + m.bc
    y_hat = H2 @ m.Wr + m.br
    log_var = (H2 @ m.Wv + m.bv)[:, 0]

    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    probs = expl / expl.sum(axis=1, keepdims=True)
    lse = np.log(expl.sum(axis=1))
    rows = np.arange(n)
    class_loss = float(np.mean(lse - shifted[rows, batch.class_idx]))

    resid = batch.mask * (batch.target - y_hat)
    r2 = (resid ** 2).sum(axis=1)
    inv_var = np.exp(-log_var)
    reg_loss = float(np.mean(r2 * inv_var + log_var))

    d_logits = probs.copy()
    d_logits[rows, batch.class_idx] -= 1.0
    d_logits /= n
    d_yhat = (-2.0 / n) * resid * inv_var[:, None]
    d_logvar = ((1.0 - r2 * inv_var) / n)[:, None]

    d_H2 = d_logits @ m.Wc.T + d_yhat @ m.Wr.T + d_logvar @ m.Wv.T
    d_Z2 = d_H2 * (1.0 - H2 ** 2)
    d_H1 = d_Z2 @ m.W2.T
    d_Z1 = d_H1 * (1.0 - H1 ** 2)

    grads = ModelState(
        W1=X.T @ d_Z1, b1=d_Z1.sum(axis=0),
        W2=H1.T @ d_Z2, b2=d_Z2.sum(axis=0),
        Wc=H2.T @ d_logits, bc=d_logits.sum(axis=0),
        Wr=H2.T @ d_yhat, br=d_yhat.sum(axis=0),
        Wv=H2.T @ d_logvar, bv=d_logvar.sum(axis=0),
    )
    return grads, class_loss + reg_loss, class_loss, reg_loss


class Adam:
    """Adaptive-moment optimizer over the model's named arrays."""

    def __init__(self, model: ModelState, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {f: np.zeros_like(a) for f, a in model.arrays()}
        self.v = {f: np.zeros_like(a) for f, a in model.arrays()}

    def step(self, model: ModelState, grads: ModelState) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for f, p in model.arrays():
            g = getattr(grads, f)
            self.m[f] = self.beta1 * self.m[f] + (1 - self.beta1) * g
            self.v[f] = self.beta2 * self.v[f] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[f] / bc1) / (np.sqrt(self.v[f] / bc2) + self.eps)


def evaluate(m: ModelState, ds: Dataset):
    """(class_loss, mse) with mse = mean ||mask * (target - y_hat)||^2."""
    if len(ds) == 0:
        raise ValueError("evaluate needs a nonempty dataset")
    logits, y_hat, _ = forward(m, ds.X)
    class_loss = _cross_entropy(logits, ds.class_idx)
    resid = ds.mask * (ds.target - y_hat)
    mse = float(np.mean((resid ** 2).sum(axis=1)))
    return class_loss, mse


def train(m: ModelState, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
          epochs: int, cancel: threading.Event = None):
    """Minibatch training; returns (state with minimum validation total loss,
    per-epoch history rows [(epoch, train_total, val_total, val_class, val_mse)]).

    Deterministic for a fixed cfg.seed.  epochs == 0 returns the input model
    unchanged.  Non-finite losses abort with a diagnostic.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    if epochs == 0:
        return m.copy(), []

    model = m.copy()
    opt = Adam(model, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_set)
    best_state, best_val = None, np.inf
    history = []

    for epoch in range(1, epochs + 1):
        if cancel is not None and cancel.is_set():
            raise TrainingCancelled(f"training cancelled before epoch {epoch}")
        order = rng.permutation(n)
        batch_totals = []
        for start in range(0, n, cfg.batch_size):
            batch = train_set.take(order[start:start + cfg.batch_size])
            grads, total, _, _ = grad(model, batch)
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite training loss {total} at epoch {epoch}")
            opt.step(model, grads)
            batch_totals.append(total)
        val_total, val_class, _ = loss(model, val_set)
        if not np.isfinite(val_total):
            raise TrainingDiverged(f"non-finite validation loss {val_total} at epoch {epoch}")
        _, val_mse = evaluate(model, val_set)
        history.append((epoch, float(np.mean(batch_totals)), val_total, val_class, val_mse))
        if val_total < best_val:
            best_val = val_total
            best_state = model.copy()

    return best_state, history


def sqrt_epochs(schedule, train_sizes, scale: float = None):
    """Alternative epoch rule: epochs_k ~ scale / sqrt(N_k).

    scale defaults to schedule[0] * sqrt(train_sizes[0]) so phase 0 matches the
    explicit schedule.
    """
    if scale is None:
        scale = schedule[0] * np.sqrt(train_sizes[0])
    return tuple(max(1, round(scale / np.sqrt(nk))) for nk in train_sizes)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"BFNN"
_MODEL_VERSION = 1


def save_model(path, m: ModelState) -> None:
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        h1, h2 = m.hidden
        fh.write(struct.pack("<IIII", _MODEL_VERSION, m.input_dim, h1, h2))
        for _, arr in m.arrays():
            fh.write(arr.astype("<f8").tobytes())


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        if fh.read(4) != _MODEL_MAGIC:
            raise ValueError(f"{path}: not a braggflow model checkpoint")
        version, input_dim, h1, h2 = struct.unpack("<IIII", fh.read(16))
        if version != _MODEL_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out = ModelState.zeros(input_dim, (h1, h2))
        for f, arr in out.arrays():
            data = np.frombuffer(fh.read(8 * arr.size), dtype="<f8").reshape(arr.shape)
            setattr(out, f, data.copy())
    return out


def write_history(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_total,val_total,val_class,val_mse\n")
        for epoch, train_total, val_total, val_class, val_mse in history:
            fh.write(f"{epoch},{train_total!r},{val_total!r},{val_class!r},{val_mse!r}\n")
