"""Run configuration: presets, INI config files, environment overrides.

A run is described by six sections ([space], [sim], [train], [al],
[workflow], [output]).  Values resolve in order preset < config file <
environment (BRAGGFLOW_SECTION_KEY) < explicit overrides, and everything is
validated before any task starts.  Unknown sections or keys are rejected.
"""

import configparser
import os
from dataclasses import dataclass, field, replace

from .lattice import ParamSpace, SymmetryClass
from .nnet import TrainConfig
from .simulator import SimConfig

__all__ = [
    "ALConfig",
    "WorkflowConfig",
    "RunConfig",
    "ConfigError",
    "preset_config",
    "load_config",
    "equal_class_counts",
    "PRESET_NAMES",
]

ENV_PREFIX = "BRAGGFLOW_"


class ConfigError(ValueError):
    pass


@dataclass
class ALConfig:
    tau_scale: float = 1.0
    prior: str = "uniform"
    prior_center_frac: float = 0.5
    prior_scale_frac: float = 0.25

    def validate(self):
        if self.tau_scale <= 0:
            raise ConfigError("al.tau_scale must be positive")
        if self.prior not in ("uniform", "truncgauss"):
            raise ConfigError(f"unknown prior {self.prior!r}")
        if self.prior_scale_frac <= 0:
            raise ConfigError("al.prior_scale_frac must be positive")


@dataclass
class WorkflowConfig:
    mode: str = "serial"
    phases: int = 4
    train0: int = 13500
    baseline_train: int = 0      # 0 -> same as train0
    baseline_epochs: int = 0     # 0 -> first schedule entry
    val_ratio: float = 0.5
    test_ratio: float = 0.5
    study_ratio: float = 1.0
    stream_ratio: float = 0.6
    final_ratio: float = 1.0
    train_pool_size: int = 1
    epochs_mode: str = "schedule"
    sqrt_epoch_scale: float = 0.0  # 0 -> derived from schedule[0] * sqrt(N0)

    def validate(self):
        if self.mode not in ("baseline", "serial", "streaming"):
            raise ConfigError(f"unknown workflow mode {self.mode!r}")
        if self.phases < 1:
            raise ConfigError("workflow.phases must be >= 1")
        if self.mode == "streaming" and self.phases < 2:
            raise ConfigError("streaming needs at least 2 phases")
        if self.train0 < 1:
            raise ConfigError("workflow.train0 must be >= 1")
        for name in ("val_ratio", "test_ratio", "study_ratio", "stream_ratio", "final_ratio"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"workflow.{name} must be positive")
        if self.train_pool_size < 1:
            raise ConfigError("workflow.train_pool_size must be >= 1")
        if self.epochs_mode not in ("schedule", "sqrt"):
            raise ConfigError(f"unknown epochs_mode {self.epochs_mode!r}")


@dataclass
class RunConfig:
    space: ParamSpace
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    al: ALConfig = field(default_factory=ALConfig)
    workflow: WorkflowConfig = field(default_factory=WorkflowConfig)
    out_dir: str = ""
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.sim.validate()
        self.train.validate()
        self.al.validate()
        self.workflow.validate()
        if self.workflow.epochs_mode == "schedule" and len(self.train.epochs_per_phase) < self.workflow.phases:
            raise ConfigError(
                f"epoch schedule has {len(self.train.epochs_per_phase)} entries "
                f"but the workflow has {self.workflow.phases} phases"
            )
        return self


def equal_class_counts(n_total: int):
    """Split a sample count over the three classes as evenly as possible."""
    base, rem = divmod(int(n_total), 3)
    return tuple(base + (1 if i < rem else 0) for i in range(3))


# Full-run presets.  E1/E2 reproduce the published experiment shapes; the
# -desk variants scale the sample counts down (1/10 and 1/45) and pool the
# profile to 512 bins so a complete workflow finishes in minutes on a laptop.
def _e1() -> RunConfig:
    return RunConfig(
        space=ParamSpace.preset("E1"),
        sim=SimConfig(pool_size=8),
        train=TrainConfig(batch_size=512, epochs_per_phase=(400, 300, 250, 200)),
        workflow=WorkflowConfig(train0=13500),
    )


def _e2() -> RunConfig:
    return RunConfig(
        space=ParamSpace.preset("E2"),
        sim=SimConfig(pool_size=8),
        train=TrainConfig(batch_size=1024, epochs_per_phase=(400, 300, 250, 200)),
        workflow=WorkflowConfig(train0=216000),
    )


def _e1_desk() -> RunConfig:
    cfg = _e1()
    cfg.sim = replace(cfg.sim, pool_size=4, hkl_bound=4)
    cfg.train = replace(cfg.train, batch_size=128, input_bins=512,
                        epochs_per_phase=(60, 45, 40, 30))
    cfg.workflow = replace(cfg.workflow, train0=1350)
    return cfg


def _e2_desk() -> RunConfig:
    cfg = _e2()
    cfg.sim = replace(cfg.sim, pool_size=4, hkl_bound=4)
    cfg.train = replace(cfg.train, batch_size=128, input_bins=512,
                        epochs_per_phase=(60, 45, 40, 30))
    cfg.workflow = replace(cfg.workflow, train0=4800)
    return cfg


_PRESETS = {"E1": _e1, "E2": _e2, "E1-desk": _e1_desk, "E2-desk": _e2_desk}
PRESET_NAMES = tuple(_PRESETS)


def preset_config(name: str) -> RunConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


# ---------------------------------------------------------------------------
# INI parsing
# ---------------------------------------------------------------------------

def _parse_int(v):
    return int(v)


def _parse_float(v):
    return float(v)


def _parse_str(v):
    return str(v)


def _parse_int_list(v):
    return tuple(int(x) for x in str(v).split(","))


def _parse_range(v):
    lo, hi = (float(x) for x in str(v).split(","))
    return (lo, hi)


_SCHEMA = {
    "space": {
        "preset": _parse_str,
        "cubic_a": _parse_range,
        "trigonal_a": _parse_range,
        "trigonal_alpha": _parse_range,
        "tetragonal_a": _parse_range,
        "tetragonal_c": _parse_range,
    },
    "sim": {
        "difc": _parse_float,
        "w0": _parse_float,
        "w1": _parse_float,
        "hkl_bound": _parse_int,
        "noise_std": _parse_float,
        "artificial_cost_ms": _parse_float,
        "sim_pool_size": _parse_int,
    },
    "train": {
        "batch_size": _parse_int,
        "lr": _parse_float,
        "beta1": _parse_float,
        "beta2": _parse_float,
        "epochs": _parse_int_list,
        "input_bins": _parse_int,
        "hidden": _parse_int_list,
    },
    "al": {
        "tau_scale": _parse_float,
        "prior": _parse_str,
        "prior_center_frac": _parse_float,
        "prior_scale_frac": _parse_float,
    },
    "workflow": {
        "mode": _parse_str,
        "phases": _parse_int,
        "train0": _parse_int,
        "baseline_train": _parse_int,
        "baseline_epochs": _parse_int,
        "val_ratio": _parse_float,
        "test_ratio": _parse_float,
        "study_ratio": _parse_float,
        "stream_ratio": _parse_float,
        "final_ratio": _parse_float,
        "train_pool_size": _parse_int,
        "epochs_mode": _parse_str,
        "sqrt_epoch_scale": _parse_float,
    },
    "output": {
        "directory": _parse_str,
    },
}

_RANGE_KEYS = {
    "cubic_a": (SymmetryClass.CUBIC, "a"),
    "trigonal_a": (SymmetryClass.TRIGONAL, "a"),
    "trigonal_alpha": (SymmetryClass.TRIGONAL, "alpha"),
    "tetragonal_a": (SymmetryClass.TETRAGONAL, "a"),
    "tetragonal_c": (SymmetryClass.TETRAGONAL, "c"),
}


def _typed_values(path=None, env=None, overrides=None):
    """Collect {(section, key): parsed value} from file, env and overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                values[(section, key)] = _parse(section, key, raw)
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"environment variable {name} does not match any config key")
        values[(section, key)] = _parse(section, key, raw)
    for (section, key), raw in (overrides or {}).items():
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown override {section}.{key}")
        values[(section, key)] = _parse(section, key, raw)
    return values


def _parse(section, key, raw):
    try:
        return _SCHEMA[section][key](raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({err})")


def load_config(path=None, preset=None, env=None, overrides=None, seed=0) -> RunConfig:
    """Build a validated RunConfig from preset + file + env + overrides."""
    values = _typed_values(path, env, overrides)

    file_preset = values.pop(("space", "preset"), None)
    preset_name = preset or file_preset
    if preset_name is not None:
        cfg = preset_config(preset_name)
    elif any(("space", rk) in values for rk in _RANGE_KEYS):
        cfg = RunConfig(space=ParamSpace.preset("E1"))
    else:
        raise ConfigError("no preset and no explicit [space] ranges given")

    ranges = {sym: dict(cfg.space.ranges[sym]) for sym in SymmetryClass}
    for rk, (sym, param) in _RANGE_KEYS.items():
        if ("space", rk) in values:
            ranges[sym][param] = values.pop(("space", rk))
    cfg.space = ParamSpace(ranges)

    sim_map = {"sim_pool_size": "pool_size"}
    train_map = {"epochs": "epochs_per_phase"}
    for (section, key), val in values.items():
        if section == "sim":
            setattr(cfg.sim, sim_map.get(key, key), val)
        elif section == "train":
            setattr(cfg.train, train_map.get(key, key), val)
        elif section == "al":
            setattr(cfg.al, key, val)
        elif section == "workflow":
            setattr(cfg.workflow, key, val)
        elif section == "output":
            cfg.out_dir = val

    cfg.seed = seed
    return cfg.validate()
