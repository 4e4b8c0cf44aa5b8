"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Keys are namespaced (``data.*``, ``arch.*``, ``train.*``, ``infer.*``,
``sweep.*``); unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import ScenarioSpec
from .train import TrainConfig
from .unet import ArchConfig

P_DO_GRID = (0.02, 0.05, 0.08, 0.10, 0.12, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50, 0.60, 0.70)


class ConfigError(ValueError):
    def __init__(self, msg, key=None, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{msg}{where}")
        self.key = key
        self.line = line


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _strs(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


# key -> (parser, default)
SCHEMA = {
    "data.path": (str, ""),
    "data.n_obs": (int, 2000),
    "data.grid_h": (int, 11),
    "data.grid_w": (int, 10),
    "data.channels": (int, 8),
    "data.mix": (_floats, (0.05, 0.15, 0.15, 0.65)),
    "data.target_fraction": (float, 0.42),
    "data.noise_sigma": (float, 0.3),
    "data.stochastic_sigma": (float, 0.15),
    "data.smoothing": (float, 0.1),
    "data.seed": (int, 0),
    "arch.depth": (int, 4),
    "arch.base_filters": (int, 32),
    "arch.dlc": (int, 4),
    "arch.p_do": (float, 0.4),
    "arch.seed": (int, 0),
    "train.lr0": (float, 1e-4),
    "train.lr_decay": (float, 0.9996),
    "train.l2": (float, 1e-6),
    "train.batch": (int, 256),
    "train.max_epochs": (int, 1000),
    "train.patience": (int, 200),
    "train.weight_mode": (str, "UW"),
    "train.n_val_samples": (int, 50),
    "train.seed": (int, 0),
    "infer.n_sample": (_ints, (50,)),
    "infer.rule": (str, "MAP"),
    "infer.seed": (int, 0),
    "infer.split": (str, "test"),
    "infer.variant": (str, "ideal"),
    "infer.trials": (int, 10),
    "infer.workers": (int, 1),
    "sweep.p_do": (_floats, P_DO_GRID),
    "sweep.dlc": (_ints, (1, 2, 3, 4)),
    "sweep.weight_mode": (_strs, ("UW", "MFW")),
    "sweep.n_sample": (int, 50),
    "sweep.split": (str, "val"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix):
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def scenario(self):
        d = self.section("data")
        try:
            return ScenarioSpec(grid_h=d["grid_h"], grid_w=d["grid_w"], mix=d["mix"],
                                target_fraction=d["target_fraction"], channels=d["channels"],
                                noise_sigma=d["noise_sigma"], stochastic_sigma=d["stochastic_sigma"],
                                smoothing=d["smoothing"], seed=d["seed"])
        except ValueError as e:
            raise ConfigError(f"data: {e}") from None

    def arch(self, in_channels, grid_h, grid_w, **override):
        a = self.section("arch")
        kw = dict(depth=a["depth"], base_filters=a["base_filters"], dlc=a["dlc"], p_do=a["p_do"])
        kw.update(override)
        try:
            return ArchConfig(in_channels, grid_h, grid_w, **kw)
        except ValueError as e:
            raise ConfigError(f"arch: {e}") from None

    def train(self, **override):
        """Training settings; a patience beyond ``max_epochs`` is clamped to it."""
        t = self.section("train")
        t.update(override)
        t["patience"] = min(t["patience"], t["max_epochs"])
        try:
            return TrainConfig(**t)
        except ValueError as e:
            raise ConfigError(f"train: {e}") from None

    def lines(self):
        out = []
        for k in SCHEMA:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{k} = {v}")
        return out


def parse(text, source="<config>"):
    values = {k: d for k, (_, d) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}", key=key, line=lineno)
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as e:
            raise ConfigError(f"{source}: bad value for {key!r}: {e}", key=key, line=lineno) from None
    return RunConfig(values)


def load(path=None):
    if path is None:
        return parse("")
    with open(path) as fh:
        return parse(fh.read(), str(path))
