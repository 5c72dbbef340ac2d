"""Line-oriented run configuration.

A config file holds ``section.key = value`` lines; ``#`` starts a comment,
lists are comma separated and matrix rows are separated by ``;``.  Lines of
the form ``sweep.section.key = a | b | c`` declare a parameter sweep; the
cartesian product of all sweep axes is expanded into independent runs.

Recognised sections: ``run``, ``system``, ``data``, ``encoder``, ``loss``,
``optim``, ``eval`` and ``oracle``.  Unknown keys are rejected so typos fail
loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

__all__ = ["RunConfig", "parse_config", "load_config", "expand_sweep", "KNOWN_KEYS"]

KNOWN_KEYS = {
    "run": {"seed", "name"},
    "system": {"name", "r", "noise_order", "potential", "gamma", "kbt", "dt", "stride", "transition",
               "n_states", "dim", "spread", "separation"},
    "data": {"length", "lag", "trajectories", "test_length", "marginals", "enumerate", "burn_in"},
    "encoder": {"hidden", "activation", "modes", "constant", "shared"},
    "loss": {"kind", "r", "lam", "gamma", "nesting_weights", "time_scale", "nesting", "fd_step"},
    "optim": {"lr", "batch_size", "epochs", "steps", "ema_decay"},
    "eval": {"metrics", "horizons", "observables", "routes", "basis", "reference_size", "fixtures",
             "checkpoint", "eval_points"},
    "oracle": {"grid", "n_modes", "interval", "n_grid"},
}


def _strip(line):
    return line.split("#", 1)[0].strip()


def parse_config(text, source="<config>"):
    """Parse config text into ``(values, sweeps)`` dicts keyed by ``section.key``."""
    values, sweeps = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise InvalidInputError(f"{source}:{lineno}: expected 'section.key = value'")
        target = values
        if key.startswith("sweep."):
            key, target = key[len("sweep."):], sweeps
            value = [v.strip() for v in value.split("|")]
            if any(not v for v in value):
                raise InvalidInputError(f"{source}:{lineno}: empty sweep value")
        section, _, name = key.partition(".")
        if section not in KNOWN_KEYS or name not in KNOWN_KEYS[section]:
            raise InvalidInputError(f"{source}:{lineno}: unknown key {key!r}")
        if key in target:
            raise InvalidInputError(f"{source}:{lineno}: duplicate key {key!r}")
        target[key] = value
    return values, sweeps


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration of a single run (sweeps already expanded)."""

    values: dict
    source: str = "<config>"

    # -- typed access -------------------------------------------------------
    def has(self, key):
        return key in self.values

    def get_str(self, key, default=None):
        if key in self.values:
            return self.values[key]
        if default is None:
            raise InvalidInputError(f"{self.source}: missing required key {key!r}")
        return default

    def _convert(self, key, default, fn, kind):
        if key not in self.values:
            if default is None:
                raise InvalidInputError(f"{self.source}: missing required key {key!r}")
            return default
        try:
            return fn(self.values[key])
        except ValueError:
            raise InvalidInputError(f"{self.source}: {key} = {self.values[key]!r} is not {kind}") from None

    def get_int(self, key, default=None):
        return self._convert(key, default, int, "an integer")

    def get_float(self, key, default=None):
        return self._convert(key, default, float, "a number")

    def get_bool(self, key, default=None):
        def fn(v):
            v = v.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        return self._convert(key, default, fn, "a boolean")

    def get_list(self, key, default=None, cast=str):
        def fn(v):
            return tuple(cast(p.strip()) for p in v.split(",") if p.strip())
        return self._convert(key, default, fn, "a list")

    def matrix(self, key):
        def fn(v):
            rows = [[float(p) for p in row.split(",") if p.strip()] for row in v.split(";") if row.strip()]
            if len({len(r) for r in rows}) != 1:
                raise ValueError(v)
            return np.array(rows)
        return self._convert(key, None, fn, "a matrix")

    # -- identity -------------------------------------------------------------
    @property
    def seed(self):
        return self.get_int("run.seed")

    def with_overrides(self, **overrides):
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k.replace("__", ".")] = str(v)
        return RunConfig(vals, self.source)

    def canonical(self):
        """Sorted ``key = value`` text; the basis of :meth:`hash`."""
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


def load_config(path):
    """Read a config file; returns ``(RunConfig, sweeps)``."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc.strerror}") from None
    values, sweeps = parse_config(text, str(path))
    cfg = RunConfig(values, str(path))
    if "run.seed" not in values and "run.seed" not in sweeps:
        raise InvalidInputError(f"{path}: run.seed is mandatory")
    return cfg, sweeps


def expand_sweep(cfg, sweeps):
    """Cartesian product of sweep axes as a list of :class:`RunConfig` (sorted axis order)."""
    if not sweeps:
        return [cfg]
    keys = sorted(sweeps)
    runs = []
    for combo in itertools.product(*(sweeps[k] for k in keys)):
        vals = dict(cfg.values)
        vals.update(zip(keys, combo))
        runs.append(RunConfig(vals, cfg.source))
    return runs
