"""Run configuration: INI files layered over named scenario presets.

Example::

    [run]
    scenario = kahler_limit
    cadence = 0.25

    [background]
    omega0_real = 2 0 0 2
    log_h = 0.3*sin(x1) + 0.2*cos(y2)
    normalize_h = true

    [step]
    t_max = 15

Matrices are row-major lists of real and imaginary parts; fields use the
grammar of :mod:`mkrflow.expr`. An empty matrix means the identity. Every key not given falls back to the preset
named by ``scenario`` (``custom`` has only generic defaults).
"""

from __future__ import annotations

import configparser
import copy
import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import WeightConfig
from .expr import ExpressionError, evaluate
from .flow import FLOW_KINDS, Background, StepPolicy, pencil_singular_time
from .torus import FormSpec, TorusGrid, det_field, realize

SCENARIOS = ("fixed_point", "kahler_limit", "ricci_flat", "finite_time", "canonical_flow", "custom")

_BASE = {
    "run": {
        "n_complex": "2",
        "points_per_axis": "16",
        "periods": "",
        "flow_kind": "modified",
        "cadence": "0.25",
        "steady_tol": "none",
        "snapshot_every": "5",
        "compute_S": "true",
    },
    "background": {
        "omega0_real": "",
        "omega0_imag": "",
        "omega_inf_real": "",
        "omega_inf_imag": "",
        "rho0": "",
        "rho_inf": "",
        "log_h": "0",
        "normalize_h": "false",
        "f": "",
        "weight_s": "",
    },
    "step": {"mode": "adaptive", "dt": "0.01", "safety": "0.5", "delta_pd": "1e-8", "t_max": "1"},
    "weight": {"epsilon": "0.1", "T_virtual_offset": "none", "variant": "infinite"},
    "output": {"dir": "out"},
}

_PRESETS = {
    "fixed_point": {
        "run": {"cadence": "0.5", "steady_tol": "1e-12"},
        "step": {"dt": "0.05", "t_max": "5"},
    },
    "kahler_limit": {
        "background": {
            "omega0_real": "2 0 0 2",
            "log_h": "0.3*sin(x1) + 0.2*cos(y2)",
            "normalize_h": "true",
        },
        "step": {"dt": "0.01", "safety": "1.0", "t_max": "15"},
    },
    "ricci_flat": {
        "background": {"omega0_real": "2 0 0 2", "rho0": "0.02*cos(x1 + y2) + 0.01*sin(x2)"},
        "run": {"steady_tol": "1e-9"},
        "step": {"dt": "0.01", "safety": "1.0", "t_max": "30"},
    },
    "finite_time": {
        "run": {"n_complex": "1", "points_per_axis": "32", "cadence": "0.05"},
        "background": {
            "omega0_real": "2",
            "omega_inf_real": "-1",
            "log_h": "0.3*sin(x1)",
            "weight_s": "0.5 - 0.5*cos(x1)",
        },
        "step": {"dt": "0.001", "safety": "1.0", "t_max": "10"},
        "weight": {"epsilon": "0.1", "T_virtual_offset": "0.1", "variant": "finite"},
    },
    "canonical_flow": {
        "run": {"flow_kind": "canonical"},
        "background": {
            "log_h": "0.3*sin(x1) + 0.2*cos(y2)",
            "normalize_h": "true",
            "weight_s": "0.5 - 0.5*cos(x1)",
        },
        "step": {"dt": "0.01", "safety": "1.0", "t_max": "15"},
    },
    "custom": {},
}


class ConfigError(ValueError):
    pass


def preset(scenario):
    """Full section dict for a scenario, before user overrides."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    out = copy.deepcopy(_BASE)
    for section, values in _PRESETS[scenario].items():
        out[section].update(values)
    return out


def _float(text, key, allow_none=False):
    t = str(text).strip().lower()
    if allow_none and t in ("", "none"):
        return None
    try:
        return float(t)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None


def _bool(text, key):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _numbers(text, key):
    try:
        return [float(x) for x in str(text).replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: expected a list of numbers, got {text!r}") from None


def _matrix(real, imag, n, key):
    if not str(real).strip() and not str(imag).strip():
        return np.eye(n, dtype=complex)
    re = _numbers(real, key + "_real")
    im = _numbers(imag, key + "_imag") if str(imag).strip() else [0.0] * len(re)
    if len(re) != n * n or len(im) != n * n:
        raise ConfigError(f"{key}: need {n * n} entries for an {n}x{n} matrix")
    m = (np.array(re) + 1j * np.array(im)).reshape(n, n)
    if np.max(np.abs(m - m.conj().T)) > 1e-12:
        raise ConfigError(f"{key}: matrix is not Hermitian")
    return m


@dataclass
class RunConfig:
    """Parsed configuration; ``sections`` keeps the raw string values."""

    scenario: str
    sections: dict

    def get(self, section, key):
        return self.sections[section][key]

    @property
    def grid(self):
        run = self.sections["run"]
        try:
            n = int(run["n_complex"])
            npts = int(run["points_per_axis"])
        except ValueError as exc:
            raise ConfigError(f"run: {exc}") from None
        periods = _numbers(run["periods"], "periods") or None
        try:
            return TorusGrid(n, npts, periods)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def flow_kind(self):
        kind = self.get("run", "flow_kind").strip()
        if kind not in FLOW_KINDS:
            raise ConfigError(f"flow_kind must be one of {FLOW_KINDS}, got {kind!r}")
        return kind

    @property
    def cadence(self):
        c = _float(self.get("run", "cadence"), "cadence")
        if not c > 0:
            raise ConfigError("cadence must be positive")
        return c

    @property
    def steady_tol(self):
        return _float(self.get("run", "steady_tol"), "steady_tol", allow_none=True)

    @property
    def snapshot_every(self):
        return _float(self.get("run", "snapshot_every"), "snapshot_every", allow_none=True)

    @property
    def compute_S(self):
        return _bool(self.get("run", "compute_S"), "compute_S")

    @property
    def output_dir(self):
        return self.get("output", "dir").strip()

    def _field(self, key, grid):
        text = self.get("background", key).strip()
        if not text:
            return None
        try:
            return evaluate(text, grid)
        except ExpressionError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def forms(self, grid=None):
        grid = grid or self.grid
        bgs = self.sections["background"]
        n = grid.n_complex
        c0 = _matrix(bgs["omega0_real"], bgs["omega0_imag"], n, "omega0")
        cinf = _matrix(bgs["omega_inf_real"], bgs["omega_inf_imag"], n, "omega_inf")
        return FormSpec(c0, self._field("rho0", grid)), FormSpec(cinf, self._field("rho_inf", grid))

    def log_h(self, grid, omega_inf):
        log_h = self._field("log_h", grid)
        log_h = np.zeros(grid.shape) if log_h is None else log_h
        if _bool(self.get("background", "normalize_h"), "normalize_h"):
            vol = grid.integrate(det_field(realize(grid, omega_inf)))
            if not vol > 0:
                raise ConfigError("normalize_h needs a limit class of positive volume")
            log_h = log_h + math.log(vol / grid.integrate(np.exp(log_h)))
        return log_h

    def background(self):
        grid = self.grid
        omega0, omega_inf = self.forms(grid)
        try:
            return Background(
                grid,
                omega0,
                omega_inf,
                self.log_h(grid, omega_inf),
                f=self._field("f", grid),
                weight_s=self._field("weight_s", grid),
            )
        except (ValueError, ArithmeticError) as exc:
            raise ConfigError(f"invalid background: {exc}") from None

    @property
    def policy(self):
        s = self.sections["step"]
        try:
            return StepPolicy(
                mode=s["mode"].strip(),
                dt=_float(s["dt"], "dt"),
                safety=_float(s["safety"], "safety"),
                delta_pd=_float(s["delta_pd"], "delta_pd"),
                t_max=_float(s["t_max"], "t_max"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def weight(self, T=math.inf):
        """WeightConfig, or None when no weight field is configured."""
        if not self.get("background", "weight_s").strip():
            return None
        w = self.sections["weight"]
        offset = _float(w["T_virtual_offset"], "T_virtual_offset", allow_none=True)
        variant = w["variant"].strip()
        T_virtual = None
        if offset is not None:
            if not offset > 0:
                raise ConfigError("T_virtual_offset must be positive")
            T_virtual = T + offset
        try:
            cfg = WeightConfig(_float(w["epsilon"], "epsilon"), T_virtual, variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if variant == "finite" and not math.isfinite(T):
            raise ConfigError("the finite weighted monitor needs a finite singular time")
        return cfg

    def validate(self):
        """Build every derived object once so errors surface before a run starts."""
        self.flow_kind, self.cadence, self.steady_tol, self.snapshot_every, self.compute_S
        bg = self.background()
        self.policy
        T = pencil_singular_time(bg.omega0.constant, bg.omega_inf.constant).T
        if self.scenario == "finite_time" and math.isinf(T):
            raise ConfigError("finite_time needs an indefinite limit class (finite singular time)")
        if self.scenario in ("kahler_limit", "ricci_flat", "fixed_point", "canonical_flow") and math.isfinite(T):
            raise ConfigError(f"{self.scenario} needs a Kahler limit class")
        self.weight(T)
        return self

    def as_dict(self):
        return copy.deepcopy(self.sections)


def from_sections(user, scenario=None):
    """Layer ``user`` (section -> key -> str) over the preset for its scenario."""
    user = {s: dict(v) for s, v in user.items()}
    scenario = scenario or user.get("run", {}).get("scenario", "custom").strip()
    sections = preset(scenario)
    for section, values in user.items():
        if section not in sections:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in values.items():
            if section == "run" and key == "scenario":
                continue
            if key not in sections[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            sections[section][key] = value
    return RunConfig(scenario, sections)


def load_config(path):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    user = {s: dict(parser.items(s)) for s in parser.sections()}
    return from_sections(user).validate()


def preset_config(scenario, overrides=None):
    """Validated preset; ``overrides`` maps ``"section.key"`` to values."""
    user = {}
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        user.setdefault(section, {})[key] = str(value)
    return from_sections(user, scenario).validate()
