"""Experiment configuration: defaults, INI parsing, and validation.

The desk-scale defaults keep the full pipeline identifiable and fast:
32 pilot subcarriers, 16 pilot symbols split 4 x 4, an 8 x 8 panel, three
epochs.  Clock defaults stay inside the unambiguous delay and Doppler
windows implied by the numerology; scenarios violating those windows are
rejected at validation time rather than silently wrapped.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import (
    AnchorSet,
    EpochSchedule,
    UEState,
    clock_bias_from_ns,
    clock_drift_from_ppm,
    true_channel_params,
)
from .signal import OfdmConfig, RisConfig


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; fields mirror the CLI flags.

    Sections in config files: [scenario], [ofdm], [ris], [power], [run].
    """

    # scenario
    p: tuple = (-25.0, 42.0, -15.0)
    v: tuple = (-25.0, 25.0, 0.0)
    clock_bias_ns: float = 100.0
    clock_drift_ppm: float = 0.1
    q1: tuple = (30.0, 30.0, 0.0)
    q2: tuple = (0.0, 0.0, 0.0)
    ris_rotation: tuple = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    epochs: int = 3
    epoch_spacing_s: float = 0.2
    elevation_sign: str = "auto"          # auto | positive | negative

    # ofdm
    subcarriers: int = 32
    symbols: int = 16
    g1: int = 4
    g2: int = 4
    bandwidth_hz: float = 240e6
    total_subcarriers: int = 2048
    carrier_hz: float = 28e9

    # ris
    mx: int = 8
    my: int = 8
    spacing_wavelengths: float = 0.2
    amplification: float = 3.0e3          # balances direct/cascaded energy at the default geometry
    mode: str = "active"                  # active | passive
    sigma_ratio: float = 1.0              # sigma_r / sigma_u in SNR-calibrated runs

    # power (absolute budgets, used by the panel-mode comparison)
    tx_dbm: float = 20.0
    ris_dbm: float = 20.0
    noise_dbm: float = -90.0

    # run
    snr_db: float = 15.0
    trials: int = 200
    seed: int = 1789
    workers: int = 1
    sweep: str = "snr"
    sweep_values: tuple = (5.0, 10.0, 15.0, 20.0)
    output: str = "out"
    failure_threshold: float = 0.1

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


_SECTION_OF = {}
for _sec, _names in {
    "scenario": ("p", "v", "clock_bias_ns", "clock_drift_ppm", "q1", "q2",
                 "ris_rotation", "epochs", "epoch_spacing_s", "elevation_sign"),
    "ofdm": ("subcarriers", "symbols", "g1", "g2", "bandwidth_hz",
             "total_subcarriers", "carrier_hz"),
    "ris": ("mx", "my", "spacing_wavelengths", "amplification", "mode",
            "sigma_ratio"),
    "power": ("tx_dbm", "ris_dbm", "noise_dbm"),
    "run": ("snr_db", "trials", "seed", "workers", "sweep", "sweep_values",
            "output", "failure_threshold"),
}.items():
    for _n in _names:
        _SECTION_OF[_n] = _sec

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def parse_value(name: str, raw, where: str = ""):
    """Parse one field value from text; tuples accept space/comma separators."""
    if not isinstance(raw, str):
        return raw
    kind = _FIELD_TYPES.get(name)
    if kind is None:
        raise ConfigError(f"{where}unknown configuration key '{name}'")
    try:
        if kind == "tuple":
            parts = [p for p in re.split(r"[,\s]+", raw.strip()) if p]
            return tuple(float(p) for p in parts)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}cannot parse '{name}' from '{raw}': {exc}") from None


def _line_of(path: str, key: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            for no, line in enumerate(fh, start=1):
                if re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
                    return f"{path}:{no}: "
    except OSError:
        pass
    return f"{path}: "


def load_config_file(path: str) -> dict:
    """Read a key = value config file with sections into a field dict."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if key not in _SECTION_OF:
                raise ConfigError(f"{_line_of(path, key)}unknown key '{key}'")
            if _SECTION_OF[key] != section:
                raise ConfigError(
                    f"{_line_of(path, key)}key '{key}' belongs in section "
                    f"[{_SECTION_OF[key]}], found in [{section}]")
            values[key] = parse_value(key, raw, where=_line_of(path, key))
    return values


def merge(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    return cfg.replace(**overrides)


@dataclass
class Scenario:
    """Assembled simulation objects for one configuration."""

    ue: UEState
    anchors: AnchorSet
    sched: EpochSchedule
    ofdm: OfdmConfig
    ris: RisConfig
    el_sign: np.ndarray       # per-epoch elevation-sign prior


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    """Assemble and validate the simulation objects for a configuration.

    Raises
    ------
    ConfigError
        On dimension mismatches or delays/Dopplers outside the unambiguous
        measurement windows.
    """
    def fail(key, msg):
        raise ConfigError(f"[{_SECTION_OF.get(key, '?')}] {key}: {msg}")

    try:
        ue = UEState(p=cfg.p, v=cfg.v,
                     clock_bias_m=clock_bias_from_ns(cfg.clock_bias_ns),
                     clock_drift_mps=clock_drift_from_ppm(cfg.clock_drift_ppm))
        rot = np.asarray(cfg.ris_rotation, dtype=float).reshape(3, 3)
        anchors = AnchorSet(q1=cfg.q1, q2=cfg.q2, R=rot)
        sched = EpochSchedule.uniform(cfg.epochs, cfg.epoch_spacing_s)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"[scenario] {exc}") from None

    if cfg.epochs < 1:
        fail("epochs", "must be >= 1")
    if cfg.g1 * cfg.g2 != cfg.symbols:
        fail("symbols", f"g1*g2 = {cfg.g1 * cfg.g2} does not equal symbols = {cfg.symbols}")
    if cfg.g1 < 2 or cfg.g2 < 2:
        fail("g1", "g1 and g2 must both be >= 2")
    if cfg.subcarriers < 4:
        fail("subcarriers", "need at least 4 pilot subcarriers")
    if cfg.total_subcarriers < cfg.subcarriers:
        fail("total_subcarriers", "cannot be smaller than pilot subcarriers")
    if cfg.mode not in ("active", "passive"):
        fail("mode", "must be 'active' or 'passive'")
    if cfg.trials < 1:
        fail("trials", "must be >= 1")
    if cfg.workers < 1:
        fail("workers", "must be >= 1")
    if cfg.elevation_sign not in ("auto", "positive", "negative"):
        fail("elevation_sign", "must be auto, positive, or negative")

    delta_f = cfg.bandwidth_hz / cfg.total_subcarriers
    ofdm = OfdmConfig(n_subcarriers=cfg.subcarriers, n_symbols=cfg.symbols,
                      g1=cfg.g1, g2=cfg.g2, delta_f=delta_f,
                      delta_t=1.0 / delta_f, carrier_hz=cfg.carrier_hz)
    eta = cfg.amplification if cfg.mode == "active" else 1.0
    ris = RisConfig(mx=cfg.mx, my=cfg.my,
                    spacing_m=cfg.spacing_wavelengths * ofdm.wavelength,
                    eta=eta, sigma_r=0.0)

    params = true_channel_params(ue, anchors, sched)
    span = ofdm.delay_range_m
    if np.any(params.d1 <= 0) or np.any(params.d1 >= span):
        fail("p", f"direct pseudorange outside the unambiguous window (0, {span:.1f}) m")
    if np.any(anchors.d0 + params.d2 <= 0) or np.any(anchors.d0 + params.d2 >= span):
        fail("p", f"cascaded pseudorange outside the unambiguous window (0, {span:.1f}) m")
    rmax = ofdm.rate_range_mps
    rates = np.concatenate([params.r1, params.r2])
    if np.any(np.abs(rates) >= rmax):
        fail("clock_drift_ppm",
             f"pseudorange rate exceeds the unambiguous window +-{rmax:.1f} m/s")

    if cfg.elevation_sign == "auto":
        el_sign = np.where(params.phi_el >= 0.0, 1.0, -1.0)
    else:
        el_sign = np.full(cfg.epochs, 1.0 if cfg.elevation_sign == "positive" else -1.0)
    return Scenario(ue=ue, anchors=anchors, sched=sched, ofdm=ofdm, ris=ris,
                    el_sign=el_sign)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable hash of the full configuration."""
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def write_manifest(path, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    """Run manifest: configuration hash, seed, package/library versions."""
    import scipy

    from . import __version__

    payload = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "versions": {
            "rislocsim": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")
