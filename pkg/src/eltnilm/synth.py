"""Synthetic multi-state appliances and the mains signal they sum to.

Each appliance is a cyclic state machine: it stays in a state for a
geometrically distributed number of samples (memoryless dwell with the given
mean), then moves to the next state. Readings are the state's mean power plus
Gaussian noise, clamped at 0 W. Mains is the sum of all appliances plus
Gaussian mains noise, also clamped at 0 W.

Scenarios are stored as INI files::

    [scenario]
    days = 7
    mains_noise_std = 10
    seed = 7

    [appliance:kettle_like]
    watts = 0, 1500
    noise_std = 0, 20
    mean_dwell_s = 10800, 180
    on_threshold = 750
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from eltnilm.data import SAMPLE_PERIOD, House, Manifest, PowerSeries, write_channel, write_manifest
from eltnilm.errors import ConfigError

DEFAULT_START = 1_600_000_002  # divisible by 6


@dataclass
class ApplianceSpec:
    name: str
    watts: tuple
    noise_std: tuple
    mean_dwell_s: tuple
    on_threshold: Optional[float] = None

    def errors(self, period: int) -> list:
        found = []
        n = len(self.watts)
        if n < 1:
            found.append(f"{self.name}: at least one state is required")
        if len(self.noise_std) != n or len(self.mean_dwell_s) != n:
            found.append(f"{self.name}: watts, noise_std and mean_dwell_s need one entry per state")
        if any(w < 0 for w in self.watts):
            found.append(f"{self.name}: state watts must be >= 0")
        if any(s < 0 for s in self.noise_std):
            found.append(f"{self.name}: noise_std must be >= 0")
        if any(not d >= period for d in self.mean_dwell_s):
            found.append(f"{self.name}: mean_dwell_s must be >= the {period} s sample period")
        if self.on_threshold is not None and not self.on_threshold > 0:
            found.append(f"{self.name}: on_threshold must be > 0")
        return found


@dataclass
class Scenario:
    appliances: list
    days: float = 7.0
    mains_noise_std: float = 0.0
    seed: int = 0
    period: int = SAMPLE_PERIOD
    start: int = DEFAULT_START
    test_days: float = 0.0

    @property
    def n_samples(self) -> int:
        return int(round(self.days * 86400 / self.period))

    def validate(self) -> "Scenario":
        found = []
        if self.period < 1:
            found.append("period must be >= 1 s")
        if not self.appliances:
            found.append("scenario needs at least one appliance")
        if self.n_samples < 1:
            found.append("days must cover at least one sample")
        if self.mains_noise_std < 0:
            found.append("mains_noise_std must be >= 0")
        if not 0 <= self.test_days < self.days:
            found.append("test_days must be in [0, days)")
        for app in self.appliances:
            found.extend(app.errors(self.period))
        names = [a.name for a in self.appliances]
        if len(set(names)) != len(names) or "mains" in names:
            found.append("appliance names must be unique and not 'mains'")
        if found:
            raise ConfigError("; ".join(found), found)
        return self

    def thresholds(self) -> dict:
        return {a.name: a.on_threshold for a in self.appliances if a.on_threshold is not None}


def simulate_states(spec: ApplianceSpec, n: int, period: int, rng: np.random.Generator) -> np.ndarray:
    """State index per sample, starting in state 0."""
    stay_p = np.array([period / d for d in spec.mean_dwell_s])
    states = np.empty(n, dtype=np.int64)
    pos, state = 0, 0
    while pos < n:
        dwell = int(rng.geometric(stay_p[state]))
        states[pos:pos + dwell] = state
        pos += dwell
        state = (state + 1) % len(spec.watts)
    return states


def synth_generate(scenario: Scenario) -> tuple:
    """Return ``(mains, {name: appliance series})``, reproducible from the seed."""
    scenario.validate()
    n, period = scenario.n_samples, scenario.period
    streams = np.random.SeedSequence(scenario.seed).spawn(len(scenario.appliances) + 1)
    ts = scenario.start + period * np.arange(n, dtype=np.int64)
    appliances = {}
    total = np.zeros(n)
    for spec, seq in zip(scenario.appliances, streams):
        rng = np.random.default_rng(seq)
        states = simulate_states(spec, n, period, rng)
        watts = np.asarray(spec.watts, dtype=np.float64)[states]
        noise = np.asarray(spec.noise_std, dtype=np.float64)[states] * rng.standard_normal(n)
        power = np.maximum(watts + noise, 0.0)
        appliances[spec.name] = PowerSeries(spec.name, ts, power)
        total = total + power
    mains_noise = scenario.mains_noise_std * np.random.default_rng(streams[-1]).standard_normal(n)
    mains = PowerSeries("mains", ts, np.maximum(total + mains_noise, 0.0))
    return mains, appliances


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


_SCENARIO_KEYS = {"days", "mains_noise_std", "seed", "period", "start", "test_days"}
_APPLIANCE_KEYS = {"watts", "noise_std", "mean_dwell_s", "on_threshold"}


def parse_scenario(parser: configparser.ConfigParser, source: str = "<config>") -> Scenario:
    if not parser.has_section("scenario"):
        raise ConfigError(f"{source}: missing [scenario] section")
    errors = []
    sc = dict(parser["scenario"])
    unknown = set(sc) - _SCENARIO_KEYS
    if unknown:
        errors.append(f"[scenario]: unknown keys {sorted(unknown)}")
    apps = []
    for section in parser.sections():
        if not section.startswith("appliance:"):
            continue
        body = dict(parser[section])
        unknown = set(body) - _APPLIANCE_KEYS
        if unknown:
            errors.append(f"[{section}]: unknown keys {sorted(unknown)}")
            continue
        try:
            watts = _floats(body["watts"])
            apps.append(ApplianceSpec(
                section.split(":", 1)[1],
                watts,
                _floats(body.get("noise_std", " ".join(["0"] * len(watts)))),
                _floats(body["mean_dwell_s"]),
                float(body["on_threshold"]) if "on_threshold" in body else None,
            ))
        except KeyError as exc:
            errors.append(f"[{section}]: missing key {exc.args[0]}")
        except ValueError as exc:
            errors.append(f"[{section}]: {exc}")
    if errors:
        raise ConfigError("; ".join(errors), errors)
    try:
        scenario = Scenario(
            apps,
            days=float(sc.get("days", 7)),
            mains_noise_std=float(sc.get("mains_noise_std", 0)),
            seed=int(sc.get("seed", 0)),
            period=int(sc.get("period", SAMPLE_PERIOD)),
            start=int(sc.get("start", DEFAULT_START)),
            test_days=float(sc.get("test_days", 0)),
        )
    except ValueError as exc:
        raise ConfigError(f"[scenario]: {exc}") from None
    return scenario.validate()


def load_scenario(path) -> Scenario:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    return parse_scenario(parser, str(path))


def scenario_to_parser(scenario: Scenario) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser["scenario"] = {
        "days": repr(scenario.days),
        "mains_noise_std": repr(scenario.mains_noise_std),
        "seed": str(scenario.seed),
        "period": str(scenario.period),
        "start": str(scenario.start),
        "test_days": repr(scenario.test_days),
    }
    for app in scenario.appliances:
        parser[f"appliance:{app.name}"] = {}
        sec = parser[f"appliance:{app.name}"]
        sec["watts"] = ", ".join(repr(float(w)) for w in app.watts)
        sec["noise_std"] = ", ".join(repr(float(s)) for s in app.noise_std)
        sec["mean_dwell_s"] = ", ".join(repr(float(d)) for d in app.mean_dwell_s)
        if app.on_threshold is not None:
            sec["on_threshold"] = repr(float(app.on_threshold))
    return parser


def write_scenario(path, scenario: Scenario) -> None:
    with open(path, "w") as fh:
        scenario_to_parser(scenario).write(fh)


def split_by_time(series: PowerSeries, cutoff: int) -> tuple:
    """Split into samples before ``cutoff`` and samples at or after it."""
    before = series.timestamps < cutoff
    return (PowerSeries(series.name, series.timestamps[before], series.values[before]),
            PowerSeries(series.name, series.timestamps[~before], series.values[~before]))


def write_scenario_dataset(scenario: Scenario, out_dir) -> Path:
    """Generate the scenario and write channel CSVs plus a manifest.

    With ``test_days > 0`` the final days go to a held-out ``test`` house and
    the rest to a ``train`` house. Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mains, apps = synth_generate(scenario)
    channels = {"mains": mains, **apps}
    if scenario.test_days > 0:
        cutoff = scenario.start + scenario.period * int(round((scenario.days - scenario.test_days) * 86400 / scenario.period))
        parts = {name: split_by_time(s, cutoff) for name, s in channels.items()}
        groups = [("train", {k: v[0] for k, v in parts.items()}), ("test", {k: v[1] for k, v in parts.items()})]
    else:
        groups = [("train", channels)]
    houses = []
    for role, chans in groups:
        paths = {}
        for name, series in chans.items():
            p = out / role / f"{name}.csv"
            write_channel(p, series)
            paths[name] = p
        houses.append(House(role, role, paths))
    manifest_path = out / "manifest.ini"
    write_manifest(manifest_path, Manifest(houses, scenario.thresholds()))
    write_scenario(out / "scenario.ini", scenario)
    return manifest_path
