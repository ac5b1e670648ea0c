"""Information Digital Twin: baseline, detection, diagnosis and feedback.

The twin consumes one raw-feature triple per control cycle, keeps the
sliding-window histogram, compares the entanglement metrics against a
calibrated baseline and turns deviations into either parameter updates for
the controller or operator alerts. It never touches the controller's
configuration itself; the control loop applies returned signals at a cycle
boundary.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .info_metrics import (
    DEFAULT_N_MIN,
    DEFAULT_WINDOW,
    DiscretizationScheme,
    EntanglementMetrics,
    NotReadyError,
    SampleTriple,
    TripleHistogram,
    compute_metrics,
    discretize,
)
from .mpc_core import MpcConfig

METRICS = ("psi", "asymmetry", "memory")


class CalibrationError(ValueError):
    pass


class Severity(str, Enum):
    MINOR = "minor"
    MAJOR = "major"


class Cause(str, Enum):
    CONSTRAINT_RESTRICTION = "constraint_restriction"
    MODEL_MISMATCH = "model_mismatch"
    PREDICTION_MODEL_ERROR = "prediction_model_error"
    ENVIRONMENT_SHIFT = "environment_shift"


@dataclass
class IdtConfig:
    alpha: float = 0.5  # u_bound relaxation
    beta: float = 1.0  # horizon shortening
    gamma: float = 0.5  # drag model update
    delta: float = 1.0  # sampling time
    epsilon: float = 1.0  # process noise inflation
    k: float = 2.0
    std_floor: float = 0.2  # bits; lower bound on the std used for thresholds
    gradient_window: int = 50
    calibration_length: int = 200
    cooldown: int = 100
    window: int = DEFAULT_WINDOW
    n_min: int = DEFAULT_N_MIN

    def validate(self) -> "IdtConfig":
        positive = ("alpha", "beta", "gamma", "delta", "epsilon", "k")
        bad = [n for n in positive if not getattr(self, n) > 0]
        if self.std_floor < 0:
            bad.append("std_floor")
        if self.gradient_window < 2:
            bad.append("gradient_window")
        if self.calibration_length < 1:
            bad.append("calibration_length")
        if self.cooldown < 1:
            bad.append("cooldown")
        if self.window < 1 or self.n_min < 1 or self.n_min > self.window:
            bad.append("window/n_min")
        if bad:
            raise ValueError(f"invalid IdtConfig fields: {', '.join(bad)}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Baseline:
    mean: dict
    std: dict
    k: float
    span: tuple  # (first cycle, last cycle) of the calibration samples
    n_samples: int
    scheme: Optional[dict] = None
    std_floor: float = 0.0

    def spread(self, name: str) -> float:
        """Std used for thresholds: the calibrated std, at least ``std_floor``."""
        return max(self.std[name], self.std_floor)

    @property
    def psi_threshold(self) -> float:
        return self.mean["psi"] - self.k * self.spread("psi")

    @property
    def memory_threshold(self) -> float:
        return self.mean["memory"] - self.k * self.spread("memory")

    @property
    def asymmetry_band(self) -> tuple[float, float]:
        m, s = self.mean["asymmetry"], self.spread("asymmetry")
        return (m - self.k * s, m + self.k * s)

    def thresholds(self) -> dict:
        lo, hi = self.asymmetry_band
        return {"psi": self.psi_threshold, "memory": self.memory_threshold, "asymmetry_low": lo, "asymmetry_high": hi}

    def to_dict(self) -> dict:
        return {
            "mean": dict(self.mean),
            "std": dict(self.std),
            "k": self.k,
            "std_floor": self.std_floor,
            "thresholds": self.thresholds(),
            "span": list(self.span),
            "n_samples": self.n_samples,
            "scheme": self.scheme,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Baseline":
        return cls(
            mean={m: float(doc["mean"][m]) for m in METRICS},
            std={m: float(doc["std"][m]) for m in METRICS},
            k=float(doc["k"]),
            span=tuple(doc["span"]),
            n_samples=int(doc["n_samples"]),
            scheme=doc.get("scheme"),
            std_floor=float(doc.get("std_floor", 0.0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Baseline":
        return cls.from_dict(json.loads(Path(path).read_text()))


def calibrate(
    stream: Sequence[EntanglementMetrics],
    min_length: int,
    k: float = 2.0,
    span: Optional[tuple[int, int]] = None,
    scheme: Optional[dict] = None,
    std_floor: float = 0.0,
) -> Baseline:
    """Population mean/std of each metric over a verified-healthy stream."""
    if len(stream) < max(1, min_length):
        raise CalibrationError(f"calibration needs {min_length} metric samples, got {len(stream)}")
    mean, std = {}, {}
    for name in METRICS:
        vals = np.array([getattr(m, name) for m in stream], dtype=float)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std())
    if span is None:
        span = (0, len(stream) - 1)
    return Baseline(mean, std, float(k), tuple(span), len(stream), scheme, float(std_floor))


@dataclass
class Deviation:
    values: dict
    gaps: dict  # signed current - mean, bits
    gradients: dict  # bits / cycle
    breached: tuple  # subset of ("psi", "asymmetry_high", "asymmetry_low", "memory")
    severity: Severity


def detect(current: EntanglementMetrics, gradients: dict, baseline: Baseline) -> Optional[Deviation]:
    breached = []
    if current.psi < baseline.psi_threshold:
        breached.append("psi")
    lo, hi = baseline.asymmetry_band
    if current.asymmetry > hi:
        breached.append("asymmetry_high")
    elif current.asymmetry < lo:
        breached.append("asymmetry_low")
    if current.memory < baseline.memory_threshold:
        breached.append("memory")
    if not breached:
        return None
    values = {m: getattr(current, m) for m in METRICS}
    gaps = {m: values[m] - baseline.mean[m] for m in METRICS}
    major = len(breached) >= 2
    for b in breached:
        name = "asymmetry" if b.startswith("asymmetry") else b
        if abs(gaps[name]) > 2 * baseline.k * baseline.spread(name):
            major = True
    return Deviation(values, gaps, dict(gradients), tuple(breached), Severity.MAJOR if major else Severity.MINOR)


@dataclass
class Diagnosis:
    cause: Cause
    values: dict


def diagnose(d: Deviation) -> Diagnosis:
    """Asymmetry direction first, then memory, then overall entanglement."""
    b = d.breached
    if "asymmetry_high" in b:
        cause = Cause.CONSTRAINT_RESTRICTION
    elif "asymmetry_low" in b:
        cause = Cause.PREDICTION_MODEL_ERROR
    elif "memory" in b:
        cause = Cause.ENVIRONMENT_SHIFT
    else:
        cause = Cause.MODEL_MISMATCH
    return Diagnosis(cause, dict(d.values))


@dataclass
class AdaptiveSignal:
    cycle: int
    cause: Optional[Cause]
    Np: Optional[int] = None
    u_bound: Optional[float] = None
    C_drag: Optional[float] = None
    Ts: Optional[float] = None
    Q_scale: Optional[float] = None
    restore: bool = False

    def is_identity(self) -> bool:
        return all(getattr(self, f) is None for f in ("Np", "u_bound", "C_drag", "Ts", "Q_scale"))

    def apply(self, cfg: MpcConfig) -> MpcConfig:
        changes = {f: getattr(self, f) for f in ("Np", "u_bound", "C_drag", "Ts", "Q_scale") if getattr(self, f) is not None}
        return cfg.copy(**changes) if changes else cfg


@dataclass
class Alert:
    cycle: int
    severity: Severity
    cause: Cause
    metrics: dict
    message: str


def adapt_horizon(cfg: MpcConfig, beta: float, psi_baseline: float, psi_current: float) -> int:
    if psi_baseline <= 0:
        return cfg.Np_nominal
    raw = cfg.Np_nominal * (1 - beta * (psi_baseline - psi_current) / psi_baseline)
    return max(cfg.Np_min, int(round(max(raw, 0.0))))


def adapt_input_bound(cfg: MpcConfig, alpha: float, asym_excess: float) -> float:
    return (1 + alpha * max(0.0, asym_excess)) * cfg.u_bound_nominal


def adapt_drag(cfg: MpcConfig, gamma: float, asym_excess: float) -> float:
    return cfg.C_drag_nominal * (1 - gamma * min(0.0, asym_excess))


def adapt_sampling_time(cfg: MpcConfig, delta: float, mem_baseline: float, mem_current: float) -> float:
    if mem_baseline <= 0:
        return cfg.Ts_nominal
    return max(cfg.Ts_min, cfg.Ts_nominal * (1 - delta * (mem_baseline - mem_current) / mem_baseline))


def adapt_process_noise(epsilon: float, mem_baseline: float, mem_current: float) -> float:
    """Scale applied to the nominal Q."""
    if mem_baseline <= 0:
        return 1.0
    return 1 + epsilon * (mem_baseline - mem_current) / mem_baseline


def generate_feedback(
    diag: Diagnosis,
    severity: Severity,
    breached: Sequence[str],
    m: EntanglementMetrics,
    base: Baseline,
    cfg: MpcConfig,
    icfg: IdtConfig,
    cycle: int = 0,
) -> AdaptiveSignal | Alert:
    """Diagnosis-gated adaptation from nominal values, or an alert when major.

    Asymmetry laws use the excess beyond the baseline band edge, so an
    in-band asymmetry yields no adjustment.
    """
    if severity is Severity.MAJOR:
        msg = (
            f"cycle {cycle}: {diag.cause.value} ({', '.join(breached)}); "
            f"psi={m.psi:.3f} asym={m.asymmetry:.3f} mem={m.memory:.3f} bits"
        )
        return Alert(cycle, severity, diag.cause, {k: getattr(m, k) for k in METRICS}, msg)
    sig = AdaptiveSignal(cycle=cycle, cause=diag.cause)
    lo, hi = base.asymmetry_band
    if "psi" in breached:
        sig.Np = adapt_horizon(cfg, icfg.beta, base.mean["psi"], m.psi)
    if diag.cause is Cause.CONSTRAINT_RESTRICTION:
        sig.u_bound = adapt_input_bound(cfg, icfg.alpha, m.asymmetry - hi)
    elif diag.cause is Cause.PREDICTION_MODEL_ERROR:
        sig.C_drag = adapt_drag(cfg, icfg.gamma, m.asymmetry - lo)
    elif diag.cause is Cause.ENVIRONMENT_SHIFT:
        sig.Ts = adapt_sampling_time(cfg, icfg.delta, base.mean["memory"], m.memory)
        sig.Q_scale = adapt_process_noise(icfg.epsilon, base.mean["memory"], m.memory)
    return sig


def nominal_restore(cfg: MpcConfig, cycle: int) -> Optional[AdaptiveSignal]:
    """Signal returning adapted parameters to nominal, or None if already nominal."""
    sig = AdaptiveSignal(cycle=cycle, cause=None, restore=True)
    if cfg.Np != cfg.Np_nominal:
        sig.Np = cfg.Np_nominal
    if cfg.u_bound != cfg.u_bound_nominal:
        sig.u_bound = cfg.u_bound_nominal
    if cfg.C_drag != cfg.C_drag_nominal:
        sig.C_drag = cfg.C_drag_nominal
    if cfg.Ts != cfg.Ts_nominal:
        sig.Ts = cfg.Ts_nominal
    if cfg.Q_scale != 1.0:
        sig.Q_scale = 1.0
    return None if sig.is_identity() else sig


def ls_slope(values: Sequence[float]) -> float:
    """Least-squares slope of equally spaced samples (per sample step)."""
    n = len(values)
    if n < 2:
        return 0.0
    t = np.arange(n, dtype=float)
    t -= t.mean()
    return float(np.dot(t, np.asarray(values, dtype=float)) / np.dot(t, t))


@dataclass
class CycleReport:
    """What the twin produced for one control cycle."""

    cycle: int
    metrics: Optional[EntanglementMetrics] = None
    deviation: Optional[Deviation] = None
    diagnosis: Optional[Diagnosis] = None
    signal: Optional[AdaptiveSignal] = None
    alert: Optional[Alert] = None
    update_ns: int = 0  # ingest + metrics
    analysis_ns: int = 0  # detection, diagnosis, feedback


class InformationDigitalTwin:
    """Sequential consumer of feature triples.

    ``s_scheme`` discretizes optimizer-input features (S and S'), ``a_scheme``
    the action features.
    """

    def __init__(self, s_scheme: DiscretizationScheme, a_scheme: DiscretizationScheme, config: IdtConfig | None = None):
        self.config = (config or IdtConfig()).validate()
        self.s_scheme = s_scheme
        self.a_scheme = a_scheme
        self.hist = TripleHistogram(s_scheme.n_symbols, a_scheme.n_symbols, self.config.window, self.config.n_min)
        self.rejected = 0
        self.baseline: Optional[Baseline] = None
        self.history: deque = deque(maxlen=self.config.gradient_window)
        self.last_output_cycle: Optional[int] = None
        self._cache_key = None
        self._cache_sym = 0

    def _s_symbol(self, feats) -> int:
        key = tuple(feats)
        if key != self._cache_key:
            self._cache_sym = discretize(key, self.s_scheme)
            self._cache_key = key
        return self._cache_sym

    def ingest(self, s_feats, a_feats, s_next_feats, cycle: int = -1) -> bool:
        """Discretize and push one triple; non-finite input is counted and dropped."""
        try:
            s = self._s_symbol(s_feats)
            a = discretize(a_feats, self.a_scheme)
            sn = self._s_symbol(s_next_feats)
        except ValueError:
            self.rejected += 1
            return False
        self.hist.push(SampleTriple(s, a, sn, cycle))
        return True

    def metrics(self) -> Optional[EntanglementMetrics]:
        try:
            return compute_metrics(self.hist)
        except NotReadyError:
            return None

    def gradients(self) -> dict:
        return {name: ls_slope([getattr(m, name) for m in self.history]) for name in METRICS}

    def cooldown_elapsed(self, cycle: int) -> bool:
        return self.last_output_cycle is None or cycle - self.last_output_cycle >= self.config.cooldown

    def analyse(self, cycle: int, m: Optional[EntanglementMetrics], cfg: MpcConfig, detect_enabled: bool = True) -> CycleReport:
        """Detection, diagnosis and feedback for the latest metrics."""
        rep = CycleReport(cycle, metrics=m)
        if m is None:
            return rep
        self.history.append(m)
        if not detect_enabled or self.baseline is None:
            return rep
        dev = detect(m, self.gradients(), self.baseline)
        rep.deviation = dev
        if dev is None:
            if self.cooldown_elapsed(cycle):
                sig = nominal_restore(cfg, cycle)
                if sig is not None:
                    rep.signal = sig
                    self.last_output_cycle = cycle
            return rep
        rep.diagnosis = diagnose(dev)
        if self.cooldown_elapsed(cycle):
            out = generate_feedback(rep.diagnosis, dev.severity, dev.breached, m, self.baseline, cfg, self.config, cycle)
            if isinstance(out, Alert):
                rep.alert = out
                self.last_output_cycle = cycle
            elif not out.is_identity():
                rep.signal = out
                self.last_output_cycle = cycle
        return rep

    def scheme_description(self) -> dict:
        return {"s": self.s_scheme.to_dict(), "a": self.a_scheme.to_dict()}
