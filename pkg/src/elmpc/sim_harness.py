"""Scenario-driven closed-loop runs: plant, MPC, estimator and the twin.

One cycle: measure, estimate, optimize, apply the first input to the plant,
complete the previous cycle's (S, A, S') triple and hand it to the twin. A
signal returned by the twin is applied at the next cycle boundary.
"""

from __future__ import annotations

import csv
import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .idt import Alert, Baseline, CalibrationError, IdtConfig, InformationDigitalTwin, calibrate
from .info_metrics import DiscretizationScheme, discretize
from .mpc_core import (
    KalmanEstimate,
    MpcConfig,
    OptimizerDivergenceError,
    PlantParams,
    Trajectory,
    UavState,
    kalman_step,
    optimize,
    shift_warm_start,
    step_plant,
)

LOG_SCHEMA_VERSION = 1
EVENT_KINDS = ("wind_gust", "drag_shift", "actuator_derate")
REFERENCE_KINDS = ("waypoint_line", "circle", "figure_eight")


def default_schemes() -> tuple[DiscretizationScheme, DiscretizationScheme]:
    """Default bins for optimizer-input features (S) and actions (A).

    S: position-error norm, velocity-error norm, terminal predicted cost.
    A: acceleration per axis over the nominal input box.
    Interior bins are uniform over the operational range; the outer bins
    catch extremes.
    """
    s = DiscretizationScheme.uniform([(0.0, 0.035, 5), (0.0, 0.12, 3), (0.0015, 0.003, 1)])
    a = DiscretizationScheme.uniform([(-1.0, 1.0, 5), (-1.0, 1.0, 5)])
    return s, a


# --------------------------------------------------------------------------- scenarios


@dataclass
class Event:
    onset: int
    kind: str
    value: object  # wind: 2-vector m/s; drag: 1/s; derate: scale on realized u
    end: Optional[int] = None

    def active(self, cycle: int) -> bool:
        return cycle >= self.onset and (self.end is None or cycle < self.end)


@dataclass
class ScenarioSpec:
    name: str
    duration: int
    reference: dict
    events: list = field(default_factory=list)
    process_noise_std: float = 0.5
    measurement_noise_std: tuple = (0.02, 0.05)
    seed: int = 0
    drag: float = 0.1
    calibration_fraction: float = 0.2

    def __post_init__(self):
        self.events = [e if isinstance(e, Event) else Event(**e) for e in self.events]
        self.measurement_noise_std = tuple(self.measurement_noise_std)
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        if self.reference.get("kind") not in REFERENCE_KINDS:
            raise ValueError(f"unknown reference kind {self.reference.get('kind')!r}")
        for e in self.events:
            if e.kind not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {e.kind!r}")
            if not 0 <= e.onset < self.duration:
                raise ValueError(f"event onset {e.onset} outside duration {self.duration}")
            if e.end is not None and e.end <= e.onset:
                raise ValueError("event end must follow its onset")
        if not 0 < self.calibration_fraction < 1:
            raise ValueError("calibration_fraction must be in (0, 1)")

    @property
    def calibration_end(self) -> int:
        return int(self.duration * self.calibration_fraction)

    @property
    def first_onset(self) -> Optional[int]:
        return min((e.onset for e in self.events), default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["measurement_noise_std"] = list(self.measurement_noise_std)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioSpec":
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_reference(ref: dict, ts: float, duration_s: float) -> Trajectory:
    """Sample the reference at ``ts`` over ``[0, duration_s]``."""
    kind = ref.get("kind")
    n = int(math.ceil(duration_s / ts - 1e-9)) + 1
    t = ts * np.arange(n)
    if kind == "circle":
        r = float(ref.get("radius", 5.0))
        w = 2 * math.pi / float(ref.get("period", 20.0))
        cx, cy = ref.get("center", (0.0, 0.0))
        pos = np.column_stack([cx + r * np.cos(w * t), cy + r * np.sin(w * t)])
        vel = np.column_stack([-r * w * np.sin(w * t), r * w * np.cos(w * t)])
    elif kind == "figure_eight":
        a = float(ref.get("amplitude", 5.0))
        w = 2 * math.pi / float(ref.get("period", 20.0))
        cx, cy = ref.get("center", (0.0, 0.0))
        pos = np.column_stack([cx + a * np.sin(w * t), cy + 0.5 * a * np.sin(2 * w * t)])
        vel = np.column_stack([a * w * np.cos(w * t), a * w * np.cos(2 * w * t)])
    elif kind == "waypoint_line":
        start = np.asarray(ref.get("start", (0.0, 0.0)), dtype=float)
        end = np.asarray(ref.get("end", (0.0, 0.0)), dtype=float)
        speed = float(ref.get("speed", 1.0))
        length = float(np.linalg.norm(end - start))
        if length == 0.0 or speed <= 0.0:
            pos = np.tile(start, (n, 1))
            vel = np.zeros((n, 2))
        else:
            direction = (end - start) / length
            s = np.minimum(speed * t, length)
            pos = start + s[:, None] * direction
            moving = (speed * t < length)[:, None]
            vel = np.where(moving, speed * direction, 0.0)
    else:
        raise ValueError(f"unknown reference kind {kind!r}")
    return Trajectory(t, pos, vel)


# --------------------------------------------------------------------------- run log


LOG_COLUMNS = [
    "schema_version", "cycle", "time",
    "px", "py", "vx", "vy",
    "est_px", "est_py", "est_vx", "est_vy",
    "ref_px", "ref_py", "ref_vx", "ref_vy",
    "ux", "uy", "cost", "iterations", "saturated",
    "pos_err", "vel_err", "terminal_cost", "s_symbol", "a_symbol",
    "psi", "asymmetry", "memory",
    "Np", "Ts", "u_bound", "C_drag", "Q_scale",
    "deviation", "severity", "diagnosis",
    "sig_Np", "sig_u_bound", "sig_C_drag", "sig_Ts", "sig_Q_scale", "alert",
]  # fmt: skip


@dataclass
class RunLog:
    scenario: ScenarioSpec
    mpc_config: MpcConfig
    idt_config: IdtConfig
    el_enabled: bool
    rows: list = field(default_factory=list)
    baseline: Optional[Baseline] = None
    aborted: bool = False
    abort_reason: str = ""
    rejected: int = 0
    idt_update_ns: list = field(default_factory=list)
    idt_analysis_ns: list = field(default_factory=list)
    mpc_ns: list = field(default_factory=list)
    memory_bytes_max: int = 0
    alerts: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def control_trace(self) -> list:
        return [tuple(r.values()) for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})

    def timing(self) -> dict:
        def stats(ns):
            if not ns:
                return None
            us = np.asarray(ns, dtype=float) / 1e3
            return {"median_us": float(np.median(us)), "p95_us": float(np.percentile(us, 95)), "max_us": float(us.max()), "n": len(us)}

        return {
            "idt_update_metrics": stats(self.idt_update_ns),
            "idt_analysis": stats(self.idt_analysis_ns),
            "mpc_optimize": stats(self.mpc_ns),
            "count_table_bytes_max": self.memory_bytes_max,
        }


def _opt(x):
    return None if x is None else x


# --------------------------------------------------------------------------- closed loop


class _Plant:
    """True-world parameters driven by scenario events."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.params = PlantParams(spec.drag, None, spec.process_noise_std, spec.measurement_noise_std)
        self.derate = 1.0

    def update(self, cycle: int) -> None:
        drag = self.spec.drag
        wind = np.zeros(2)
        derate = 1.0
        for e in self.spec.events:
            if not e.active(cycle):
                continue
            if e.kind == "drag_shift":
                drag = float(e.value)
            elif e.kind == "wind_gust":
                wind = wind + np.asarray(e.value, dtype=float)
            elif e.kind == "actuator_derate":
                derate *= float(e.value)
        self.params.drag = drag
        self.params.wind = wind if np.any(wind) else None
        self.derate = derate


def run_closed_loop(
    scenario: ScenarioSpec,
    mpc_cfg: MpcConfig | None = None,
    idt_cfg: IdtConfig | None = None,
    el_enabled: bool = True,
    baseline: Baseline | None = None,
    schemes: tuple[DiscretizationScheme, DiscretizationScheme] | None = None,
    concurrent: bool = False,
) -> RunLog:
    """Run one scenario.

    With ``el_enabled`` false the twin still computes metrics (they are
    logged) but never detects, diagnoses or adapts. ``baseline`` replaces the
    in-run calibration over the clean prefix. ``concurrent`` runs the twin on
    a worker thread fed by a queue; that mode is not cycle-deterministic.
    """
    cfg = (mpc_cfg or MpcConfig()).copy().validate()
    icfg = (idt_cfg or IdtConfig()).validate()
    if schemes is None:
        schemes = default_schemes()
    s_scheme, a_scheme = schemes
    twin = InformationDigitalTwin(s_scheme, a_scheme, icfg)
    if baseline is not None:
        twin.baseline = baseline
    log = RunLog(scenario, cfg.copy(), icfg, el_enabled, baseline=baseline)

    horizon_s = (scenario.duration + cfg.Np_nominal + 1) * cfg.Ts_nominal
    ref = build_reference(scenario.reference, cfg.Ts_nominal, horizon_s)
    plant = _Plant(scenario)
    proc_seq, meas_seq = np.random.SeedSequence(scenario.seed).spawn(2)
    rng_proc = np.random.default_rng(proc_seq)
    rng_meas = np.random.default_rng(meas_seq)
    R = plant.params.R
    sp, sv = scenario.measurement_noise_std
    meas_scale = np.array([sp, sp, sv, sv])

    p0, v0 = ref.sample(0.0)
    state = UavState(p0[0], v0[0])
    est = KalmanEstimate(state.as_vector(), np.diag(np.maximum(meas_scale**2, 1e-6)))
    u_warm = None
    u_applied = np.zeros(2)
    prev = None  # (s_features, a_features) of the previous cycle
    pending = None
    calib_stream: list = []
    calib_first = None
    t = 0.0

    worker = _TwinWorker(twin, el_enabled) if concurrent else None
    if worker:
        worker.start()

    try:
        for k in range(scenario.duration):
            if pending is not None:
                cfg = pending.apply(cfg)
                pending = None
            if worker:
                for out in worker.drain():
                    if out.signal is not None and el_enabled:
                        cfg = out.signal.apply(cfg)
            plant.update(k)

            z = state.as_vector() + meas_scale * rng_meas.standard_normal(4)
            if k > 0:
                est = kalman_step(est, u_applied, z, cfg, R)
            x_hat = est.state()
            window = ref.window(t, cfg.Np, cfg.Ts)
            now_p, now_v = ref.sample(t)
            t0 = time.perf_counter_ns()
            u_seq, io = optimize(x_hat, window, cfg, shift_warm_start(u_warm, cfg.Np), (now_p[0], now_v[0]))
            log.mpc_ns.append(time.perf_counter_ns() - t0)
            u_warm = u_seq
            u_applied = u_seq[0].copy()

            row = {
                "schema_version": LOG_SCHEMA_VERSION,
                "cycle": k,
                "time": t,
                "px": float(state.position[0]), "py": float(state.position[1]),
                "vx": float(state.velocity[0]), "vy": float(state.velocity[1]),
                "est_px": float(x_hat.position[0]), "est_py": float(x_hat.position[1]),
                "est_vx": float(x_hat.velocity[0]), "est_vy": float(x_hat.velocity[1]),
                "ref_px": float(now_p[0, 0]), "ref_py": float(now_p[0, 1]),
                "ref_vx": float(now_v[0, 0]), "ref_vy": float(now_v[0, 1]),
                "ux": float(u_applied[0]), "uy": float(u_applied[1]),
                "cost": io.cost, "iterations": io.iterations, "saturated": int(any(io.saturated)),
                "pos_err": io.s_features[0], "vel_err": io.s_features[1], "terminal_cost": io.s_features[2],
                "s_symbol": discretize(io.s_features, s_scheme), "a_symbol": discretize(io.a_features, a_scheme),
                "psi": None, "asymmetry": None, "memory": None,
                "Np": cfg.Np, "Ts": cfg.Ts, "u_bound": cfg.u_bound, "C_drag": cfg.C_drag, "Q_scale": cfg.Q_scale,
                "deviation": 0, "severity": "", "diagnosis": "",
                "sig_Np": None, "sig_u_bound": None, "sig_C_drag": None, "sig_Ts": None, "sig_Q_scale": None,
                "alert": 0,
            }  # fmt: skip

            if prev is not None:
                if worker:
                    worker.submit(k - 1, prev[0], prev[1], io.s_features, cfg)
                else:
                    t1 = time.perf_counter_ns()
                    twin.ingest(prev[0], prev[1], io.s_features, k - 1)
                    m = twin.metrics()
                    t2 = time.perf_counter_ns()
                    detect_on = el_enabled and k > scenario.calibration_end
                    rep = twin.analyse(k, m, cfg, detect_enabled=detect_on)
                    t3 = time.perf_counter_ns()
                    log.idt_update_ns.append(t2 - t1)
                    log.idt_analysis_ns.append(t3 - t2)
                    log.memory_bytes_max = max(log.memory_bytes_max, twin.hist.memory_bytes())
                    if m is not None:
                        row["psi"], row["asymmetry"], row["memory"] = m.psi, m.asymmetry, m.memory
                        if k <= scenario.calibration_end and twin.hist.n == twin.hist.window:
                            calib_stream.append(m)
                            calib_first = k if calib_first is None else calib_first
                    _record(row, rep)
                    if rep.alert is not None:
                        log.alerts.append(rep.alert)
                    if rep.signal is not None and el_enabled:
                        pending = rep.signal
            if k == scenario.calibration_end and twin.baseline is None and el_enabled:
                twin.baseline = _calibrate_or_none(calib_stream, icfg, calib_first, k, twin)
                log.baseline = twin.baseline

            log.rows.append(row)
            realized = plant.derate * u_applied
            state = step_plant(state, realized, plant.params, t, rng_proc, cfg.Ts)
            t += cfg.Ts
            prev = (io.s_features, io.a_features)
    except OptimizerDivergenceError as exc:
        log.aborted = True
        log.abort_reason = str(exc)
    finally:
        if worker:
            for rep in worker.stop():
                if rep.cycle < len(log.rows):
                    _merge_report(log.rows[rep.cycle], rep)
            log.idt_update_ns = worker.update_ns
    log.rejected = twin.rejected
    return log


def _calibrate_or_none(stream, icfg, first, last, twin) -> Optional[Baseline]:
    try:
        return calibrate(stream, icfg.calibration_length, icfg.k, (first or 0, last), twin.scheme_description(), icfg.std_floor)
    except CalibrationError:
        return None


def _record(row: dict, rep) -> None:
    if rep.deviation is not None:
        row["deviation"] = 1
        row["severity"] = rep.deviation.severity.value
    if rep.diagnosis is not None:
        row["diagnosis"] = rep.diagnosis.cause.value
    if rep.signal is not None:
        for f in ("Np", "u_bound", "C_drag", "Ts", "Q_scale"):
            row["sig_" + f] = getattr(rep.signal, f)
    if rep.alert is not None:
        row["alert"] = 1


def _merge_report(row: dict, rep) -> None:
    if rep.metrics is not None:
        row["psi"], row["asymmetry"], row["memory"] = rep.metrics.psi, rep.metrics.asymmetry, rep.metrics.memory
    _record(row, rep)


class _TwinWorker:
    """Runs the twin on its own thread; the control loop never blocks on it."""

    def __init__(self, twin: InformationDigitalTwin, el_enabled: bool):
        self.twin = twin
        self.el_enabled = el_enabled
        self.inbox: queue.Queue = queue.Queue()
        self.outbox: queue.Queue = queue.Queue()
        self.reports: list = []
        self.update_ns: list = []
        self.thread = threading.Thread(target=self._loop, daemon=True)

    def start(self):
        self.thread.start()

    def submit(self, cycle, s, a, sn, cfg):
        self.inbox.put((cycle, s, a, sn, cfg.copy()))

    def drain(self) -> list:
        out = []
        while True:
            try:
                out.append(self.outbox.get_nowait())
            except queue.Empty:
                return out

    def stop(self) -> list:
        self.inbox.put(None)
        self.thread.join()
        return self.reports

    def _loop(self):
        while True:
            item = self.inbox.get()
            if item is None:
                return
            cycle, s, a, sn, cfg = item
            t1 = time.perf_counter_ns()
            self.twin.ingest(s, a, sn, cycle)
            m = self.twin.metrics()
            self.update_ns.append(time.perf_counter_ns() - t1)
            rep = self.twin.analyse(cycle + 1, m, cfg, detect_enabled=self.el_enabled and self.twin.baseline is not None)
            self.reports.append(rep)
            if rep.signal is not None:
                self.outbox.put(rep)


# --------------------------------------------------------------------------- summaries


def rmse(residuals) -> float:
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(r * r)))


def windowed_rmse(residuals, window: int) -> np.ndarray:
    """Trailing-window RMSE; entry i covers residuals[max(0, i-window+1) : i+1]."""
    r2 = np.asarray(residuals, dtype=float) ** 2
    c = np.concatenate([[0.0], np.cumsum(r2)])
    idx = np.arange(1, len(r2) + 1)
    lo = np.maximum(0, idx - window)
    return np.sqrt((c[idx] - c[lo]) / (idx - lo))


def summarize(log: RunLog, onset: Optional[int] = None, rmse_window: int = 100) -> dict:
    """Tracking and detection statistics for one run.

    Absent quantities (no event, no deviation, no RMSE crossing) are None.
    """
    n = len(log.rows)
    if n:
        err = np.hypot(log.column("px") - log.column("ref_px"), log.column("py") - log.column("ref_py"))
        verr = np.hypot(log.column("vx") - log.column("ref_vx"), log.column("vy") - log.column("ref_vy"))
    else:
        err = verr = np.zeros(0)
    if onset is None:
        onset = log.scenario.first_onset
    calib_end = log.scenario.calibration_end
    dev_cycles = [r["cycle"] for r in log.rows if r["deviation"]]
    out = {
        "cycles": n,
        "aborted": log.aborted,
        "abort_reason": log.abort_reason or None,
        "rmse": rmse(err) if n else None,
        "velocity_rmse": rmse(verr) if n else None,
        "rmse_pre_event": None,
        "rmse_post_event": None,
        "saturation_count": int(sum(r["saturated"] for r in log.rows)),
        "deviation_count": len(dev_cycles),
        "signal_count": sum(1 for r in log.rows if r["sig_Np"] is not None or r["sig_u_bound"] is not None
                            or r["sig_C_drag"] is not None or r["sig_Ts"] is not None or r["sig_Q_scale"] is not None),
        "alert_count": sum(r["alert"] for r in log.rows),
        "first_deviation_cycle": dev_cycles[0] if dev_cycles else None,
        "event_onset": onset,
        "detection_cycle": None,
        "detection_latency": None,
        "psi_breach_cycle": None,
        "rmse_degradation_cycle": None,
        "psi_to_rmse_lag": None,
        "detection_to_rmse_lag": None,
        "rejected_triples": log.rejected,
        "baseline": log.baseline.to_dict() if log.baseline else None,
    }  # fmt: skip
    if onset is not None and n > onset:
        pre = err[calib_end:onset] if onset > calib_end else err[:onset]
        out["rmse_pre_event"] = rmse(pre) if len(pre) else None
        out["rmse_post_event"] = rmse(err[onset:])
        post_dev = [c for c in dev_cycles if c >= onset]
        if post_dev:
            out["detection_cycle"] = post_dev[0]
            out["detection_latency"] = post_dev[0] - onset
        if log.baseline is not None:
            thr = log.baseline.psi_threshold
            psi = log.column("psi")
            hits = [c for c in range(onset, n) if psi[c] < thr]
            out["psi_breach_cycle"] = hits[0] if hits else None
        if out["rmse_pre_event"]:
            w = windowed_rmse(err, rmse_window)
            limit = 2.0 * out["rmse_pre_event"]
            over = np.nonzero(w[onset:] > limit)[0]
            if over.size:
                out["rmse_degradation_cycle"] = int(onset + over[0])
        if out["rmse_degradation_cycle"] is not None:
            if out["psi_breach_cycle"] is not None:
                out["psi_to_rmse_lag"] = out["rmse_degradation_cycle"] - out["psi_breach_cycle"]
            if out["detection_cycle"] is not None:
                out["detection_to_rmse_lag"] = out["rmse_degradation_cycle"] - out["detection_cycle"]
    return out


def compare(
    scenario: ScenarioSpec,
    mpc_cfg: MpcConfig | None = None,
    idt_cfg: IdtConfig | None = None,
    schemes=None,
    rmse_window: int = 100,
) -> dict:
    """Paired EL-on / EL-off runs on the same seed."""
    on = run_closed_loop(scenario, mpc_cfg, idt_cfg, True, schemes=schemes)
    off = run_closed_loop(scenario, mpc_cfg, idt_cfg, False, schemes=schemes)
    s_on = summarize(on, rmse_window=rmse_window)
    s_off = summarize(off, rmse_window=rmse_window)
    delta = {}
    for key in ("rmse", "velocity_rmse", "rmse_pre_event", "rmse_post_event", "saturation_count"):
        a, b = s_on[key], s_off[key]
        delta[key] = None if a is None or b is None else a - b
    delta["detection_latency"] = s_on["detection_latency"]
    # degradation as the uncorrected plant experiences it; the runs are identical until the first signal
    delta["detection_to_rmse_lag"] = (
        None
        if s_on["detection_cycle"] is None or s_off["rmse_degradation_cycle"] is None
        else s_off["rmse_degradation_cycle"] - s_on["detection_cycle"]
    )
    return {"el_on": s_on, "el_off": s_off, "delta": delta, "logs": (on, off)}
