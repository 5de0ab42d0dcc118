"""Run configuration and CSV datasets.

Config files are INI (``configparser``) with the sections documented in
``configs/benchmark.ini``. Relative paths inside a config resolve against the
config file's directory. Floats are written with ``repr`` so every CSV
round-trips bit-exactly.
"""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from io import StringIO
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, HinoError, MalformedRow, NonMonotoneTime, UnknownLandmarkId
from .observers import ObserverConfig, ObserverState, StepRecord, Variant, initial_state
from .riccati import NoiseModel
from .so3 import exp_so3, quat_to_rot, rot_to_quat
from .world import (GRAVITY, ImuSample, LandmarkMeasurement, LandmarkSet, NoiseSpec, SamplingTimer, SimStep,
                    TrueState, random_landmarks)

IMU_HEADER = ["t", "wx", "wy", "wz", "ax", "ay", "az"]
LANDMARK_HEADER = ["id", "px", "py", "pz", "weight"]
MEAS_HEADER = ["t", "id", "yx", "yy", "yz"]
GT_HEADER = ["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz"]
EST_HEADER = GT_HEADER + ["ex", "ey", "ez"]
EST_GRAVITY = ["gx", "gy", "gz"]
ERRORS_HEADER = ["t", "rot_err", "pos_err", "vel_err", "grav_err", "event"]

BUNDLED = ("benchmark",)

_DEFAULTS = {
    "run": {"variant": "HINO1-F", "duration": "30.0", "dt": "0.005", "seed": "0"},
    "timer": {"T_m": "0.04", "T_M": "0.06", "tau0": ""},
    "gains": {"k_R": "1.2", "k_p": "0.5", "k_v": "1.0", "k_g": "0.6"},
    "noise": {"enabled": "false", "cov_omega": "1e-4", "cov_accel": "1e-2", "cov_landmark": "1e-2", "seed": "0"},
    "riccati": {"floor_V": "1e-9", "P0": "1.0", "freeze": "false"},
    "landmarks": {"source": "generated", "count": "25", "half_width": "10.0", "height": "0.0", "seed": "2",
                  "file": ""},
    "world": {"g": "0.0, 0.0, -9.81"},
    "initial": {"angle": "0.3141592653589793", "axis": "1.0, 1.0, 1.0", "p": "0, 0, 0", "v": "0, 0, 0",
                "eta": "0, 0, 0", "g_hat": "0, 0, 0"},
    "observer": {"accel_interp": "cubic"},
    "certify": {"mu": "1e-4", "bound": "exact", "max_iter": "20"},
    "diagnose": {"gamma": ""},
    "data": {"imu": "", "landmarks": "", "meas": "", "gt": ""},
    "output": {"dir": "out"},
}


def fmt(x: float) -> str:
    return repr(float(x))


def _vec(text: str, n: int, where: str) -> np.ndarray:
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{where}: expected {n} numbers, got {text!r}") from exc
    if len(vals) != n:
        raise ConfigError(f"{where}: expected {n} numbers, got {len(vals)}")
    return np.array(vals)


def _cov(text: str, where: str) -> np.ndarray:
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{where}: not a number list: {text!r}") from exc
    if len(vals) == 1:
        return vals[0] * np.eye(3)
    if len(vals) == 3:
        return np.diag(vals)
    if len(vals) == 9:
        return np.array(vals).reshape(3, 3)
    raise ConfigError(f"{where}: covariance needs 1, 3 or 9 numbers, got {len(vals)}")


@dataclass
class RunConfig:
    """Fully resolved run parameters."""

    variant: Variant = Variant.HINO1_F
    duration: float = 30.0
    dt: float = 0.005
    seed: int = 0
    T_m: float = 0.04
    T_M: float = 0.06
    tau0: Optional[float] = None  # first event time; defaults to T_M
    k_R: float = 1.2
    k_p: float = 0.5
    k_v: float = 1.0
    k_g: float = 0.6
    noise_enabled: bool = False
    cov_omega: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(3))
    cov_accel: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(3))
    cov_landmark: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(3))
    noise_seed: int = 0
    floor_V: float = 1e-9
    P0: float = 1.0
    freeze_riccati: bool = False
    landmark_source: str = "generated"
    landmark_count: int = 25
    landmark_half_width: float = 10.0
    landmark_height: float = 0.0
    landmark_seed: int = 2
    landmark_file: Optional[Path] = None
    g: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    init_angle: float = 0.1 * math.pi
    init_axis: np.ndarray = field(default_factory=lambda: np.ones(3))
    init_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    init_v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    init_eta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    init_g_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_interp: str = "cubic"
    cert_mu: float = 1e-4
    cert_bound: str = "exact"
    cert_max_iter: int = 20
    gamma: Optional[int] = None
    data_imu: Optional[Path] = None
    data_landmarks: Optional[Path] = None
    data_meas: Optional[Path] = None
    data_gt: Optional[Path] = None
    out_dir: Path = Path("out")

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if not self.duration > 0:
            raise ConfigError("[run] duration: must be positive")
        if not self.dt > 0:
            raise ConfigError("[run] dt: must be positive")
        if not (0 < self.T_m <= self.T_M < math.inf):
            raise ConfigError(f"[timer] need 0 < T_m <= T_M, got T_m={self.T_m}, T_M={self.T_M}")
        if self.dt > self.T_m / 2 + 1e-15:
            raise ConfigError(f"[run] dt: must not exceed T_m/2 = {self.T_m / 2}")
        if self.tau0 is not None and not (0 <= self.tau0 <= self.T_M):
            raise ConfigError("[timer] tau0: must lie in [0, T_M]")
        if np.linalg.norm(self.init_axis) == 0:
            raise ConfigError("[initial] axis: must be nonzero")
        if not self.P0 > 0:
            raise ConfigError("[riccati] P0: must be positive")
        if self.landmark_source not in ("generated", "file"):
            raise ConfigError("[landmarks] source: must be 'generated' or 'file'")
        if self.landmark_source == "file" and self.landmark_file is None:
            raise ConfigError("[landmarks] file: required when source = file")

    # --- derived objects -------------------------------------------------
    def landmarks(self) -> LandmarkSet:
        if self.landmark_source == "file":
            return read_landmarks(self.landmark_file)[0]
        return random_landmarks(self.landmark_count, self.landmark_half_width, self.landmark_height,
                                self.landmark_seed)

    def timer(self) -> SamplingTimer:
        return SamplingTimer(self.T_M if self.tau0 is None else self.tau0, self.T_m, self.T_M)

    def noise_spec(self) -> Optional[NoiseSpec]:
        if not self.noise_enabled:
            return None
        return NoiseSpec(self.cov_omega, self.cov_accel, self.cov_landmark, self.noise_seed)

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.cov_omega, self.cov_accel, self.cov_landmark, self.floor_V)

    def observer_config(self, lm: LandmarkSet) -> ObserverConfig:
        return ObserverConfig(self.variant, lm, k_R=self.k_R, k_p=self.k_p, k_v=self.k_v, k_g=self.k_g,
                              g_known=self.g, noise_model=self.noise_model(), freeze_riccati=self.freeze_riccati,
                              accel_interp=self.accel_interp)

    def initial_state(self, cfg: ObserverConfig) -> ObserverState:
        axis = self.init_axis / np.linalg.norm(self.init_axis)
        return initial_state(cfg, R_hat=exp_so3(self.init_angle * axis), p_hat=self.init_p.copy(),
                             v_hat=self.init_v.copy(), eta=self.init_eta.copy(), g_hat=self.init_g_hat.copy(),
                             P0=self.P0 * np.eye(cfg.dim))

    def gains(self) -> tuple:
        if self.variant.estimates_gravity:
            return (self.k_p, self.k_v, self.k_g)
        return (self.k_p, self.k_v)

    # --- serialization ---------------------------------------------------
    def to_ini(self) -> str:
        """Resolved configuration text; loading it reproduces this run exactly."""
        v3 = lambda a: ", ".join(fmt(x) for x in np.asarray(a).ravel())
        opt = lambda x: "" if x is None else str(x)
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {"variant": self.variant.value, "duration": fmt(self.duration), "dt": fmt(self.dt),
                     "seed": str(self.seed)}
        cp["timer"] = {"T_m": fmt(self.T_m), "T_M": fmt(self.T_M),
                       "tau0": "" if self.tau0 is None else fmt(self.tau0)}
        cp["gains"] = {"k_R": fmt(self.k_R), "k_p": fmt(self.k_p), "k_v": fmt(self.k_v), "k_g": fmt(self.k_g)}
        cp["noise"] = {"enabled": str(self.noise_enabled).lower(), "cov_omega": v3(self.cov_omega),
                       "cov_accel": v3(self.cov_accel), "cov_landmark": v3(self.cov_landmark),
                       "seed": str(self.noise_seed)}
        cp["riccati"] = {"floor_V": fmt(self.floor_V), "P0": fmt(self.P0),
                         "freeze": str(self.freeze_riccati).lower()}
        cp["landmarks"] = {"source": self.landmark_source, "count": str(self.landmark_count),
                           "half_width": fmt(self.landmark_half_width), "height": fmt(self.landmark_height),
                           "seed": str(self.landmark_seed), "file": opt(self.landmark_file)}
        cp["world"] = {"g": v3(self.g)}
        cp["initial"] = {"angle": fmt(self.init_angle), "axis": v3(self.init_axis), "p": v3(self.init_p),
                         "v": v3(self.init_v), "eta": v3(self.init_eta), "g_hat": v3(self.init_g_hat)}
        cp["observer"] = {"accel_interp": self.accel_interp}
        cp["certify"] = {"mu": fmt(self.cert_mu), "bound": self.cert_bound, "max_iter": str(self.cert_max_iter)}
        cp["diagnose"] = {"gamma": opt(self.gamma)}
        cp["data"] = {"imu": opt(self.data_imu), "landmarks": opt(self.data_landmarks),
                      "meas": opt(self.data_meas), "gt": opt(self.data_gt)}
        cp["output"] = {"dir": str(self.out_dir)}
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("hino") / "configs" / f"{name}.ini"))


def load_config(source, overrides: Optional[dict] = None) -> RunConfig:
    """Parse a config file (or bundled config name) into a :class:`RunConfig`.

    ``overrides`` maps ``"section.key"`` to replacement strings.
    """
    path = Path(source)
    if not path.exists() and str(source) in BUNDLED:
        path = bundled_config_path(str(source))
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(_DEFAULTS)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for sec in cp.sections():
        if sec not in _DEFAULTS:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in _DEFAULTS[sec]:
                raise ConfigError(f"{path}: unknown key '{key}' in [{sec}]")
    for dotted, val in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if sec not in _DEFAULTS or key not in _DEFAULTS[sec]:
            raise ConfigError(f"unknown override {dotted!r}")
        cp[sec][key] = str(val)
    base = path.parent

    def get(sec, key, conv):
        raw = cp[sec][key].strip()
        try:
            return conv(raw)
        except ConfigError:
            raise
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: [{sec}] {key} = {raw!r}: {exc}") from exc

    def boolean(raw):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")

    def optpath(raw):
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else base / p

    def optfloat(raw):
        return float(raw) if raw else None

    def optint(raw):
        return int(raw) if raw else None

    try:
        return RunConfig(
            variant=get("run", "variant", Variant),
            duration=get("run", "duration", float),
            dt=get("run", "dt", float),
            seed=get("run", "seed", int),
            T_m=get("timer", "T_m", float),
            T_M=get("timer", "T_M", float),
            tau0=get("timer", "tau0", optfloat),
            k_R=get("gains", "k_R", float),
            k_p=get("gains", "k_p", float),
            k_v=get("gains", "k_v", float),
            k_g=get("gains", "k_g", float),
            noise_enabled=get("noise", "enabled", boolean),
            cov_omega=get("noise", "cov_omega", lambda r: _cov(r, "[noise] cov_omega")),
            cov_accel=get("noise", "cov_accel", lambda r: _cov(r, "[noise] cov_accel")),
            cov_landmark=get("noise", "cov_landmark", lambda r: _cov(r, "[noise] cov_landmark")),
            noise_seed=get("noise", "seed", int),
            floor_V=get("riccati", "floor_V", float),
            P0=get("riccati", "P0", float),
            freeze_riccati=get("riccati", "freeze", boolean),
            landmark_source=get("landmarks", "source", str),
            landmark_count=get("landmarks", "count", int),
            landmark_half_width=get("landmarks", "half_width", float),
            landmark_height=get("landmarks", "height", float),
            landmark_seed=get("landmarks", "seed", int),
            landmark_file=get("landmarks", "file", optpath),
            g=get("world", "g", lambda r: _vec(r, 3, "[world] g")),
            init_angle=get("initial", "angle", float),
            init_axis=get("initial", "axis", lambda r: _vec(r, 3, "[initial] axis")),
            init_p=get("initial", "p", lambda r: _vec(r, 3, "[initial] p")),
            init_v=get("initial", "v", lambda r: _vec(r, 3, "[initial] v")),
            init_eta=get("initial", "eta", lambda r: _vec(r, 3, "[initial] eta")),
            init_g_hat=get("initial", "g_hat", lambda r: _vec(r, 3, "[initial] g_hat")),
            accel_interp=get("observer", "accel_interp", str),
            cert_mu=get("certify", "mu", float),
            cert_bound=get("certify", "bound", str),
            cert_max_iter=get("certify", "max_iter", int),
            gamma=get("diagnose", "gamma", optint),
            data_imu=get("data", "imu", optpath),
            data_landmarks=get("data", "landmarks", optpath),
            data_meas=get("data", "meas", optpath),
            data_gt=get("data", "gt", optpath),
            out_dir=get("output", "dir", lambda r: optpath(r) or base),
        )
    except HinoError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


# --- CSV writing -----------------------------------------------------------

class CsvWriter:
    """Header-first CSV writer formatting floats with ``repr``."""

    def __init__(self, path, header: Sequence[str]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(header)

    def row(self, values):
        self._w.writerow([self._cell(v) for v in values])

    @staticmethod
    def _cell(v):
        if isinstance(v, (bool, np.bool_)):
            return int(v)
        if isinstance(v, (str, int, np.integer)):
            return v
        return fmt(v)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_landmarks(path, lm: LandmarkSet, ids: Optional[Sequence[int]] = None):
    ids = range(len(lm)) if ids is None else ids
    with CsvWriter(path, LANDMARK_HEADER) as w:
        for i, p, k in zip(ids, lm.positions, lm.weights):
            w.row([int(i), *p, k])


def imu_row(s: ImuSample):
    return [s.t, *s.omega, *s.accel]


def meas_rows(m: LandmarkMeasurement, ids: Optional[Sequence[int]] = None):
    for j, y in zip(m.indices, m.values):
        yield [m.t, int(j if ids is None else ids[j]), *y]


def gt_row(s: TrueState):
    return [s.t, *rot_to_quat(s.R), *s.p, *s.v]


def est_row(t: float, st: ObserverState):
    row = [t, *rot_to_quat(st.R_hat), *st.p_hat, *st.v_hat, *st.eta]
    if st.g_hat is not None:
        row += list(st.g_hat)
    return row


def est_header(variant: Variant):
    return EST_HEADER + (EST_GRAVITY if variant.estimates_gravity else [])


def error_row(r: StepRecord):
    e = r.error
    return [r.t, e.rot, e.pos, e.vel, e.grav, bool(r.event)]


# --- CSV reading -----------------------------------------------------------

def _read_rows(path, header: Sequence[str]):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise MalformedRow(f"{path}: missing header row") from None
        if [h.strip() for h in head] != list(header):
            raise MalformedRow(f"{path}: row 1: expected header {','.join(header)}, got {','.join(head)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(f"{path}: row {lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def _floats(path, lineno, cells):
    try:
        vals = [float(c) for c in cells]
    except ValueError as exc:
        raise MalformedRow(f"{path}: row {lineno}: {exc}") from exc
    if not all(math.isfinite(v) for v in vals):
        raise MalformedRow(f"{path}: row {lineno}: non-finite value")
    return vals


def read_landmarks(path):
    """Return ``(LandmarkSet, ids)``; weights are renormalized to sum to one."""
    ids, pos, wts = [], [], []
    for lineno, row in _read_rows(path, LANDMARK_HEADER):
        try:
            i = int(row[0])
        except ValueError as exc:
            raise MalformedRow(f"{path}: row {lineno}: landmark id must be an integer") from exc
        if i in ids:
            raise MalformedRow(f"{path}: row {lineno}: duplicate landmark id {i}")
        vals = _floats(path, lineno, row[1:])
        ids.append(i)
        pos.append(vals[:3])
        wts.append(vals[3])
    if not ids:
        raise MalformedRow(f"{path}: no landmarks")
    try:
        return LandmarkSet(np.array(pos), np.array(wts)), ids
    except HinoError as exc:
        raise MalformedRow(f"{path}: {exc}") from exc


def read_imu(path):
    rows = []
    last = -math.inf
    for lineno, row in _read_rows(path, IMU_HEADER):
        vals = _floats(path, lineno, row)
        if not vals[0] > last:
            raise NonMonotoneTime(f"{path}: row {lineno}: time {vals[0]!r} does not increase")
        last = vals[0]
        rows.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return rows


def read_meas(path, ids: Sequence[int]):
    """Group rows by timestamp into measurements holding landmark indices."""
    index = {i: k for k, i in enumerate(ids)}
    groups: List[tuple] = []
    last = -math.inf
    for lineno, row in _read_rows(path, MEAS_HEADER):
        try:
            lid = int(row[1])
        except ValueError as exc:
            raise MalformedRow(f"{path}: row {lineno}: landmark id must be an integer") from exc
        vals = _floats(path, lineno, [row[0], *row[2:]])
        t = vals[0]
        if t < last:
            raise NonMonotoneTime(f"{path}: row {lineno}: time {t!r} goes backwards")
        if lid not in index:
            raise UnknownLandmarkId(f"{path}: row {lineno}: landmark id {lid} not in landmarks file")
        if not groups or t != last:
            groups.append((t, [], [], lineno))
        if index[lid] in groups[-1][1]:
            raise MalformedRow(f"{path}: row {lineno}: landmark id {lid} repeated at t={t!r}")
        groups[-1][1].append(index[lid])
        groups[-1][2].append(vals[1:])
        last = t
    return [(t, np.array(ix), np.array(ys), ln) for t, ix, ys, ln in groups]


def read_gt(path):
    out = []
    last = -math.inf
    for lineno, row in _read_rows(path, GT_HEADER):
        vals = _floats(path, lineno, row)
        if not vals[0] > last:
            raise NonMonotoneTime(f"{path}: row {lineno}: time {vals[0]!r} does not increase")
        last = vals[0]
        q = np.array(vals[1:5])
        if np.linalg.norm(q) == 0:
            raise MalformedRow(f"{path}: row {lineno}: zero quaternion")
        out.append(TrueState(quat_to_rot(q / np.linalg.norm(q)), np.array(vals[5:8]), np.array(vals[8:11]), vals[0]))
    return out


@dataclass
class Dataset:
    landmarks: LandmarkSet
    ids: list
    steps: list  # list of SimStep
    events: int
    warnings: list


def read_datasets(imu_path, landmarks_path, meas_path, gt_path=None, time_tol: float = 1e-9) -> Dataset:
    """Merge IMU, landmark, measurement and optional ground-truth files into one stream.

    Each measurement event is attached to the latest IMU sample at or before
    its timestamp (the IMU is held between samples); ground truth is attached
    where its timestamp matches an IMU sample.
    """
    lm, ids = read_landmarks(landmarks_path)
    imu = read_imu(imu_path)
    if not imu:
        raise MalformedRow(f"{imu_path}: no IMU samples")
    times = np.array([s.t for s in imu])
    meas = read_meas(meas_path, ids)
    warnings = []
    attached = [None] * len(imu)
    for t, ix, ys, lineno in meas:
        k = int(np.searchsorted(times, t + time_tol, side="right")) - 1
        if k < 0:
            raise MalformedRow(f"{meas_path}: row {lineno}: measurement at t={t!r} precedes the IMU stream")
        if attached[k] is not None:
            raise MalformedRow(f"{meas_path}: row {lineno}: two measurement events map to IMU time {times[k]!r}")
        attached[k] = LandmarkMeasurement(float(times[k]), ix, ys)
    if not meas:
        warnings.append("no landmark measurements: output is pure IMU prediction")
    truth = [None] * len(imu)
    if gt_path is not None:
        for s in read_gt(gt_path):
            k = int(np.searchsorted(times, s.t - time_tol, side="left"))
            if k < len(times) and abs(times[k] - s.t) <= time_tol:
                truth[k] = s
    steps = [SimStep(s, m, tr) for s, m, tr in zip(imu, attached, truth)]
    return Dataset(lm, ids, steps, len(meas), warnings)
