"""Command-line entry points: ``simulate``, ``replay``, ``certify-gains``, ``diagnose``.

Exit codes: 0 success or feasible, 1 infeasible or run failure, 2 usage,
configuration or I/O error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io as hio
from .errors import ConfigError, HinoError, MalformedRow, NonMonotoneTime, UnknownLandmarkId
from .gain_cert import CertProblem, certify
from .metrics import ErrorTrace, convergence_stats
from .observers import attitude_contraction, basin_report, run
from .riccati import adapt_noise, default_window, gramian_diagnostics
from .world import simulate as world_simulate

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
_INPUT_ERRORS = (ConfigError, MalformedRow, NonMonotoneTime, UnknownLandmarkId, OSError)


def _out_dir(cfg: hio.RunConfig, override: Optional[str]) -> Path:
    out = Path(override) if override else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: hio.RunConfig, out: Path):
    (out / "resolved_config.ini").write_text(cfg.to_ini(), encoding="utf-8")


def _summarize(records, out=sys.stdout):
    with_err = [r for r in records if r.error is not None]
    if not with_err:
        return
    tr = ErrorTrace.from_records(with_err)
    last = with_err[-1].error
    rep = convergence_stats(tr.t, tr.pos, tr.event)
    print(f"final errors: rot={last.rot:.3e} pos={last.pos:.3e} m vel={last.vel:.3e} m/s"
          + ("" if np.isnan(last.grav) else f" grav={last.grav:.3e} m/s^2"), file=out)
    print(f"position: steady RMS={rep.steady_rms:.3e} m, decay rate={rep.decay_rate:.4g} 1/s", file=out)


def _run_and_write(steps, cfg, obs_cfg, init, out: Path, g_true, extra_writers=None):
    records = []
    with hio.CsvWriter(out / "est.csv", hio.est_header(cfg.variant)) as west, \
            hio.CsvWriter(out / "errors.csv", hio.ERRORS_HEADER) as werr:
        for r in run(steps, obs_cfg, init, g_true=g_true):
            west.row(hio.est_row(r.t, r.state))
            if r.error is not None:
                werr.row(hio.error_row(r))
            if extra_writers:
                extra_writers(r)
            records.append(r)
    return records


def cmd_simulate(args) -> int:
    cfg = hio.load_config(args.config)
    out = _out_dir(cfg, args.out)
    lm = cfg.landmarks()
    obs_cfg = cfg.observer_config(lm)
    init = cfg.initial_state(obs_cfg)
    hio.write_landmarks(out / "landmarks.csv", lm)
    _write_resolved(cfg, out)
    wimu = hio.CsvWriter(out / "imu.csv", hio.IMU_HEADER)
    wmeas = hio.CsvWriter(out / "meas.csv", hio.MEAS_HEADER)
    wgt = hio.CsvWriter(out / "gt.csv", hio.GT_HEADER)

    def tee(stream):
        for s in stream:
            wimu.row(hio.imu_row(s.imu))
            if s.meas is not None:
                for row in hio.meas_rows(s.meas):
                    wmeas.row(row)
            wgt.row(hio.gt_row(s.truth))
            yield s

    try:
        stream = world_simulate(cfg.duration, cfg.dt, lm, cfg.timer(), cfg.noise_spec(), cfg.g, cfg.seed)
        records = _run_and_write(tee(stream), cfg, obs_cfg, init, out, cfg.g)
    finally:
        for w in (wimu, wmeas, wgt):
            w.close()
    print(f"simulate: {cfg.variant.value}, {len(records)} steps, {sum(r.event for r in records)} events -> {out}")
    _summarize(records)
    return EXIT_OK


def _load_dataset(cfg: hio.RunConfig):
    missing = [n for n, p in (("imu", cfg.data_imu), ("landmarks", cfg.data_landmarks), ("meas", cfg.data_meas))
               if p is None]
    if missing:
        raise ConfigError(f"[data] missing paths: {', '.join(missing)}")
    return hio.read_datasets(cfg.data_imu, cfg.data_landmarks, cfg.data_meas, cfg.data_gt)


def cmd_replay(args) -> int:
    cfg = hio.load_config(args.config)
    out = _out_dir(cfg, args.out)
    ds = _load_dataset(cfg)
    for w in ds.warnings:
        print(f"warning: {w}", file=sys.stderr)
    obs_cfg = cfg.observer_config(ds.landmarks)
    init = cfg.initial_state(obs_cfg)
    _write_resolved(cfg, out)
    records = _run_and_write(ds.steps, cfg, obs_cfg, init, out, cfg.g)
    print(f"replay: {cfg.variant.value}, {len(records)} steps, {ds.events} events -> {out}")
    _summarize(records)
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = hio.load_config(args.config)
    gains = cfg.gains()
    res = certify(CertProblem(gains, cfg.T_m, cfg.T_M, mu=cfg.cert_mu, max_iter=cfg.cert_max_iter,
                              bound=cfg.cert_bound))
    names = ("k_p", "k_v", "k_g")[: len(gains)]
    label = ", ".join(f"{n}={g:g}" for n, g in zip(names, gains))
    if res.feasible:
        print(f"feasible: {label} on [{cfg.T_m:g}, {cfg.T_M:g}] s")
        print(f"margin: lambda_max(Xi) <= {-res.margin:.6e} for every tau in the interval")
        print(f"grid points: {len(res.grid)} (spacing {2 * res.delta:.3e} s), sampled gaps: {len(res.tau_set)}, "
              f"solver iterations: {res.iterations}")
        print(f"pbar: {res.pbar:.6g}")
        with np.printoptions(precision=6, suppress=True, linewidth=150):
            print("P* =")
            print(res.P)
        return EXIT_OK
    print(f"infeasible ({res.status}): {label} on [{cfg.T_m:g}, {cfg.T_M:g}] s, offending tau = {res.tau}")
    return EXIT_FAIL


def cmd_diagnose(args) -> int:
    cfg = hio.load_config(args.config)
    if not cfg.variant.variable_gain:
        raise ConfigError(f"[run] variant: diagnose needs a variable-gain variant, got {cfg.variant.value}")
    out = _out_dir(cfg, args.out)
    if cfg.data_imu is not None:
        ds = _load_dataset(cfg)
        lm, steps = ds.landmarks, ds.steps
    else:
        lm = cfg.landmarks()
        steps = world_simulate(cfg.duration, cfg.dt, lm, cfg.timer(), cfg.noise_spec(), cfg.g, cfg.seed)
    obs_cfg = cfg.observer_config(lm)
    init = cfg.initial_state(obs_cfg)
    times, omegas, V_log, Q_log, ev_steps = [], [], [], [], []
    first_truth = None
    with hio.CsvWriter(out / "diagnostics.csv", ["t", "lam_min_P", "lam_max_P", "gain_norm"]) as w:
        for k, (s, r) in enumerate(_zip_steps(steps, obs_cfg, init, cfg.g)):
            if first_truth is None and s.truth is not None:
                first_truth = s.truth
            times.append(r.t)
            omegas.append(s.imu.omega)
            V_log.append(adapt_noise(r.state, lm, obs_cfg.noise_model, obs_cfg.dim)[0])
            if r.event:
                ev_steps.append(k)
                Q_log.append(r.jump_info.Q)
                lo, hi = np.linalg.eigvalsh(r.state.riccati.P)[[0, -1]]
                w.row([r.t, lo, hi, np.linalg.norm(r.jump_info.K, 2)])
    gamma = cfg.gamma or default_window(obs_cfg.dim)
    rep = gramian_diagnostics(times, omegas, ev_steps, Q_log, V_log, gamma, obs_cfg.dim)
    print(f"diagnose: {cfg.variant.value}, {len(times)} steps, {len(ev_steps)} events, window {gamma} events")
    for key, val in rep.as_dict().items():
        print(f"  {key}: {val:.6g}" if isinstance(val, float) else f"  {key}: {val}")
    contraction = attitude_contraction(cfg.k_R, lm, cfg.T_m, cfg.T_M)
    print("  attitude contraction per event (mean log, per axis): "
          + ", ".join(f"{c:.4g}" for c in contraction))
    if first_truth is not None:
        for key, val in basin_report(obs_cfg, init, first_truth).items():
            print(f"  {key}: {val:.6g}")
    return EXIT_OK


def _zip_steps(steps, obs_cfg, init, g):
    """Pair each input step with its observer record."""
    buf = []

    def tap():
        for s in steps:
            buf.append(s)
            yield s

    for r in run(tap(), obs_cfg, init, g_true=g):
        yield buf.pop(0), r


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hino", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate the trajectory and run the observer; writes truth, estimate and error CSVs",
        "replay": "run the observer on recorded imu/landmarks/meas (+gt) CSVs",
        "certify-gains": "certify the fixed gains over the sampling interval (exit 1 if infeasible)",
        "diagnose": "Riccati boundedness diagnostics for a variable-gain run",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("config", help="INI config file, or the name of a bundled config ('benchmark')")
        if name != "certify-gains":
            sp.add_argument("-o", "--out", help="output directory (overrides [output] dir)")
    return p


_COMMANDS = {"simulate": cmd_simulate, "replay": cmd_replay, "certify-gains": cmd_certify,
             "diagnose": cmd_diagnose}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HinoError as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
