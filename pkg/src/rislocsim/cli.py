"""Command-line front end.

Verbs: ``simulate``, ``estimate``, ``solve``, ``crlb``, ``sweep``,
``rank-check``, ``report``.  Every configuration field has a matching flag;
a config file given with ``--config`` overrides flags.  Exit codes:
0 success, 2 configuration error, 3 estimation failure rate above the
configured threshold.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import chanest, crlb, stateest
from .config import (
    ExperimentConfig,
    build_scenario,
    load_config_file,
    merge,
    parse_value,
    write_manifest,
)
from .errors import ConfigError
from .experiments import (
    compare_ris_modes,
    csv_cell,
    rank_check,
    run_sweep,
    write_rows_csv,
)
from .geometry import ChannelParams, true_channel_params
from .signal import draw_path_gains, sigma_for_snr, snapshot_signal, synthesize_all

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURES = 3


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (key = value with sections); overrides flags")
    for f in dataclasses.fields(ExperimentConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                            default=None, metavar=f.type.upper() if isinstance(f.type, str) else "V")


def _gather_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    flag_overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            flag_overrides[f.name] = parse_value(f.name, raw)
    cfg = merge(cfg, flag_overrides)
    if args.config:
        cfg = merge(cfg, load_config_file(args.config))
    return cfg


def _outdir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([csv_cell(x) for x in row])


def cmd_simulate(cfg: ExperimentConfig) -> int:
    scen = build_scenario(cfg)
    out = _outdir(cfg)
    rng = np.random.default_rng([cfg.seed, 1010])
    gains = draw_path_gains(scen.ue, scen.anchors, scen.sched, scen.ofdm, rng)
    truth = true_channel_params(scen.ue, scen.anchors, scen.sched)
    sigs = [snapshot_signal(truth, n, scen.anchors, scen.ofdm, scen.ris, gains)
            for n in range(1, scen.sched.n_epochs + 1)]
    sigma_u = sigma_for_snr(sigs, cfg.snr_db, scen.ris, gains, cfg.sigma_ratio)
    snaps = synthesize_all(scen.ue, scen.anchors, scen.sched, scen.ofdm,
                           scen.ris, gains, sigma_u=sigma_u,
                           sigma_r=cfg.sigma_ratio * sigma_u, rng=rng)

    rows = []
    for s in snaps:
        for k in range(s.y.shape[0]):
            for g in range(s.y.shape[1]):
                rows.append((s.epoch, k, g, float(s.y[k, g].real), float(s.y[k, g].imag)))
    _write_csv(out / "snapshots.csv", ("epoch", "k", "g", "re", "im"), rows)
    _write_csv(out / "snapshots_meta.csv",
               ("epoch", "sigma_n2", "alpha_r1_re", "alpha_r1_im"),
               [(s.epoch, s.sigma_n2, float(gains.alpha_r1.real),
                 float(gains.alpha_r1.imag)) for s in snaps])
    _write_csv(out / "channel_truth.csv",
               ("epoch", "d1", "d2", "r1", "r2", "phi_az", "phi_el",
                "alpha_l_re", "alpha_l_im", "alpha_r2_re", "alpha_r2_im"),
               [(n + 1, truth.d1[n], truth.d2[n], truth.r1[n], truth.r2[n],
                 truth.phi_az[n], truth.phi_el[n],
                 float(gains.alpha_l[n].real), float(gains.alpha_l[n].imag),
                 float(gains.alpha_r2[n].real), float(gains.alpha_r2[n].imag))
                for n in range(truth.n_epochs)])
    _write_csv(out / "state_truth.csv",
               ("p_x", "p_y", "p_z", "v_x", "v_y", "v_z",
                "clock_bias_m", "clock_drift_mps"),
               [tuple(float(x) for x in scen.ue.xi)])
    write_manifest(out / "manifest.json", cfg, extra={"command": "simulate"})
    print(f"wrote snapshots for {scen.sched.n_epochs} epochs to {out}")
    return EXIT_OK


def _read_snapshots(out: Path, cfg: ExperimentConfig):
    from .signal import ReceivedSnapshot

    scen = build_scenario(cfg)
    k, g = scen.ofdm.n_subcarriers, scen.ofdm.n_symbols
    data = {}
    with open(out / "snapshots.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            epoch = int(row["epoch"])
            if epoch not in data:
                data[epoch] = np.zeros((k, g), dtype=complex)
            data[epoch][int(row["k"]), int(row["g"])] = float(row["re"]) + 1j * float(row["im"])
    meta = {}
    alpha_r1 = None
    with open(out / "snapshots_meta.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            meta[int(row["epoch"])] = float(row["sigma_n2"])
            alpha_r1 = float(row["alpha_r1_re"]) + 1j * float(row["alpha_r1_im"])
    snaps = [ReceivedSnapshot(y=data[e], sigma_n2=meta[e], epoch=e, y_signal=None)
             for e in sorted(data)]
    return scen, snaps, alpha_r1


def cmd_estimate(cfg: ExperimentConfig, stage: str) -> int:
    out = _outdir(cfg)
    scen, snaps, alpha_r1 = _read_snapshots(out, cfg)
    est = chanest.estimate_channel(snaps, scen.anchors, scen.ofdm, scen.ris,
                                   alpha_r1, stage=stage, el_sign=scen.el_sign)
    p = est.params
    _write_csv(out / "measurements.csv",
               ("epoch", "d1", "d2", "r1", "r2", "phi_az", "phi_el"),
               [(n + 1, p.d1[n], p.d2[n], p.r1[n], p.r2[n], p.phi_az[n], p.phi_el[n])
                for n in range(p.n_epochs)])
    sig2 = np.array([s.sigma_n2 for s in snaps])
    est_gains = chanest.estimated_gains(est, alpha_r1)
    blocks = crlb.jacobian_channel(p, scen.anchors, scen.ofdm, scen.ris, est_gains)
    sigma_eta = crlb.fim_channel(blocks, sig2).covariance()
    _write_csv(out / "covariance.csv", ("i", "j", "value"),
               [(i, j, float(sigma_eta[i, j]))
                for i in range(sigma_eta.shape[0])
                for j in range(sigma_eta.shape[1])])
    write_manifest(out / "manifest.json", cfg,
                   extra={"command": "estimate", "stage": stage,
                          "flags": est.flags})
    if est.failed:
        print(f"estimation flagged failures: {est.flags}", file=sys.stderr)
        return EXIT_FAILURES
    print(f"wrote measurements for {p.n_epochs} epochs to {out}")
    return EXIT_OK


def cmd_solve(cfg: ExperimentConfig) -> int:
    out = _outdir(cfg)
    scen = build_scenario(cfg)
    rows = list(csv.DictReader(open(out / "measurements.csv", newline="", encoding="utf-8")))
    rows.sort(key=lambda r: int(r["epoch"]))
    params = ChannelParams(
        d1=[float(r["d1"]) for r in rows], d2=[float(r["d2"]) for r in rows],
        r1=[float(r["r1"]) for r in rows], r2=[float(r["r2"]) for r in rows],
        phi_az=[float(r["phi_az"]) for r in rows],
        phi_el=[float(r["phi_el"]) for r in rows])
    n6 = 6 * params.n_epochs
    sigma = np.zeros((n6, n6))
    with open(out / "covariance.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            sigma[int(row["i"]), int(row["j"])] = float(row["value"])
    mset = stateest.MeasurementSet.from_params(params, sigma)
    coarse, refined = stateest.solve_state(mset, scen.anchors, scen.sched)
    header = ("stage", "p_x", "p_y", "p_z", "v_x", "v_y", "v_z",
              "clock_bias_m", "clock_drift_mps", "iterations", "converged")
    recs = []
    for est in (coarse, refined):
        xi = est.xi if est.xi is not None else np.concatenate([est.theta, [np.nan, np.nan]])
        recs.append((est.stage, *[float(x) for x in xi], est.iterations,
                     int(est.converged)))
    _write_csv(out / "state.csv", header, recs)
    write_manifest(out / "manifest.json", cfg, extra={"command": "solve"})
    print(f"wrote state estimates to {out / 'state.csv'}")
    return EXIT_OK if refined.converged else EXIT_FAILURES


def cmd_crlb(cfg: ExperimentConfig) -> int:
    out = _outdir(cfg)
    scen = build_scenario(cfg)
    rng = np.random.default_rng([cfg.seed, 1010])
    gains = draw_path_gains(scen.ue, scen.anchors, scen.sched, scen.ofdm, rng)
    truth = true_channel_params(scen.ue, scen.anchors, scen.sched)
    sigs = [snapshot_signal(truth, n, scen.anchors, scen.ofdm, scen.ris, gains)
            for n in range(1, scen.sched.n_epochs + 1)]
    sigma_u = sigma_for_snr(sigs, cfg.snr_db, scen.ris, gains, cfg.sigma_ratio)
    report = crlb.evaluate_bounds(scen.ue, scen.anchors, scen.sched, scen.ofdm,
                                  scen.ris, gains, sigma_u,
                                  cfg.sigma_ratio * sigma_u)
    rows = []
    names = ("d1", "d2", "r1", "r2", "phi_az", "phi_el")
    for n in range(scen.sched.n_epochs):
        for j, name in enumerate(names):
            rows.append((f"crlb_{name}_epoch{n + 1}", float(report.channel.crlb[6 * n + j])))
    state_names = ("p_x", "p_y", "p_z", "v_x", "v_y", "v_z",
                   "clock_bias", "clock_drift")
    for j, name in enumerate(state_names):
        rows.append((f"crlb_{name}", float(report.state_omm.crlb[j])))
    for j, name in enumerate(state_names[:6]):
        rows.append((f"crlb_dmm_{name}", float(report.state_dmm.crlb[j])))
    rows.append(("peb", report.peb))
    rows.append(("veb", report.veb))
    _write_csv(out / "bounds.csv", ("name", "value"), rows)
    write_manifest(out / "manifest.json", cfg, extra={"command": "crlb"})
    print(f"wrote bounds to {out / 'bounds.csv'}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, plot: bool) -> int:
    out = _outdir(cfg)
    if cfg.sweep == "p_add_dbm":
        rows = compare_ris_modes(cfg, cfg.sweep_values)
        worst = 0.0
    else:
        rows, worst = run_sweep(cfg)
    path = out / "metrics.csv"
    write_rows_csv(path, rows)
    write_manifest(out / "manifest.json", cfg,
                   extra={"command": "sweep", "worst_failure_rate": worst})
    print(f"wrote {len(rows)} metric rows to {path}")
    if plot:
        from .report import render_report

        for fig in render_report(path):
            print(f"wrote {fig}")
    if worst > cfg.failure_threshold:
        print(f"failure rate {worst:.3f} above threshold {cfg.failure_threshold}",
              file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def cmd_rank_check(cfg: ExperimentConfig, trials_per_case: int) -> int:
    out = _outdir(cfg)
    rows = rank_check(cfg, trials_per_case=trials_per_case)
    write_rows_csv(out / "rank.csv", rows)
    for row in rows:
        print(f"N={row[1]:>2} {row[2]} = {row[3]}")
    write_manifest(out / "manifest.json", cfg, extra={"command": "rank-check"})
    return EXIT_OK


def cmd_report(metrics_csv: str, outdir: str | None) -> int:
    from .report import render_report

    for fig in render_report(metrics_csv, outdir):
        print(f"wrote {fig}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rislocsim",
        description="Simulation and estimation toolkit for panel-aided "
                    "joint position/velocity estimation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "synthesize pilot snapshots to CSV"),
                        ("estimate", "run channel estimation on simulated snapshots"),
                        ("solve", "run state estimation on measurement CSV"),
                        ("crlb", "evaluate estimation bounds"),
                        ("sweep", "Monte-Carlo sweep with metrics CSV"),
                        ("rank-check", "feasibility rank analysis")):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        if name == "estimate":
            p.add_argument("--stage", choices=("coarse", "refined"),
                           default="refined")
        if name == "sweep":
            p.add_argument("--plot", action="store_true",
                           help="render figures next to the metrics CSV")
        if name == "rank-check":
            p.add_argument("--trials-per-case", type=int, default=200)
    p = sub.add_parser("report", help="render figures from a metrics CSV")
    p.add_argument("metrics_csv")
    p.add_argument("--outdir", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.metrics_csv, args.outdir)
        cfg = _gather_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg, args.stage)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "crlb":
            return cmd_crlb(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.plot)
        if args.command == "rank-check":
            return cmd_rank_check(cfg, args.trials_per_case)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
