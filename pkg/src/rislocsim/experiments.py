"""Monte-Carlo orchestration, metrics, sweeps, and delimited output.

A trial draws fresh path-gain phases and noise, runs both estimation stages
and the state solver, and records errors against the per-trial bounds.
Trials are seeded independently by (master seed, sweep index, trial index),
so results are identical for any worker-pool size; reduction is keyed by
trial index.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses

import numpy as np

from . import chanest, crlb, stateest
from .config import ExperimentConfig, Scenario, build_scenario, dbm_to_watts
from .errors import ConfigError, DegenerateSignalError, InfeasibleGeometryError
from .geometry import ChannelParams, UEState, AnchorSet, EpochSchedule, true_channel_params
from .signal import (
    PathGains,
    RisConfig,
    amplification_from_power,
    draw_path_gains,
    sigma_for_snr,
    snapshot_signal,
    synthesize_all,
)

PARAM_NAMES = ("d1", "d2", "r1", "r2", "phi_az", "phi_el")
CSV_HEADER = ("sweep", "sweep_value", "metric", "value", "trials", "failures")

SWEEP_AXES = ("snr", "epochs", "subcarriers", "symbols")


def apply_sweep(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Derive the configuration at one sweep point."""
    if axis == "snr":
        return cfg.replace(snr_db=float(value))
    if axis == "epochs":
        return cfg.replace(epochs=int(value))
    if axis == "subcarriers":
        return cfg.replace(subcarriers=int(value))
    if axis == "symbols":
        g = int(value)
        root = int(round(np.sqrt(g)))
        if root * root != g:
            raise ConfigError(f"[run] sweep_values: symbol count {g} is not a perfect square")
        return cfg.replace(symbols=g, g1=root, g2=root)
    raise ConfigError(f"[run] sweep: unknown sweep axis '{axis}' "
                      f"(expected one of {SWEEP_AXES})")


def channel_matrix(par: np.ndarray, alpha_l: complex, alpha_r2: complex,
                   alpha_r1: complex, scen: Scenario) -> np.ndarray:
    """Noise-free K x G channel matrix for one epoch's parameter set."""
    xi = chanest.model_columns(par, scen.anchors, scen.ofdm, scen.ris, alpha_r1)
    y = xi @ np.array([alpha_l, alpha_r2])
    return (y / scen.ofdm.pilot).reshape(scen.ofdm.n_subcarriers, scen.ofdm.n_symbols)


def nmse_channel(est: chanest.ChannelEstimate, truth: ChannelParams,
                 gains: PathGains, scen: Scenario) -> float:
    """Channel-matrix NMSE averaged over the epochs of one trial."""
    total = 0.0
    for i in range(truth.n_epochs):
        h_true = channel_matrix(truth.epoch(i + 1), gains.alpha_l[i],
                                gains.alpha_r2[i], gains.alpha_r1, scen)
        h_est = channel_matrix(est.params.epoch(i + 1), est.alpha_l[i],
                               est.alpha_r2[i], gains.alpha_r1, scen)
        denom = np.linalg.norm(h_true) ** 2
        if denom == 0.0:
            raise ConfigError("zero-norm channel matrix")
        total += np.linalg.norm(h_est - h_true) ** 2 / denom
    return total / truth.n_epochs


def _angle_diff(a, b):
    return (np.asarray(a) - np.asarray(b) + np.pi) % (2.0 * np.pi) - np.pi


def param_errors(est: ChannelParams, truth: ChannelParams) -> np.ndarray:
    """Per-epoch signed errors, shape (N, 6); angle rows wrapped."""
    return np.column_stack([
        est.d1 - truth.d1,
        est.d2 - truth.d2,
        est.r1 - truth.r1,
        est.r2 - truth.r2,
        _angle_diff(est.phi_az, truth.phi_az),
        _angle_diff(est.phi_el, truth.phi_el),
    ])


def run_trial(cfg: ExperimentConfig, axis_index: int, trial: int) -> dict:
    """One Monte-Carlo trial: synthesize, estimate, solve, compare.

    Returns a plain dict of floats/arrays (picklable for the worker pool).
    A trial that raises a degeneracy or feasibility error, or whose
    estimates carry failure flags, is marked failed and excluded from
    metrics by the caller.
    """
    scen = build_scenario(cfg)
    rng = np.random.default_rng([cfg.seed, axis_index, trial])
    gains = draw_path_gains(scen.ue, scen.anchors, scen.sched, scen.ofdm, rng)
    truth = true_channel_params(scen.ue, scen.anchors, scen.sched)
    profile_sigs = [snapshot_signal(truth, n, scen.anchors, scen.ofdm, scen.ris, gains)
                    for n in range(1, scen.sched.n_epochs + 1)]
    sigma_u = sigma_for_snr(profile_sigs, cfg.snr_db, scen.ris, gains,
                            sigma_ratio=cfg.sigma_ratio)
    sigma_r = cfg.sigma_ratio * sigma_u
    snapshots = synthesize_all(scen.ue, scen.anchors, scen.sched, scen.ofdm,
                               scen.ris, gains, sigma_u=sigma_u,
                               sigma_r=sigma_r, rng=rng)

    out = {"trial": trial, "failed": False, "failure": ""}
    try:
        report = crlb.evaluate_bounds(scen.ue, scen.anchors, scen.sched,
                                      scen.ofdm, scen.ris, gains,
                                      sigma_u, sigma_r)
        est_c = chanest.estimate_channel(snapshots, scen.anchors, scen.ofdm,
                                         scen.ris, gains.alpha_r1,
                                         stage="coarse", el_sign=scen.el_sign)
        est_r = chanest.refine_channel(snapshots, est_c, scen.anchors,
                                       scen.ofdm, scen.ris, gains.alpha_r1,
                                       el_sign=scen.el_sign)
        if est_r.failed:
            raise DegenerateSignalError(";".join(est_r.flags))

        out["err_coarse"] = param_errors(est_c.params, truth)
        out["err_refined"] = param_errors(est_r.params, truth)
        out["crlb_eta"] = report.channel.crlb.reshape(-1, 6)
        out["nmse_coarse"] = nmse_channel(est_c, truth, gains, scen)
        out["nmse_refined"] = nmse_channel(est_r, truth, gains, scen)

        # State stage: measurement covariance is the bound evaluated at the
        # estimated parameters and gains.
        est_gains = chanest.estimated_gains(est_r, gains.alpha_r1)
        sig2 = np.array([s.sigma_n2 for s in snapshots])
        blocks_est = crlb.jacobian_channel(est_r.params, scen.anchors,
                                           scen.ofdm, scen.ris, est_gains)
        sigma_eta = crlb.fim_channel(blocks_est, sig2).covariance()
        mset = stateest.MeasurementSet(eta=est_r.params.stack(), sigma=sigma_eta)
        coarse_st, refined_st = stateest.solve_state(mset, scen.anchors, scen.sched)
        if "diverged" in refined_st.flags:
            raise DegenerateSignalError("state refinement diverged")

        xi_true = scen.ue.xi
        out["err_state_coarse"] = coarse_st.theta - xi_true[:6]
        out["err_state"] = refined_st.xi - xi_true
        out["state_iterations"] = refined_st.iterations
        out["crlb_xi"] = report.state_omm.crlb
        out["crlb_theta_dmm"] = report.state_dmm.crlb
        out["peb"] = report.state_omm.peb
        out["veb"] = report.state_omm.veb
    except (DegenerateSignalError, InfeasibleGeometryError, ValueError,
            np.linalg.LinAlgError) as exc:
        out["failed"] = True
        out["failure"] = f"{type(exc).__name__}: {exc}"
    return out


def _worker(payload):
    cfg_dict, axis_index, trial = payload
    return run_trial(ExperimentConfig(**cfg_dict), axis_index, trial)


def _run_trials(cfg: ExperimentConfig, axis_index: int) -> list[dict]:
    tasks = [(dataclasses.asdict(cfg), axis_index, t) for t in range(cfg.trials)]
    if cfg.workers == 1:
        results = [_worker(t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_worker, tasks, chunksize=max(1, cfg.trials // (4 * cfg.workers))))
    return sorted(results, key=lambda r: r["trial"])


def _rms(values) -> float:
    arr = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(arr ** 2))) if arr.size else float("nan")


def aggregate(results: list[dict], axis: str, value) -> list[tuple]:
    """Reduce per-trial records to long-format metric rows."""
    ok = [r for r in results if not r["failed"]]
    failures = len(results) - len(ok)
    rows = []

    def add(metric, val):
        rows.append((axis, value, metric, float(val), len(results), failures))

    if not ok:
        add("failure_rate", 1.0)
        return rows

    err_c = np.concatenate([r["err_coarse"] for r in ok], axis=0)
    err_r = np.concatenate([r["err_refined"] for r in ok], axis=0)
    bound = np.concatenate([r["crlb_eta"] for r in ok], axis=0)
    for j, name in enumerate(PARAM_NAMES):
        add(f"rmse_{name}", _rms(err_r[:, j]))
        add(f"rmse_coarse_{name}", _rms(err_c[:, j]))
        add(f"crlb_{name}", np.sqrt(np.mean(bound[:, j])))
    add("nmse_coarse", np.mean([r["nmse_coarse"] for r in ok]))
    add("nmse_refined", np.mean([r["nmse_refined"] for r in ok]))

    es = np.stack([r["err_state"] for r in ok])
    ec = np.stack([r["err_state_coarse"] for r in ok])
    add("rmse_p", _rms(np.linalg.norm(es[:, :3], axis=1)))
    add("rmse_v", _rms(np.linalg.norm(es[:, 3:6], axis=1)))
    add("rmse_clock_bias", _rms(es[:, 6]))
    add("rmse_clock_drift", _rms(es[:, 7]))
    add("rmse_p_coarse", _rms(np.linalg.norm(ec[:, :3], axis=1)))
    add("rmse_v_coarse", _rms(np.linalg.norm(ec[:, 3:6], axis=1)))
    cx = np.stack([r["crlb_xi"] for r in ok])
    cd = np.stack([r["crlb_theta_dmm"] for r in ok])
    add("crlb_p", np.sqrt(np.mean([r["peb"] for r in ok])))
    add("crlb_v", np.sqrt(np.mean([r["veb"] for r in ok])))
    add("crlb_clock_bias", np.sqrt(np.mean(cx[:, 6])))
    add("crlb_clock_drift", np.sqrt(np.mean(cx[:, 7])))
    add("crlb_p_dmm", np.sqrt(np.mean(np.sum(cd[:, :3], axis=1))))
    add("crlb_v_dmm", np.sqrt(np.mean(np.sum(cd[:, 3:6], axis=1))))
    add("peb", np.mean([r["peb"] for r in ok]))
    add("veb", np.mean([r["veb"] for r in ok]))
    add("failure_rate", failures / len(results))
    return rows


def run_sweep(cfg: ExperimentConfig) -> tuple[list[tuple], float]:
    """Run the configured sweep; returns metric rows and the worst failure rate."""
    if not cfg.sweep_values:
        raise ConfigError("[run] sweep_values: sweep values must be nonempty")
    rows = []
    worst = 0.0
    for axis_index, value in enumerate(cfg.sweep_values):
        cfg_v = apply_sweep(cfg, cfg.sweep, value)
        build_scenario(cfg_v)  # validate before spending trials
        results = _run_trials(cfg_v, axis_index)
        point_rows = aggregate(results, cfg.sweep, value)
        failure_rate = next(v for (_, _, m, v, _, _) in point_rows if m == "failure_rate")
        worst = max(worst, failure_rate)
        rows.extend(point_rows)
    return rows, worst


def run_state_trials(cfg: ExperimentConfig, trials: int | None = None) -> dict:
    """State-domain Monte-Carlo with synthetic measurement noise.

    Draws measurement errors directly from the channel-parameter bound
    covariance (one fixed gain realization), then runs both state stages.
    Used to check bound attainment of the solvers in isolation.
    """
    trials = trials or cfg.trials
    scen = build_scenario(cfg)
    rng = np.random.default_rng([cfg.seed, 9090])
    gains = draw_path_gains(scen.ue, scen.anchors, scen.sched, scen.ofdm, rng)
    truth = true_channel_params(scen.ue, scen.anchors, scen.sched)
    sigs = [snapshot_signal(truth, n, scen.anchors, scen.ofdm, scen.ris, gains)
            for n in range(1, scen.sched.n_epochs + 1)]
    sigma_u = sigma_for_snr(sigs, cfg.snr_db, scen.ris, gains, cfg.sigma_ratio)
    report = crlb.evaluate_bounds(scen.ue, scen.anchors, scen.sched, scen.ofdm,
                                  scen.ris, gains, sigma_u, cfg.sigma_ratio * sigma_u)
    chol = np.linalg.cholesky(report.sigma_eta)
    eta_true = truth.stack()
    xi_true = scen.ue.xi
    err_coarse = np.empty((trials, 6))
    err_fine = np.empty((trials, 8))
    iters = np.empty(trials, dtype=int)
    step_norms = []
    for t in range(trials):
        tr = np.random.default_rng([cfg.seed, 9091, t])
        mset = stateest.MeasurementSet(eta=eta_true + chol @ tr.standard_normal(eta_true.size),
                                       sigma=report.sigma_eta)
        coarse_st, refined_st = stateest.solve_state(mset, scen.anchors, scen.sched)
        err_coarse[t] = coarse_st.theta - xi_true[:6]
        err_fine[t] = refined_st.xi - xi_true
        iters[t] = refined_st.iterations
        step_norms.append(refined_st.step_norms)
    return {
        "err_coarse": err_coarse,
        "err_fine": err_fine,
        "iterations": iters,
        "step_norms": step_norms,
        "crlb_theta_dmm": report.state_dmm.crlb,
        "crlb_xi": report.state_omm.crlb,
        "report": report,
    }


def compare_ris_modes(cfg: ExperimentConfig, p_add_values_dbm) -> list[tuple]:
    """Bound-level PEB/VEB per panel mode across an added-power sweep.

    Active mode: fixed transmit power, panel power set to the added power,
    amplification from the power-budget policy.  Passive mode: the added
    power goes to the transmitter instead, unit panel gain, no panel noise.
    One shared gain-phase draw keeps the comparison paired.
    """
    scen = build_scenario(cfg)
    rng = np.random.default_rng([cfg.seed, 7070])
    unit_gains = draw_path_gains(scen.ue, scen.anchors, scen.sched, scen.ofdm, rng)
    p_t = dbm_to_watts(cfg.tx_dbm)
    sigma = np.sqrt(dbm_to_watts(cfg.noise_dbm))
    m = scen.ris.n_elements
    rows = []
    for value in p_add_values_dbm:
        p_add = dbm_to_watts(value)
        for mode in ("active", "passive"):
            if mode == "active":
                amp = np.sqrt(p_t)
                sigma_r = sigma
                p_inc = m * p_t * abs(unit_gains.alpha_r1) ** 2
                eta = max(1.0, amplification_from_power(p_add, p_inc, m, sigma_r))
            else:
                amp = np.sqrt(p_t + p_add)
                sigma_r = 0.0
                eta = 1.0
            gains = PathGains(alpha_l=amp * unit_gains.alpha_l,
                              alpha_r1=amp * unit_gains.alpha_r1,
                              alpha_r2=unit_gains.alpha_r2)
            ris = RisConfig(mx=scen.ris.mx, my=scen.ris.my,
                            spacing_m=scen.ris.spacing_m, eta=eta,
                            sigma_r=sigma_r)
            report = crlb.evaluate_bounds(scen.ue, scen.anchors, scen.sched,
                                          scen.ofdm, ris, gains, sigma, sigma_r)
            rows.append(("p_add_dbm", float(value), f"peb_{mode}",
                         report.peb, 1, 0))
            rows.append(("p_add_dbm", float(value), f"veb_{mode}",
                         report.veb, 1, 0))
    return rows


def _random_rank_scenario(rng: np.random.Generator, n_epochs: int):
    """Generic random geometry for the feasibility rank sweep."""
    while True:
        p = rng.uniform(-60.0, 60.0, 3)
        q1 = rng.uniform(-60.0, 60.0, 3)
        if np.linalg.norm(p - q1) > 5.0 and np.linalg.norm(p) > 5.0:
            break
    v = rng.uniform(-40.0, 40.0, 3)
    ue = UEState(p=p, v=v, clock_bias_m=rng.uniform(-50, 50),
                 clock_drift_mps=rng.uniform(-50, 50))
    anchors = AnchorSet(q1=q1, q2=np.zeros(3))
    sched = EpochSchedule.uniform(n_epochs, 0.2)
    return ue, anchors, sched


def rank_check(cfg: ExperimentConfig, trials_per_case: int = 200) -> list[tuple]:
    """Numerical-rank sweep over random generic scenarios.

    Without panel rows the Jacobian rank never exceeds 6 for any epoch
    count; with them it is 8 from two epochs on.  A single epoch leaves the
    full-state information singular.
    """
    rng = np.random.default_rng([cfg.seed, 5050])
    rows = []
    for n in range(4, 9):
        ranks = []
        for _ in range(trials_per_case):
            ue, anchors, sched = _random_rank_scenario(rng, n)
            ranks.append(crlb.rank_analysis(ue, anchors, sched, include_ris=False).rank)
        rows.append(("epochs", n, "rank_wo_ris_max", max(ranks),
                     trials_per_case, 0))
    for n in range(2, 7):
        ranks = []
        for _ in range(trials_per_case):
            ue, anchors, sched = _random_rank_scenario(rng, n)
            ranks.append(crlb.rank_analysis(ue, anchors, sched, include_ris=True).rank)
        rows.append(("epochs", n, "rank_with_ris_min", min(ranks),
                     trials_per_case, 0))
    singular = 0
    for _ in range(trials_per_case):
        ue, anchors, sched = _random_rank_scenario(rng, 1)
        jac = crlb.jacobian_state(ue, anchors, sched)
        bounds = crlb.fim_state(jac, [np.eye(6)])
        singular += int(not bounds.feasible)
    rows.append(("epochs", 1, "state_fim_singular_count", singular,
                 trials_per_case, 0))
    return rows


def csv_cell(x):
    """Canonical cell formatting: shortest round-trip repr, '.' decimal."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return int(x)
    return x


def write_rows_csv(path, rows, header=CSV_HEADER) -> None:
    """Write long-format metric rows with deterministic formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([csv_cell(x) for x in row])
