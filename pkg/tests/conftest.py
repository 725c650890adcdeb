import numpy as np
import pytest

from rislocsim import build_scenario, ExperimentConfig
from rislocsim.geometry import true_channel_params
from rislocsim.signal import (
    draw_path_gains,
    sigma_for_snr,
    snapshot_signal,
    synthesize_all,
)


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def scen(default_cfg):
    return build_scenario(default_cfg)


@pytest.fixture(scope="session")
def gains(scen):
    rng = np.random.default_rng(42)
    return draw_path_gains(scen.ue, scen.anchors, scen.sched, scen.ofdm, rng)


@pytest.fixture(scope="session")
def truth(scen):
    return true_channel_params(scen.ue, scen.anchors, scen.sched)


@pytest.fixture(scope="session")
def noise_free_snapshots(scen, gains):
    return synthesize_all(scen.ue, scen.anchors, scen.sched, scen.ofdm,
                          scen.ris, gains)


def make_noisy_snapshots(scen, gains, snr_db, seed):
    """Calibrated noisy snapshots for one trial."""
    truth = true_channel_params(scen.ue, scen.anchors, scen.sched)
    sigs = [snapshot_signal(truth, n, scen.anchors, scen.ofdm, scen.ris, gains)
            for n in range(1, scen.sched.n_epochs + 1)]
    sigma_u = sigma_for_snr(sigs, snr_db, scen.ris, gains)
    rng = np.random.default_rng(seed)
    return synthesize_all(scen.ue, scen.anchors, scen.sched, scen.ofdm,
                          scen.ris, gains, sigma_u=sigma_u, sigma_r=sigma_u,
                          rng=rng)
