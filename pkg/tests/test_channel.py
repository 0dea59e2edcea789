import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envchan.channel import (
    SPEED_OF_LIGHT,
    ChannelParams,
    ChannelScatterer,
    Cir,
    PathComponent,
    doppler_of,
    geometric_delays,
    ground_point,
    initial_phase,
    pdp,
    power_allocation,
    synthesize_cir,
    tvtf,
    write_cir_csv,
    write_pdp_csv,
)
from envchan.scenegen import TransceiverPose

from oracles import C, tvtf_direct


def pose(tx, rx, vtx=(0, 0, 0), vrx=(0, 0, 0)):
    return TransceiverPose(np.array(tx, float), np.array(rx, float), np.array(vtx, float), np.array(vrx, float))


def scat(p, cls="static", cluster=0, index=0, loss=0.0):
    return ChannelScatterer(np.array(p, float), cls, cluster, index, loss)


def unit_path(delay, power=1.0, phase=0.0):
    return PathComponent("los", -1, 0, delay, power, 0.0, phase, 0, 0, 0, 0)


def random_scene(rng):
    tx = np.array([rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(0.5, 3)])
    rx = np.array([rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(0.5, 3)])
    p = pose(tx, rx, rng.normal(scale=15, size=3) * [1, 1, 0], rng.normal(scale=15, size=3) * [1, 1, 0])
    sta = [scat(rng.uniform(-60, 60, 3), "static", int(rng.integers(3)), k, rng.uniform(0, 10))
           for k in range(int(rng.integers(0, 8)))]
    dyn = [scat(rng.uniform(-60, 60, 3), "dynamic", int(rng.integers(3)), k, rng.uniform(0, 10))
           for k in range(int(rng.integers(0, 6)))]
    return p, sta, dyn


# ---------------------------------------------------------------- params


def test_param_defaults_and_validation():
    p = ChannelParams()
    assert (p.f_c, p.bandwidth) == (28e9, 2e9)
    assert p.bin_width == 0.5e-9
    with pytest.raises(ValueError):
        ChannelParams(eta_gr=0.3, eta_sta=0.5, eta_dyn=0.3)
    with pytest.raises(ValueError):
        ChannelParams(bandwidth=0)
    assert SPEED_OF_LIGHT == C


# ---------------------------------------------------------------- geometry


def test_los_delay_one_microsecond():
    paths = geometric_delays(pose([0, 0, 1], [299.792458, 0, 1]))
    assert paths[0].kind == "los" and paths[0].delay == pytest.approx(1e-6, rel=1e-15)


def test_ground_delay_by_image_method():
    paths = geometric_delays(pose([0, 0, 2], [100, 0, 2]))
    gr = paths[1]
    assert gr.kind == "ground"
    assert gr.delay == pytest.approx(math.sqrt(10016) / C, rel=1e-14)
    assert gr.delay == pytest.approx(333.83e-9, abs=0.01e-9)
    assert ground_point(np.array([0, 0, 2.0]), np.array([100, 0, 2.0])) == pytest.approx([50, 0, 0])


def test_midpoint_scatterer_delay_equals_los():
    paths = geometric_delays(pose([0, 0, 1], [10, 0, 1]), [scat([5, 0, 1])])
    assert paths[2].delay == pytest.approx(paths[0].delay, rel=1e-15)


def test_angles_from_geometry():
    paths = geometric_delays(pose([0, 0, 1], [10, 0, 1]), [scat([0, 10, 1])])
    los, _, s = paths
    assert (los.aod_azimuth, los.aoa_azimuth) == pytest.approx((0.0, math.pi))
    assert s.aod_azimuth == pytest.approx(math.pi / 2)
    assert s.aoa_azimuth == pytest.approx(math.atan2(10, -10))
    assert paths[1].aod_elevation < 0 and paths[1].aoa_elevation < 0


def test_geometry_errors():
    with pytest.raises(ValueError):
        geometric_delays(pose([0, 0, 0], [10, 0, 1]))
    with pytest.raises(ValueError):
        geometric_delays(pose([0, 0, 1], [10, 0, 1]), [scat([0, 0, 1])])


# ---------------------------------------------------------------- power


def _group_sums(paths):
    return tuple(sum(p.power for p in paths if p.kind == k) for k in ("los", "ground", "static_nlos", "dynamic_nlos"))


def test_rician_limit():
    paths = geometric_delays(pose([0, 0, 1], [50, 0, 1]), [scat([20, 10, 2]), scat([20, -5, 1], "dynamic")])
    out = power_allocation(ChannelParams(omega=1e12), paths)
    assert _group_sums(out)[0] == pytest.approx(1.0, abs=1e-9)


def test_group_sums_for_unit_rician_factor():
    paths = geometric_delays(
        pose([0, 0, 1], [50, 0, 1]),
        [scat([20, 10, 2]), scat([30, 12, 2], index=1), scat([20, -5, 1], "dynamic")],
    )
    out = power_allocation(ChannelParams(omega=1.0, eta_gr=0.2, eta_sta=0.5, eta_dyn=0.3), paths)
    assert _group_sums(out) == pytest.approx((0.5, 0.1, 0.25, 0.15), abs=1e-15)


def test_empty_group_eta_is_redistributed():
    paths = geometric_delays(pose([0, 0, 1], [50, 0, 1]), [scat([20, 10, 2])])
    out = power_allocation(ChannelParams(omega=1.0), paths)
    # ground 0.2 and static 0.5 share 0.5 in ratio 2:5
    assert _group_sums(out) == pytest.approx((0.5, 0.5 * 0.2 / 0.7, 0.5 * 0.5 / 0.7, 0.0), abs=1e-15)


def test_blocked_los_moves_power_to_nlos():
    paths = geometric_delays(pose([0, 0, 1], [50, 0, 1]), [scat([20, 10, 2])])
    out = power_allocation(ChannelParams(), paths, los_blocked=True)
    assert all(p.kind != "los" for p in out)
    assert sum(p.power for p in out) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 20), st.booleans())
def test_power_is_normalised(seed, omega, blocked):
    rng = np.random.default_rng(seed)
    p, sta, dyn = random_scene(rng)
    eta = rng.dirichlet([1, 1, 1])
    eta[2] = 1.0 - eta[0] - eta[1]
    params = ChannelParams(omega=omega, eta_gr=eta[0], eta_sta=eta[1], eta_dyn=max(eta[2], 0.0), seed=seed)
    cir = synthesize_cir(sta, dyn, p, params, t=0.3, los_blocked=blocked)
    assert sum(x.power for x in cir.paths) == pytest.approx(1.0, abs=1e-12)
    assert np.sum(np.abs(cir.amplitudes()) ** 2) == pytest.approx(1.0, abs=1e-12)
    assert pdp(cir, params).powers.sum() == pytest.approx(1.0, abs=1e-12)


def test_power_decays_with_delay_and_loss():
    paths = geometric_delays(pose([0, 0, 1], [50, 0, 1]), [scat([25, 5, 1]), scat([25, 40, 1], index=1)])
    near, far = [p for p in power_allocation(ChannelParams(), paths) if p.kind == "static_nlos"]
    assert near.power > far.power
    paths = geometric_delays(pose([0, 0, 1], [50, 0, 1]), [scat([25, 5, 1]), scat([25, -5, 1], index=1, loss=10)])
    a, b = [p for p in power_allocation(ChannelParams(), paths) if p.kind == "static_nlos"]
    assert a.power / b.power == pytest.approx(10.0, rel=1e-9)


# ---------------------------------------------------------------- Doppler


def test_doppler_static_is_zero():
    paths = geometric_delays(pose([0, 0, 1], [50, 0, 1]), [scat([20, 10, 2])])
    assert all(doppler_of(q, pose([0, 0, 1], [50, 0, 1]), 28e9) == 0.0 for q in paths)


def test_doppler_tx_approaching():
    p = pose([0, 0, 1], [100, 0, 1], vtx=(30, 0, 0))
    f = doppler_of(geometric_delays(p)[0], p, 28e9)
    assert f == pytest.approx(28e9 * 30 / C, rel=1e-14)
    assert f == pytest.approx(2801.9, abs=0.05)
    away = pose([0, 0, 1], [100, 0, 1], vtx=(-30, 0, 0))
    assert doppler_of(geometric_delays(away)[0], away, 28e9) == pytest.approx(-f, rel=1e-14)


def test_doppler_rx_approaching_matches_tx():
    p = pose([0, 0, 1], [100, 0, 1], vrx=(-30, 0, 0))
    assert doppler_of(geometric_delays(p)[0], p, 28e9) == pytest.approx(28e9 * 30 / C, rel=1e-14)


def test_doppler_perpendicular_motion_is_zero():
    p = pose([0, 0, 1], [100, 0, 1], vtx=(0, 20, 0))
    assert doppler_of(geometric_delays(p)[0], p, 28e9) == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------- CIR


def test_cir_without_scatterers_has_two_paths():
    cir = synthesize_cir([], [], pose([0, 0, 1], [50, 0, 1]))
    assert [p.kind for p in cir.paths] == ["los", "ground"]


def test_static_counts_give_one_path_each():
    sta = [scat([10, 10, 1], cluster=0, index=k) for k in range(2)] + [
        scat([30, -10, 1], cluster=1, index=k) for k in range(3)
    ]
    cir = synthesize_cir(sta, [], pose([0, 0, 1], [50, 0, 1]))
    assert len(cir.of_kind("static_nlos")) == 5 and not cir.of_kind("dynamic_nlos")


def test_phase_is_persistent_and_seeded():
    p = pose([0, 0, 1], [50, 0, 1])
    a = synthesize_cir([scat([10, 10, 1])], [], p, ChannelParams(seed=4))
    b = synthesize_cir([scat([11, 12, 1])], [], p, ChannelParams(seed=4), t=0.1)
    c = synthesize_cir([scat([10, 10, 1])], [], p, ChannelParams(seed=5))
    assert [x.phase0 for x in a.paths] == [x.phase0 for x in b.paths]
    assert [x.phase0 for x in a.paths] != [x.phase0 for x in c.paths]
    assert all(0 <= x.phase0 < 2 * math.pi for x in a.paths)
    assert initial_phase(1, ("los",)) == initial_phase(1, ("los",))


def test_amplitude_formula():
    p = pose([0, 0, 1], [80, 0, 1], vtx=(10, 0, 0))
    cir = synthesize_cir([], [], p, ChannelParams(), t=0.25)
    for q, a in zip(cir.paths, cir.amplitudes()):
        ph = q.phase0 + 2 * math.pi * q.doppler * 0.25 - 2 * math.pi * 28e9 * q.delay
        assert a == pytest.approx(math.sqrt(q.power) * complex(math.cos(ph), math.sin(ph)), abs=1e-15)


# ---------------------------------------------------------------- TVTF


def test_tvtf_unit_factor_at_carrier():
    cir = Cir(0, 0.0, (unit_path(1e-7),), 1e-7, 28e9)
    for chi in (-2.0, 0.0, 1.5):
        h = tvtf(cir, ChannelParams(chi=chi), [28e9])
        assert abs(h.values[0]) == pytest.approx(1.0, abs=1e-15)


def test_tvtf_flat_for_single_path():
    cir = Cir(0, 0.0, (unit_path(3.3e-7),), 3.3e-7, 28e9)
    h = tvtf(cir, ChannelParams(), np.linspace(27e9, 29e9, 101))
    assert np.abs(h.values) == pytest.approx(np.ones(101), abs=1e-12)


@pytest.mark.parametrize("chi", [0.0, 1.0, -0.7])
def test_tvtf_matches_direct_sum(chi):
    rng = np.random.default_rng(1)
    paths = (unit_path(1.2e-7, 0.7, 0.3), unit_path(1.9e-7, 0.3, 2.1))
    cir = Cir(0, 0.0, paths, 1.2e-7, 28e9)
    freqs = np.sort(rng.uniform(27e9, 29e9, 64))
    h = tvtf(cir, ChannelParams(chi=chi), freqs)
    ref = tvtf_direct(cir.amplitudes(), [p.delay for p in paths], freqs, 28e9, chi)
    assert np.max(np.abs(h.values - ref)) < 1e-12


def test_tvtf_rejects_non_positive_frequency():
    with pytest.raises(ValueError):
        tvtf(Cir(0, 0.0, (unit_path(1e-7),), 1e-7, 28e9), ChannelParams(), [0.0])


@pytest.mark.parametrize("seed", range(5))
def test_inverse_transform_peak_matches_pdp_peak(seed):
    rng = np.random.default_rng(seed)
    params = ChannelParams(omega=0.5, seed=seed)
    p = pose([0, 0, 1.5], [40, 0, 1.5])
    sta = [scat([rng.uniform(5, 35), rng.uniform(5, 20), 1.5], index=k) for k in range(4)]
    cir = synthesize_cir(sta, [], p, params)
    n = 1024
    freqs = params.f_c + np.arange(n) * params.bandwidth / n
    h = tvtf(cir, params, freqs).values * np.exp(2j * np.pi * (freqs - params.f_c) * cir.tau_los)
    profile = np.abs(np.fft.ifft(h)) ** 2
    ref = pdp(cir, params)
    assert abs(int(np.argmax(profile)) - int(np.argmax(ref.powers))) <= 1


# ---------------------------------------------------------------- PDP


def test_pdp_single_path():
    cir = Cir(0, 0.0, (unit_path(1e-7),), 1e-7, 28e9)
    out = pdp(cir, ChannelParams())
    assert list(out.powers) == [1.0] and out.delay_bins[0] == 1e-7


def test_pdp_bins_and_conservation():
    params = ChannelParams()
    paths = (unit_path(1e-7, 0.5), unit_path(1e-7 + 0.2e-9, 0.2), unit_path(1e-7 + 1.4e-9, 0.3))
    out = pdp(Cir(0, 0.0, paths, 1e-7, 28e9), params)
    assert out.powers == pytest.approx([0.7, 0.0, 0.3], abs=1e-15)
    assert np.diff(out.delay_bins) == pytest.approx([0.5e-9, 0.5e-9], rel=1e-9)
    padded = pdp(Cir(0, 0.0, paths, 1e-7, 28e9), params, n_bins=6)
    assert len(padded.powers) == 6 and padded.powers.sum() == pytest.approx(1.0, abs=1e-12)


def test_pdp_shape_validation():
    from envchan.channel import Pdp

    with pytest.raises(ValueError):
        Pdp(np.zeros(3), np.zeros(2))


# ---------------------------------------------------------------- files


def test_cir_and_pdp_csv(tmp_path):
    p = pose([0, 0, 1], [50, 0, 1])
    cirs = [synthesize_cir([scat([20, 10, 2])], [], p, t=k * 0.1, snapshot_index=k) for k in range(2)]
    write_cir_csv(cirs, tmp_path / "cir.csv")
    rows = list(csv.DictReader(open(tmp_path / "cir.csv")))
    assert len(rows) == 6 and rows[0]["kind"] == "los"
    assert float(rows[0]["delay_s"]) == cirs[0].paths[0].delay
    write_pdp_csv([(c.snapshot_index, pdp(c, ChannelParams())) for c in cirs], tmp_path / "pdp.csv")
    rows = list(csv.DictReader(open(tmp_path / "pdp.csv")))
    assert {"snapshot", "delay_s", "power"} == set(rows[0])
    assert sum(float(r["power"]) for r in rows if r["snapshot"] == "0") == pytest.approx(1.0, abs=1e-12)
