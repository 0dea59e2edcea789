"""Environment-embedded vehicular channel: CIR, TVTF and PDP.

The impulse response is a LoS ray, a ground-reflected ray, and one ray per
static or dynamic scatterer. The mean power splits as a Rician factor between
LoS and the rest, and the non-LoS budget splits between ground, static and
dynamic groups. Each ray is a single complex exponential with geometric delay,
geometric Doppler and a random but persistent initial phase.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .scenegen import TransceiverPose

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
PATH_KINDS = ("los", "ground", "static_nlos", "dynamic_nlos")


@dataclass(frozen=True)
class ChannelParams:
    f_c: float = 28e9
    bandwidth: float = 2e9
    omega: float = 3.0
    eta_gr: float = 0.2
    eta_sta: float = 0.5
    eta_dyn: float = 0.3
    chi: float = 0.0
    delay_decay: float = 5e7
    seed: int = 0

    def __post_init__(self):
        if self.f_c <= 0 or self.bandwidth <= 0:
            raise ValueError("carrier frequency and bandwidth must be positive")
        if self.omega < 0:
            raise ValueError("Rician factor must be non-negative")
        etas = (self.eta_gr, self.eta_sta, self.eta_dyn)
        if min(etas) < 0 or abs(sum(etas) - 1.0) > 1e-12:
            raise ValueError("eta_gr + eta_sta + eta_dyn must equal 1")

    @property
    def bin_width(self) -> float:
        return 1.0 / self.bandwidth


@dataclass(frozen=True)
class ChannelScatterer:
    """A scatterer as seen by the channel: where it is and which ray it feeds."""

    position: np.ndarray
    cls: str
    cluster: int
    index: int
    reflection_loss: float = 0.0
    key: tuple = ()


@dataclass(frozen=True)
class PathComponent:
    kind: str
    cluster: int
    index: int
    delay: float
    power: float
    doppler: float
    phase0: float
    aod_azimuth: float
    aod_elevation: float
    aoa_azimuth: float
    aoa_elevation: float
    point: np.ndarray | None = None
    reflection_loss: float = 0.0
    key: tuple = ()

    def amplitude(self, t: float, f_c: float) -> complex:
        phase = self.phase0 + 2 * math.pi * self.doppler * t - 2 * math.pi * f_c * self.delay
        return math.sqrt(self.power) * complex(math.cos(phase), math.sin(phase))


@dataclass(frozen=True)
class Cir:
    snapshot_index: int
    t: float
    paths: tuple[PathComponent, ...]
    tau_los: float
    f_c: float

    def amplitudes(self) -> np.ndarray:
        return np.array([p.amplitude(self.t, self.f_c) for p in self.paths], dtype=complex)

    def of_kind(self, kind: str) -> list[PathComponent]:
        return [p for p in self.paths if p.kind == kind]


@dataclass(frozen=True)
class Tvtf:
    t: float
    freqs: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class Pdp:
    delay_bins: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        if len(self.delay_bins) != len(self.powers):
            raise ValueError("delay_bins and powers must have equal length")


def _angles(v):
    v = np.asarray(v, dtype=float)
    r = float(np.linalg.norm(v))
    return math.atan2(v[1], v[0]), math.asin(max(-1.0, min(1.0, v[2] / r)))


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _path(kind, cluster, index, tx, rx, point, loss=0.0, key=()):
    first = rx if point is None else point
    last = tx if point is None else point
    length = (
        float(np.linalg.norm(rx - tx))
        if point is None
        else float(np.linalg.norm(point - tx) + np.linalg.norm(rx - point))
    )
    dep = _angles(first - tx)
    arr = _angles(last - rx)
    return PathComponent(
        kind=kind,
        cluster=cluster,
        index=index,
        delay=length / SPEED_OF_LIGHT,
        power=0.0,
        doppler=0.0,
        phase0=0.0,
        aod_azimuth=dep[0],
        aod_elevation=dep[1],
        aoa_azimuth=arr[0],
        aoa_elevation=arr[1],
        point=None if point is None else np.asarray(point, dtype=float),
        reflection_loss=loss,
        key=key,
    )


def ground_point(tx, rx) -> np.ndarray:
    """Specular point on z = 0, found through the ground image of Rx."""
    image = np.array([rx[0], rx[1], -rx[2]])
    s = tx[2] / (tx[2] + rx[2])
    g = tx + s * (image - tx)
    g[2] = 0.0
    return g


def geometric_delays(pose: TransceiverPose, scatterers=()) -> list[PathComponent]:
    """LoS, ground and one NLoS path per scatterer with geometric delay and angles."""
    tx, rx = pose.tx_position, pose.rx_position
    if np.array_equal(tx, rx):
        raise ValueError("Tx and Rx must not coincide")
    if tx[2] <= 0 or rx[2] <= 0:
        raise ValueError("Tx and Rx must be above ground for the ground-reflected path")
    paths = [_path("los", -1, 0, tx, rx, None, key=("los",))]
    g = ground_point(tx, rx)
    paths.append(_path("ground", -1, 0, tx, rx, g, key=("ground",)))
    for s in scatterers:
        p = np.asarray(s.position, dtype=float)
        if np.linalg.norm(p - tx) < 1e-12 or np.linalg.norm(p - rx) < 1e-12:
            raise ValueError("a scatterer coincides with a transceiver")
        kind = "dynamic_nlos" if s.cls == "dynamic" else "static_nlos"
        key = s.key or (s.cls, s.cluster, s.index)
        paths.append(_path(kind, s.cluster, s.index, tx, rx, p, s.reflection_loss, key))
    return paths


def power_allocation(params: ChannelParams, paths, los_blocked: bool = False) -> list[PathComponent]:
    """Normalised mean path powers.

    LoS takes ``omega / (omega + 1)``; the remaining ``1 / (omega + 1)`` is
    shared by ground, static and dynamic groups in proportion to their etas.
    Inside a group the weights decay exponentially with excess delay and with
    the reflection loss. A blocked LoS is dropped and its share moves to the
    non-LoS groups; the eta of an empty group is redistributed over the
    non-empty ones.
    """
    paths = list(paths)
    los = [p for p in paths if p.kind == "los"]
    groups = {
        "ground": [p for p in paths if p.kind == "ground"],
        "static_nlos": [p for p in paths if p.kind == "static_nlos"],
        "dynamic_nlos": [p for p in paths if p.kind == "dynamic_nlos"],
    }
    etas = {"ground": params.eta_gr, "static_nlos": params.eta_sta, "dynamic_nlos": params.eta_dyn}
    omega = 0.0 if (los_blocked or not los) else params.omega
    if math.isinf(omega):
        los_share, nlos_share = 1.0, 0.0
    else:
        los_share, nlos_share = omega / (omega + 1), 1.0 / (omega + 1)

    live = {k: etas[k] for k, g in groups.items() if g}
    missing = sum(etas[k] for k, g in groups.items() if not g)
    total = sum(live.values())
    if nlos_share > 0 and total <= 0:
        raise ValueError("non-LoS power budget has no group with nonzero eta to go to")
    if missing > 0 and nlos_share > 0:
        log.debug("redistributing eta %.3f of empty groups over %s", missing, sorted(live))
    shares = {k: (nlos_share * e / total if total > 0 else 0.0) for k, e in live.items()}

    out = []
    if los and not los_blocked:
        out.append(replace(los[0], power=los_share))
    for kind, group in groups.items():
        if not group:
            continue
        tau_min = min(p.delay for p in group)
        w = np.array(
            [
                math.exp(-params.delay_decay * (p.delay - tau_min)) * 10 ** (-p.reflection_loss / 10)
                for p in group
            ]
        )
        w = w / w.sum()
        out.extend(replace(p, power=float(shares[kind] * wk)) for p, wk in zip(group, w))
    return out


def doppler_of(path: PathComponent, pose: TransceiverPose, f_c: float) -> float:
    """Doppler shift from transceiver motion along the departing and arriving legs."""
    tx, rx = pose.tx_position, pose.rx_position
    first = rx if path.point is None else path.point
    last = tx if path.point is None else path.point
    u_dep = _unit(first - tx)
    u_arr = _unit(last - rx)
    return float(f_c / SPEED_OF_LIGHT * (pose.tx_velocity @ u_dep + pose.rx_velocity @ u_arr))


def _key_seed(seed: int, key) -> list[int]:
    return [seed & 0xFFFFFFFF, zlib.crc32(repr(tuple(key)).encode())]


def initial_phase(seed: int, key) -> float:
    """Uniform [0, 2pi) phase tied to a path identity, stable across snapshots."""
    return float(np.random.default_rng(_key_seed(seed, key)).uniform(0.0, 2 * math.pi))


def synthesize_cir(
    static_scatterers,
    dynamic_scatterers,
    pose: TransceiverPose,
    params: ChannelParams = ChannelParams(),
    t: float = 0.0,
    los_blocked: bool = False,
    snapshot_index: int = 0,
) -> Cir:
    scatterers = [*static_scatterers, *dynamic_scatterers]
    paths = geometric_delays(pose, scatterers)
    tau_los = paths[0].delay
    paths = power_allocation(params, paths, los_blocked)
    paths = [
        replace(p, doppler=doppler_of(p, pose, params.f_c), phase0=initial_phase(params.seed, p.key))
        for p in paths
    ]
    return Cir(snapshot_index=snapshot_index, t=t, paths=tuple(paths), tau_los=tau_los, f_c=params.f_c)


def tvtf(cir: Cir, params: ChannelParams, freqs) -> Tvtf:
    """Transfer function ``H(t, f)`` of the CIR with the ``(f / f_c) ** chi`` factor."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if np.any(freqs <= 0):
        raise ValueError("frequencies must be positive")
    amps = cir.amplitudes()
    delays = np.array([p.delay for p in cir.paths])
    factor = (freqs / params.f_c) ** params.chi
    phase = np.exp(-2j * np.pi * (freqs[:, None] - params.f_c) * delays[None, :])
    return Tvtf(t=cir.t, freqs=freqs, values=factor * (phase @ amps))


def pdp(cir: Cir, params: ChannelParams, n_bins: int | None = None) -> Pdp:
    """Power per delay bin of width ``1 / bandwidth`` starting at the LoS delay."""
    width = params.bin_width
    delays = np.array([p.delay for p in cir.paths])
    powers = np.abs(cir.amplitudes()) ** 2
    offsets = (delays - cir.tau_los) / width
    # tolerance keeps exact bin edges from rounding into the previous bin
    idx = np.floor(offsets + 1e-9).astype(np.int64)
    idx = np.maximum(idx, 0)
    if n_bins is None:
        n_bins = int(idx.max()) + 1 if len(idx) else 1
    keep = idx < n_bins
    binned = np.zeros(n_bins)
    np.add.at(binned, idx[keep], powers[keep])
    return Pdp(delay_bins=cir.tau_los + width * np.arange(n_bins), powers=binned)


def write_cir_csv(cirs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["snapshot", "kind", "cluster", "index", "delay_s", "power", "doppler_hz", "phase0",
             "aod_az", "aod_el", "aoa_az", "aoa_el"]
        )
        for cir in cirs:
            for p in cir.paths:
                w.writerow(
                    [cir.snapshot_index, p.kind, p.cluster, p.index, repr(p.delay), repr(p.power),
                     repr(p.doppler), repr(p.phase0), repr(p.aod_azimuth), repr(p.aod_elevation),
                     repr(p.aoa_azimuth), repr(p.aoa_elevation)]
                )


def write_pdp_csv(snapshot_pdps, path) -> None:
    """``snapshot_pdps`` is an iterable of ``(snapshot_index, Pdp)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snapshot", "delay_s", "power"])
        for snap, p in snapshot_pdps:
            for d, pw in zip(p.delay_bins, p.powers):
                w.writerow([snap, repr(float(d)), repr(float(pw))])
