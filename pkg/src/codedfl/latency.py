"""Stochastic computation/communication latency.

Computing ρ MACs on a device with rate τ takes ``ρ/τ + Λ`` seconds, Λ
exponential with mean ``1/η``. When a profile has no fixed η, the mean setup is
``setup_frac·ρ/τ`` (η = τ / (setup_frac·ρ)). A transfer of b bits at rate γ
needs N ~ Geometric(1-p) attempts and takes ``N·b/γ``.

MAC accounting (per device unless stated)::

    coded epoch        d·d·c + d·c          (Cbar·eps, + C)
    conventional epoch 2·n_b·d·c            (forward X_bΘ, backward X_bᵀ r)
    pad                d·d·c + d·c + d·d    (first gradient, two pads)
    encode             alpha·(d·c + d·d)    (scalar-multiply-accumulate of shares)
    server, coded      w·(d·d·c + 3·d·c) + 3·d·c   (strip, decode over w responders, update)
    server, conv.      D·d·c + 3·d·c

The server has no setup noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import stream

DEFAULT_SERVER_RATE = 8.24e12
DEFAULT_CLASSES = ((10, 25e6), (5, 5e6), (5, 2.5e6), (5, 1.25e6))


@dataclass(frozen=True)
class DeviceProfile:
    tau: float
    p: float = 0.1
    eta: float | None = None
    setup_frac: float = 0.5
    label: str = ""

    def __post_init__(self):
        if self.tau <= 0 or not (0 <= self.p < 1):
            raise ValueError("need tau > 0 and 0 <= p < 1")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.setup_frac < 0:
            raise ValueError("setup_frac must be non-negative")

    def setup_mean(self, rho: float) -> float:
        if self.eta is not None:
            return 0.0 if math.isinf(self.eta) else 1.0 / self.eta
        return self.setup_frac * rho / self.tau


@dataclass(frozen=True)
class LinkConfig:
    gamma_up: float = 5e6
    gamma_down: float = 10e6
    header_frac: float = 0.1

    def __post_init__(self):
        if self.gamma_up <= 0 or self.gamma_down <= 0 or self.header_frac < 0:
            raise ValueError("link rates must be positive, header_frac non-negative")


def reference_profiles(p: float = 0.1, setup_frac: float = 0.5) -> list[DeviceProfile]:
    out = []
    for count, tau in DEFAULT_CLASSES:
        out += [DeviceProfile(tau=tau, p=p, setup_frac=setup_frac, label=f"{tau:g}")] * count
    return out


def sample_compute_time(rho: float, profile: DeviceProfile, rng: np.random.Generator,
                        size=None):
    if rho < 0:
        raise ValueError("rho must be non-negative")
    # always consume one standard exponential per sample so streams stay aligned
    lam = rng.standard_exponential(size) * profile.setup_mean(rho)
    return rho / profile.tau + lam


def sample_transmissions(p: float, rng: np.random.Generator, size=None):
    return rng.geometric(1.0 - p, size)


def sample_link_time(bits: float, rate: float, p: float, rng: np.random.Generator, size=None):
    if bits < 0:
        raise ValueError("bits must be non-negative")
    return sample_transmissions(p, rng, size) * (bits / rate)


def message_bits(entries: int, bits_per_entry: int, header_frac: float) -> int:
    if entries < 0 or bits_per_entry < 0 or header_frac < 0:
        raise ValueError("arguments must be non-negative")
    # round the product first so that e.g. 1.1 times 960000 is not 1056000.0000001
    return math.ceil(round(entries * bits_per_entry * (1.0 + header_frac), 6))


def coded_epoch_macs(d: int, c: int) -> int:
    return d * d * c + d * c


def conventional_epoch_macs(n_batch: int, d: int, c: int) -> int:
    return 2 * n_batch * d * c


def pad_macs(d: int, c: int) -> int:
    return d * d * c + d * c + d * d


def encode_macs(alpha: int, d: int, c: int) -> int:
    return alpha * (d * c + d * d)


def server_macs_coded(wait: int, d: int, c: int) -> int:
    return wait * (d * d * c + 3 * d * c) + 3 * d * c


def server_macs_conventional(D: int, d: int, c: int) -> int:
    return D * d * c + 3 * d * c


class DeviceStreams:
    """Independent per-device generators for downlink, compute and uplink."""

    def __init__(self, seed: int, D: int, phase: str = "train"):
        self.down = [stream(seed, "latency", phase, i, "down") for i in range(D)]
        self.comp = [stream(seed, "latency", phase, i, "comp") for i in range(D)]
        self.up = [stream(seed, "latency", phase, i, "up") for i in range(D)]


@dataclass
class EpochTiming:
    downlink: np.ndarray
    compute: np.ndarray
    uplink: np.ndarray
    server: float
    epoch_time: float
    responders: tuple[int, ...]

    @property
    def totals(self) -> np.ndarray:
        return self.downlink + self.compute + self.uplink


def _device_timelines(profiles, rho, down_bits, up_bits, link, streams, forced=()):
    D = len(profiles)
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (D,))
    down = np.empty(D)
    comp = np.empty(D)
    up = np.empty(D)
    for i, prof in enumerate(profiles):
        down[i] = sample_link_time(down_bits, link.gamma_down, prof.p, streams.down[i])
        comp[i] = sample_compute_time(float(rho[i]), prof, streams.comp[i])
        up[i] = sample_link_time(up_bits, link.gamma_up, prof.p, streams.up[i])
    for i in forced:
        comp[i] = math.inf
    return down, comp, up


def _fastest(totals: np.ndarray, count: int) -> tuple[int, ...]:
    order = np.lexsort((np.arange(totals.size), totals))
    return tuple(sorted(int(i) for i in order[:count]))


def epoch_time_coded(profiles: Sequence[DeviceProfile], rho, down_bits: float, up_bits: float,
                     link: LinkConfig, wait_count: int, streams: DeviceStreams,
                     server_rate: float = DEFAULT_SERVER_RATE, server_rho: float = 0.0,
                     forced_stragglers=()) -> EpochTiming:
    """Server proceeds once the ``wait_count`` fastest devices have reported."""
    if not 1 <= wait_count <= len(profiles):
        raise ValueError("wait_count must be in [1, D]")
    down, comp, up = _device_timelines(profiles, rho, down_bits, up_bits, link, streams,
                                       forced_stragglers)
    totals = down + comp + up
    responders = _fastest(totals, wait_count)
    server = server_rho / server_rate
    t = float(np.max(totals[list(responders)])) + server
    return EpochTiming(down, comp, up, server, t, responders)


def epoch_time_conventional(profiles: Sequence[DeviceProfile], rho, down_bits: float,
                            up_bits: float, link: LinkConfig, streams: DeviceStreams,
                            server_rate: float = DEFAULT_SERVER_RATE, server_rho: float = 0.0,
                            drop_fraction: float | None = None,
                            forced_stragglers=()) -> EpochTiming:
    """Wait for every device, or (experimental) only the fastest ``1 - drop_fraction``."""
    D = len(profiles)
    count = D
    if drop_fraction is not None:
        count = max(1, D - int(math.floor(drop_fraction * D)))
    return epoch_time_coded(profiles, rho, down_bits, up_bits, link, count, streams,
                            server_rate, server_rho, forced_stragglers)


@dataclass
class SharingTiming:
    pad_done: np.ndarray
    uplink_done: np.ndarray
    encode_start: np.ndarray
    done: np.ndarray
    phase_time: float = field(init=False)

    def __post_init__(self):
        self.phase_time = float(np.max(self.done))


def sharing_phase_time(profiles: Sequence[DeviceProfile], code, d: int, c: int,
                       link: LinkConfig, bits_per_entry: int, seed: int) -> SharingTiming:
    """Time until every device holds its encoded share.

    Device j pads, uploads ``d·c + d(d+1)/2`` entries once, and the server relays
    the share to each holder over an independent downlink. A device encodes
    once all ``alpha - 1`` foreign shares of its support have arrived.
    """
    D, alpha = code.D, code.alpha
    share_bits = message_bits(d * c + d * (d + 1) // 2, bits_per_entry, link.header_frac)
    pad = np.empty(D)
    upl = np.empty(D)
    for j, prof in enumerate(profiles):
        pad[j] = sample_compute_time(pad_macs(d, c), prof, stream(seed, "sharing", j, "pad"))
        if alpha > 1:
            upl[j] = pad[j] + sample_link_time(share_bits, link.gamma_up, prof.p,
                                               stream(seed, "sharing", j, "up"))
        else:
            upl[j] = pad[j]
    start = pad.copy()
    done = pad.copy()
    if alpha > 1:
        for i, prof in enumerate(profiles):
            relay = stream(seed, "sharing", i, "relay")
            for j in code.support(i)[1:]:
                arrive = upl[j] + sample_link_time(share_bits, link.gamma_down, prof.p, relay)
                start[i] = max(start[i], arrive)
            enc = sample_compute_time(encode_macs(alpha, d, c), prof,
                                      stream(seed, "sharing", i, "encode"))
            done[i] = start[i] + enc
    return SharingTiming(pad, upl, start, done)


TIMING_CSV_HEADER = ("epoch", "device", "downlink", "compute", "uplink", "responder")


def write_timings_csv(path, timings: Sequence[EpochTiming]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_CSV_HEADER)
        for e, t in enumerate(timings, start=1):
            resp = set(t.responders)
            for i in range(t.downlink.size):
                w.writerow([e, i, f"{t.downlink[i]:.9g}", f"{t.compute[i]:.9g}",
                            f"{t.uplink[i]:.9g}", int(i in resp)])
