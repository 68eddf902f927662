import math

import numpy as np
import pytest

from codedfl.gradcode import CyclicLayout
from codedfl.latency import (
    TIMING_CSV_HEADER,
    DeviceProfile,
    DeviceStreams,
    LinkConfig,
    coded_epoch_macs,
    conventional_epoch_macs,
    encode_macs,
    epoch_time_coded,
    epoch_time_conventional,
    message_bits,
    pad_macs,
    reference_profiles,
    sample_compute_time,
    sample_link_time,
    sample_transmissions,
    server_macs_coded,
    sharing_phase_time,
    write_timings_csv,
)


def test_reference_profiles():
    profs = reference_profiles()
    assert len(profs) == 25
    assert [p.tau for p in profs[:10]] == [25e6] * 10 and profs[-1].tau == 1.25e6
    assert all(p.p == 0.1 for p in profs)


def test_setup_mean_rules():
    assert DeviceProfile(tau=10.0).setup_mean(20.0) == 1.0  # half of rho / tau
    assert DeviceProfile(tau=10.0, eta=4.0).setup_mean(20.0) == 0.25
    assert DeviceProfile(tau=10.0, eta=math.inf).setup_mean(20.0) == 0.0
    for bad in (dict(tau=0), dict(tau=1, p=1.0), dict(tau=1, eta=-1), dict(tau=1, setup_frac=-1)):
        with pytest.raises(ValueError):
            DeviceProfile(**bad)


def test_compute_time_is_shifted_exponential():
    rng = np.random.default_rng(0)
    prof = DeviceProfile(tau=1e6, eta=2.0)
    t = sample_compute_time(3e6, prof, rng, size=200_000)
    assert t.min() >= 3.0
    shifted = t - 3.0
    assert shifted.mean() == pytest.approx(0.5, rel=0.01)
    assert shifted.std() == pytest.approx(0.5, rel=0.02)


def test_transmissions_geometric():
    rng = np.random.default_rng(1)
    n = sample_transmissions(0.25, rng, 200_000)
    assert n.min() == 1
    assert n.mean() == pytest.approx(1 / 0.75, rel=0.01)
    assert np.mean(n == 1) == pytest.approx(0.75, abs=0.005)
    t = sample_link_time(1000, 500.0, 0.0, rng, 5)
    assert np.all(t == 2.0)


def test_message_bits_ceiling():
    assert message_bits(30000, 32, 0.1) == 1056000
    assert message_bits(1, 1, 0.1) == 2
    assert message_bits(0, 32, 0.1) == 0


def test_mac_counts():
    assert coded_epoch_macs(10, 2) == 220
    assert conventional_epoch_macs(5, 10, 2) == 200
    assert pad_macs(10, 2) == 320
    assert encode_macs(3, 10, 2) == 360
    assert server_macs_coded(2, 10, 2) == 2 * 260 + 60


def _deterministic(D, taus):
    return [DeviceProfile(tau=t, p=0.0, eta=math.inf) for t in taus]


def test_coded_epoch_waits_for_fastest_and_breaks_ties_low():
    profs = _deterministic(4, [1.0, 2.0, 1.0, 4.0])  # times 4, 2, 4, 1
    link = LinkConfig(1e12, 1e12, 0.0)
    t = epoch_time_coded(profs, 4.0, 0, 0, link, 2, DeviceStreams(0, 4))
    assert t.responders == (1, 3)
    assert t.epoch_time == pytest.approx(2.0)
    profs = _deterministic(4, [1.0, 1.0, 1.0, 1.0])
    t = epoch_time_coded(profs, 1.0, 0, 0, link, 3, DeviceStreams(0, 4))
    assert t.responders == (0, 1, 2)


def test_forced_straggler_never_responds():
    profs = _deterministic(3, [10.0, 1.0, 1.0])
    link = LinkConfig(1e12, 1e12, 0.0)
    t = epoch_time_coded(profs, 1.0, 0, 0, link, 2, DeviceStreams(0, 3), forced_stragglers=[0])
    assert t.responders == (1, 2)


def test_conventional_waits_for_everyone_unless_dropping():
    profs = _deterministic(4, [8.0, 4.0, 2.0, 1.0])  # times 1, 2, 4, 8
    link = LinkConfig(1e12, 1e12, 0.0)
    t = epoch_time_conventional(profs, 8.0, 0, 0, link, DeviceStreams(0, 4))
    assert t.epoch_time == pytest.approx(8.0) and len(t.responders) == 4
    t = epoch_time_conventional(profs, 8.0, 0, 0, link, DeviceStreams(0, 4), drop_fraction=0.5)
    assert t.responders == (0, 1)


def test_server_time_added():
    profs = _deterministic(2, [1.0, 1.0])
    link = LinkConfig(1e12, 1e12, 0.0)
    t = epoch_time_coded(profs, 1.0, 0, 0, link, 2, DeviceStreams(0, 2), server_rate=10.0,
                         server_rho=5.0)
    assert t.server == 0.5 and t.epoch_time == pytest.approx(1.5)


def test_streams_are_reproducible_and_independent_of_each_other():
    a, b = DeviceStreams(5, 3), DeviceStreams(5, 3)
    assert a.comp[1].random() == b.comp[1].random()
    assert DeviceStreams(5, 3).comp[0].random() != DeviceStreams(5, 3).comp[1].random()


def test_sharing_phase_monotone_in_alpha_and_trivial_at_one():
    profs = reference_profiles()
    link = LinkConfig()
    t1 = sharing_phase_time(profs, CyclicLayout(25, 1), 50, 10, link, 48, 0)
    assert np.array_equal(t1.done, t1.pad_done)
    times = [sharing_phase_time(profs, CyclicLayout(25, a), 50, 10, link, 48, 0).phase_time
             for a in (1, 6, 16, 23, 25)]
    assert all(x < y for x, y in zip(times, times[1:]))


def test_timings_csv(tmp_path):
    profs = reference_profiles()[:3]
    streams = DeviceStreams(0, 3)
    ts = [epoch_time_coded(profs, 1e5, 100, 100, LinkConfig(), 2, streams) for _ in range(2)]
    path = tmp_path / "t.csv"
    write_timings_csv(path, ts)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(TIMING_CSV_HEADER)
    assert len(lines) == 1 + 2 * 3
    assert sum(int(l.split(",")[-1]) for l in lines[1:4]) == 2
