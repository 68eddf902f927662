"""Two-phase coded training, the conventional baseline, and experiment driver.

The coded scheme runs a one-time sharing phase (pad, relay, encode) and then
iterates: broadcast ε, responders return ``C ⊕ Cbar·ε``, the server strips
keys, decodes in real arithmetic and re-quantises the new ε. Timing comes
from the latency model on its own random streams, so numerics never affect
which devices respond.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    EmbeddingSpec,
    LabeledDataset,
    QuantizedCorpus,
    gen_synthetic,
    load_csv,
    load_idx,
    quantize_dataset,
    rff_embed,
    sort_and_partition,
)
from .errors import DimensionError
from .fixedpoint import FxMatrix
from .gradcode import CyclicLayout, GradientCode, build_code, decode_vector
from .latency import (
    DeviceStreams,
    EpochTiming,
    SharingTiming,
    coded_epoch_macs,
    conventional_epoch_macs,
    epoch_time_coded,
    epoch_time_conventional,
    message_bits,
    server_macs_coded,
    server_macs_conventional,
    sharing_phase_time,
)
from .model import LocalData, evaluate, local_gradient, one_hot
from .privacy import (
    DeviceKeys,
    EncodedShare,
    GradientMsg,
    KeyAggregate,
    aggregate_keys,
    coded_gradient,
    encode_shares,
    gen_key_registry,
    pad_share,
    strip_keys,
)
from .rng import stream

CSV_HEADER = ("epoch", "time_s", "train_acc", "test_acc", "loss", "responders")


@dataclass(frozen=True)
class TrajectoryPoint:
    epoch: int
    time_s: float
    train_acc: float | None
    test_acc: float | None
    loss: float | None
    responders: int

    @property
    def accuracy(self) -> float | None:
        return self.test_acc if self.test_acc is not None else self.train_acc


@dataclass
class Prepared:
    """Everything derived from the data section: device blocks and eval sets."""

    corpus: QuantizedCorpus | None
    d: int
    c: int
    n: int
    train_X: np.ndarray | None = None
    train_labels: np.ndarray | None = None
    test_X: np.ndarray | None = None
    test_labels: np.ndarray | None = None

    @property
    def devices(self) -> list[LocalData]:
        return self.corpus.devices if self.corpus is not None else []

    @property
    def m(self) -> int:
        return self.n * (len(self.devices) or 1)


def _load_source(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset | None]:
    ds = cfg.data
    if ds.source == "synthetic":
        full = gen_synthetic(ds.m + ds.test_m, ds.raw_dim, ds.classes, ds.noise,
                             stream(cfg.seed, "data"))
        train = LabeledDataset(full.features[:ds.m], full.labels[:ds.m], "train")
        test = None
        if ds.test_m:
            test = LabeledDataset(full.features[ds.m:], full.labels[ds.m:], "test")
        return train, test
    if ds.source == "idx":
        train = load_idx(ds.train_images, ds.train_labels, "train")
        test = None
        if ds.test_images and ds.test_labels:
            test = load_idx(ds.test_images, ds.test_labels, "test")
        return train, test
    train = load_csv(ds.train_csv, "train")
    test = load_csv(ds.test_csv, "test") if ds.test_csv else None
    return train, test


def prepare_data(cfg: RunConfig) -> Prepared:
    """Load, embed, partition (label-sorted) and quantise the training corpus."""
    D = cfg.code.D
    if cfg.latency_only:
        c = cfg.data.classes
        return Prepared(None, cfg.data.d, c, cfg.data.m // D)
    train, test = _load_source(cfg)
    c = max(cfg.data.classes, train.classes, test.classes if test else 0)
    emb = cfg.data.embedding
    if emb is not None:
        espec = EmbeddingSpec(emb.gamma, emb.n_features, emb.seed)
        train = LabeledDataset(rff_embed(train.features, espec), train.labels, train.name)
        if test is not None:
            test = LabeledDataset(rff_embed(test.features, espec), test.labels, test.name)
    parts = sort_and_partition(train, D)
    blocks = [(p.features, one_hot(p.labels, c)) for p in parts]
    corpus = quantize_dataset(blocks, cfg.spec, cfg.data.headroom)
    train_X = np.concatenate([dev.X for dev in corpus.devices])
    train_labels = np.concatenate([p.labels for p in parts])
    prep = Prepared(corpus, train_X.shape[1], c, parts[0].m, train_X, train_labels)
    if test is not None:
        if test.features.shape[1] != prep.d:
            raise DimensionError(f"test features have {test.features.shape[1]} columns, "
                                 f"train has {prep.d}")
        prep.test_X = corpus.scale * test.features
        prep.test_labels = test.labels
    return prep


def initial_theta(cfg: RunConfig, d: int, c: int) -> FxMatrix:
    """Θ^(1): zeros, or a seeded normal draw of scale ``theta1_scale``."""
    if cfg.theta1_scale == 0:
        return FxMatrix.zeros(d, c, cfg.spec)
    draw = cfg.theta1_scale * stream(cfg.seed, "theta1").standard_normal((d, c))
    return FxMatrix.from_real(draw, cfg.spec)


# ------------------------------------------------------------------ metrics

def _point(epoch: int, clock: float, responders: int, prep: Prepared, theta,
           lam: float, latency_only: bool) -> TrajectoryPoint:
    if latency_only:
        return TrajectoryPoint(epoch, clock, None, None, None, responders)
    theta = np.asarray(theta, dtype=np.float64)
    tr = evaluate(theta, prep.train_X, prep.train_labels, lam)
    test_acc = None
    if prep.test_X is not None:
        test_acc = evaluate(theta, prep.test_X, prep.test_labels).accuracy
    return TrajectoryPoint(epoch, clock, tr.accuracy, test_acc, tr.loss, responders)


# ------------------------------------------------------------------ coded scheme

@dataclass
class SharingResult:
    encoded: list[EncodedShare]
    keys: list[DeviceKeys]
    aggregates: list[KeyAggregate]
    timing: SharingTiming

    @property
    def phase_time(self) -> float:
        return self.timing.phase_time


def run_sharing_phase(cfg: RunConfig, code: GradientCode, prep: Prepared,
                      theta1: FxMatrix) -> SharingResult:
    """Pad first-epoch gradients and Grams, relay along row supports, encode."""
    spec = cfg.spec
    D, d, c = code.D, prep.d, prep.c
    timing = sharing_phase_time(cfg.devices.profiles(), code, d, c, cfg.link.link(),
                                spec.k, cfg.seed)
    if cfg.latency_only:
        return SharingResult([], [], [], timing)
    if cfg.privacy.zero_keys:
        zero = DeviceKeys(FxMatrix.zeros(d, c, spec), FxMatrix.zeros(d, d, spec))
        keys = [zero] * D
    elif cfg.privacy.pad_guard:
        theta1_max = float(np.max(np.abs(theta1.to_real())))
        keys = gen_key_registry(cfg.seed, code, d, c, spec,
                                grad_bound=prep.corpus.grad_bound(theta1_max),
                                gram_bound=prep.corpus.gram_bound())
    else:
        keys = gen_key_registry(cfg.seed, code, d, c, spec)
    # every device pads once and uploads its share once; the server relays it
    relayed = []
    for j, dev in enumerate(prep.devices):
        share = pad_share(dev.gram_fx, local_gradient(dev, theta1), keys[j])
        relayed.append(share.transmit())
    encoded, aggs = [], []
    for i in range(D):
        sup = code.support(i)
        b_row = code.row_coefficients(i)
        encoded.append(encode_shares(b_row, [relayed[j] for j in sup]))
        aggs.append(aggregate_keys(b_row, [keys[j] for j in sup]))
    return SharingResult(encoded, keys, aggs, timing)


@dataclass
class CodedState:
    theta1: FxMatrix
    eps: FxMatrix
    epoch: int = 1
    clock: float = 0.0

    @property
    def theta(self) -> np.ndarray:
        return self.theta1.to_real() + self.eps.to_real()


class _StepGuard:
    """Asserts that no device contributes more than one gradient per epoch."""

    def __init__(self, D: int):
        self.counts = np.zeros(D, dtype=np.int64)

    def reset(self):
        self.counts[:] = 0

    def mark(self, devices):
        for i in devices:
            self.counts[i] += 1
        assert self.counts.max(initial=0) <= 1, "device computed twice in one epoch"


@dataclass
class CodedRunner:
    """Holds everything the coded epochs need between calls."""

    cfg: RunConfig
    code: GradientCode | CyclicLayout
    prep: Prepared
    sharing: SharingResult
    streams: DeviceStreams
    pool: ThreadPoolExecutor | None = None
    guard: _StepGuard = field(init=False)

    def __post_init__(self):
        self.guard = _StepGuard(self.code.D)
        self.profiles = self.cfg.devices.profiles()
        d, c, k = self.prep.d, self.prep.c, self.cfg.spec.k
        hdr = self.cfg.link.header_frac
        self.down_bits = message_bits(d * c, k, hdr)
        self.up_bits = message_bits(d * c, k, hdr)
        self.rho = coded_epoch_macs(d, c)
        self.server_rho = server_macs_coded(self.code.wait_count, d, c)
        self.hyper = self.cfg.hyper_for(self.prep.m)

    def timing(self) -> EpochTiming:
        return epoch_time_coded(self.profiles, self.rho, self.down_bits, self.up_bits,
                                self.cfg.link.link(), self.code.wait_count, self.streams,
                                self.cfg.devices.server_rate, self.server_rho,
                                self.cfg.forced_stragglers)

    def _device(self, i: int, eps: FxMatrix) -> FxMatrix:
        return coded_gradient(self.sharing.encoded[i], eps)

    def decoded_sum(self, responders, eps: FxMatrix, epoch: int) -> np.ndarray:
        """Σ_i G_i recovered from the responders' coded gradients."""
        self.guard.reset()
        self.guard.mark(responders)
        if self.pool is not None:
            msgs = list(self.pool.map(lambda i: self._device(i, eps), responders))
        else:
            msgs = [self._device(i, eps) for i in responders]
        dv = decode_vector(self.code, responders)
        total = np.zeros(eps.shape)
        for a, i, g in zip(dv.coefficients, responders, msgs):
            p = strip_keys(GradientMsg(g, i, epoch), None, None, eps, agg=self.sharing.aggregates[i])
            total += a * p.values.to_real()
        return total

    def epoch(self, state: CodedState) -> tuple[CodedState, TrajectoryPoint, EpochTiming]:
        t = self.timing()
        clock = state.clock + t.epoch_time
        e = state.epoch
        if self.cfg.latency_only:
            new = CodedState(state.theta1, state.eps, e + 1, clock)
            return new, _point(e, clock, len(t.responders), self.prep, None, 0, True), t
        gsum = self.decoded_sum(t.responders, state.eps, e)
        theta = state.theta
        grad = gsum / self.hyper.m + self.hyper.lam * theta
        eps_real = state.eps.to_real() - self.hyper.mu_at(e) * grad
        new = CodedState(state.theta1, FxMatrix.from_real(eps_real, self.cfg.spec), e + 1, clock)
        pt = _point(e, clock, len(t.responders), self.prep, new.theta, self.hyper.lam, False)
        return new, pt, t


def run_coded_epoch(state: CodedState, runner: CodedRunner):
    """Advance the coded scheme by one epoch; returns (state', TrajectoryPoint)."""
    new, pt, _ = runner.epoch(state)
    return new, pt


# ------------------------------------------------------------------ conventional scheme

@dataclass
class ConventionalState:
    theta: np.ndarray
    epoch: int = 1
    clock: float = 0.0
    batch_uses: np.ndarray | None = None


@dataclass
class ConventionalRunner:
    cfg: RunConfig
    prep: Prepared
    streams: DeviceStreams
    pool: ThreadPoolExecutor | None = None

    def __post_init__(self):
        conv = self.cfg.conventional
        self.dtype = np.dtype(conv.dtype)
        self.n_batches = conv.batches
        self.batches = []
        for dev in self.prep.devices:
            Xs = np.array_split(dev.X.astype(self.dtype), self.n_batches)
            Ys = np.array_split(dev.Y.astype(self.dtype), self.n_batches)
            self.batches.append(list(zip(Xs, Ys)))
        self.profiles = self.cfg.devices.profiles()
        d, c = self.prep.d, self.prep.c
        n_b = math.ceil(self.prep.n / self.n_batches)
        bits, hdr = self.cfg.link.float_bits, self.cfg.link.header_frac
        self.down_bits = message_bits(d * c, bits, hdr)
        self.up_bits = message_bits(d * c, bits, hdr)
        self.rho = conventional_epoch_macs(n_b, d, c)
        self.server_rho = server_macs_conventional(self.cfg.code.D, d, c)
        self.hyper = self.cfg.hyper_for(self.prep.m)
        self.guard = _StepGuard(self.cfg.code.D)
        drop = conv.drop_fraction if self.cfg.scheme == "conventional-drop" else None
        if self.cfg.scheme == "conventional-drop" and drop is None:
            drop = (self.cfg.code.alpha - 1) / self.cfg.code.D
        self.drop = drop

    def timing(self) -> EpochTiming:
        return epoch_time_conventional(self.profiles, self.rho, self.down_bits, self.up_bits,
                                       self.cfg.link.link(), self.streams,
                                       self.cfg.devices.server_rate, self.server_rho, self.drop)

    def _device(self, i: int, batch: int, theta: np.ndarray) -> np.ndarray:
        X, Y = self.batches[i][batch]
        return X.T @ (X @ theta - Y)

    def epoch(self, state: ConventionalState):
        t = self.timing()
        clock = state.clock + t.epoch_time
        e = state.epoch
        if self.cfg.latency_only:
            new = ConventionalState(state.theta, e + 1, clock)
            return new, _point(e, clock, len(t.responders), self.prep, None, 0, True), t
        batch = (e - 1) % self.n_batches
        uses = (np.zeros(self.n_batches, dtype=np.int64) if state.batch_uses is None
                else state.batch_uses.copy())
        uses[batch] += 1
        devices = list(t.responders)
        self.guard.reset()
        self.guard.mark(devices)
        theta = state.theta
        if self.pool is not None:
            grads = list(self.pool.map(lambda i: self._device(i, batch, theta), devices))
        else:
            grads = [self._device(i, batch, theta) for i in devices]
        gsum = np.zeros_like(theta)
        for g in grads:
            gsum += g
        n = sum(self.batches[i][batch][0].shape[0] for i in devices)
        dt = self.dtype.type
        grad = gsum / dt(n) + dt(self.hyper.lam) * theta
        new_theta = (theta - dt(self.hyper.mu_at(e)) * grad).astype(self.dtype)
        new = ConventionalState(new_theta, e + 1, clock, uses)
        pt = _point(e, clock, len(devices), self.prep, new_theta, self.hyper.lam, False)
        return new, pt, t


def run_conventional_epoch(state: ConventionalState, runner: ConventionalRunner):
    """Advance the floating-point baseline by one epoch; returns (state', TrajectoryPoint)."""
    new, pt, _ = runner.epoch(state)
    return new, pt


# ------------------------------------------------------------------ experiment driver

@dataclass
class ExperimentResult:
    config_hash: str
    scheme: str
    trajectory: list[TrajectoryPoint]
    timings: list[EpochTiming]
    sharing_time: float = 0.0
    thetas: list[np.ndarray] | None = None
    code: GradientCode | CyclicLayout | None = None

    def time_to(self, target: float) -> float | None:
        return time_to_target(self.trajectory, target)


def run_experiment(cfg: RunConfig, prep: Prepared | None = None, *,
                   keep_thetas: bool = False, workers: int | None = None) -> ExperimentResult:
    """Run ``cfg.epochs`` epochs of the selected scheme.

    ``prep`` lets several runs share one loaded corpus. The trajectory of the
    coded scheme starts after the sharing phase, so its clock begins at the
    phase time.
    """
    if prep is None:
        prep = prepare_data(cfg)
    workers = cfg.workers if workers is None else workers
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    streams = DeviceStreams(cfg.seed, cfg.code.D)
    traj, timings = [], []
    thetas = [] if keep_thetas else None
    try:
        if cfg.scheme == "coded":
            if cfg.latency_only:
                code = CyclicLayout(cfg.code.D, cfg.code.alpha)
            else:
                code = build_code(cfg.code.D, cfg.code.alpha, cfg.seed, cfg.spec, tol=cfg.code.tol)
            theta1 = initial_theta(cfg, prep.d, prep.c)
            sharing = run_sharing_phase(cfg, code, prep, theta1)
            runner = CodedRunner(cfg, code, prep, sharing, streams, pool)
            state = CodedState(theta1, FxMatrix.zeros(prep.d, prep.c, cfg.spec),
                               clock=sharing.phase_time)
            if thetas is not None:
                thetas.append(state.theta)
            for _ in range(cfg.epochs):
                state, pt, t = runner.epoch(state)
                traj.append(pt)
                timings.append(t)
                if thetas is not None:
                    thetas.append(state.theta)
            return ExperimentResult(cfg.digest(), cfg.scheme, traj, timings,
                                    sharing.phase_time, thetas, code)
        runner = ConventionalRunner(cfg, prep, streams, pool)
        theta1 = initial_theta(cfg, prep.d, prep.c).to_real().astype(runner.dtype)
        state = ConventionalState(theta1)
        if thetas is not None:
            thetas.append(state.theta.astype(np.float64))
        for _ in range(cfg.epochs):
            state, pt, t = runner.epoch(state)
            traj.append(pt)
            timings.append(t)
            if thetas is not None:
                thetas.append(state.theta.astype(np.float64))
        return ExperimentResult(cfg.digest(), cfg.scheme, traj, timings, 0.0, thetas)
    finally:
        if pool is not None:
            pool.shutdown()


# ------------------------------------------------------------------ reporting

def time_to_target(trajectory, target: float) -> float | None:
    """Clock time of the first epoch whose accuracy reaches ``target`` (test if present)."""
    for pt in trajectory:
        acc = pt.accuracy
        if acc is not None and acc >= target:
            return pt.time_s
    return None


def _fmt(x, spec: str) -> str:
    return "" if x is None else format(x, spec)


def trajectory_csv(trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in trajectory:
        w.writerow([p.epoch, f"{p.time_s:.6f}", _fmt(p.train_acc, ".6f"),
                    _fmt(p.test_acc, ".6f"), _fmt(p.loss, ".9g"), p.responders])
    return buf.getvalue()


def write_trajectory_csv(path, trajectory):
    Path(path).write_text(trajectory_csv(trajectory))


def read_trajectory_csv(path) -> list[TrajectoryPoint]:
    def opt(s):
        return float(s) if s != "" else None

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path} is not a trajectory CSV (header {rows[:1]})")
    return [TrajectoryPoint(int(r[0]), float(r[1]), opt(r[2]), opt(r[3]), opt(r[4]), int(r[5]))
            for r in rows[1:]]


def summarize(result: ExperimentResult, cfg: RunConfig,
              baseline: list[TrajectoryPoint] | None = None) -> str:
    traj = result.trajectory
    last = traj[-1]
    lines = [
        f"config_hash: {result.config_hash}",
        f"scheme: {result.scheme}",
        f"devices: {cfg.code.D}",
    ]
    if result.scheme == "coded":
        lines.append(f"alpha: {cfg.code.alpha}")
        lines.append(f"sharing_time_s: {result.sharing_time:.6f}")
    lines += [
        f"epochs: {len(traj)}",
        f"total_time_s: {last.time_s:.6f}",
        f"mean_epoch_time_s: {np.mean([t.epoch_time for t in result.timings]):.6f}",
    ]
    if last.accuracy is not None:
        lines.append(f"final_train_acc: {last.train_acc:.6f}")
        if last.test_acc is not None:
            lines.append(f"final_test_acc: {last.test_acc:.6f}")
        lines.append(f"final_loss: {last.loss:.9g}")
        for target in cfg.targets:
            t = time_to_target(traj, target)
            row = f"time_to_{target:g}: " + ("DNF" if t is None else f"{t:.6f}")
            if baseline is not None:
                tb = time_to_target(baseline, target)
                if t is not None and tb is not None:
                    row += f" (baseline {tb:.6f}, speedup {tb / t:.3f})"
                else:
                    row += " (baseline " + ("DNF" if tb is None else f"{tb:.6f}") + ")"
            lines.append(row)
    elif baseline is not None:
        tb = baseline[min(len(baseline), len(traj)) - 1].time_s
        lines.append(f"baseline_time_at_epoch_{min(len(baseline), len(traj))}_s: {tb:.6f}")
    return "\n".join(lines) + "\n"
