"""Run configuration: strict schema, reference defaults, YAML/JSON loading."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .fixedpoint import MAX_K, FixedSpec
from .latency import DEFAULT_SERVER_RATE, DeviceProfile, LinkConfig
from .model import Hyper


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class CodeSection(_Strict):
    D: int = Field(25, ge=1)
    alpha: int = Field(23, ge=1)
    tol: float = Field(1e-3, gt=0)


class FixedPointSection(_Strict):
    k: int = Field(48, ge=2, le=MAX_K)
    f: int = Field(24, ge=1)

    @model_validator(mode="after")
    def _f_below_k(self):
        if self.f >= self.k:
            raise ValueError("f must be smaller than k")
        return self

    def spec(self) -> FixedSpec:
        return FixedSpec(self.k, self.f)


class HyperSection(_Strict):
    lam: float = Field(9e-6, ge=0, alias="lambda")
    mu: float = Field(6.0, gt=0)
    mu_schedule: list[tuple[int, float]] = [(200, 0.8), (350, 0.8)]


class DeviceClass(_Strict):
    count: int = Field(ge=1)
    tau: float = Field(gt=0)
    setup_frac: float = Field(0.5, ge=0)
    eta: Optional[float] = Field(None, gt=0)
    p: float = Field(0.1, ge=0, lt=1)


def _default_classes() -> list[DeviceClass]:
    return [DeviceClass(count=n, tau=t) for n, t in ((10, 25e6), (5, 5e6), (5, 2.5e6), (5, 1.25e6))]


class DevicesSection(_Strict):
    classes: list[DeviceClass] = Field(default_factory=_default_classes, min_length=1)
    server_rate: float = Field(DEFAULT_SERVER_RATE, gt=0)

    def profiles(self) -> list[DeviceProfile]:
        out = []
        for cls in self.classes:
            prof = DeviceProfile(tau=cls.tau, p=cls.p, eta=cls.eta, setup_frac=cls.setup_frac,
                                 label=f"{cls.tau:g}")
            out += [prof] * cls.count
        return out


class LinkSection(_Strict):
    gamma_up: float = Field(5e6, gt=0)
    gamma_down: float = Field(10e6, gt=0)
    header_frac: float = Field(0.1, ge=0)
    float_bits: int = Field(32, ge=1)

    def link(self) -> LinkConfig:
        return LinkConfig(self.gamma_up, self.gamma_down, self.header_frac)


class EmbeddingSection(_Strict):
    gamma: float = Field(0.1, gt=0)
    n_features: int = Field(256, ge=1)
    seed: int = 0


class DataSection(_Strict):
    source: Literal["synthetic", "idx", "csv"] = "synthetic"
    m: int = Field(5000, ge=1)
    test_m: int = Field(5000, ge=0)
    raw_dim: int = Field(10, ge=1)
    classes: int = Field(10, ge=1)
    noise: float = Field(0.5, ge=0)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    embedding: Optional[EmbeddingSection] = Field(default_factory=EmbeddingSection)
    headroom: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "idx" and not (self.train_images and self.train_labels):
            raise ValueError("idx source needs train_images and train_labels")
        if self.source == "csv" and not self.train_csv:
            raise ValueError("csv source needs train_csv")
        return self

    @property
    def d(self) -> int:
        return self.embedding.n_features if self.embedding else self.raw_dim


class ConventionalSection(_Strict):
    batches: int = Field(5, ge=1)
    drop_fraction: Optional[float] = Field(None, ge=0, lt=1)
    dtype: Literal["float32", "float64"] = "float32"


class PrivacySection(_Strict):
    pad_guard: bool = True
    zero_keys: bool = False  # diagnostic only: disables padding


class OutputSection(_Strict):
    csv: Optional[str] = None
    summary: Optional[str] = None
    timings_csv: Optional[str] = None


class RunConfig(_Strict):
    seed: int = 0
    scheme: Literal["coded", "conventional", "conventional-drop"] = "coded"
    epochs: int = Field(500, ge=1)
    latency_only: bool = False
    workers: int = Field(1, ge=1)
    theta1_scale: float = Field(0.0, ge=0)
    forced_stragglers: list[int] = []
    targets: list[float] = [0.7, 0.74]
    code: CodeSection = Field(default_factory=CodeSection)
    fixed_point: FixedPointSection = Field(default_factory=FixedPointSection)
    hyper: HyperSection = Field(default_factory=HyperSection)
    devices: DevicesSection = Field(default_factory=DevicesSection)
    link: LinkSection = Field(default_factory=LinkSection)
    data: DataSection = Field(default_factory=DataSection)
    conventional: ConventionalSection = Field(default_factory=ConventionalSection)
    privacy: PrivacySection = Field(default_factory=PrivacySection)
    output: OutputSection = Field(default_factory=OutputSection)

    @property
    def spec(self) -> FixedSpec:
        return self.fixed_point.spec()

    def hyper_for(self, m: int) -> Hyper:
        return Hyper(lam=self.hyper.lam, mu=self.hyper.mu, m=m,
                     mu_schedule=tuple(tuple(x) for x in self.hyper.mu_schedule))

    def digest(self) -> str:
        """Hash of everything that affects results (not output paths or worker count)."""
        doc = self.model_dump(mode="json", by_alias=True, exclude={"output", "workers"})
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _check_consistency(cfg: RunConfig):
    D = cfg.code.D
    if cfg.code.alpha > D:
        raise ConfigError("code.alpha", f"{cfg.code.alpha} exceeds code.D ({D})")
    total = sum(c.count for c in cfg.devices.classes)
    if total != D:
        raise ConfigError("devices.classes", f"count to {total} devices but code.D is {D}")
    for n, i in enumerate(cfg.forced_stragglers):
        if not 0 <= i < D:
            raise ConfigError(f"forced_stragglers.{n}", f"{i} is not a device index in [0, {D})")
    if cfg.data.source != "synthetic" or cfg.latency_only:
        return
    if cfg.data.m < D:
        raise ConfigError("data.m", f"{cfg.data.m} samples cannot fill {D} devices")


def _format_loc(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def config_from_dict(doc: dict, overrides: dict | None = None) -> RunConfig:
    doc = dict(doc or {})
    for dotted, value in (overrides or {}).items():
        node = doc
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(dotted, "cannot override inside a non-mapping")
        node[parts[-1]] = value
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_format_loc(err["loc"]), err["msg"]) from None
    _check_consistency(cfg)
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return config_from_dict({}, overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML/JSON: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a mapping")
    return config_from_dict(doc or {}, overrides)
