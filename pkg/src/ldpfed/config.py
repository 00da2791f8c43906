"""Experiment configuration: a flat ``section.key = value`` text format.

Grammar (one entry per line)::

    line    := blank | comment | entry
    comment := optional whitespace, '#', anything
    entry   := key '=' value
    key     := section '.' name        (ASCII letters, digits, '_')
    value   := rest of the line with surrounding whitespace stripped

Keys are case-sensitive and may appear at most once.  Lists are
comma-separated, booleans are ``true``/``false``.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from ldpfed.errors import ConfigError
from ldpfed.ldp_mechanism import DiscretizationSpec
from ldpfed.privacy_scheduler import STRATEGIES, required_rounds

MODES = ("ldp_fed", "non_private", "local_only")
ARMS = ("non_private", "local_only", "baseline", "basic", "single_layer", "proportional")
PERTURB_TARGETS = ("values", "deltas")

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*\.[A-Za-z_][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class ExperimentConfig:
    layers: tuple[int, ...]
    source: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subset: int = 0
    classes: int = 10
    per_class: int = 500
    dim: int = 32
    separation: float = 3.0
    test_fraction: float = 0.2

    clients: int = 10
    k: int = 3
    rounds: int = 30
    lr: float = 0.05
    batch_size: int = 32
    mode: str = "ldp_fed"
    perturb: str = "values"

    alpha: float = 1.0
    strategy: str = "proportional"
    cycles: int = 5
    single_layer_cycles: int = 1
    c: float = 1.0
    rho: int = 2
    bypass: bool = False

    seed: int = 0
    out: str = "ldpfed-out"
    label: str = ""
    arms: tuple[str, ...] = ARMS
    repeats: int = 1
    threads: int = 0
    record_timing: bool = False

    @property
    def q(self) -> float:
        return self.k / self.clients

    @property
    def disc(self) -> DiscretizationSpec:
        return DiscretizationSpec(self.c, self.rho)

    @property
    def arm_label(self) -> str:
        if self.label:
            return self.label
        return self.strategy if self.mode == "ldp_fed" else self.mode

    def cycles_for(self, strategy: str) -> int:
        return self.single_layer_cycles if strategy == "single_layer" else self.cycles

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        values = _flatten(self)
        values.update(_parse_entries(overrides))
        return _build(values)

    def for_arm(self, arm: str) -> "ExperimentConfig":
        """Config for one comparison arm; ``baseline`` keeps the current mode."""
        if arm in STRATEGIES:
            cfg = dataclasses.replace(self, mode="ldp_fed", strategy=arm, label=arm)
        elif arm in MODES:
            cfg = dataclasses.replace(self, mode=arm, label=arm)
        elif arm == "baseline":
            cfg = dataclasses.replace(self, label=arm)
        else:
            raise ConfigError(f"unknown arm {arm!r}; expected one of {ARMS}")
        validate(cfg)
        return cfg


# key -> (field name, parser)
def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _bool(v):
    low = v.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {v!r}")


def _ints(v):
    return tuple(int(p) for p in v.split(",") if p.strip())


def _names(v):
    return tuple(p.strip() for p in v.split(",") if p.strip())


SCHEMA = {
    "data.source": ("source", str),
    "data.train_images": ("train_images", str),
    "data.train_labels": ("train_labels", str),
    "data.test_images": ("test_images", str),
    "data.test_labels": ("test_labels", str),
    "data.subset": ("subset", _int),
    "data.classes": ("classes", _int),
    "data.per_class": ("per_class", _int),
    "data.dim": ("dim", _int),
    "data.separation": ("separation", _float),
    "data.test_fraction": ("test_fraction", _float),
    "model.layers": ("layers", _ints),
    "fed.clients": ("clients", _int),
    "fed.k": ("k", _int),
    "fed.rounds": ("rounds", _int),
    "fed.lr": ("lr", _float),
    "fed.batch_size": ("batch_size", _int),
    "fed.mode": ("mode", str),
    "fed.perturb": ("perturb", str),
    "privacy.alpha": ("alpha", _float),
    "privacy.strategy": ("strategy", str),
    "privacy.cycles": ("cycles", _int),
    "privacy.single_layer_cycles": ("single_layer_cycles", _int),
    "privacy.c": ("c", str),
    "privacy.rho": ("rho", _int),
    "privacy.bypass": ("bypass", _bool),
    "run.seed": ("seed", _int),
    "run.out": ("out", str),
    "run.label": ("label", str),
    "run.arms": ("arms", _names),
    "run.repeats": ("repeats", _int),
    "run.threads": ("threads", _int),
    "run.record_timing": ("record_timing", _bool),
}
REQUIRED = ("data.source", "model.layers")
_FIELD_TO_KEY = {f: k for k, (f, _) in SCHEMA.items()}


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"{origin}:{lineno}: malformed key {key!r}")
        if key in entries:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _parse_entries(entries: dict[str, str]) -> dict[str, object]:
    values = {}
    for key, raw in entries.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        name, conv = SCHEMA[key]
        try:
            values[name] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key}: {raw!r} ({exc})") from None
    return values


def _flatten(cfg: ExperimentConfig) -> dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def _build(values: dict[str, object]) -> ExperimentConfig:
    values = dict(values)
    if "c" in values:
        # keep c exact for the c * 10**rho integrality check
        try:
            spec = DiscretizationSpec(str(values["c"]), values.get("rho", 2))
        except ConfigError as exc:
            raise ConfigError(f"privacy.c / privacy.rho: {exc}") from None
        values["c"] = spec.c
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}")

    if cfg.source not in ("synthetic", "idx"):
        fail("data.source", f"expected 'synthetic' or 'idx', got {cfg.source!r}")
    if cfg.source == "idx":
        for key in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels"):
            if not getattr(cfg, SCHEMA[key][0]):
                fail(key, "required when data.source = idx")
    if len(cfg.layers) < 2 or min(cfg.layers) < 1:
        fail("model.layers", f"need >= 2 positive widths, got {list(cfg.layers)}")
    if cfg.source == "synthetic":
        if cfg.layers[0] != cfg.dim:
            fail("model.layers", f"input width {cfg.layers[0]} != data.dim {cfg.dim}")
        if cfg.layers[-1] != cfg.classes:
            fail("model.layers", f"output width {cfg.layers[-1]} != data.classes {cfg.classes}")
        for key in ("data.classes", "data.per_class", "data.dim"):
            if getattr(cfg, SCHEMA[key][0]) < 1:
                fail(key, "must be >= 1")
        if cfg.separation < 0:
            fail("data.separation", "must be >= 0")
        if not 0 < cfg.test_fraction < 1:
            fail("data.test_fraction", "must lie in (0, 1)")
    if cfg.subset < 0:
        fail("data.subset", "must be >= 0 (0 keeps everything)")
    if cfg.clients < 1:
        fail("fed.clients", "must be >= 1")
    if not 1 <= cfg.k <= cfg.clients:
        fail("fed.k", f"constraint k <= N violated (k={cfg.k}, N={cfg.clients})")
    if cfg.rounds < 1:
        fail("fed.rounds", "must be >= 1")
    if not cfg.lr > 0:
        fail("fed.lr", "must be positive")
    if cfg.batch_size < 1:
        fail("fed.batch_size", "must be >= 1")
    if cfg.mode not in MODES:
        fail("fed.mode", f"expected one of {MODES}, got {cfg.mode!r}")
    if cfg.perturb not in PERTURB_TARGETS:
        fail("fed.perturb", f"expected one of {PERTURB_TARGETS}, got {cfg.perturb!r}")
    if not cfg.alpha > 0:
        fail("privacy.alpha", "must be positive")
    if cfg.strategy not in STRATEGIES:
        fail("privacy.strategy", f"expected one of {STRATEGIES}, got {cfg.strategy!r}")
    for key in ("privacy.cycles", "privacy.single_layer_cycles"):
        value = getattr(cfg, SCHEMA[key][0])
        if not 1 <= value <= cfg.rounds:
            fail(key, f"must lie in [1, fed.rounds={cfg.rounds}], got {value}")
    unknown = [a for a in cfg.arms if a not in ARMS]
    if unknown or not cfg.arms:
        fail("run.arms", f"unknown or empty arms {unknown}; expected a subset of {ARMS}")
    if cfg.repeats < 1:
        fail("run.repeats", "must be >= 1")
    if cfg.threads < 0:
        fail("run.threads", "must be >= 0 (0 = hardware concurrency)")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        fail("run.seed", "must be an unsigned 64-bit integer")
    num_layers = len(cfg.layers) - 1
    if cfg.mode == "ldp_fed" and not cfg.bypass:
        strategy = cfg.strategy
        need = required_rounds(strategy, num_layers, cfg.cycles_for(strategy))
        if cfg.rounds < need:
            key = "privacy.single_layer_cycles" if strategy == "single_layer" else "privacy.cycles"
            fail("fed.rounds", f"{strategy} needs rounds >= {key} * layers = {need}, got {cfg.rounds}")


def from_entries(entries: dict[str, str]) -> ExperimentConfig:
    missing = [k for k in REQUIRED if k not in entries]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}")
    return _build(_parse_entries(entries))


def parse_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read, merge ``overrides`` on top, validate.  Never returns a partial config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    entries = parse_text(text, str(path))
    entries.update(overrides or {})
    return from_entries(entries)


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = (p.strip() for p in pair.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{_FIELD_TO_KEY[f.name]} = {value}")
    return "\n".join(lines) + "\n"
