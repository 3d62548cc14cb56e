"""Run configuration: ``key=value`` files, flag overrides, validation and digests."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, Optional

from .encoder import EncoderConfig
from .exceptions import ConfigError, ParseError
from .quest import QuestConfig
from .synth import SceneSpec

# defaults differ per method: d=20 for the training-free model, d=10 with the head
SEGNN_D = 20
SEGPN_D = 10
AGGREGATE_MODES = ("global", "episode")
FORMATS = ("binary", "text")


@dataclass(frozen=True)
class RunConfig:
    d: Optional[int] = None
    theta: float = 30.0
    layers: int = 3
    gamma: float = 1000.0
    k_neigh: int = 16
    k_up: int = 3
    variance: float = 1.0
    freq_mode: str = "abs"
    ways: int = 2
    shots: int = 1
    n_query: int = 2
    episodes_per_combo: int = 100
    kernel: int = 32
    hidden: int = 192
    lr: float = 1e-3
    weight_decay: float = 1e-4
    halve_every: int = 7000
    temperature: float = 10.0
    episodes: int = 2000
    seed: int = 0
    seeds: int = 20
    objects_per_class: int = 20
    n_points: int = 2048
    n_scenes: int = 80
    points_per_object: int = 550
    color_shuffle: bool = False
    aggregate: str = "global"
    include_background: bool = False
    dump_predictions: bool = False
    ckpt_every: int = 0
    format: str = "binary"
    corpus: Optional[str] = None
    ckpt: Optional[str] = None
    out: Optional[str] = None

    def with_defaults(self, method: str) -> "RunConfig":
        """Fill ``d`` with the method's default when unset."""
        if self.d is not None:
            return self
        return replace(self, d=SEGPN_D if method == "segpn" else SEGNN_D)

    def validate(self) -> "RunConfig":
        positive = ("theta", "gamma", "variance", "lr", "temperature")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        at_least_one = ("layers", "k_neigh", "k_up", "ways", "shots", "n_query", "episodes_per_combo", "kernel",
                        "hidden", "halve_every", "n_points", "n_scenes", "points_per_object", "seeds",
                        "objects_per_class")
        for name in at_least_one:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("episodes", "ckpt_every", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.d is not None and self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.aggregate not in AGGREGATE_MODES:
            raise ConfigError(f"aggregate must be one of {AGGREGATE_MODES}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.n_points < 2**self.layers:
            raise ConfigError(f"n_points={self.n_points} is too small for {self.layers} halving layers")
        # let the owning modules check their own preconditions too
        self.encoder_config(self.d or SEGNN_D)
        self.quest_config()
        self.scene_spec()
        return self

    def encoder_config(self, d: Optional[int] = None) -> EncoderConfig:
        return EncoderConfig(
            d=d or self.d, theta=self.theta, layers=self.layers, k_neigh=self.k_neigh, k_up=self.k_up,
            variance=self.variance, seed=self.seed, freq_mode=self.freq_mode,
        )

    def quest_config(self) -> QuestConfig:
        return QuestConfig(
            hidden=self.hidden, kernel=self.kernel, temperature=self.temperature, lr=self.lr,
            weight_decay=self.weight_decay, halve_every=self.halve_every, ckpt_every=self.ckpt_every,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(points_per_object=self.points_per_object, color_shuffle=self.color_shuffle)

    def as_dict(self) -> Dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    text = raw.strip()
    if "Optional" in str(kind) and text.lower() in ("", "none", "null"):
        return None
    try:
        if "bool" in str(kind):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in str(kind):
            return int(text)
        if "float" in str(kind):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> Dict:
    """``key = value`` lines; ``#`` starts a comment; keys accept ``-`` or ``_``."""
    values = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, f"line {no}", f"expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ParseError(source, f"line {no}", f"unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ConfigError as e:
            raise ParseError(source, f"line {no}", str(e)) from None
    return values


def load_config(path=None, overrides: Optional[Dict] = None) -> RunConfig:
    """File values first, then non-``None`` overrides (command-line flags)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: config file not found")
        values.update(parse_config_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in sorted(cfg.as_dict().items()))


def file_digest(path) -> str:
    """SHA-256 of a file, or of a directory's files in sorted relative-path order."""
    p = Path(path)
    h = hashlib.sha256()
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        if p.is_dir():
            h.update(str(q.relative_to(p)).encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def digest_view(cfg: RunConfig, inputs=("corpus", "ckpt")) -> Dict:
    """The settings that determine results.

    Output locations are dropped and the ``inputs`` paths replaced by content
    hashes, so reruns in other directories share a digest.
    """
    view = cfg.as_dict()
    view.pop("out")
    for key in ("corpus", "ckpt"):
        if key not in inputs:
            view.pop(key)
        elif view[key] is not None and Path(view[key]).exists():
            view[key] = "sha256:" + file_digest(view[key])
    return view
