"""Server configuration file (JSON text). Relative paths resolve against the file."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .privacy import DEFAULT_EPSILON_CAP
from .sketch import SketchParams

CONFIG_ENV = "PTAAS_CONFIG"


@dataclass(frozen=True)
class Limits:
    max_epochs: int = 2000
    max_k_retrieve: int = 1000
    max_hidden: int = 256
    max_frame_size: int = 8 * 1024 * 1024
    min_learning_rate: float = 1e-6
    max_learning_rate: float = 10.0


@dataclass(frozen=True)
class PretrainConfig:
    arch: str = "logreg"
    hidden: int = 0
    epochs: int = 300
    learning_rate: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class ServerConfig:
    corpus_path: Path
    base_model_path: Path
    registry_path: Path
    ledger_path: Path | None = None
    audit_log_path: Path | None = None
    store_path: Path | None = None
    listen: str = "127.0.0.1:7878"
    sketch_params: SketchParams = field(default_factory=SketchParams)
    epsilon_cap: float = DEFAULT_EPSILON_CAP
    limits: Limits = field(default_factory=Limits)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    @property
    def address(self) -> tuple[str, int]:
        return parse_address(self.listen)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Path):
                d[k] = str(v)
        d["sketch_params"] = self.sketch_params.to_dict()
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_PATH_KEYS = ("corpus_path", "base_model_path", "registry_path", "ledger_path", "audit_log_path", "store_path")


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"bad address {text!r}, expected host:port")
    return host or "127.0.0.1", int(port)


def load_config(path: str | Path | None = None) -> ServerConfig:
    """Load a server config; ``$PTAAS_CONFIG`` overrides the given path."""
    path = os.environ.get(CONFIG_ENV) or path
    if not path:
        raise ConfigError("no config path given")
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    base = path.parent
    kw = {}
    try:
        for key in _PATH_KEYS:
            if raw.get(key) is not None:
                p = Path(raw[key])
                kw[key] = p if p.is_absolute() else base / p
        for key in ("corpus_path", "base_model_path", "registry_path"):
            if key not in kw:
                raise ConfigError(f"config is missing {key}")
        if "listen" in raw:
            parse_address(raw["listen"])
            kw["listen"] = raw["listen"]
        if "sketch_params" in raw:
            kw["sketch_params"] = SketchParams.from_dict(raw["sketch_params"])
        if "epsilon_cap" in raw:
            kw["epsilon_cap"] = float(raw["epsilon_cap"])
            if not kw["epsilon_cap"] > 0:
                raise ConfigError("epsilon_cap must be > 0")
        if "limits" in raw:
            kw["limits"] = Limits(**raw["limits"])
        if "pretrain" in raw:
            kw["pretrain"] = PretrainConfig(**raw["pretrain"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    unknown = set(raw) - set(_PATH_KEYS) - {"listen", "sketch_params", "epsilon_cap", "limits", "pretrain"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ServerConfig(**kw)
