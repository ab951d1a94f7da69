"""Run manifests: one JSON document fully describing one reproducible run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from chainlens.backend import PROFILES, TERNARY_RELATIONS, BINARY_RELATIONS, RenderOptions
from chainlens.chains import STRATEGIES, GridParams
from chainlens.core import ValidationError
from chainlens.superpixel import MARKER_STYLES

from .dataset import TASKS

ROLES = ("model", "oracle", "specialist", "blind")
OFFLINE_BACKENDS = ("oracle", "scripted", "random")
BACKEND_KINDS = OFFLINE_BACKENDS + tuple(PROFILES)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "oracle"
    model: str | None = None
    error_rate: float = 0.0
    seed: int = 0
    kinds: tuple[str, ...] | None = None  # query kinds the scripted noise applies to
    multilabel_mode: str = "flip"
    max_tokens: int = 256
    base_url: str | None = None
    batching: bool = True

    def validate(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ManifestError(f"backend.kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.kind in PROFILES and not self.model:
            raise ManifestError(f"backend.model is required for {self.kind}")
        if not 0.0 <= self.error_rate <= 1.0:
            raise ManifestError("backend.error_rate must lie in [0, 1]")
        if self.max_tokens < 1:
            raise ManifestError("backend.max_tokens must be positive")


@dataclass(frozen=True)
class ChainConfig:
    k: int = 100
    n_pairs: int = 200
    smooth: float = 1.0
    batch_size: int | None = None  # per-task default when unset
    strategy: str = "regions"
    use_history: bool = True
    relations: tuple[str, ...] | None = None
    coarse: tuple[int, int] = (3, 3)
    fine: tuple[int, int] = (1, 3)
    fine_outer: float = 0.15
    max_iterations: int = 10
    min_window: int = 4
    group_template: str = "same_object"

    def validate(self) -> None:
        if self.k < 1:
            raise ManifestError("chain.k must be at least 1")
        if self.n_pairs < 1:
            raise ManifestError("chain.n_pairs must be at least 1")
        if self.smooth < 0:
            raise ManifestError("chain.smooth must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ManifestError("chain.batch_size must be at least 1")
        if self.strategy not in STRATEGIES:
            raise ManifestError(f"chain.strategy must be one of {STRATEGIES}")
        if self.relations is not None and tuple(self.relations) not in (BINARY_RELATIONS, TERNARY_RELATIONS):
            raise ManifestError(f"chain.relations must be {list(BINARY_RELATIONS)} or {list(TERNARY_RELATIONS)}")
        try:
            self.grid()
        except ValidationError as exc:
            raise ManifestError(f"chain grid: {exc}") from None

    def grid(self) -> GridParams:
        return GridParams(tuple(self.coarse), tuple(self.fine), self.fine_outer, self.max_iterations, self.min_window)


@dataclass(frozen=True)
class RenderConfig:
    context_factor: float = 2.0
    marker_style: str = "curve"
    layers: tuple[str, ...] = ("crop", "context", "full")
    single_image: bool = False

    def options(self) -> RenderOptions:
        try:
            return RenderOptions(self.context_factor, self.marker_style, tuple(self.layers), self.single_image)
        except ValidationError as exc:
            raise ManifestError(f"render: {exc}") from None


@dataclass(frozen=True)
class SessionConfig:
    max_retries: int = 3
    max_in_flight: int = 1

    def validate(self) -> None:
        if self.max_retries < 0:
            raise ManifestError("session.max_retries must be non-negative")
        if self.max_in_flight < 1:
            raise ManifestError("session.max_in_flight must be at least 1")


@dataclass(frozen=True)
class RunManifest:
    task: str
    dataset: Path
    output: Path
    role: str = "model"
    vocab: Path | None = None
    backend: BackendConfig = BackendConfig()
    chain: ChainConfig = ChainConfig()
    render: RenderConfig = RenderConfig()
    session: SessionConfig = SessionConfig()
    templates: dict[str, str] = field(default_factory=dict)  # template id -> replacement id
    template_dir: Path | None = None
    template_pins: dict[str, int] = field(default_factory=dict)
    specialist: Path | None = None
    cache: Path | None = None
    prices: Path | None = None
    seed: int = 0
    limit: int | None = None
    source: Path | None = None  # where the manifest was read from; not serialized

    def validate(self) -> "RunManifest":
        if self.task not in TASKS:
            raise ManifestError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.role not in ROLES:
            raise ManifestError(f"role must be one of {ROLES}, got {self.role!r}")
        if not self.dataset.is_dir():
            raise ManifestError(f"dataset directory {self.dataset} does not exist")
        for name in ("vocab", "template_dir", "specialist", "prices"):
            path = getattr(self, name)
            if path is not None and not path.exists():
                raise ManifestError(f"{name} path {path} does not exist")
        if self.role == "specialist" and self.specialist is None:
            raise ManifestError("a specialist run needs a 'specialist' predictions directory")
        if self.role == "oracle" and self.backend.kind != "oracle":
            raise ManifestError("role 'oracle' requires backend.kind 'oracle'")
        if self.render.marker_style not in MARKER_STYLES:
            raise ManifestError(f"render.marker_style must be one of {MARKER_STYLES}")
        if self.limit is not None and self.limit < 1:
            raise ManifestError("limit must be positive")
        self.backend.validate()
        self.chain.validate()
        self.render.options()
        self.session.validate()
        return self

    @property
    def cache_dir(self) -> Path:
        return self.cache if self.cache is not None else self.output / "cache"

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            if f.name == "source":
                continue
            value = getattr(self, f.name)
            if isinstance(value, Path):
                value = str(value)
            elif hasattr(value, "__dataclass_fields__"):
                value = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(value).items()}
            out[f.name] = value
        return out


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ManifestError(f"{name} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ManifestError(f"unknown {name} keys: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ManifestError(f"{name}: {exc}") from None


_TOP_KEYS = {f.name for f in fields(RunManifest)} - {"source"}


def manifest_from_dict(data: dict, base: Path | None = None) -> RunManifest:
    """Build and validate a manifest; relative paths resolve against ``base``."""
    if not isinstance(data, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    for key in ("task", "dataset", "output"):
        if key not in data:
            raise ManifestError(f"manifest is missing {key!r}")
    base = base or Path.cwd()

    def path(key):
        value = data.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    return RunManifest(
        task=data["task"],
        dataset=path("dataset"),
        output=path("output"),
        role=data.get("role", "model"),
        vocab=path("vocab"),
        backend=_section(BackendConfig, data.get("backend"), "backend"),
        chain=_section(ChainConfig, data.get("chain"), "chain"),
        render=_section(RenderConfig, data.get("render"), "render"),
        session=_section(SessionConfig, data.get("session"), "session"),
        templates=dict(data.get("templates") or {}),
        template_dir=path("template_dir"),
        template_pins={k: int(v) for k, v in (data.get("template_pins") or {}).items()},
        specialist=path("specialist"),
        cache=path("cache"),
        prices=path("prices"),
        seed=int(data.get("seed", 0)),
        limit=data.get("limit"),
    ).validate()


def load_manifest(path: str | Path) -> RunManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None
    m = manifest_from_dict(data, path.parent.resolve())
    return RunManifest(**{**{f.name: getattr(m, f.name) for f in fields(m)}, "source": path})
