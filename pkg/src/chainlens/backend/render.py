"""Prompt templates and the text-plus-image rendering of queries."""

from __future__ import annotations

import hashlib
import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Union

import numpy as np

from chainlens.core import PixelBox, ValidationError
from chainlens.raster_io import encode_png
from chainlens.superpixel import MARKER_STYLES, build_pyramid, draw_marker

from .queries import MultiChoice, MultiLabel, PairOrder, Presence, Query, SameObject

_TEMPLATE_NAME = re.compile(r"^(?P<id>[a-z0-9_]+)\.v(?P<version>\d+)\.txt$")
LAYERS = ("crop", "context", "full")
COLOR_A = (255, 0, 0)
COLOR_B = (0, 0, 255)

# wording used for the "{direction}" placeholder of per-axis normal prompts
AXIS_DIRECTIONS = {
    "x": "to the right",
    "y": "downward",
    "z": "toward the camera",
}


class TemplateError(KeyError):
    pass


@dataclass(frozen=True)
class Template:
    template_id: str
    version: int
    text: str

    @property
    def key(self) -> str:
        return f"{self.template_id}.v{self.version}"

    def render(self, **values) -> str:
        names = {f for _, f, _, _ in string.Formatter().parse(self.text) if f}
        missing = names - values.keys()
        if missing:
            raise TemplateError(f"template {self.key} needs values for {sorted(missing)}")
        return self.text.format(**values)


class TemplateRegistry:
    """Templates loaded from ``<id>.v<N>.txt`` files; the highest version wins unless pinned."""

    def __init__(self, templates: dict[str, dict[int, Template]] | None = None, pins: dict[str, int] | None = None):
        self._templates = templates or {}
        self.pins = dict(pins or {})

    @classmethod
    def from_directory(cls, path: str | Path, pins: dict[str, int] | None = None) -> "TemplateRegistry":
        reg = cls(pins=pins)
        for p in sorted(Path(path).iterdir()):
            if _TEMPLATE_NAME.match(p.name):
                reg._add(p.name, p.read_text(encoding="utf-8"))
        return reg

    @classmethod
    def default(cls, pins: dict[str, int] | None = None) -> "TemplateRegistry":
        reg = cls(pins=pins)
        for entry in sorted(resources.files("chainlens.templates").iterdir(), key=lambda e: e.name):
            if _TEMPLATE_NAME.match(entry.name):
                reg._add(entry.name, entry.read_text(encoding="utf-8"))
        return reg

    def _add(self, name: str, text: str) -> None:
        m = _TEMPLATE_NAME.match(name)
        t = Template(m["id"], int(m["version"]), text)
        self._templates.setdefault(t.template_id, {})[t.version] = t

    def ids(self) -> list[str]:
        return sorted(self._templates)

    def get(self, template_id: str) -> Template:
        versions = self._templates.get(template_id)
        if not versions:
            raise TemplateError(f"no template named {template_id!r}")
        version = self.pins.get(template_id, max(versions))
        if version not in versions:
            raise TemplateError(f"template {template_id!r} has no version {version}")
        return versions[version]


@dataclass(frozen=True)
class RenderOptions:
    context_factor: float = 2.0
    marker_style: str = "curve"
    layers: tuple[str, ...] = LAYERS
    single_image: bool = False

    def __post_init__(self):
        if self.marker_style not in MARKER_STYLES:
            raise ValidationError(f"unknown marker style {self.marker_style!r}")
        if not self.layers or any(layer not in LAYERS for layer in self.layers):
            raise ValidationError(f"layers must be a non-empty subset of {LAYERS}")
        if self.context_factor < 1:
            raise ValidationError("context_factor must be at least 1")

    def digest(self) -> str:
        return hashlib.sha256(repr((self.context_factor, self.marker_style, self.layers, self.single_image)).encode()).hexdigest()


@dataclass(frozen=True)
class ImagePart:
    """A lazily rendered image; backends that never look at pixels never pay for it."""

    label: str
    build: Callable[[], np.ndarray] = field(repr=False, compare=False)

    def png(self) -> bytes:
        return encode_png(self.build())


Part = Union[str, ImagePart]


@dataclass(frozen=True)
class Prompt:
    template_key: str
    parts: tuple[Part, ...]

    @property
    def text(self) -> str:
        """Text with image positions shown as placeholders; this is what gets cached and logged."""
        return "".join(p if isinstance(p, str) else f"<image:{p.label}>" for p in self.parts)

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]

    def with_suffix(self, text: str) -> "Prompt":
        return Prompt(self.template_key, self.parts + ("\n\n" + text,))


def _once(fn: Callable[[], object]) -> Callable[[], object]:
    memo: list = []

    def call():
        if not memo:
            memo.append(fn())
        return memo[0]

    return call


def _pyramid_parts(image, region, tag: str, opts: RenderOptions, color=COLOR_A) -> list[Part]:
    if opts.single_image:
        return [ImagePart(f"{tag} full", lambda: draw_marker(image, region, opts.marker_style, color))]
    pyramid = _once(lambda: build_pyramid(image, region, opts.context_factor, opts.marker_style, color))
    return [ImagePart(f"{tag} {name}", lambda name=name: getattr(pyramid(), name)) for name in opts.layers]


def _window_parts(image, window: PixelBox, tag: str, opts: RenderOptions) -> list[Part]:
    region = np.zeros(image.shape[:2], dtype=bool)
    region[window.slices()] = True
    crop = ImagePart(f"{tag} crop", lambda: np.ascontiguousarray(image[window.slices()]))
    if window.area == region.size:
        return [crop, ImagePart(f"{tag} full", lambda: image)]
    return [crop, ImagePart(f"{tag} full", lambda: draw_marker(image, region, "rectangle", COLOR_A))]


def _bullets(options) -> str:
    return "\n".join(f"- {o}" for o in options)


def _history_text(history) -> str:
    if not history:
        return ""
    lines = "\n".join(f"region {sid}: {name}" for sid, name in history)
    return f"Labels already assigned to earlier regions of this image:\n{lines}\n"


def render_prompt(query: Query, registry: TemplateRegistry, options: RenderOptions = RenderOptions()) -> Prompt:
    template = registry.get(query.template_id)
    parts: list[Part] = []
    if isinstance(query, MultiChoice):
        header = template.render(
            count=len(query.items),
            options=_bullets(query.choices),
            history=_history_text(query.history),
            example=query.choices[0],
        )
        parts.append(header)
        for n, item in enumerate(query.items, start=1):
            parts.append(f"\nItem {n}:" if item.label is None else f"\nItem {n} (region {item.label}):")
            if item.region is None:
                parts.append(ImagePart(f"item {n}", lambda img=item.image: img))
            else:
                parts.extend(_pyramid_parts(item.image, item.region, f"item {n}", options))
    elif isinstance(query, MultiLabel):
        parts.append(template.render(options=_bullets(query.choices)))
        parts.extend(_window_parts(query.image, query.window, "region", options))
    elif isinstance(query, Presence):
        parts.append(template.render(**{"class": query.class_name}))
        parts.extend(_window_parts(query.image, query.window, "cell", options))
    elif isinstance(query, PairOrder):
        values = {"direction": AXIS_DIRECTIONS[query.axis]} if query.axis != "depth" else {}
        parts.append(template.render(**values))
        if options.single_image:
            both = lambda: draw_marker(
                draw_marker(query.image, query.region_a, options.marker_style, COLOR_A),
                query.region_b, options.marker_style, COLOR_B,
            )
            parts.append("\nRegion A is marked in red and region B in blue.")
            parts.append(ImagePart("pair full", both))
        else:
            parts.append("\nRegion A:")
            parts.extend(_pyramid_parts(query.image, query.region_a, "A", options))
            parts.append("\nRegion B:")
            parts.extend(_pyramid_parts(query.image, query.region_b, "B", options))
    elif isinstance(query, SameObject):
        parts.append(template.render(count=len(query.candidates)))
        parts.append("\nReference:")
        parts.extend(_pyramid_parts(query.image, query.cluster, "reference", options, COLOR_B))
        for n, cand in enumerate(query.candidates, start=1):
            parts.append(f"\nCandidate {n}:")
            parts.extend(_pyramid_parts(query.image, cand, f"candidate {n}", options))
    else:
        raise ValidationError(f"cannot render query kind {query.kind!r}")
    return Prompt(template.key, tuple(parts))


def render_reminder(query: Query, registry: TemplateRegistry) -> str:
    return registry.get("reminder").render(options=", ".join(query.options()))
