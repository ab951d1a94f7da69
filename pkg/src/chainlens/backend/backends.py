"""Answer sources: ground-truth oracle, seeded noisy oracle, uniform guesser, and HTTP chat APIs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from chainlens.core import PixelBox, ValidationError
from chainlens.metrics import oracle_relation
from chainlens.raster_io import FloatRaster, IndexMask

from .providers import ParsedReply, ProviderError, api_key_for, build_request, endpoint, get_profile, parse_response
from .queries import MultiChoice, MultiLabel, PairOrder, Presence, Query, SameObject
from .render import Prompt

EQUAL_FRACTION = 0.05


class TransportError(RuntimeError):
    """Network-level failure or a retryable status; the session backs off and retries."""


class MissingGroundTruth(LookupError):
    pass


@dataclass(frozen=True)
class Reply:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0


class Backend:
    backend_id = "base"
    model_id = "none"
    renders_images = False  # only remote backends need pixel payloads
    remote = False

    def respond(self, query: Query, prompt: Prompt) -> Reply:
        raise NotImplementedError


@dataclass(eq=False)
class GroundTruth:
    """Per-image annotations an oracle may consult. Only the fields a task needs must be set."""

    label: str | None = None
    boxes: Sequence[tuple[str, PixelBox]] = ()
    semantic: IndexMask | None = None
    class_names: Sequence[str] = ()
    instance: np.ndarray | None = None
    depth: FloatRaster | None = None
    normals: Sequence[FloatRaster] | None = None
    _ranges: dict = field(default_factory=dict, repr=False)

    def field_for(self, axis: str) -> FloatRaster:
        if axis == "depth":
            if self.depth is None:
                raise MissingGroundTruth("no ground-truth depth for this image")
            return self.depth
        if self.normals is None:
            raise MissingGroundTruth("no ground-truth normals for this image")
        return self.normals["xyz".index(axis)]

    def value_range(self, axis: str) -> float:
        if axis not in self._ranges:
            raster = self.field_for(axis)
            vals = raster.values[raster.valid_mask()]
            self._ranges[axis] = float(vals.max() - vals.min()) if vals.size else 0.0
        return self._ranges[axis]


def _region_mean(raster: FloatRaster, region: np.ndarray) -> float:
    sel = np.asarray(region, dtype=bool) & raster.valid_mask()
    if not sel.any():
        raise MissingGroundTruth("region has no valid ground-truth pixels")
    return float(raster.values[sel].astype(np.float64).mean())


def _majority_class(truth: GroundTruth, region: np.ndarray) -> str:
    if truth.semantic is None:
        raise MissingGroundTruth("no ground-truth mask for this image")
    labels = truth.semantic.labels[np.asarray(region, dtype=bool)]
    labels = labels[labels != truth.semantic.ignore_index]
    if labels.size == 0:
        return truth.class_names[0]
    return truth.class_names[int(np.argmax(np.bincount(labels)))]


def oracle_answer(query: Query, truth: GroundTruth, equal_fraction: float = EQUAL_FRACTION) -> Any:
    """The structured answer the ground truth implies for ``query``."""
    if isinstance(query, MultiChoice):
        out = []
        for item in query.items:
            if item.region is None:
                if truth.label is None:
                    raise MissingGroundTruth("no ground-truth label for this image")
                out.append(truth.label)
            else:
                out.append(_majority_class(truth, item.region))
        return tuple(out)
    if isinstance(query, MultiLabel):
        return frozenset(name for name, box in truth.boxes if name in query.choices and box.intersects(query.window))
    if isinstance(query, Presence):
        return any(name == query.class_name and box.intersects(query.window) for name, box in truth.boxes)
    if isinstance(query, PairOrder):
        raster = truth.field_for(query.axis)
        va, vb = _region_mean(raster, query.region_a), _region_mean(raster, query.region_b)
        tol = equal_fraction * truth.value_range(query.axis) if "equal" in query.relations else None
        return oracle_relation(va, vb, tol)
    if isinstance(query, SameObject):
        if truth.instance is None:
            raise MissingGroundTruth("no ground-truth instance mask for this image")
        inst = np.asarray(truth.instance, dtype=bool)
        return tuple(bool(inst[np.asarray(c, dtype=bool)].mean() > 0.5) for c in query.candidates)
    raise ValidationError(f"oracle cannot answer query kind {query.kind!r}")


class OracleBackend(Backend):
    backend_id = "oracle"
    model_id = "oracle"

    def __init__(self, truths: Mapping[str, GroundTruth], equal_fraction: float = EQUAL_FRACTION):
        self.truths = truths
        self.equal_fraction = equal_fraction

    def truth_for(self, image_id: str) -> GroundTruth:
        try:
            return self.truths[image_id]
        except KeyError:
            raise MissingGroundTruth(f"no ground truth for image {image_id!r}") from None

    def structured(self, query: Query) -> Any:
        if isinstance(query, MultiChoice):
            if len({item.image_id for item in query.items}) > 1:
                # classification batches span several images
                return query.merge([self.structured(q) for q in query.split()])
            image_id = query.items[0].image_id
        else:
            image_id = query.image_id
        return oracle_answer(query, self.truth_for(image_id), self.equal_fraction)

    def respond(self, query, prompt):
        return Reply(query.format(self.structured(query)))


def _flip(value: Any, options: Sequence[str], rng: np.random.Generator) -> Any:
    wrong = [o for o in options if o != value]
    return wrong[int(rng.integers(len(wrong)))] if wrong else value


class ScriptedBackend(OracleBackend):
    """Oracle whose answers are replaced by a uniformly random wrong option with probability ``error_rate``.

    Multi-label answers perturb each option independently. ``mode="add"`` only
    inserts absent labels (never drops a true one); ``mode="flip"`` toggles.
    The generator is seeded per query from (seed, query digest), so answers do
    not depend on the order in which queries arrive.
    """

    backend_id = "scripted"

    def __init__(
        self,
        truths: Mapping[str, GroundTruth],
        error_rate: float,
        seed: int = 0,
        equal_fraction: float = EQUAL_FRACTION,
        kinds: Sequence[str] | None = None,
        multilabel_mode: str = "flip",
    ):
        super().__init__(truths, equal_fraction)
        if not 0.0 <= error_rate <= 1.0:
            raise ValidationError(f"error_rate must lie in [0, 1], got {error_rate}")
        if multilabel_mode not in ("flip", "add"):
            raise ValidationError("multilabel_mode must be 'flip' or 'add'")
        self.error_rate = error_rate
        self.seed = seed
        self.kinds = None if kinds is None else frozenset(kinds)
        self.multilabel_mode = multilabel_mode
        scope = "all" if kinds is None else "+".join(sorted(self.kinds))
        self.model_id = f"scripted-e{error_rate:g}-s{seed}-{scope}-{multilabel_mode}"

    def _rng(self, query: Query) -> np.random.Generator:
        return np.random.default_rng([self.seed, int(query.digest()[:16], 16)])

    def perturb(self, query: Query, value: Any) -> Any:
        if self.error_rate == 0.0 or (self.kinds is not None and query.kind not in self.kinds):
            return value
        rng = self._rng(query)
        eps = self.error_rate
        if isinstance(query, MultiChoice):
            return tuple(_flip(v, query.choices, rng) if rng.random() < eps else v for v in value)
        if isinstance(query, SameObject):
            return tuple((not v) if rng.random() < eps else v for v in value)
        if isinstance(query, Presence):
            return (not value) if rng.random() < eps else value
        if isinstance(query, PairOrder):
            return _flip(value, query.relations, rng) if rng.random() < eps else value
        if isinstance(query, MultiLabel):
            out = set(value)
            for name in query.choices:
                if rng.random() < eps:
                    if name in out and self.multilabel_mode == "flip":
                        out.discard(name)
                    elif name not in out:
                        out.add(name)
            return frozenset(out)
        return value

    def respond(self, query, prompt):
        return Reply(query.format(self.perturb(query, self.structured(query))))


class RandomBackend(Backend):
    """Uniform guesses over each query's option set; a stand-in for a model that cannot see."""

    backend_id = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.model_id = f"random-s{seed}"

    def respond(self, query, prompt):
        rng = np.random.default_rng([self.seed, int(query.digest()[:16], 16)])
        if isinstance(query, MultiChoice):
            value = tuple(query.choices[int(rng.integers(len(query.choices)))] for _ in query.items)
        elif isinstance(query, SameObject):
            value = tuple(bool(rng.random() < 0.5) for _ in query.candidates)
        elif isinstance(query, Presence):
            value = bool(rng.random() < 0.5)
        elif isinstance(query, PairOrder):
            value = query.relations[int(rng.integers(len(query.relations)))]
        elif isinstance(query, MultiLabel):
            value = frozenset(c for c in query.choices if rng.random() < 0.5)
        else:
            raise ValidationError(f"cannot answer query kind {query.kind!r}")
        return Reply(query.format(value))


RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504, 529})


class HttpBackend(Backend):
    renders_images = True
    remote = True

    def __init__(
        self,
        profile: str,
        model: str,
        api_key: str | None = None,
        max_tokens: int = 256,
        base_url: str | None = None,
        client=None,
        timeout: float = 120.0,
    ):
        self.profile = get_profile(profile)
        self.backend_id = self.profile.name
        self.model_id = model
        self.max_tokens = max_tokens
        self.base_url = base_url
        self._api_key = api_key
        self._client = client
        self.timeout = timeout

    @property
    def client(self):
        if self._client is None:
            import httpx

            self._client = httpx.Client(timeout=self.timeout)
        return self._client

    def respond(self, query, prompt):
        import httpx

        body = build_request(prompt, self.profile, self.model_id, self.max_tokens)
        key = self._api_key or api_key_for(self.profile)
        url, headers = endpoint(self.profile, self.model_id, key, self.base_url)
        try:
            resp = self.client.post(url, content=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransportError(f"{self.profile.name}: {exc}") from exc
        if resp.status_code in RETRYABLE_STATUS:
            raise TransportError(f"{self.profile.name}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(f"{self.profile.name}: HTTP {resp.status_code}: {resp.text[:500]}")
        parsed: ParsedReply = parse_response(resp.content, self.profile)
        return Reply(parsed.text, parsed.input_tokens, parsed.output_tokens)
