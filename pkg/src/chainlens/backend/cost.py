"""Token accounting against a per-model price table (currency per million tokens)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

PER_TOKENS = 1_000_000


class UnknownModelError(KeyError):
    pass


@dataclass(frozen=True)
class Price:
    input: float
    output: float

    def __post_init__(self):
        if self.input < 0 or self.output < 0:
            raise ValueError("prices must be non-negative")

    def cost(self, input_tokens: int, output_tokens: int) -> float:
        return (input_tokens * self.input + output_tokens * self.output) / PER_TOKENS


def load_prices(path: str | Path | None = None) -> dict[str, Price]:
    """Read a JSON table ``{model_id: {"input": ..., "output": ...}}``; the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("chainlens.backend").joinpath("prices.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {model: Price(float(p["input"]), float(p["output"])) for model, p in json.loads(text).items()}


@dataclass
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0


@dataclass
class CostLedger:
    prices: Mapping[str, Price]
    usage: dict[str, Usage] = field(default_factory=dict)

    def price_of(self, model_id: str) -> Price:
        try:
            return self.prices[model_id]
        except KeyError:
            raise UnknownModelError(f"no price for model {model_id!r}") from None

    def add(self, model_id: str, input_tokens: int, output_tokens: int) -> None:
        if input_tokens < 0 or output_tokens < 0:
            raise ValueError("token counts must be non-negative")
        self.price_of(model_id)
        u = self.usage.setdefault(model_id, Usage())
        u.input_tokens += input_tokens
        u.output_tokens += output_tokens

    def cost(self, model_id: str | None = None) -> float:
        models = self.usage if model_id is None else {model_id: self.usage.get(model_id, Usage())}
        return sum(self.price_of(m).cost(u.input_tokens, u.output_tokens) for m, u in models.items())

    @property
    def total(self) -> float:
        return self.cost()

    def rows(self) -> list[dict]:
        return [
            {
                "model": m,
                "input_tokens": u.input_tokens,
                "output_tokens": u.output_tokens,
                "cost": self.price_of(m).cost(u.input_tokens, u.output_tokens),
            }
            for m, u in sorted(self.usage.items())
        ]


def record_cost(transcript, ledger: CostLedger) -> CostLedger:
    """Add every transcript entry's tokens to ``ledger`` under the entry's model id."""
    for entry in transcript:
        ledger.add(entry.model_id, entry.input_tokens, entry.output_tokens)
    return ledger
