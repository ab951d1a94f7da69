"""Sub-task queries and the backends, sessions and caches that answer them."""

from .backends import (
    Backend,
    GroundTruth,
    HttpBackend,
    MissingGroundTruth,
    OracleBackend,
    RandomBackend,
    Reply,
    ScriptedBackend,
    TransportError,
    oracle_answer,
)
from .cost import CostLedger, Price, UnknownModelError, load_prices, record_cost
from .providers import (
    PROFILES,
    ParsedReply,
    PayloadTooLarge,
    ProviderError,
    ResponseFormatError,
    api_key_for,
    build_request,
    endpoint,
    parse_response,
)
from .queries import (
    AXES,
    BINARY_RELATIONS,
    TERNARY_RELATIONS,
    Answer,
    ChoiceItem,
    MultiChoice,
    MultiLabel,
    PairOrder,
    ParseError,
    Presence,
    Query,
    SameObject,
    parse_choice,
    parse_multilabel,
    parse_positional,
)
from .render import Prompt, RenderOptions, TemplateRegistry, render_prompt
from .session import InvalidAnswer, ResponseCache, Session, Transcript, TranscriptEntry, cache_key
