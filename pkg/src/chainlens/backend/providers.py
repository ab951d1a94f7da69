"""Request bodies and reply decoding for the supported chat APIs."""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass
from typing import Any

from .render import Prompt

MiB = 1024 * 1024


class ProviderError(RuntimeError):
    """A non-retryable provider failure (bad request, auth, unknown profile)."""


class PayloadTooLarge(ProviderError):
    pass


class ResponseFormatError(ProviderError):
    """A reply body without the expected structure; the message names the missing path."""


@dataclass(frozen=True)
class ProviderProfile:
    name: str
    base_url: str
    key_env: str
    max_image_bytes: int


PROFILES: dict[str, ProviderProfile] = {
    "openai-chat": ProviderProfile("openai-chat", "https://api.openai.com", "CHAINLENS_OPENAI_KEY", 20 * MiB),
    "openai-responses": ProviderProfile("openai-responses", "https://api.openai.com", "CHAINLENS_OPENAI_KEY", 20 * MiB),
    "anthropic-messages": ProviderProfile("anthropic-messages", "https://api.anthropic.com", "CHAINLENS_ANTHROPIC_KEY", 5 * MiB),
    "gemini-generate": ProviderProfile(
        "gemini-generate", "https://generativelanguage.googleapis.com", "CHAINLENS_GEMINI_KEY", 20 * MiB
    ),
}


def get_profile(profile: str | ProviderProfile) -> ProviderProfile:
    if isinstance(profile, ProviderProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ProviderError(f"unknown provider profile {profile!r}; expected one of {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class ParsedReply:
    text: str
    input_tokens: int
    output_tokens: int


def _segments(prompt: Prompt, profile: ProviderProfile) -> list[tuple[str, Any]]:
    """Merge adjacent text parts and encode images, checking the size limit before anything is sent."""
    out: list[tuple[str, Any]] = []
    for part in prompt.parts:
        if isinstance(part, str):
            if out and out[-1][0] == "text":
                out[-1] = ("text", out[-1][1] + part)
            else:
                out.append(("text", part))
        else:
            png = part.png()
            if len(png) > profile.max_image_bytes:
                raise PayloadTooLarge(
                    f"image {part.label!r} is {len(png)} bytes, over the {profile.name} limit of {profile.max_image_bytes}"
                )
            out.append(("image", base64.b64encode(png).decode("ascii")))
    return [(kind, value) for kind, value in out if kind == "image" or value]


def _body(profile: str, segments, model: str, max_tokens: int) -> dict:
    if profile == "openai-chat":
        content = [
            {"type": "text", "text": v} if k == "text" else {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{v}"}}
            for k, v in segments
        ]
        return {
            "model": model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0,
            "max_tokens": max_tokens,
        }
    if profile == "openai-responses":
        content = [
            {"type": "input_text", "text": v} if k == "text" else {"type": "input_image", "image_url": f"data:image/png;base64,{v}"}
            for k, v in segments
        ]
        return {
            "model": model,
            "input": [{"role": "user", "content": content}],
            "temperature": 0,
            "max_output_tokens": max_tokens,
        }
    if profile == "anthropic-messages":
        content = [
            {"type": "text", "text": v}
            if k == "text"
            else {"type": "image", "source": {"type": "base64", "media_type": "image/png", "data": v}}
            for k, v in segments
        ]
        return {
            "model": model,
            "max_tokens": max_tokens,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }
    if profile == "gemini-generate":
        parts = [{"text": v} if k == "text" else {"inline_data": {"mime_type": "image/png", "data": v}} for k, v in segments]
        return {
            "contents": [{"role": "user", "parts": parts}],
            "generationConfig": {"temperature": 0, "maxOutputTokens": max_tokens},
        }
    raise ProviderError(f"unknown provider profile {profile!r}")


def build_request(prompt: Prompt, profile: str | ProviderProfile, model: str, max_tokens: int = 256) -> bytes:
    """Serialized JSON body for one user turn; key order is fixed so bodies are byte-stable."""
    prof = get_profile(profile)
    body = _body(prof.name, _segments(prompt, prof), model, max_tokens)
    return json.dumps(body, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def endpoint(profile: str | ProviderProfile, model: str, api_key: str, base_url: str | None = None) -> tuple[str, dict[str, str]]:
    prof = get_profile(profile)
    base = (base_url or prof.base_url).rstrip("/")
    headers = {"content-type": "application/json"}
    if prof.name == "openai-chat":
        url = f"{base}/v1/chat/completions"
        headers["authorization"] = f"Bearer {api_key}"
    elif prof.name == "openai-responses":
        url = f"{base}/v1/responses"
        headers["authorization"] = f"Bearer {api_key}"
    elif prof.name == "anthropic-messages":
        url = f"{base}/v1/messages"
        headers["x-api-key"] = api_key
        headers["anthropic-version"] = "2023-06-01"
    else:
        url = f"{base}/v1beta/models/{model}:generateContent"
        headers["x-goog-api-key"] = api_key
    return url, headers


def api_key_for(profile: str | ProviderProfile, environ=None) -> str:
    prof = get_profile(profile)
    env = os.environ if environ is None else environ
    key = env.get(prof.key_env)
    if not key:
        raise ProviderError(f"set {prof.key_env} to use the {prof.name} backend")
    return key


def _path_text(path) -> str:
    out = ""
    for step in path:
        out += f"[{step}]" if isinstance(step, int) else (f".{step}" if out else step)
    return out


def _dig(doc: Any, path: list[str | int]) -> Any:
    cur = doc
    for n, step in enumerate(path, 1):
        try:
            cur = cur[step]
        except (KeyError, IndexError, TypeError):
            raise ResponseFormatError(f"response is missing {_path_text(path[:n])} (expected {_path_text(path)})") from None
    return cur


def _tokens(doc: Any, path: list[str]) -> int:
    try:
        return int(_dig(doc, path))
    except ResponseFormatError:
        return 0


def parse_response(body: bytes | str, profile: str | ProviderProfile) -> ParsedReply:
    prof = get_profile(profile)
    try:
        doc = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ResponseFormatError(f"response is not JSON: {exc}") from None
    if prof.name == "openai-chat":
        text = _dig(doc, ["choices", 0, "message", "content"])
        tin, tout = _tokens(doc, ["usage", "prompt_tokens"]), _tokens(doc, ["usage", "completion_tokens"])
    elif prof.name == "anthropic-messages":
        text = _dig(doc, ["content", 0, "text"])
        tin, tout = _tokens(doc, ["usage", "input_tokens"]), _tokens(doc, ["usage", "output_tokens"])
    elif prof.name == "gemini-generate":
        text = _dig(doc, ["candidates", 0, "content", "parts", 0, "text"])
        tin = _tokens(doc, ["usageMetadata", "promptTokenCount"])
        tout = _tokens(doc, ["usageMetadata", "candidatesTokenCount"])
    else:
        output = _dig(doc, ["output"])
        texts = [
            c.get("text", "")
            for item in output
            if isinstance(item, dict) and item.get("type") == "message"
            for c in item.get("content", [])
            if isinstance(c, dict) and c.get("type") == "output_text"
        ]
        if not texts:
            raise ResponseFormatError("response is missing output[].content[type=output_text]")
        text = "".join(texts)
        tin, tout = _tokens(doc, ["usage", "input_tokens"]), _tokens(doc, ["usage", "output_tokens"])
    if not isinstance(text, str):
        raise ResponseFormatError("reply text is not a string")
    return ParsedReply(text, tin, tout)
