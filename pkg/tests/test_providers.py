import json
import os
from pathlib import Path

import httpx
import numpy as np
import pytest

from chainlens.backend import (
    PROFILES,
    HttpBackend,
    PayloadTooLarge,
    Presence,
    Prompt,
    ProviderError,
    ResponseFormatError,
    TemplateRegistry,
    TransportError,
    api_key_for,
    build_request,
    endpoint,
    parse_response,
    render_prompt,
)
from chainlens.backend.render import ImagePart
from chainlens.core import PixelBox

GOLDEN = Path(__file__).parent / "golden"
REGENERATE = os.environ.get("CHAINLENS_REGEN_GOLDEN") == "1"


def fixed_prompt() -> Prompt:
    img = np.zeros((4, 4, 3), np.uint8)
    img[:2, :2] = (255, 0, 0)
    img[2:, 2:] = (0, 0, 255)
    return render_prompt(Presence("img", img, PixelBox(0, 0, 2, 2), "apple"), TemplateRegistry.default())


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_request_golden(profile):
    body = build_request(fixed_prompt(), profile, "test-model", max_tokens=64)
    path = GOLDEN / f"{profile}.json"
    if REGENERATE:
        path.write_bytes(body)
    assert body == path.read_bytes()


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_request_shape(profile):
    doc = json.loads(build_request(fixed_prompt(), profile, "m", 64))
    flat = json.dumps(doc)
    assert flat.count("iVBORw0KGgo") == 2  # both PNG payloads, base64
    assert '"temperature":0' in build_request(fixed_prompt(), profile, "m", 64).decode()
    assert "64" in flat


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_text_only_body(profile):
    doc = json.loads(build_request(Prompt("t.v1", ("Hello", " there", "")), profile, "m"))
    flat = json.dumps(doc)
    assert "Hello there" in flat and "base64" not in flat and "inline_data" not in flat


def test_image_over_limit_rejected_before_send():
    big = np.random.default_rng(0).integers(0, 256, (1400, 1400, 3), dtype=np.uint8)
    prompt = Prompt("t.v1", ("look", ImagePart("big", lambda: big)))
    with pytest.raises(PayloadTooLarge, match="anthropic"):
        build_request(prompt, "anthropic-messages", "m")


def test_endpoints_and_keys():
    url, headers = endpoint("anthropic-messages", "claude", "k")
    assert url == "https://api.anthropic.com/v1/messages"
    assert headers["x-api-key"] == "k" and headers["anthropic-version"] == "2023-06-01"
    url, headers = endpoint("gemini-generate", "gemini-1.5-pro", "g")
    assert url.endswith("/v1beta/models/gemini-1.5-pro:generateContent") and headers["x-goog-api-key"] == "g"
    url, headers = endpoint("openai-chat", "gpt", "o", base_url="http://localhost:9/")
    assert url == "http://localhost:9/v1/chat/completions" and headers["authorization"] == "Bearer o"
    assert api_key_for("openai-chat", {"CHAINLENS_OPENAI_KEY": "x"}) == "x"
    with pytest.raises(ProviderError, match="CHAINLENS_GEMINI_KEY"):
        api_key_for("gemini-generate", {})


REPLIES = {
    "openai-chat": {"choices": [{"message": {"content": "yes"}}], "usage": {"prompt_tokens": 11, "completion_tokens": 1}},
    "openai-responses": {
        "output": [{"type": "message", "content": [{"type": "output_text", "text": "yes"}]}],
        "usage": {"input_tokens": 11, "output_tokens": 1},
    },
    "anthropic-messages": {"content": [{"type": "text", "text": "yes"}], "usage": {"input_tokens": 11, "output_tokens": 1}},
    "gemini-generate": {
        "candidates": [{"content": {"parts": [{"text": "yes"}]}}],
        "usageMetadata": {"promptTokenCount": 11, "candidatesTokenCount": 1},
    },
}


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_parse_response(profile):
    parsed = parse_response(json.dumps(REPLIES[profile]).encode(), profile)
    assert (parsed.text, parsed.input_tokens, parsed.output_tokens) == ("yes", 11, 1)


def test_parse_response_missing_path():
    with pytest.raises(ResponseFormatError, match=r"choices\[0\]\.message\.content"):
        parse_response(b'{"choices": []}', "openai-chat")
    with pytest.raises(ResponseFormatError, match="not JSON"):
        parse_response(b"<html>", "gemini-generate")


def _http_backend(handler, profile="openai-chat"):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpBackend(profile, "gpt-4o-2024-08-06", api_key="k", client=client)


def test_http_backend_roundtrip():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["body"] = request.content
        return httpx.Response(200, json=REPLIES["openai-chat"])

    prompt = fixed_prompt()
    reply = _http_backend(handler).respond(None, prompt)
    assert (reply.text, reply.input_tokens, reply.output_tokens) == ("yes", 11, 1)
    assert seen["url"] == "https://api.openai.com/v1/chat/completions"
    assert seen["body"] == build_request(prompt, "openai-chat", "gpt-4o-2024-08-06")


@pytest.mark.parametrize("status", [429, 500, 503, 529])
def test_http_backend_retryable(status):
    with pytest.raises(TransportError):
        _http_backend(lambda r: httpx.Response(status)).respond(None, fixed_prompt())


def test_http_backend_client_error():
    with pytest.raises(ProviderError, match="401"):
        _http_backend(lambda r: httpx.Response(401, text="bad key")).respond(None, fixed_prompt())


def test_http_backend_connection_error():
    def handler(request):
        raise httpx.ConnectError("refused")

    with pytest.raises(TransportError):
        _http_backend(handler).respond(None, fixed_prompt())
