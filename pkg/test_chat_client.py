from types import SimpleNamespace

import numpy as np
import pytest

from chat_client import (
    ChatError, ChatMessage, ChatTransportError, ConfigError, GeminiChatClient, OpenAIChatClient, make_client,
    png_data_url, with_backoff,
)
from conftest import auth_error, connection_error, rejecting_openai_client


def _pixel():
    return np.zeros((1, 1, 3), dtype=np.uint8)


def test_message_needs_one_image_per_placeholder():
    with pytest.raises(ValueError):
        ChatMessage("user", "look <image> and <image>", (_pixel(),))
    with pytest.raises(ValueError):
        ChatMessage("system", "hi")


def test_segments_interleave_text_and_images():
    img = _pixel()
    msg = ChatMessage("user", "<image> then <image>.", (img, img))
    segs = msg.segments()
    assert isinstance(segs[0], np.ndarray)
    assert segs[1] == " then "
    assert segs[-1] == "."
    assert len(segs) == 4


def test_png_data_url_prefix():
    assert png_data_url(_pixel()).startswith("data:image/png;base64,")


def test_backoff_delays_double_then_give_up():
    delays = []

    def _fail():
        raise ConnectionError("down")

    with pytest.raises(ChatTransportError):
        with_backoff(_fail, (ConnectionError,), attempts=4, base_delay=1.0, sleep=delays.append)
    assert delays == [1.0, 2.0, 4.0]


def test_backoff_returns_first_success():
    attempts = iter([ConnectionError("x"), "ok"])

    def _call():
        value = next(attempts)
        if isinstance(value, Exception):
            raise value
        return value

    assert with_backoff(_call, (ConnectionError,), sleep=lambda s: None) == "ok"


def test_backoff_does_not_retry_other_errors():
    calls = []

    def _bad():
        calls.append(1)
        raise KeyError("no")

    with pytest.raises(KeyError):
        with_backoff(_bad, (ConnectionError,), sleep=lambda s: None)
    assert len(calls) == 1


class _FakeCompletions:
    def __init__(self):
        self.kwargs = None

    def create(self, **kwargs):
        self.kwargs = kwargs
        return SimpleNamespace(choices=[SimpleNamespace(message=SimpleNamespace(content="background"))])


def test_openai_client_sends_images_as_parts():
    completions = _FakeCompletions()
    fake = SimpleNamespace(chat=SimpleNamespace(completions=completions))
    client = OpenAIChatClient(model="m", client=fake)
    out = client.complete([ChatMessage("user", "x <image>", (_pixel(),))], temperature=0.0, top_p=1.0, seed=3)
    assert out == "background"
    sent = completions.kwargs
    assert sent["model"] == "m" and sent["seed"] == 3 and sent["temperature"] == 0.0
    parts = sent["messages"][0]["content"]
    assert [p["type"] for p in parts] == ["text", "image_url"]


def test_plain_text_messages_stay_strings():
    wire = OpenAIChatClient.to_wire([ChatMessage("assistant", "{}")])
    assert wire == [{"role": "assistant", "content": "{}"}]


def test_gemini_roles_map_to_model():
    contents = GeminiChatClient.to_wire([ChatMessage("user", "a"), ChatMessage("assistant", "b")])
    assert [c["role"] for c in contents] == ["user", "model"]


def test_missing_key_is_a_config_error(monkeypatch):
    monkeypatch.setattr("chat_client.load_dotenv", lambda: None)
    monkeypatch.delenv("LAYERED_TEST_NO_KEY", raising=False)
    with pytest.raises(ConfigError):
        make_client("remote", api_key_env="LAYERED_TEST_NO_KEY")
    with pytest.raises(ConfigError):
        make_client("carrier-pigeon")


def test_sdk_errors_surface_as_chat_errors():
    client, completions = rejecting_openai_client(auth_error())
    with pytest.raises(ChatError) as exc:
        client.complete([ChatMessage("user", "hi")])
    assert not isinstance(exc.value, ChatTransportError)
    assert "AuthenticationError" in str(exc.value)
    assert completions.calls == 1


def test_connection_errors_are_retried_then_reported():
    client, completions = rejecting_openai_client(connection_error(), attempts=3)
    with pytest.raises(ChatTransportError):
        client.complete([ChatMessage("user", "hi")])
    assert completions.calls == 3


def test_sdk_client_does_not_retry_on_its_own(monkeypatch):
    built = {}

    def _fake_openai(**kwargs):
        built.update(kwargs)
        return SimpleNamespace()

    monkeypatch.setattr("openai.OpenAI", _fake_openai)
    monkeypatch.setattr("chat_client.load_dotenv", lambda: None)
    monkeypatch.setenv("LAYERED_TEST_KEY", "k")
    OpenAIChatClient(api_key_env="LAYERED_TEST_KEY")
    assert built["max_retries"] == 0
    assert built["api_key"] == "k"
