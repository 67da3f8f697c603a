"""Chat-completion clients shared by the layer planner and the remote composer backend.

Messages carry text with `<image>` placeholders and one raster per placeholder;
each client turns that into its own wire format.
"""
import base64
import io
import logging
import os
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
from dotenv import load_dotenv
from PIL import Image
from tenacity import (
    RetryCallState, RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential,
)

logger = logging.getLogger(__name__)

IMAGE_TOKEN = "<image>"

# ----------------------
# Configuration
# ----------------------
DEFAULT_OPENAI_MODEL = "gpt-4o"
DEFAULT_OPENAI_KEY_ENV = "OPENAI_API_KEY"
GEMINI_MODEL_NAME = "models/gemini-2.5-pro"
DEFAULT_GEMINI_KEY_ENV = "GOOGLE_API_KEY"
BACKOFF_ATTEMPTS = 4
BACKOFF_BASE_SECONDS = 1.0
BACKOFF_MAX_SECONDS = 60.0

T = TypeVar("T")


class ChatError(RuntimeError):
    pass


class ConfigError(ChatError):
    """Missing endpoint configuration or credentials."""


class ChatTransportError(ChatError):
    """The endpoint stayed unreachable after every backoff attempt."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    images: Tuple[np.ndarray, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise ValueError(f"Unknown chat role {self.role!r}")
        if self.text.count(IMAGE_TOKEN) != len(self.images):
            raise ValueError(
                f"Message has {self.text.count(IMAGE_TOKEN)} image placeholders but {len(self.images)} images"
            )

    def segments(self) -> List[object]:
        """Interleave text pieces and rasters in placeholder order, skipping empty text."""
        pieces = self.text.split(IMAGE_TOKEN)
        out: List[object] = []
        for k, piece in enumerate(pieces):
            if piece:
                out.append(piece)
            if k < len(self.images):
                out.append(self.images[k])
        return out


def png_bytes(raster: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(raster)).save(buf, format="PNG")
    return buf.getvalue()


def png_data_url(raster: np.ndarray) -> str:
    return "data:image/png;base64," + base64.b64encode(png_bytes(raster)).decode("utf-8")


def _log_retry(state: RetryCallState) -> None:
    e = state.outcome.exception()
    logger.warning(f"[Chat] Transport error ({type(e).__name__}: {e}); retrying in {state.next_action.sleep:.1f}s")


def with_backoff(call: Callable[[], T], retriable: Tuple[Type[BaseException], ...],
                 attempts: int = BACKOFF_ATTEMPTS, base_delay: float = BACKOFF_BASE_SECONDS,
                 sleep: Callable[[float], None] = time.sleep) -> T:
    """Run `call`, retrying retriable errors with delays base, 2*base, 4*base, ..."""
    attempts = max(1, attempts)
    retrying = Retrying(
        stop=stop_after_attempt(attempts),
        wait=wait_exponential(multiplier=base_delay, max=BACKOFF_MAX_SECONDS),
        retry=retry_if_exception_type(retriable),
        before_sleep=_log_retry,
        sleep=sleep,
    )
    try:
        return retrying(call)
    except RetryError as e:
        last = e.last_attempt.exception()
        raise ChatTransportError(f"Endpoint unavailable after {attempts} attempts: {last}") from last


def _api_key(env_name: str) -> str:
    load_dotenv()
    key = os.getenv(env_name)
    if not key:
        raise ConfigError(f"{env_name} not found. Create a .env with {env_name}=<your_key>.")
    return key


class ChatClient(ABC):
    name = "chat"
    attempts = BACKOFF_ATTEMPTS
    base_delay = BACKOFF_BASE_SECONDS

    @abstractmethod
    def complete(self, messages: Sequence[ChatMessage], temperature: float = 0.7,
                 top_p: float = 0.95, seed: Optional[int] = None) -> str:
        """Return the assistant text for the conversation so far."""

    @staticmethod
    def retriable_errors() -> Tuple[Type[BaseException], ...]:
        return ()

    @staticmethod
    def sdk_errors() -> Tuple[Type[BaseException], ...]:
        return ()

    def _guarded(self, call: Callable[[], T]) -> T:
        """Backoff on transient errors; any other SDK failure surfaces as ChatError."""
        try:
            return with_backoff(call, self.retriable_errors(), self.attempts, self.base_delay)
        except self.sdk_errors() as e:
            raise ChatError(f"{self.name} request failed ({type(e).__name__}: {e})") from e


class OpenAIChatClient(ChatClient):
    """OpenAI-compatible chat-completions endpoint (OpenAI, OpenRouter, vLLM, ...)."""

    name = "openai"

    def __init__(self, model: str = DEFAULT_OPENAI_MODEL, base_url: Optional[str] = None,
                 api_key_env: str = DEFAULT_OPENAI_KEY_ENV, attempts: int = BACKOFF_ATTEMPTS,
                 base_delay: float = BACKOFF_BASE_SECONDS, client=None):
        self.model = model
        self.attempts = attempts
        self.base_delay = base_delay
        if client is None:
            from openai import OpenAI

            # backoff lives in with_backoff only
            client = OpenAI(base_url=base_url, api_key=_api_key(api_key_env), max_retries=0)
        self.client = client

    @staticmethod
    def retriable_errors() -> Tuple[Type[BaseException], ...]:
        import openai

        return (openai.APIConnectionError, openai.APITimeoutError, openai.RateLimitError,
                openai.InternalServerError)

    @staticmethod
    def sdk_errors() -> Tuple[Type[BaseException], ...]:
        import openai

        return (openai.OpenAIError,)

    @staticmethod
    def to_wire(messages: Sequence[ChatMessage]) -> List[dict]:
        wire = []
        for m in messages:
            if not m.images:
                wire.append({"role": m.role, "content": m.text})
                continue
            parts = []
            for seg in m.segments():
                if isinstance(seg, str):
                    parts.append({"type": "text", "text": seg})
                else:
                    parts.append({"type": "image_url", "image_url": {"url": png_data_url(seg)}})
            wire.append({"role": m.role, "content": parts})
        return wire

    def complete(self, messages, temperature=0.7, top_p=0.95, seed=None) -> str:
        kwargs = dict(model=self.model, messages=self.to_wire(messages), temperature=temperature, top_p=top_p)
        if seed is not None:
            kwargs["seed"] = seed

        def _call():
            completion = self.client.chat.completions.create(**kwargs)
            return completion.choices[0].message.content or ""

        return self._guarded(_call)


class GeminiChatClient(ChatClient):
    """Same contract over google-generativeai."""

    name = "gemini"

    def __init__(self, model: str = GEMINI_MODEL_NAME, api_key_env: str = DEFAULT_GEMINI_KEY_ENV,
                 attempts: int = BACKOFF_ATTEMPTS, base_delay: float = BACKOFF_BASE_SECONDS, model_obj=None):
        self.attempts = attempts
        self.base_delay = base_delay
        if model_obj is None:
            import google.generativeai as genai

            genai.configure(api_key=_api_key(api_key_env))
            model_obj = genai.GenerativeModel(model_name=model)
        self.model = model_obj

    @staticmethod
    def retriable_errors() -> Tuple[Type[BaseException], ...]:
        from google.api_core import exceptions as gexc

        return (gexc.ServiceUnavailable, gexc.ResourceExhausted, gexc.DeadlineExceeded,
                gexc.InternalServerError)

    @staticmethod
    def sdk_errors() -> Tuple[Type[BaseException], ...]:
        from google.api_core import exceptions as gexc

        # response.text raises ValueError on blocked or empty candidates
        return (gexc.GoogleAPIError, ValueError)

    @staticmethod
    def to_wire(messages: Sequence[ChatMessage]) -> List[dict]:
        contents = []
        for m in messages:
            parts = [seg if isinstance(seg, str) else Image.fromarray(np.ascontiguousarray(seg))
                     for seg in m.segments()]
            contents.append({"role": "user" if m.role == "user" else "model", "parts": parts})
        return contents

    def complete(self, messages, temperature=0.7, top_p=0.95, seed=None) -> str:
        config = {"temperature": temperature, "top_p": top_p}

        def _call():
            response = self.model.generate_content(self.to_wire(messages), generation_config=config)
            return response.text.strip()

        return self._guarded(_call)


def make_client(kind: str, model: Optional[str] = None, base_url: Optional[str] = None,
                api_key_env: Optional[str] = None) -> ChatClient:
    if kind == "gemini":
        return GeminiChatClient(model or GEMINI_MODEL_NAME, api_key_env or DEFAULT_GEMINI_KEY_ENV)
    if kind in ("remote", "openai"):
        return OpenAIChatClient(model or DEFAULT_OPENAI_MODEL, base_url, api_key_env or DEFAULT_OPENAI_KEY_ENV)
    raise ConfigError(f"Unknown chat client kind {kind!r}")
