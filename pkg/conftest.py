"""Shared fixtures: the worked poster example, a fallback font store and random designs."""
import json
import random
import shutil
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from chat_client import ChatClient, ChatTransportError, OpenAIChatClient
from design_model import BBox, Canvas, Design, Element, ElementAttributes, LayerPlan, SemanticRole, TextAttributes
from renderer import FontStore, RenderOptions

FIXTURES = Path(__file__).resolve().parent / "fixtures"
SPRING_CLEAN = FIXTURES / "spring_clean"
CANVAS = Canvas(1080, 1920)


def solid_rgba(width, height, color=(86, 140, 200), alpha=255):
    img = np.zeros((height, width, 4), dtype=np.uint8)
    img[:, :, :3] = color
    img[:, :, 3] = alpha
    return img


def gradient_rgba(width, height):
    ys = np.linspace(0, 255, height, dtype=np.float64)[:, None]
    xs = np.linspace(0, 255, width, dtype=np.float64)[None, :]
    img = np.zeros((height, width, 4), dtype=np.uint8)
    img[:, :, 0] = ys.astype(np.uint8).repeat(width, axis=1)
    img[:, :, 1] = xs.astype(np.uint8).repeat(height, axis=0)
    img[:, :, 2] = 120
    img[:, :, 3] = 255
    return img


def text_attrs(font="Raleway", font_size=68, color=(0, 0, 0), align="center", **kw):
    return TextAttributes(kw.get("angle", 0.0), font, font_size, color, align, kw.get("capitalize", False),
                          kw.get("letter_spacing", 0.0), kw.get("line_height", 1.0))


@pytest.fixture
def spring_clean_elements():
    return [
        Element.image("e0", solid_rgba(1101, 460)),
        Element.image("e1", gradient_rgba(1228, 1842)),
        Element.text("e2", "Spring Clean"),
        Element.text("e3", "Best hacks"),
    ]


@pytest.fixture
def spring_clean_plan():
    roles = {"e0": SemanticRole.BACKGROUND, "e1": SemanticRole.LOGO_IMAGE,
             "e2": SemanticRole.TEXT, "e3": SemanticRole.TEXT}
    return LayerPlan.from_assignment(["e0", "e1", "e2", "e3"], roles)


@pytest.fixture
def spring_clean_attributes():
    return {
        "e0": ElementAttributes("e0", 0, BBox(3, -5, 1101, 460)),
        "e1": ElementAttributes("e1", 1, BBox(-78, 378, 1228, 1842)),
        "e2": ElementAttributes("e2", 2, BBox(98, 375, 874, 125), text_attrs(font_size=125, color=(29, 29, 27))),
        "e3": ElementAttributes("e3", 3, BBox(272, 547, 537, 68), text_attrs(font_size=68)),
    }


@pytest.fixture
def spring_clean_design(spring_clean_elements, spring_clean_plan, spring_clean_attributes):
    return Design(CANVAS, tuple(spring_clean_elements), spring_clean_plan, spring_clean_attributes, "spring_clean")


@pytest.fixture
def spring_clean_record():
    with open(SPRING_CLEAN / "transcript.jsonl", "r", encoding="utf-8") as f:
        return json.loads(f.readline())


@pytest.fixture
def spring_clean_dir(tmp_path, spring_clean_elements):
    """The element manifest with its two rasters written next to it."""
    target = tmp_path / "spring_clean"
    target.mkdir()
    shutil.copy(SPRING_CLEAN / "elements.json", target / "elements.json")
    Image.fromarray(spring_clean_elements[0].image_content, "RGBA").save(target / "element_0.png")
    Image.fromarray(spring_clean_elements[1].image_content, "RGBA").save(target / "element_1.png")
    return target


@pytest.fixture(scope="session")
def font_store():
    return FontStore(None)


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", help="rewrite golden PNGs from the current renderer")


@pytest.fixture
def update_golden(request):
    return request.config.getoption("--update-golden")


@pytest.fixture
def exact_render():
    return RenderOptions(antialias=False)


@pytest.fixture
def font_vocab():
    from codec import load_font_vocab

    return load_font_vocab(Path(__file__).resolve().parent / "fonts" / "font_vocab.txt")


def _random_design(rng: random.Random, max_side=64, max_elements=5, with_text=True, design_id="rand"):
    canvas = Canvas(rng.randint(16, max_side), rng.randint(16, max_side))
    n = rng.randint(1, max_elements)
    elements, roles, attrs = [], {}, {}
    has_background = False
    for k in range(n):
        element_id = f"r{k}"
        if with_text and rng.random() < 0.25:
            elements.append(Element.text(element_id, rng.choice(["Hi", "Sale\n50%", "ok go"])))
            roles[element_id] = SemanticRole.TEXT
            text = text_attrs(font_size=rng.randint(6, 14), color=tuple(rng.randint(0, 255) for _ in range(3)),
                              align=rng.choice(["left", "center", "right"]),
                              angle=rng.choice([0.0, 0.0, 15.0, -30.0]),
                              letter_spacing=float(rng.randint(0, 2)))
        else:
            w, h = rng.randint(1, 12), rng.randint(1, 12)
            raster = np.array([[[rng.randint(0, 255) for _ in range(4)] for _ in range(w)] for _ in range(h)],
                              dtype=np.uint8)
            elements.append(Element.image(element_id, raster))
            choices = [SemanticRole.UNDERLAY, SemanticRole.LOGO_IMAGE, SemanticRole.EMBELLISHMENT]
            if not has_background:
                choices.append(SemanticRole.BACKGROUND)
            roles[element_id] = rng.choice(choices)
            has_background = has_background or roles[element_id] == SemanticRole.BACKGROUND
            text = None
        bbox = BBox(rng.randint(-10, canvas.width), rng.randint(-10, canvas.height),
                    rng.randint(0, canvas.width), rng.randint(0, canvas.height))
        attrs[element_id] = ElementAttributes(element_id, k, bbox, text)
    plan = LayerPlan.from_assignment([e.id for e in elements], roles)
    return Design(canvas, tuple(elements), plan, attrs, design_id)


@pytest.fixture
def random_design():
    """Factory: random_design(rng, max_side=64, max_elements=5, with_text=True)."""
    return _random_design


@pytest.fixture
def write_corpus(tmp_path):
    """Factory writing designs into a corpus directory (designs/*.json + assets)."""
    from dataset_io import save_design

    def _write(designs, root=None, splits=None):
        root = Path(root or tmp_path / "corpus")
        for d in designs:
            save_design(d, root / "designs" / f"{d.id}.json")
        for name, ids in (splits or {}).items():
            (root / "splits").mkdir(parents=True, exist_ok=True)
            (root / "splits" / f"{name}.txt").write_text("\n".join(ids) + "\n", encoding="utf-8")
        return root

    return _write


class ScriptedClient(ChatClient):
    """Chat client answering from a list (or a callable) and recording every request."""

    name = "scripted"

    def __init__(self, replies):
        self.replies = replies
        self.calls = []

    def complete(self, messages, temperature=0.7, top_p=0.95, seed=None):
        self.calls.append({"messages": list(messages), "temperature": temperature, "top_p": top_p, "seed": seed})
        if callable(self.replies):
            return self.replies(messages)
        if not self.replies:
            raise ChatTransportError("script exhausted")
        return self.replies.pop(0)


@pytest.fixture
def scripted_client():
    return ScriptedClient


def _request():
    import httpx

    return httpx.Request("POST", "https://api.example.test/v1/chat/completions")


def auth_error():
    import httpx
    import openai

    return openai.AuthenticationError("invalid api key", response=httpx.Response(401, request=_request()), body=None)


def connection_error():
    import openai

    return openai.APIConnectionError(request=_request())


class RaisingCompletions:
    def __init__(self, error):
        self.error = error
        self.calls = 0

    def create(self, **kwargs):
        self.calls += 1
        raise self.error


def rejecting_openai_client(error, attempts=4):
    """OpenAIChatClient over a fake SDK whose every request raises `error`."""
    completions = RaisingCompletions(error)
    fake = SimpleNamespace(chat=SimpleNamespace(completions=completions))
    return OpenAIChatClient(model="m", client=fake, attempts=attempts, base_delay=0.0), completions
