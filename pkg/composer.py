"""Layered composition loop.

For each of the five layers the composer builds the turn, asks a backend for the
layer's JSON, parses it (with a bounded number of repair prompts), renders the
next canvas state and feeds it into the following turn.
"""
import json
import logging
import math
import random
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Collection, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from chat_client import ChatClient, ChatMessage
from codec import (
    CodecError, Conversation, LayerInput, LayerOutput, Turn, assign_indices, build_layer_inputs,
    build_turn, parse_layer_output, preamble, serialize_layer_output,
)
from design_model import (
    ROLES_IN_ORDER, BBox, Canvas, CanvasState, Design, Element, ElementAttributes, LayerPlan, SemanticRole,
    TextAttributes, area,
)
from layer_planner import PlannerMode, plan_layers
from renderer import FontStore, RenderOptions, blank_canvas, composite_layer, overlay_elements

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_TOP_P = 0.95
DEFAULT_RETRIES = 2

REPAIR_INSTRUCTION = (
    "Your previous answer could not be parsed. Answer again with exactly one JSON object per announced "
    "element and nothing else; every object needs the keys index, left, top, width and height, and text "
    "elements also need angle, font, font_size, color, text_align, capitalize, letter_spacing and line_height."
)


class ComposeError(RuntimeError):
    pass


class LayerFailed(ComposeError):
    def __init__(self, turn: int, cause: Exception):
        super().__init__(f"Layer {turn} ({SemanticRole(turn).label}) failed: {cause}")
        self.turn = turn
        self.cause = cause


class InvalidPrefix(ComposeError):
    pass


class BackendCapabilityError(ComposeError):
    pass


# ----------------------
# Options and trace
# ----------------------

@dataclass(frozen=True)
class ComposeOptions:
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    retries: int = DEFAULT_RETRIES
    seed: Optional[int] = None
    font_vocab: Optional[Collection[str]] = None
    font_store: Optional[FontStore] = field(default=None, compare=False)
    render_options: RenderOptions = RenderOptions()
    jobs: int = 1
    layered: bool = True

    def __post_init__(self):
        if self.retries < 0:
            raise ValueError(f"retries must be >= 0, got {self.retries}")

    def store(self) -> FontStore:
        return self.font_store if self.font_store is not None else _default_store()


_STORE: Optional[FontStore] = None


def _default_store() -> FontStore:
    global _STORE
    if _STORE is None:
        _STORE = FontStore(None)
    return _STORE


@dataclass
class CompositionTrace:
    conversation: Conversation
    states: List[CanvasState] = field(default_factory=list, repr=False)
    layer_seconds: Dict[int, float] = field(default_factory=dict)
    retries: Dict[int, int] = field(default_factory=dict)
    queried: List[int] = field(default_factory=list)

    @property
    def backend_calls(self) -> int:
        return len(self.queried) + sum(self.retries.values())

    def to_json(self) -> dict:
        return {
            "design_id": self.conversation.design_id,
            "seed": self.conversation.seed,
            "variant": self.conversation.variant,
            "queried_turns": list(self.queried),
            "retries": {str(k): v for k, v in sorted(self.retries.items())},
            "turns": [{"human": t.human, "assistant": t.assistant, "images": list(t.slots)}
                      for t in self.conversation.turns],
        }


# ----------------------
# Backends
# ----------------------

@dataclass(frozen=True)
class BackendCapabilities:
    supports_variants: bool
    deterministic: bool
    max_parallel: Optional[int] = None


@dataclass(frozen=True)
class TurnContext:
    turn: int
    layer_input: LayerInput
    design: Design
    state: Optional[CanvasState] = field(default=None, repr=False)
    messages: Tuple[ChatMessage, ...] = field(default=(), repr=False)
    retry: int = 0
    seed: Optional[int] = None
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    font_vocab: Optional[Collection[str]] = None


class Backend(ABC):
    name = "backend"
    capabilities = BackendCapabilities(supports_variants=False, deterministic=True)

    @abstractmethod
    def respond(self, ctx: TurnContext) -> str:
        """Assistant text for the layer announced in ctx.layer_input."""


class ReplayBackend(Backend):
    """Answers from a recorded transcript; each turn may list several attempts for repair replays."""

    name = "replay"
    capabilities = BackendCapabilities(supports_variants=False, deterministic=True)

    def __init__(self, turns: Sequence[Union[str, Sequence[str]]]):
        if len(turns) != len(ROLES_IN_ORDER):
            raise ValueError(f"Replay transcript needs {len(ROLES_IN_ORDER)} assistant turns, got {len(turns)}")
        self.turns = [(t,) if isinstance(t, str) else tuple(t) for t in turns]

    @classmethod
    def from_record(cls, record: dict) -> "ReplayBackend":
        turns = []
        for c in record.get("conversations", []):
            if c.get("from") == "gpt":
                turns.append(tuple(c.get("attempts", ())) + (c["value"],))
        return cls(turns)

    @classmethod
    def from_jsonl(cls, path, record: Union[int, str] = 0) -> "ReplayBackend":
        with open(path, "r", encoding="utf-8") as f:
            rows = [json.loads(line) for line in f if line.strip()]
        if isinstance(record, str):
            matches = [r for r in rows if r.get("id") == record]
            if not matches:
                raise ValueError(f"No conversation with id {record!r} in {path}")
            return cls.from_record(matches[0])
        return cls.from_record(rows[record])

    def respond(self, ctx: TurnContext) -> str:
        attempts = self.turns[ctx.turn - 1]
        return attempts[min(ctx.retry, len(attempts) - 1)]


class RemoteChatBackend(Backend):
    name = "remote"
    capabilities = BackendCapabilities(supports_variants=True, deterministic=False)

    def __init__(self, client: ChatClient, max_parallel: Optional[int] = None):
        self.client = client
        self.capabilities = BackendCapabilities(True, False, max_parallel)

    def respond(self, ctx: TurnContext) -> str:
        return self.client.complete(list(ctx.messages), ctx.temperature, ctx.top_p, ctx.seed)


# ----------------------
# Heuristic layout
# ----------------------

MARGIN_RATIO = 0.06
IMAGE_ZONE_RATIO = 0.55
UNDERLAY_WIDTH_RATIO = 0.90
FONT_LADDER = (0.065, 0.045, 0.032, 0.026)
TEXT_LINE_HEIGHT = 1.2
DEFAULT_FONT = "Raleway"
MIN_AREA_RATIO = 0.0015


def _fit(w: int, h: int, box: BBox) -> BBox:
    """Largest aspect-preserving box inside `box`, centered."""
    if w <= 0 or h <= 0 or box.width <= 0 or box.height <= 0:
        return BBox(box.left, box.top, max(box.width, 1), max(box.height, 1))
    scale = min(box.width / float(w), box.height / float(h))
    fw, fh = max(1, int(w * scale)), max(1, int(h * scale))
    return BBox(box.left + (box.width - fw) // 2, box.top + (box.height - fh) // 2, fw, fh)


def _nudge(box: BBox, cell: BBox, rng: random.Random, floor: float) -> BBox:
    """Seeded shrink and shift of `box` inside `cell`, never below `floor` area."""
    scale = rng.uniform(0.8, 1.0)
    w, h = max(1, int(box.width * scale)), max(1, int(box.height * scale))
    if w * h < floor:
        w, h = box.width, box.height
    x = cell.left + rng.randint(0, max(0, cell.width - w))
    y = cell.top + rng.randint(0, max(0, cell.height - h))
    return BBox(x, y, w, h)



def _grid(n: int, zone: BBox, gap: int) -> List[BBox]:
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / float(cols)))
    cw = max(1, (zone.width - gap * (cols - 1)) // cols)
    ch = max(1, (zone.height - gap * (rows - 1)) // rows)
    return [BBox(zone.left + (k % cols) * (cw + gap), zone.top + (k // cols) * (ch + gap), cw, ch) for k in range(n)]


def _luminance(raster: Optional[np.ndarray], b: BBox) -> float:
    if raster is None:
        return 255.0
    h, w = raster.shape[:2]
    x0, y0, x1, y1 = max(b.left, 0), max(b.top, 0), min(b.right, w), min(b.bottom, h)
    if x1 <= x0 or y1 <= y0:
        return 255.0
    region = raster[y0:y1, x0:x1, :3].astype(np.float64)
    return float((region @ np.array([0.299, 0.587, 0.114])).mean())


class HeuristicComposer(Backend):
    """Rule-based layouts: full-bleed background, images above stacked centered texts, corner embellishments.

    With a seed, the zone split, image scale and position, underlay width, embellishment corners and
    text sizes and positions get a small seeded jitter.
    """

    name = "heuristic"
    capabilities = BackendCapabilities(supports_variants=True, deterministic=True)

    def layout(self, design: Design, seed: Optional[int],
               font_vocab: Optional[Collection[str]] = None) -> Dict[str, Tuple[BBox, Optional[dict]]]:
        canvas, plan = design.canvas, design.plan
        W, H = canvas.width, canvas.height
        rng = random.Random(seed) if seed is not None else None

        def jitter(amount: float) -> float:
            return rng.uniform(-amount, amount) if rng is not None else 0.0

        m = max(2, int(round(MARGIN_RATIO * min(W, H))))
        gap = max(1, m // 2)
        content = BBox(m, m, max(1, W - 2 * m), max(1, H - 2 * m))
        out: Dict[str, Tuple[BBox, Optional[dict]]] = {}

        for i in plan.members(SemanticRole.BACKGROUND):
            out[i] = (BBox(0, 0, W, H), None)

        images = sorted(plan.members(SemanticRole.LOGO_IMAGE), key=lambda i: -design.element(i).intrinsic_area)
        texts = list(plan.members(SemanticRole.TEXT))
        if images and texts:
            split = int(content.height * (IMAGE_ZONE_RATIO + jitter(0.05)))
            image_zone = BBox(content.left, content.top, content.width, max(1, split - gap // 2))
            text_top = content.top + split + gap // 2
            text_zone = BBox(content.left, text_top, content.width, max(1, content.bottom - text_top))
        else:
            image_zone = text_zone = content

        if images:
            cells = [image_zone] if len(images) == 1 else _grid(len(images), image_zone, gap)
            for i, cell in zip(images, cells):
                e = design.element(i)
                fitted = _fit(e.intrinsic_width, e.intrinsic_height, cell)
                if area(fitted) < MIN_AREA_RATIO * canvas.area:
                    # extreme aspect ratios get stretched to their cell
                    fitted = cell
                if rng is not None:
                    fitted = _nudge(fitted, cell, rng, MIN_AREA_RATIO * canvas.area)
                out[i] = (fitted, None)

        underlays = plan.members(SemanticRole.UNDERLAY)
        if underlays:
            uw = int(W * (UNDERLAY_WIDTH_RATIO + jitter(0.05)))
            band = max(1, text_zone.height // len(underlays))
            for k, i in enumerate(underlays):
                out[i] = (BBox((W - uw) // 2, text_zone.top + k * band, uw, band), None)

        if texts:
            vocab = sorted(font_vocab) if font_vocab else [DEFAULT_FONT]
            font = DEFAULT_FONT if DEFAULT_FONT in vocab else vocab[0]
            row = max(1, text_zone.height // len(texts))
            for k, i in enumerate(texts):
                n_lines = design.element(i).text_content.count("\n") + 1
                ladder = FONT_LADDER[min(k, len(FONT_LADDER) - 1)] * (1.0 + jitter(0.1))
                size = int(round(ladder * H))
                size = max(1, min(size, int(row / (n_lines * TEXT_LINE_HEIGHT))))
                height = min(row, max(1, int(math.ceil(size * TEXT_LINE_HEIGHT * n_lines))))
                slack = row - height
                top = text_zone.top + k * row + slack // 2 + int(jitter(slack / 4.0))
                bbox = BBox(content.left, top, content.width, height)
                out[i] = (bbox, {"font": font, "font_size": size})

        embellishments = plan.members(SemanticRole.EMBELLISHMENT)
        if embellishments:
            s = max(m - 2, int(math.ceil(math.sqrt(MIN_AREA_RATIO * canvas.area))))
            spots = [(1, 1), (W - s - 1, 1), (1, H - s - 1), (W - s - 1, H - s - 1)]
            if rng is not None:
                rng.shuffle(spots)
            extra = len(embellishments) - len(spots)
            for k in range(max(0, extra)):
                spots.append((m + (k + 1) * (W - 2 * m - s) // (extra + 1), 1))
            for i, (x, y) in zip(embellishments, spots):
                e = design.element(i)
                fitted = _fit(e.intrinsic_width, e.intrinsic_height, BBox(x, y, s, s))
                if area(fitted) < MIN_AREA_RATIO * canvas.area:
                    fitted = BBox(x, y, s, s)
                out[i] = (fitted, None)
        return out

    def respond(self, ctx: TurnContext) -> str:
        boxes = self.layout(ctx.design, ctx.seed, ctx.font_vocab)
        records = []
        for item in ctx.layer_input.items:
            bbox, text = boxes[item.element.id]
            attrs = None
            if text is not None:
                color = (0, 0, 0) if _luminance(ctx.state.image if ctx.state else None, bbox) >= 128 else (255, 255, 255)
                attrs = TextAttributes(0.0, text["font"], text["font_size"], color, "center", False, 0.0,
                                       TEXT_LINE_HEIGHT)
            records.append(ElementAttributes(item.element.id, item.index, bbox, attrs))
        return serialize_layer_output(LayerOutput(tuple(records)))


def make_backend(kind: str, client: Optional[ChatClient] = None, transcript: Optional[str] = None,
                 record: Union[int, str] = 0) -> Backend:
    if kind == "heuristic":
        return HeuristicComposer()
    if kind == "replay":
        if transcript is None:
            raise ValueError("The replay backend needs a transcript")
        return ReplayBackend.from_jsonl(transcript, record)
    if kind in ("remote", "gemini"):
        if client is None:
            raise ValueError(f"The {kind} backend needs a chat client")
        return RemoteChatBackend(client)
    raise ValueError(f"Unknown backend {kind!r}")


# ----------------------
# Composition loop
# ----------------------

def _run(design: Design, requested: Set[str], layers: Set[int], backend: Backend, opts: ComposeOptions,
         variant: str = "layered") -> Tuple[Design, CompositionTrace]:
    """Query the backend for every layer in `layers` (empty ones too) to place `requested`.

    Every other element must already be attributed; its layer turn is synthesized from the given records.
    """
    canvas, plan = design.canvas, design.plan
    given = {i: a for i, a in design.attributes.items() if i not in requested}
    indices = assign_indices(plan, {i: a.index for i, a in given.items()})
    inputs = build_layer_inputs(design.elements, plan, indices)
    store = opts.store()
    ropts = opts.render_options

    states = [CanvasState.at(0, blank_canvas(canvas, ropts))]
    conv = Conversation(preamble(canvas), [], {}, design.id, opts.seed, variant if opts.layered else "unlayered")
    trace = CompositionTrace(conv, states)
    history: List[ChatMessage] = []
    attributes: Dict[str, ElementAttributes] = dict(given)
    current = Design(canvas, design.elements, plan, dict(attributes), design.id)

    for i, role in enumerate(ROLES_IN_ORDER, start=1):
        started = time.perf_counter()
        full = inputs[role]
        wanted = [item.element.id for item in full.items if item.element.id in requested]
        prev = states[-1]
        prev_for_turn = prev if i > 1 and opts.layered else None
        if wanted and i not in layers:
            raise InvalidPrefix(f"Layer {role.label} has elements to place but is not queried")
        if i not in layers:
            layer_input = full
            message = build_turn(i, layer_input, prev_for_turn, canvas, with_state=opts.layered)
            records = tuple(attributes[item.element.id] for item in full.items)
            assistant = serialize_layer_output(LayerOutput(records))
        else:
            layer_input = full.subset(set(wanted))
            shown = prev_for_turn
            context_ids = [item.element.id for item in full.items if item.element.id not in requested]
            if context_ids and shown is not None:
                shown = CanvasState.at(prev.level, overlay_elements(prev, current, context_ids, store, ropts))
            message = build_turn(i, layer_input, shown, canvas, with_state=opts.layered)
            output = _query(i, layer_input, message, history, current, shown, backend, opts, trace)
            for rec in output.records:
                attributes[rec.element_id] = rec
            assistant = serialize_layer_output(output)
            trace.queried.append(i)

        slot_names = _bind_slots(conv, i, message, layer_input)
        conv.turns.append(Turn(message.text, assistant, slot_names))
        history += [message, ChatMessage("assistant", assistant)]
        current = Design(canvas, design.elements, plan, dict(attributes), design.id)
        states.append(composite_layer(prev, current, role, store, ropts))
        trace.layer_seconds[i] = time.perf_counter() - started
        logger.debug(f"[Composer] {design.id} layer {i} ({role.label}) done in {trace.layer_seconds[i]:.3f}s")

    return current, trace


def _bind_slots(conv: Conversation, i: int, message: ChatMessage, layer_input: LayerInput) -> Tuple[str, ...]:
    names = []
    images = list(message.images)
    if len(images) > len(layer_input.image_slots()):
        names.append(f"G{i - 1}")
        conv.slots[f"G{i - 1}"] = images.pop(0)
    for item in layer_input.items:
        if not item.element.is_text:
            names.append(f"element_{item.index}")
            conv.slots[f"element_{item.index}"] = item.element.image_content
    return tuple(names)


def _query(i: int, layer_input: LayerInput, message: ChatMessage, history: List[ChatMessage], design: Design,
           state: Optional[CanvasState], backend: Backend, opts: ComposeOptions,
           trace: CompositionTrace) -> LayerOutput:
    messages = list(history) + [message]
    last: Optional[Exception] = None
    for attempt in range(opts.retries + 1):
        ctx = TurnContext(i, layer_input, design, state, tuple(messages), attempt, opts.seed,
                          opts.temperature, opts.top_p, opts.font_vocab)
        text = backend.respond(ctx)
        try:
            return parse_layer_output(text, layer_input, opts.font_vocab)
        except CodecError as e:
            last = e
            if attempt == opts.retries:
                break
            trace.retries[i] = trace.retries.get(i, 0) + 1
            logger.warning(f"[Composer] Layer {i} parse failed ({e}); repair {attempt + 1}/{opts.retries}")
            messages += [ChatMessage("assistant", text), ChatMessage("user", REPAIR_INSTRUCTION)]
    raise LayerFailed(i, last)


def compose(elements: Sequence[Element], canvas: Canvas, plan: LayerPlan, backend: Backend,
            opts: ComposeOptions = ComposeOptions(), design_id: str = "design") -> Tuple[Design, CompositionTrace]:
    missing = [e.id for e in elements if e.id not in plan.assignment]
    if missing:
        raise ValueError(f"Plan does not cover elements {missing}")
    design = Design(canvas, tuple(elements), plan, {}, design_id)
    logger.info(f"[Composer] Composing {design_id} ({len(elements)} elements, {canvas.width}x{canvas.height}) "
                f"with {backend.name}")
    return _run(design, {e.id for e in elements}, {int(r) for r in ROLES_IN_ORDER}, backend, opts)


def given_prefix(design: Design) -> int:
    """Largest k such that layers 1..k are fully attributed and nothing above k is."""
    k = 0
    for role in ROLES_IN_ORDER:
        members = design.plan.members(role)
        if all(i in design.attributes for i in members):
            k = int(role)
        else:
            break
    for role in ROLES_IN_ORDER:
        if int(role) > k and any(i in design.attributes for i in design.plan.members(role)):
            raise InvalidPrefix(f"Layer {role.label} is partly attributed above the given prefix G{k}")
    return k


def compose_partial(given: Design, backend: Backend, opts: ComposeOptions = ComposeOptions(),
                    k: Optional[int] = None) -> Tuple[Design, CompositionTrace]:
    """Continue a design whose layers 1..k are fixed (k=1 layout from a background, k=3 typography)."""
    prefix = given_prefix(given)
    if k is None:
        k = prefix
    if not 0 <= k <= 5:
        raise InvalidPrefix(f"k must be 0..5, got {k}")
    for role in ROLES_IN_ORDER:
        members = given.plan.members(role)
        if int(role) <= k and any(i not in given.attributes for i in members):
            raise InvalidPrefix(f"Given layer {role.label} is missing attributes")
    if k < prefix:
        # layers above k are regenerated even if attributes were supplied
        given = replace(given, attributes={i: a for i, a in given.attributes.items()
                                           if int(given.plan.role_of(i)) <= k})
    requested = {i for role in ROLES_IN_ORDER if int(role) > k for i in given.plan.members(role)}
    logger.info(f"[Composer] Conditioning {given.id} on G{k}; {len(requested)} elements to place")
    return _run(given, requested, {int(r) for r in ROLES_IN_ORDER if int(r) > k}, backend, opts)


def fill_elements(base: Design, new_elements: Sequence[Element], backend: Backend,
                  opts: ComposeOptions = ComposeOptions(), planner_mode: PlannerMode = PlannerMode.HEURISTIC,
                  client: Optional[ChatClient] = None) -> Tuple[Design, CompositionTrace]:
    """Add elements to a finished design; existing attributes are kept as given context."""
    clash = {e.id for e in new_elements} & {e.id for e in base.elements}
    if clash:
        raise ValueError(f"New elements clash with existing ids {sorted(clash)}")
    missing = [e.id for e in base.elements if e.id not in base.attributes]
    if missing:
        raise InvalidPrefix(f"Base design is missing attributes for {missing}")
    if not new_elements:
        return _run(base, set(), set(), backend, opts, variant="fill")
    new_plan = plan_layers(new_elements, base.canvas, planner_mode, client)
    if base.plan.members(SemanticRole.BACKGROUND) and new_plan.members(SemanticRole.BACKGROUND):
        assignment = {i: (SemanticRole.LOGO_IMAGE if r == SemanticRole.BACKGROUND else r)
                      for i, r in new_plan.assignment.items()}
        logger.info("[Composer] Base design already has a background; new background demoted to logo/image")
        new_plan = LayerPlan.from_assignment([e.id for e in new_elements], assignment)
    merged = Design(base.canvas, tuple(base.elements) + tuple(new_elements), base.plan.merged(new_plan),
                    dict(base.attributes), base.id)
    layers = {int(merged.plan.role_of(e.id)) for e in new_elements}
    return _run(merged, {e.id for e in new_elements}, layers, backend, opts, variant="fill")


def _check_variants(backend: Backend, n: int) -> None:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > 1 and not backend.capabilities.supports_variants:
        raise BackendCapabilityError(f"The {backend.name} backend is deterministic and cannot produce variants")


def _parallel(jobs: int, backend: Backend, fn, items: Sequence) -> List:
    workers = max(1, min(jobs, backend.capabilities.max_parallel or jobs, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def variant_seeds(seed: Optional[int], n: int) -> List[Optional[int]]:
    base = seed if seed is not None else 0
    return [seed] + [base + k for k in range(1, n)]


def sample_variants(elements: Sequence[Element], canvas: Canvas, plan: LayerPlan, backend: Backend, n: int,
                    opts: ComposeOptions = ComposeOptions(),
                    with_traces: bool = False) -> List[Union[Design, Tuple[Design, CompositionTrace]]]:
    _check_variants(backend, n)

    def _one(args):
        k, seed = args
        return compose(elements, canvas, plan, backend, replace(opts, seed=seed), design_id=f"variant_{k}")

    results = _parallel(opts.jobs, backend, _one, list(enumerate(variant_seeds(opts.seed, n))))
    return results if with_traces else [d for d, _ in results]


def resize_compose(elements: Sequence[Element], plan: LayerPlan, backend: Backend, canvases: Sequence[Canvas],
                   opts: ComposeOptions = ComposeOptions(),
                   with_traces: bool = False) -> List[Union[Design, Tuple[Design, CompositionTrace]]]:
    if not canvases:
        raise ValueError("resize_compose needs at least one canvas")

    def _one(canvas: Canvas):
        return compose(elements, canvas, plan, backend, opts, design_id=f"canvas_{canvas.width}x{canvas.height}")

    results = _parallel(opts.jobs, backend, _one, list(canvases))
    return results if with_traces else [d for d, _ in results]
