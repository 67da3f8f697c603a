"""Wire format of the five-turn layered composition protocol.

Layer inputs are sentences announcing the elements of one layer, layer outputs
are concatenated JSON objects (one per element), and a conversation binds the
canvas states G1..G4 to the `<image>` slots of turns 2..5.
"""
import json
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Collection, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from chat_client import IMAGE_TOKEN, ChatMessage
from design_model import (
    ROLES_IN_ORDER, BBox, Canvas, CanvasState, Design, Element, ElementAttributes, LayerPlan,
    SemanticRole, TEXT_ALIGNS, TextAttributes,
)

BOX_KEYS = ("index", "left", "top", "width", "height")
TEXT_KEYS = ("angle", "font", "font_size", "color", "text_align", "capitalize", "letter_spacing", "line_height")

PREAMBLE = (
    "a poster of canvas width {width}px, canvas height {height}px. "
    "Please predict step by step according to the semantics of the elements. "
    "After each prediction, there will be an intermediate rendering result as a reference "
    "to better make the next prediction."
)
FLAT_PREAMBLE = "a poster of canvas width {width}px, canvas height {height}px."
STATE_CLAUSE = "current canvas state: <image>. "
EMPTY_INPUT = "null"
EMPTY_OUTPUT = "{}"
# a literal placeholder inside text content would claim an image slot
ESCAPED_IMAGE_TOKEN = "&lt;image&gt;"

_FENCE_RE = re.compile(r"```(?:json)?\s*([\s\S]*?)\s*```", re.IGNORECASE)


def text_payload(content: str) -> str:
    return content.replace(IMAGE_TOKEN, ESCAPED_IMAGE_TOKEN)


class CodecError(ValueError):
    pass


class MalformedJson(CodecError):
    pass


class UnknownIndex(CodecError):
    def __init__(self, index):
        super().__init__(f"Record index {index} was not announced in this layer")
        self.index = index


class MissingElement(CodecError):
    def __init__(self, index):
        super().__init__(f"Announced element {index} has no record")
        self.index = index


class DuplicateIndex(CodecError):
    def __init__(self, index):
        super().__init__(f"Element {index} has more than one record")
        self.index = index


class OutOfVocabFont(CodecError):
    def __init__(self, name):
        super().__init__(f"Font {name!r} is not in the font vocabulary")
        self.name = name


class MissingRequiredKey(CodecError):
    def __init__(self, key, index):
        super().__init__(f"Record {index} is missing required key {key!r}")
        self.key = key
        self.index = index


class InvalidValue(CodecError):
    def __init__(self, key, index, value):
        super().__init__(f"Record {index} has an invalid {key!r}: {value!r}")
        self.key = key
        self.index = index


class TurnError(CodecError):
    pass


class MissingState(CodecError):
    pass


# ----------------------
# Types
# ----------------------

@dataclass(frozen=True)
class LayerItem:
    index: int
    element: Element

    @property
    def payload(self) -> str:
        return text_payload(self.element.text_content) if self.element.is_text else IMAGE_TOKEN


@dataclass(frozen=True)
class LayerInput:
    role: SemanticRole
    items: Tuple[LayerItem, ...] = ()

    def __post_init__(self):
        for item in self.items:
            if item.element.is_text != (self.role == SemanticRole.TEXT):
                raise ValueError(f"Element {item.element.id} does not belong in the {self.role.label} layer")

    @property
    def empty(self) -> bool:
        return not self.items

    def indices(self) -> List[int]:
        return [item.index for item in self.items]

    def image_slots(self) -> List[np.ndarray]:
        return [item.element.image_content for item in self.items if not item.element.is_text]

    def subset(self, element_ids: Collection[str]) -> "LayerInput":
        return LayerInput(self.role, tuple(i for i in self.items if i.element.id in element_ids))


@dataclass(frozen=True)
class LayerOutput:
    records: Tuple[ElementAttributes, ...] = ()

    def by_index(self) -> Dict[int, ElementAttributes]:
        return {r.index: r for r in self.records}


@dataclass(frozen=True)
class Turn:
    human: str
    assistant: str
    slots: Tuple[str, ...] = ()


@dataclass
class Conversation:
    preamble: str
    turns: List[Turn]
    slots: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    design_id: str = "design"
    seed: Optional[int] = None
    variant: str = "layered"

    def messages(self, upto: Optional[int] = None) -> List[ChatMessage]:
        out: List[ChatMessage] = []
        for turn in self.turns[:upto]:
            out.append(ChatMessage("user", turn.human, tuple(self.slots[s] for s in turn.slots)))
            out.append(ChatMessage("assistant", turn.assistant))
        return out


# ----------------------
# Indices and inputs
# ----------------------

def assign_indices(plan: LayerPlan, fixed: Optional[Mapping[str, int]] = None) -> Dict[str, int]:
    """Contiguous indices in placement order; ids in `fixed` keep theirs, the rest continue after them."""
    fixed = dict(fixed or {})
    nxt = max(fixed.values()) + 1 if fixed else 0
    out: Dict[str, int] = {}
    for element_id in plan.in_order():
        if element_id in fixed:
            out[element_id] = fixed[element_id]
        else:
            out[element_id] = nxt
            nxt += 1
    return out


def build_layer_inputs(elements: Sequence[Element], plan: LayerPlan,
                       indices: Optional[Mapping[str, int]] = None) -> Dict[SemanticRole, LayerInput]:
    indices = indices if indices is not None else assign_indices(plan)
    by_id = {e.id: e for e in elements}
    return {
        role: LayerInput(role, tuple(LayerItem(indices[i], by_id[i]) for i in plan.members(role)))
        for role in ROLES_IN_ORDER
    }


def serialize_layer_input(layer_input: LayerInput) -> str:
    head = f"Now predict the {layer_input.role.label} elements: "
    if layer_input.empty:
        return head + EMPTY_INPUT
    return head + ", ".join(f"element {item.index}: {item.payload}" for item in layer_input.items)


# ----------------------
# Outputs
# ----------------------

def _number(value) -> object:
    """Integral floats print as ints ("angle": 0), others keep shortest repr."""
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def record_fields(rec: ElementAttributes) -> List[Tuple[str, object]]:
    b = rec.bbox
    out: List[Tuple[str, object]] = [
        ("index", rec.index), ("left", b.left), ("top", b.top), ("width", b.width), ("height", b.height),
    ]
    t = rec.text
    if t is not None:
        out += [
            ("angle", _number(t.angle)),
            ("font", t.font),
            ("font_size", int(t.font_size)),
            ("color", [int(c) for c in t.color]),
            ("text_align", t.text_align),
            ("capitalize", "true" if t.capitalize else "false"),
            ("letter_spacing", float(t.letter_spacing)),
            ("line_height", float(t.line_height)),
        ]
    return out


def serialize_record(rec: ElementAttributes) -> str:
    lines = [f"    {json.dumps(k)}: {json.dumps(v, ensure_ascii=False)}" for k, v in record_fields(rec)]
    return "{\n" + ",\n".join(lines) + "\n}"


def serialize_layer_output(out: LayerOutput) -> str:
    if not out.records:
        return EMPTY_OUTPUT
    return "\n".join(serialize_record(r) for r in out.records)


def _decode_values(text: str) -> List[object]:
    """Decode a concatenation of JSON values (objects or arrays) separated by whitespace or commas."""
    fenced = _FENCE_RE.findall(text)
    if fenced:
        text = "\n".join(fenced)
    decoder = json.JSONDecoder()
    pos, values = 0, []
    text = text.strip()
    while pos < len(text):
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text):
            break
        try:
            value, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as e:
            raise MalformedJson(f"Could not decode layer output at char {e.pos}: {e.msg}") from e
        values.append(value)
    if not values:
        raise MalformedJson("Layer output is empty")
    return values


def _objects(values: Iterable[object]) -> List[dict]:
    out = []
    for v in values:
        items = v if isinstance(v, list) else [v]
        for obj in items:
            if not isinstance(obj, dict):
                raise MalformedJson(f"Expected JSON objects, got {type(obj).__name__}")
            if obj:
                out.append(obj)
    return out


def _to_int(obj: dict, key: str, index) -> int:
    if key not in obj:
        raise MissingRequiredKey(key, index)
    value = obj[key]
    try:
        if isinstance(value, bool):
            raise ValueError
        if isinstance(value, str):
            value = value.strip()
        number = float(value)
        if not np.isfinite(number):
            raise ValueError
        return int(round(number))
    except (TypeError, ValueError):
        raise InvalidValue(key, index, value)


def _to_float(obj: dict, key: str, index) -> float:
    if key not in obj:
        raise MissingRequiredKey(key, index)
    value = obj[key]
    try:
        if isinstance(value, bool):
            raise ValueError
        number = float(value.strip() if isinstance(value, str) else value)
        if not np.isfinite(number):
            raise ValueError
        return number
    except (TypeError, ValueError):
        raise InvalidValue(key, index, value)


def _to_bool(obj: dict, key: str, index) -> bool:
    if key not in obj:
        raise MissingRequiredKey(key, index)
    value = obj[key]
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise InvalidValue(key, index, value)


def _to_color(obj: dict, key: str, index) -> Tuple[int, int, int]:
    if key not in obj:
        raise MissingRequiredKey(key, index)
    value = obj[key]
    if isinstance(value, str) and re.fullmatch(r"#?[0-9a-fA-F]{6}", value.strip()):
        h = value.strip().lstrip("#")
        return int(h[0:2], 16), int(h[2:4], 16), int(h[4:6], 16)
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise InvalidValue(key, index, value)
    channels = tuple(_to_int({key: c}, key, index) for c in value)
    if any(not 0 <= c <= 255 for c in channels):
        raise InvalidValue(key, index, value)
    return channels


def _text_attributes(obj: dict, index, font_vocab: Optional[Collection[str]]) -> TextAttributes:
    font = obj.get("font")
    if font is None:
        raise MissingRequiredKey("font", index)
    font = str(font)
    if font_vocab is not None and font not in font_vocab:
        raise OutOfVocabFont(font)
    align = obj.get("text_align")
    if align is None:
        raise MissingRequiredKey("text_align", index)
    align = str(align).strip().lower()
    if align not in TEXT_ALIGNS:
        raise InvalidValue("text_align", index, align)
    font_size = _to_int(obj, "font_size", index)
    line_height = _to_float(obj, "line_height", index)
    letter_spacing = _to_float(obj, "letter_spacing", index)
    if font_size <= 0:
        raise InvalidValue("font_size", index, font_size)
    if line_height <= 0:
        raise InvalidValue("line_height", index, line_height)
    if letter_spacing < 0:
        raise InvalidValue("letter_spacing", index, letter_spacing)
    return TextAttributes(
        angle=_to_float(obj, "angle", index),
        font=font,
        font_size=font_size,
        color=_to_color(obj, "color", index),
        text_align=align,
        capitalize=_to_bool(obj, "capitalize", index),
        letter_spacing=letter_spacing,
        line_height=line_height,
    )


def parse_layer_output(text: str, expected: LayerInput,
                       font_vocab: Optional[Collection[str]] = None) -> LayerOutput:
    """Tolerant inverse of serialize_layer_output; records keep the emitted order."""
    objects = _objects(_decode_values(text))
    announced = {item.index: item.element for item in expected.items}
    records: List[ElementAttributes] = []
    seen = set()
    for obj in objects:
        index = _to_int(obj, "index", "?")
        if index not in announced:
            raise UnknownIndex(index)
        if index in seen:
            raise DuplicateIndex(index)
        seen.add(index)
        width, height = _to_int(obj, "width", index), _to_int(obj, "height", index)
        if width < 0 or height < 0:
            raise InvalidValue("width" if width < 0 else "height", index, (width, height))
        bbox = BBox(_to_int(obj, "left", index), _to_int(obj, "top", index), width, height)
        element = announced[index]
        text_attrs = _text_attributes(obj, index, font_vocab) if element.is_text else None
        records.append(ElementAttributes(element.id, index, bbox, text_attrs))
    for index in announced:
        if index not in seen:
            raise MissingElement(index)
    return LayerOutput(tuple(records))


# ----------------------
# Turns and conversations
# ----------------------

def preamble(canvas: Canvas) -> str:
    return PREAMBLE.format(width=canvas.width, height=canvas.height)


def build_turn(i: int, layer_input: LayerInput, prev_state: Optional[CanvasState], canvas: Canvas,
               with_state: bool = True) -> ChatMessage:
    """Human message of turn i (1..5); turn 1 carries the canvas preamble, later turns G_{i-1}."""
    if int(layer_input.role) != i:
        raise TurnError(f"Turn {i} must carry the {SemanticRole(i).label} layer, got {layer_input.role.label}")
    if prev_state is not None and prev_state.level != i - 1:
        raise TurnError(f"Turn {i} needs canvas state G{i - 1}, got G{prev_state.level}")
    sentence = serialize_layer_input(layer_input)
    images = list(layer_input.image_slots())
    if i == 1:
        return ChatMessage("user", preamble(canvas) + " " + sentence, tuple(images))
    if not with_state:
        return ChatMessage("user", sentence, tuple(images))
    if prev_state is None:
        raise TurnError(f"Turn {i} needs canvas state G{i - 1}")
    return ChatMessage("user", STATE_CLAUSE + sentence, (prev_state.image,) + tuple(images))


def _shuffled_plan(plan: LayerPlan, seed: Optional[int]) -> LayerPlan:
    if seed is None:
        return plan
    rng = random.Random(seed)
    ordering = {}
    for role in ROLES_IN_ORDER:
        members = list(plan.members(role))
        rng.shuffle(members)
        ordering[role] = tuple(members)
    return LayerPlan(dict(plan.assignment), ordering)


def _reindexed(design: Design, plan: LayerPlan) -> Tuple[Dict[str, int], Dict[SemanticRole, LayerInput]]:
    missing = [i for i in plan.in_order() if i not in design.attributes]
    if missing:
        raise CodecError(f"Design {design.id} is missing attributes for {missing}")
    indices = assign_indices(plan)
    return indices, build_layer_inputs(design.elements, plan, indices)


def _output_for(design: Design, layer: LayerInput) -> LayerOutput:
    recs = []
    for item in layer.items:
        a = design.attributes[item.element.id]
        recs.append(ElementAttributes(a.element_id, item.index, a.bbox, a.text))
    return LayerOutput(tuple(recs))


def export_training_conversation(design: Design, seed: Optional[int],
                                 states: Mapping[int, np.ndarray]) -> Conversation:
    """Ground-truth five-turn transcript; `seed=None` keeps the plan order (identity shuffle)."""
    plan = _shuffled_plan(design.plan, seed)
    indices, inputs = _reindexed(design, plan)
    slots: Dict[str, np.ndarray] = {}
    turns: List[Turn] = []
    for i, role in enumerate(ROLES_IN_ORDER, start=1):
        layer = inputs[role]
        turn_slots: List[str] = []
        if i == 1:
            human = preamble(design.canvas) + " " + serialize_layer_input(layer)
        else:
            if (i - 1) not in states:
                raise MissingState(f"Design {design.id} has no cached G{i - 1}")
            slots[f"G{i - 1}"] = states[i - 1]
            turn_slots.append(f"G{i - 1}")
            human = STATE_CLAUSE + serialize_layer_input(layer)
        for item in layer.items:
            if not item.element.is_text:
                slot = f"element_{item.index}"
                slots[slot] = item.element.image_content
                turn_slots.append(slot)
        turns.append(Turn(human, serialize_layer_output(_output_for(design, layer)), tuple(turn_slots)))
    return Conversation(preamble(design.canvas), turns, slots, design.id, seed, "layered")


def export_flat_conversation(design: Design, seed: Optional[int], planned: bool = True) -> Conversation:
    """Single-turn transcript listing every element at once (no intermediate renders).

    planned=True keeps layer order (shuffled within layers); planned=False shuffles
    across all elements, ignoring the layer plan.
    """
    if planned:
        plan = _shuffled_plan(design.plan, seed)
        order = plan.in_order()
    else:
        order = list(design.plan.in_order())
        random.Random(seed).shuffle(order)
    missing = [i for i in order if i not in design.attributes]
    if missing:
        raise CodecError(f"Design {design.id} is missing attributes for {missing}")
    slots: Dict[str, np.ndarray] = {}
    parts, recs, turn_slots = [], [], []
    for k, element_id in enumerate(order):
        e = design.element(element_id)
        a = design.attributes[element_id]
        if e.is_text:
            parts.append(f"element {k}: {text_payload(e.text_content)}")
        else:
            parts.append(f"element {k}: {IMAGE_TOKEN}")
            slots[f"element_{k}"] = e.image_content
            turn_slots.append(f"element_{k}")
        recs.append(ElementAttributes(element_id, k, a.bbox, a.text))
    human = FLAT_PREAMBLE.format(width=design.canvas.width, height=design.canvas.height)
    human += " Now predict the elements: " + ", ".join(parts)
    variant = "flat" if planned else "flat-unplanned"
    turn = Turn(human, serialize_layer_output(LayerOutput(tuple(recs))), tuple(turn_slots))
    return Conversation(human, [turn], slots, design.id, seed, variant)


def conversation_to_record(conv: Conversation, slot_paths: Mapping[str, str]) -> dict:
    conversations = []
    for turn in conv.turns:
        conversations.append({"from": "human", "value": turn.human, "images": list(turn.slots)})
        conversations.append({"from": "gpt", "value": turn.assistant})
    return {
        "id": conv.design_id,
        "seed": conv.seed,
        "variant": conv.variant,
        "images": {slot: str(slot_paths[slot]) for slot in sorted(slot_paths)},
        "conversations": conversations,
    }


_CANVAS_RE = re.compile(r"canvas width (\d+)px, canvas height (\d+)px")


def conversation_from_record(record: dict, load_image: Optional[Callable[[str], np.ndarray]] = None) -> Conversation:
    """Inverse of conversation_to_record; slot rasters are read through `load_image` when given."""
    turns: List[Turn] = []
    pending: Optional[dict] = None
    for c in record.get("conversations", []):
        if c.get("from") == "human":
            if pending is not None:
                raise TurnError("Two human messages in a row")
            pending = c
        elif c.get("from") == "gpt":
            if pending is None:
                raise TurnError("Assistant message without a human message")
            turns.append(Turn(pending["value"], c["value"], tuple(pending.get("images", ()))))
            pending = None
    if pending is not None or not turns:
        raise TurnError(f"Conversation {record.get('id')!r} is incomplete")
    variant = record.get("variant", "layered")
    head = turns[0].human
    match = _CANVAS_RE.search(head)
    if variant.startswith("flat"):
        pre = head
    elif match:
        pre = preamble(Canvas(int(match.group(1)), int(match.group(2))))
    else:
        pre = ""
    slots: Dict[str, np.ndarray] = {}
    if load_image is not None:
        slots = {slot: load_image(path) for slot, path in record.get("images", {}).items()}
    return Conversation(pre, turns, slots, record.get("id", "design"), record.get("seed"), variant)


def assistant_turns(record: dict) -> List[str]:
    return [c["value"] for c in record.get("conversations", []) if c.get("from") == "gpt"]


def load_font_vocab(path) -> Tuple[str, ...]:
    with open(path, "r", encoding="utf-8") as f:
        names = [line.strip() for line in f if line.strip() and not line.startswith("#")]
    return tuple(dict.fromkeys(names))
