"""Typed representation of canvases, elements, attributes and layer plans.

All value objects are frozen after construction; geometry helpers are pure
integer arithmetic so every other module can share them across threads.
"""
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

RGB = Tuple[int, int, int]
WHITE: RGB = (255, 255, 255)
TEXT_ALIGNS = ("left", "center", "right")


# ----------------------
# Value types
# ----------------------

@dataclass(frozen=True)
class Canvas:
    width: int
    height: int
    background_color: RGB = WHITE

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"Canvas must be at least 1x1, got {self.width}x{self.height}")
        if any(not 0 <= int(c) <= 255 for c in self.background_color) or len(self.background_color) != 3:
            raise ValueError(f"Background color out of range: {self.background_color}")

    @property
    def area(self) -> int:
        return self.width * self.height

    def box(self) -> "BBox":
        return BBox(0, 0, self.width, self.height)


class Modality(str, Enum):
    IMAGE = "image"
    TEXT = "text"


class SemanticRole(IntEnum):
    """The five design layers; the value is the placement order index."""

    BACKGROUND = 1
    UNDERLAY = 2
    LOGO_IMAGE = 3
    TEXT = 4
    EMBELLISHMENT = 5

    @property
    def label(self) -> str:
        """Lower-case layer name used in the turn text ('logo/image' for images)."""
        return _ROLE_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "SemanticRole":
        key = (label or "").strip().lower().replace("-", "_")
        for role, name in _ROLE_LABELS.items():
            if key in (name, role.name.lower()):
                return role
        raise ValueError(f"Unknown semantic role: {label!r}")


_ROLE_LABELS = {
    SemanticRole.BACKGROUND: "background",
    SemanticRole.UNDERLAY: "underlay",
    SemanticRole.LOGO_IMAGE: "logo/image",
    SemanticRole.TEXT: "text",
    SemanticRole.EMBELLISHMENT: "embellishment",
}

ROLES_IN_ORDER: Tuple[SemanticRole, ...] = tuple(sorted(SemanticRole))


@dataclass(frozen=True)
class Element:
    """One input asset: an RGBA raster or a text string."""

    id: str
    modality: Modality
    image_content: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    text_content: Optional[str] = None
    intrinsic_width: int = 0
    intrinsic_height: int = 0

    def __post_init__(self):
        if self.modality == Modality.IMAGE:
            if self.image_content is None or self.text_content is not None:
                raise ValueError(f"Image element {self.id} must carry image content only")
            img = self.image_content
            if img.ndim != 3 or img.shape[2] != 4 or img.dtype != np.uint8:
                raise ValueError(f"Image element {self.id} needs an HxWx4 uint8 raster, got {img.shape} {img.dtype}")
            img.setflags(write=False)
            if not self.intrinsic_width or not self.intrinsic_height:
                object.__setattr__(self, "intrinsic_width", int(img.shape[1]))
                object.__setattr__(self, "intrinsic_height", int(img.shape[0]))
        else:
            if self.text_content is None or self.image_content is not None:
                raise ValueError(f"Text element {self.id} must carry text content only")
            if not self.text_content.strip():
                raise ValueError(f"Text element {self.id} has empty text")

    @classmethod
    def image(cls, element_id: str, rgba: np.ndarray) -> "Element":
        return cls(element_id, Modality.IMAGE, image_content=np.ascontiguousarray(rgba, dtype=np.uint8))

    @classmethod
    def text(cls, element_id: str, content: str) -> "Element":
        return cls(element_id, Modality.TEXT, text_content=content)

    @property
    def is_text(self) -> bool:
        return self.modality == Modality.TEXT

    @property
    def intrinsic_area(self) -> int:
        return self.intrinsic_width * self.intrinsic_height


@dataclass(frozen=True)
class BBox:
    left: int
    top: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 0 or self.height < 0:
            raise ValueError(f"BBox extents must be non-negative: {self}")

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def center(self) -> Tuple[float, float]:
        return self.left + self.width / 2.0, self.top + self.height / 2.0

    def scaled(self, factor: int) -> "BBox":
        return BBox(self.left * factor, self.top * factor, self.width * factor, self.height * factor)


@dataclass(frozen=True)
class TextAttributes:
    angle: float
    font: str
    font_size: int
    color: RGB
    text_align: str
    capitalize: bool
    letter_spacing: float
    line_height: float

    def problems(self, font_vocab: Optional[FrozenSet[str]] = None) -> List[str]:
        out = []
        if self.font_size <= 0:
            out.append("font_size must be > 0")
        if self.line_height <= 0:
            out.append("line_height must be > 0")
        if self.letter_spacing < 0:
            out.append("letter_spacing must be >= 0")
        if self.text_align not in TEXT_ALIGNS:
            out.append(f"text_align {self.text_align!r} not in {TEXT_ALIGNS}")
        if len(self.color) != 3 or any(not 0 <= c <= 255 for c in self.color):
            out.append(f"color {self.color} out of range")
        if font_vocab is not None and self.font not in font_vocab:
            out.append(f"font {self.font!r} not in vocabulary")
        return out


@dataclass(frozen=True)
class ElementAttributes:
    element_id: str
    index: int
    bbox: BBox
    text: Optional[TextAttributes] = None


@dataclass(frozen=True)
class LayerPlan:
    assignment: Mapping[str, SemanticRole]
    ordering: Mapping[SemanticRole, Tuple[str, ...]]

    @classmethod
    def from_assignment(cls, element_ids: Sequence[str], assignment: Mapping[str, SemanticRole]) -> "LayerPlan":
        """Build a plan whose within-layer order follows `element_ids`."""
        ordering = {role: tuple(i for i in element_ids if assignment[i] == role) for role in ROLES_IN_ORDER}
        return cls(dict((i, assignment[i]) for i in element_ids), ordering)

    def members(self, role: SemanticRole) -> Tuple[str, ...]:
        return tuple(self.ordering.get(role, ()))

    def role_of(self, element_id: str) -> SemanticRole:
        return self.assignment[element_id]

    def in_order(self) -> List[str]:
        """Element ids in placement order: layer by layer, then within-layer order."""
        return [i for role in ROLES_IN_ORDER for i in self.members(role)]

    def merged(self, other: "LayerPlan") -> "LayerPlan":
        """Append `other`'s members after this plan's members in every layer."""
        assignment = dict(self.assignment)
        assignment.update(other.assignment)
        ordering = {role: self.members(role) + other.members(role) for role in ROLES_IN_ORDER}
        return LayerPlan(assignment, ordering)


@dataclass(frozen=True)
class Design:
    canvas: Canvas
    elements: Tuple[Element, ...]
    plan: LayerPlan
    attributes: Mapping[str, ElementAttributes] = field(default_factory=dict)
    id: str = "design"

    def element(self, element_id: str) -> Element:
        for e in self.elements:
            if e.id == element_id:
                return e
        raise KeyError(element_id)

    def with_attributes(self, attributes: Mapping[str, ElementAttributes]) -> "Design":
        merged = dict(self.attributes)
        merged.update(attributes)
        return Design(self.canvas, self.elements, self.plan, merged, self.id)

    def layer_attributes(self, role: SemanticRole) -> List[ElementAttributes]:
        return [self.attributes[i] for i in self.plan.members(role) if i in self.attributes]


@dataclass(frozen=True)
class CanvasState:
    """A rendered intermediate design G_level (HxWx3 uint8)."""

    level: int
    image: np.ndarray = field(compare=False, repr=False)
    baked_layers: FrozenSet[SemanticRole] = frozenset()

    def __post_init__(self):
        if not 0 <= self.level <= 5:
            raise ValueError(f"Canvas state level must be 0..5, got {self.level}")
        expected = frozenset(r for r in ROLES_IN_ORDER if r <= self.level)
        if frozenset(self.baked_layers) != expected:
            raise ValueError(f"G{self.level} must bake exactly {sorted(expected)}")
        self.image.setflags(write=False)

    @classmethod
    def at(cls, level: int, image: np.ndarray) -> "CanvasState":
        return cls(level, image, frozenset(r for r in ROLES_IN_ORDER if r <= level))


# ----------------------
# Geometry
# ----------------------

def intersect(a: BBox, b: BBox) -> Optional[BBox]:
    left = max(a.left, b.left)
    top = max(a.top, b.top)
    right = min(a.right, b.right)
    bottom = min(a.bottom, b.bottom)
    if right <= left or bottom <= top:
        return None
    return BBox(left, top, right - left, bottom - top)


def area(b: Optional[BBox]) -> int:
    if b is None:
        return 0
    return b.width * b.height


def clip_to_canvas(b: BBox, canvas: Canvas) -> Optional[BBox]:
    return intersect(b, canvas.box())


# ----------------------
# Validation
# ----------------------

@dataclass(frozen=True)
class Violation:
    rule: str
    element_id: Optional[str] = None
    detail: str = ""

    def __str__(self):
        where = f"({self.element_id})" if self.element_id is not None else ""
        return f"{self.rule}{where}{': ' + self.detail if self.detail else ''}"


def validate_design(d: Design, font_vocab: Optional[FrozenSet[str]] = None,
                    require_attributes: bool = True) -> List[Violation]:
    """Check every Design / LayerPlan / ElementAttributes invariant.

    Violations are returned in a stable order (element order, then rule).
    """
    out: List[Violation] = []
    ids = [e.id for e in d.elements]
    id_set = set(ids)
    seen = set()
    for i in ids:
        if i in seen:
            out.append(Violation("DuplicateElementId", i))
        seen.add(i)

    for e in d.elements:
        role = d.plan.assignment.get(e.id)
        if role is None:
            out.append(Violation("UnplannedElement", e.id))
        elif (role == SemanticRole.TEXT) != e.is_text:
            out.append(Violation("RoleModalityMismatch", e.id, f"{e.modality.value} element in {role.label} layer"))
    for i in d.plan.assignment:
        if i not in id_set:
            out.append(Violation("UnknownPlannedElement", i))
    ordered = d.plan.in_order()
    if sorted(ordered) != sorted(d.plan.assignment):
        out.append(Violation("OrderingMismatch", None, "layer ordering does not match the assignment"))
    else:
        for role in ROLES_IN_ORDER:
            for i in d.plan.members(role):
                if d.plan.assignment[i] != role:
                    out.append(Violation("OrderingMismatch", i, f"listed under {role.label}"))
    backgrounds = d.plan.members(SemanticRole.BACKGROUND)
    if len(backgrounds) > 1:
        out.append(Violation("MultipleBackgrounds", None, ", ".join(backgrounds)))

    indices: Dict[int, str] = {}
    for e in d.elements:
        attrs = d.attributes.get(e.id)
        if attrs is None:
            if require_attributes:
                out.append(Violation("MissingAttributes", e.id))
            continue
        if attrs.index < 0:
            out.append(Violation("NegativeIndex", e.id, str(attrs.index)))
        if attrs.index in indices:
            out.append(Violation("DuplicateIndex", e.id, str(attrs.index)))
        indices.setdefault(attrs.index, e.id)
        if e.is_text and attrs.text is None:
            out.append(Violation("MissingTextAttrs", e.id))
        elif not e.is_text and attrs.text is not None:
            out.append(Violation("UnexpectedTextAttrs", e.id))
        elif attrs.text is not None:
            for problem in attrs.text.problems(font_vocab):
                out.append(Violation("InvalidTextAttrs", e.id, problem))
    for i in d.attributes:
        if i not in id_set:
            out.append(Violation("UnknownAttributedElement", i))
    return out


def demote_extra_backgrounds(elements: Sequence[Element], assignment: Dict[str, SemanticRole]) -> Dict[str, SemanticRole]:
    """Keep the largest-area background (first wins ties); the rest become logo/image."""
    bgs = [e for e in elements if assignment.get(e.id) == SemanticRole.BACKGROUND]
    if len(bgs) <= 1:
        return dict(assignment)
    keep = max(bgs, key=lambda e: (e.intrinsic_area, -bgs.index(e)))
    out = dict(assignment)
    for e in bgs:
        if e is not keep:
            out[e.id] = SemanticRole.LOGO_IMAGE
    return out
