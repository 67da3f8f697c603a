"""Layer planning: assign every input element one of the five semantic roles.

Text elements are recognised by their content. Visual elements are labelled by
a deterministic rule set or by a chat model prompted with the element labeling
prompt (one element per request).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from chat_client import ChatClient, ChatError, ChatMessage, IMAGE_TOKEN
from design_model import Canvas, Element, LayerPlan, SemanticRole, demote_extra_backgrounds

logger = logging.getLogger(__name__)

# ----------------------
# Heuristic thresholds
# ----------------------
BACKGROUND_AREA_RATIO = 0.70
UNDERLAY_MAX_CHANNEL_STD = 12.0  # on the 0..255 scale, i.e. 12/255
UNDERLAY_RECT_FILL = 0.98
EMBELLISHMENT_AREA_RATIO = 0.02
OPAQUE_ALPHA = 128
THUMBNAIL_SIDE = 512


class PlannerError(RuntimeError):
    pass


class RemoteUnavailable(PlannerError):
    pass


class UnrecognizedLabel(PlannerError, ValueError):
    def __init__(self, response: str):
        super().__init__(f"Unrecognized element label: {response!r}")
        self.response = response


class PlannerMode(str, Enum):
    HEURISTIC = "heuristic"
    REMOTE = "remote"
    REMOTE_WITH_FALLBACK = "fallback"


@dataclass(frozen=True)
class LabelingRequest:
    element_image: np.ndarray = field(compare=False, repr=False)
    design_image: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    canvas_size: Optional[Tuple[int, int]] = None
    element_size: Optional[Tuple[int, int]] = None

    @property
    def has_training_context(self) -> bool:
        return self.design_image is not None and self.canvas_size is not None and self.element_size is not None


@dataclass(frozen=True)
class LabelingPrompt:
    text: str
    images: Tuple[np.ndarray, ...] = field(compare=False, repr=False)

    def message(self) -> ChatMessage:
        return ChatMessage("user", self.text, self.images)


# ----------------------
# Prompt text
# ----------------------
LABELING_INSTRUCTIONS = """You are an excellent graphic designer.
Your task is to determine the role of the given element, which is rendered as an image.
There are 4 possible options: Background, Underlay, Logo/Image or Embellishment.
Please refer to the detailed descriptions below to make your prediction.

Background: The foundational layer of the design, typically large in size and covering the entire canvas. It may consist of a solid color, gradient, landscape image, or similar visual foundation.

Underlay: A supportive layer placed beneath key content, often used to create contrast or highlight the main design elements, such as borders, buttons, color overlays, and so on.

Logo/Image: A core visual element that represents a brand, product, or entity. It combines both imagery and logo elements to capture attention and convey the primary message.

Embellishment: Decorative elements that enhance visual appeal without conveying core information. These elements add style to the design. Note that they are usually small in size.

When you respond, please output only one word from the 4 options.
Do not include any additional explanations or irrelevant information.
"""

ELEMENT_ONLY_TAIL = "\nThe element is <image>. Please predict the given element role: "

TRAINING_TAIL = """
The overall design is <image>.
The canvas width is {canvas_w}px, canvas height is {canvas_h}px.
The element is <image>.
The element width is {element_w}px, element height is {element_h}px.
Please also consider the provided canvas and element width/height, as they might be helpful in making a decision.
Please predict the given element role: """

_LABEL_WORDS = {
    "background": SemanticRole.BACKGROUND,
    "underlay": SemanticRole.UNDERLAY,
    "logo/image": SemanticRole.LOGO_IMAGE,
    "logo": SemanticRole.LOGO_IMAGE,
    "image": SemanticRole.LOGO_IMAGE,
    "embellishment": SemanticRole.EMBELLISHMENT,
}


def build_labeling_prompt(req: LabelingRequest) -> LabelingPrompt:
    """Element-only prompt, or the training variant when the full context is present."""
    if req.has_training_context:
        tail = TRAINING_TAIL.format(
            canvas_w=req.canvas_size[0], canvas_h=req.canvas_size[1],
            element_w=req.element_size[0], element_h=req.element_size[1],
        )
        text = LABELING_INSTRUCTIONS + tail
        images = (req.design_image, req.element_image)
    else:
        text = LABELING_INSTRUCTIONS + ELEMENT_ONLY_TAIL
        images = (req.element_image,)
    assert text.count(IMAGE_TOKEN) == len(images)
    return LabelingPrompt(text, images)


def parse_label(response: str) -> SemanticRole:
    word = (response or "").strip().strip("\"'`*.").strip().lower()
    if word in _LABEL_WORDS:
        return _LABEL_WORDS[word]
    raise UnrecognizedLabel(response)


# ----------------------
# Heuristic rules
# ----------------------

def _opaque_mask(rgba: np.ndarray) -> np.ndarray:
    return rgba[:, :, 3] >= OPAQUE_ALPHA


def _is_flat_rectangle(rgba: np.ndarray) -> Tuple[bool, str]:
    mask = _opaque_mask(rgba)
    count = int(mask.sum())
    if count == 0:
        return False, "no opaque pixels"
    std = rgba[:, :, :3][mask].astype(np.float64).std(axis=0)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box_area = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
    fill = count / float(box_area)
    flat = bool(np.all(std <= UNDERLAY_MAX_CHANNEL_STD))
    rect = fill >= UNDERLAY_RECT_FILL
    return flat and rect, f"max channel std {std.max():.1f}, footprint fill {fill:.3f}"


def heuristic_label_with_rule(e: Element, canvas: Canvas) -> Tuple[SemanticRole, str]:
    """Ordered rules; the first one that fires decides. Returns the role and why."""
    if e.is_text:
        raise ValueError(f"heuristic_label expects an image element, got text element {e.id}")
    ratio = e.intrinsic_area / float(canvas.area)
    if ratio >= BACKGROUND_AREA_RATIO:
        return SemanticRole.BACKGROUND, f"rule 1: area ratio {ratio:.3f} >= {BACKGROUND_AREA_RATIO}"
    flat_rect, why = _is_flat_rectangle(e.image_content)
    if flat_rect:
        return SemanticRole.UNDERLAY, f"rule 2: flat rectangle ({why})"
    if ratio <= EMBELLISHMENT_AREA_RATIO:
        return SemanticRole.EMBELLISHMENT, f"rule 3: area ratio {ratio:.4f} <= {EMBELLISHMENT_AREA_RATIO}"
    return SemanticRole.LOGO_IMAGE, f"rule 4: default ({why}, area ratio {ratio:.3f})"


def heuristic_label(e: Element, canvas: Canvas) -> SemanticRole:
    return heuristic_label_with_rule(e, canvas)[0]


# ----------------------
# Planning
# ----------------------

def make_thumbnail(rgba: np.ndarray, side: int = THUMBNAIL_SIDE) -> np.ndarray:
    img = Image.fromarray(np.ascontiguousarray(rgba))
    if max(img.size) > side:
        img = img.copy()
        img.thumbnail((side, side), Image.BILINEAR)
    return np.asarray(img)


def _remote_label(e: Element, canvas: Canvas, client: ChatClient, design_raster: Optional[np.ndarray],
                  element_size: Optional[Tuple[int, int]]) -> Tuple[SemanticRole, str]:
    req = LabelingRequest(
        element_image=make_thumbnail(e.image_content),
        design_image=make_thumbnail(design_raster) if design_raster is not None else None,
        canvas_size=(canvas.width, canvas.height) if design_raster is not None else None,
        element_size=element_size if design_raster is not None else None,
    )
    prompt = build_labeling_prompt(req)
    # labeling is a classification; sample greedily
    response = client.complete([prompt.message()], temperature=0.0, top_p=1.0)
    role = parse_label(response)
    return role, f"remote label {response.strip()!r}"


def plan_layers_with_rationale(elements: Sequence[Element], canvas: Canvas,
                               mode: PlannerMode = PlannerMode.HEURISTIC,
                               client: Optional[ChatClient] = None, jobs: int = 1,
                               design_raster: Optional[np.ndarray] = None,
                               element_sizes: Optional[Dict[str, Tuple[int, int]]] = None,
                               ) -> Tuple[LayerPlan, Dict[str, str]]:
    """Plan layers and report, per element, which rule or label decided its role."""
    if not elements:
        raise ValueError("plan_layers needs at least one element")
    mode = PlannerMode(mode)
    if mode != PlannerMode.HEURISTIC and client is None:
        if mode == PlannerMode.REMOTE:
            raise RemoteUnavailable("Remote planner mode needs a chat client")
        logger.warning("[Planner] No chat client configured; falling back to heuristic labels")
        mode = PlannerMode.HEURISTIC

    roles: Dict[str, SemanticRole] = {}
    rationale: Dict[str, str] = {}
    visual = []
    for e in elements:
        if e.is_text:
            roles[e.id] = SemanticRole.TEXT
            rationale[e.id] = "text content"
        else:
            visual.append(e)

    def _label(e: Element) -> Tuple[str, SemanticRole, str]:
        if mode == PlannerMode.HEURISTIC:
            return (e.id,) + heuristic_label_with_rule(e, canvas)
        size = (element_sizes or {}).get(e.id, (e.intrinsic_width, e.intrinsic_height))
        try:
            return (e.id,) + _remote_label(e, canvas, client, design_raster, size)
        except ChatError as exc:
            if mode == PlannerMode.REMOTE:
                raise RemoteUnavailable(str(exc)) from exc
            logger.warning(f"[Planner] Remote labeling failed for {e.id} ({exc}); using heuristic")
        except UnrecognizedLabel as exc:
            if mode == PlannerMode.REMOTE:
                raise
            logger.warning(f"[Planner] {exc} for {e.id}; using heuristic")
        role, why = heuristic_label_with_rule(e, canvas)
        return e.id, role, "fallback " + why

    if mode == PlannerMode.HEURISTIC or jobs <= 1:
        results = [_label(e) for e in visual]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_label, visual))
    # keyed by element id, so completion order never matters
    for element_id, role, why in results:
        roles[element_id] = role
        rationale[element_id] = why

    resolved = demote_extra_backgrounds(elements, roles)
    for e in elements:
        if resolved[e.id] != roles[e.id]:
            rationale[e.id] += "; demoted: another background is larger"
            logger.info(f"[Planner] Demoted extra background {e.id} to logo/image")
    return LayerPlan.from_assignment([e.id for e in elements], resolved), rationale


def plan_layers(elements: Sequence[Element], canvas: Canvas, mode: PlannerMode = PlannerMode.HEURISTIC,
                client: Optional[ChatClient] = None, jobs: int = 1, **training_context) -> LayerPlan:
    return plan_layers_with_rationale(elements, canvas, mode, client, jobs, **training_context)[0]
