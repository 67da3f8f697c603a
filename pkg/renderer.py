"""Deterministic raster compositor for canvas states G0..G5.

Layers are composited in placement order onto a blank canvas; inside a layer the
plan ordering decides stacking. Text is laid out glyph by glyph so letter spacing
and line height are exact, then rotated about the bbox center.
"""
import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from design_model import (
    ROLES_IN_ORDER, BBox, Canvas, CanvasState, Design, Element, ElementAttributes, RGB, SemanticRole,
    TextAttributes,
)

logger = logging.getLogger(__name__)

FONT_SUFFIXES = (".ttf", ".otf", ".ttc")
DEFAULT_FONTS_DIR = "fonts"


class RenderError(RuntimeError):
    pass


class MissingAttributes(RenderError):
    def __init__(self, element_id: str):
        super().__init__(f"Element {element_id} has no attributes to render")
        self.element_id = element_id


class FontLoadFailure(RenderError):
    pass


def _font_key(name: str) -> str:
    key = re.sub(r"[^a-z0-9]", "", name.lower())
    return key[:-len("regular")] if key.endswith("regular") and len(key) > len("regular") else key


# ----------------------
# Fonts
# ----------------------

class FontStore:
    """Family name -> font file, with Pillow's default face as the fallback."""

    def __init__(self, fonts_dir: Optional[str] = None, files: Optional[Dict[str, str]] = None):
        self.fonts_dir = fonts_dir
        self._files: Dict[str, str] = {}
        if fonts_dir and os.path.isdir(fonts_dir):
            for path in sorted(Path(fonts_dir).rglob("*")):
                if path.suffix.lower() in FONT_SUFFIXES:
                    self._files.setdefault(_font_key(path.stem), str(path))
                    # "Raleway-Bold.ttf" also answers for its directory family
                    if path.parent != Path(fonts_dir):
                        self._files.setdefault(_font_key(path.parent.name), str(path))
        for family, path in (files or {}).items():
            self._files[_font_key(family)] = path
        self._faces: Dict[Tuple[str, int], ImageFont.ImageFont] = {}
        self._substituted = set()
        self._lock = threading.Lock()
        logger.debug(f"[Renderer] Font store with {len(self._files)} faces from {fonts_dir}")

    @property
    def families(self) -> List[str]:
        return sorted(self._files)

    def has(self, family: str) -> bool:
        return _font_key(family) in self._files

    def face(self, family: str, size: int,
             on_substitution: Optional[Callable[[str, str], None]] = None):
        size = max(1, int(size))
        cache_key = (_font_key(family), size)
        with self._lock:
            if cache_key in self._faces:
                return self._faces[cache_key]
        path = self._files.get(cache_key[0])
        font = None
        if path is not None:
            try:
                font = ImageFont.truetype(path, size)
            except OSError as e:
                logger.warning(f"[Renderer] Could not load {path} ({e}); using fallback face")
        if font is None:
            font = self._fallback(size)
            with self._lock:
                first = cache_key[0] not in self._substituted
                self._substituted.add(cache_key[0])
            if first:
                logger.warning(f"[Renderer] Font {family!r} not available; substituting the default face")
            if on_substitution is not None:
                on_substitution(family, "default")
        with self._lock:
            self._faces[cache_key] = font
        return font

    @staticmethod
    def _fallback(size: int):
        try:
            return ImageFont.load_default(size=size)
        except Exception as e:
            raise FontLoadFailure(f"No fallback font face available: {e}") from e


@dataclass(frozen=True)
class RenderOptions:
    antialias: bool = True
    background_color: Optional[RGB] = None
    on_substitution: Optional[Callable[[str, str], None]] = field(default=None, compare=False)


# ----------------------
# Compositing
# ----------------------

def blank_canvas(canvas: Canvas, opts: RenderOptions = RenderOptions()) -> np.ndarray:
    color = opts.background_color or canvas.background_color
    out = np.empty((canvas.height, canvas.width, 3), dtype=np.uint8)
    out[:, :] = color
    return out


def _paste_clipped(target: Image.Image, layer: Image.Image, left: int, top: int) -> None:
    """alpha_composite `layer` at (left, top), dropping whatever falls off `target`."""
    x0, y0 = max(left, 0), max(top, 0)
    x1 = min(left + layer.width, target.width)
    y1 = min(top + layer.height, target.height)
    if x1 <= x0 or y1 <= y0:
        return
    visible = layer.crop((x0 - left, y0 - top, x1 - left, y1 - top))
    target.alpha_composite(visible, dest=(x0, y0))


def draw_image(target: Image.Image, element: Element, bbox: BBox) -> None:
    """Bilinear-resample the element raster to bbox, composite the on-canvas part only."""
    if element.is_text:
        raise ValueError(f"draw_image needs an image element, got text element {element.id}")
    if bbox.width <= 0 or bbox.height <= 0:
        return
    x0, y0 = max(bbox.left, 0), max(bbox.top, 0)
    x1, y1 = min(bbox.right, target.width), min(bbox.bottom, target.height)
    if x1 <= x0 or y1 <= y0:
        return
    src = Image.fromarray(element.image_content, "RGBA")
    sx = src.width / float(bbox.width)
    sy = src.height / float(bbox.height)
    # only the visible part is resampled, so oversized boxes stay cheap
    box = ((x0 - bbox.left) * sx, (y0 - bbox.top) * sy, (x1 - bbox.left) * sx, (y1 - bbox.top) * sy)
    visible = src.resize((x1 - x0, y1 - y0), Image.BILINEAR, box=box)
    target.alpha_composite(visible, dest=(x0, y0))


# ----------------------
# Typography
# ----------------------

@dataclass(frozen=True)
class GlyphPlacement:
    char: str
    x: float
    baseline: float
    angle: float


@dataclass(frozen=True)
class LineLayout:
    text: str
    x: float
    baseline: float
    advance: float


@dataclass(frozen=True)
class TextLayout:
    lines: Tuple[LineLayout, ...]
    glyphs: Tuple[GlyphPlacement, ...]
    ascent: float
    descent: float


def _metrics(face) -> Tuple[float, float]:
    if hasattr(face, "getmetrics"):
        ascent, descent = face.getmetrics()
        return float(ascent), float(descent)
    _, top, _, bottom = face.getbbox("Ag")
    return float(-top if top < 0 else bottom), 0.0


def _rotate(x: float, y: float, cx: float, cy: float, angle: float) -> Tuple[float, float]:
    # counter-clockwise on screen, y axis pointing down
    rad = math.radians(angle)
    dx, dy = x - cx, y - cy
    return cx + dx * math.cos(rad) + dy * math.sin(rad), cy - dx * math.sin(rad) + dy * math.cos(rad)


def layout_text(text: str, attrs: TextAttributes, bbox: BBox, face) -> TextLayout:
    if attrs.capitalize:
        text = text.upper()
    ascent, descent = _metrics(face)
    cx, cy = bbox.center
    lines, glyphs = [], []
    for k, line in enumerate(text.split("\n")):
        advances = [face.getlength(ch) for ch in line]
        advance = sum(advances) + attrs.letter_spacing * max(len(line) - 1, 0)
        if attrs.text_align == "center":
            x = bbox.left + (bbox.width - advance) / 2.0
        elif attrs.text_align == "right":
            x = bbox.left + bbox.width - advance
        else:
            x = float(bbox.left)
        baseline = bbox.top + ascent + k * attrs.font_size * attrs.line_height
        lines.append(LineLayout(line, x, baseline, advance))
        pen = x
        for ch, adv in zip(line, advances):
            gx, gy = (pen, baseline) if not attrs.angle else _rotate(pen, baseline, cx, cy, attrs.angle)
            glyphs.append(GlyphPlacement(ch, gx, gy, attrs.angle))
            pen += adv + attrs.letter_spacing
    return TextLayout(tuple(lines), tuple(glyphs), ascent, descent)


def render_text(target: Image.Image, element: Element, attrs: TextAttributes, bbox: BBox,
                store: FontStore, opts: RenderOptions = RenderOptions()) -> None:
    face = store.face(attrs.font, attrs.font_size, opts.on_substitution)
    unrotated = TextAttributes(0.0, attrs.font, attrs.font_size, attrs.color, attrs.text_align,
                               attrs.capitalize, attrs.letter_spacing, attrs.line_height)
    layout = layout_text(element.text_content, unrotated, bbox, face)
    if not layout.glyphs:
        return
    # square layer around the bbox center large enough for any rotation of the text
    cx, cy = bbox.center
    reach = max(bbox.width, bbox.height) / 2.0
    for line in layout.lines:
        for x in (line.x, line.x + line.advance):
            for y in (line.baseline - layout.ascent, line.baseline + layout.descent):
                reach = max(reach, math.hypot(x - cx, y - cy))
    half = int(math.ceil(reach)) + attrs.font_size
    ox, oy = int(math.floor(cx)) - half, int(math.floor(cy)) - half
    layer = Image.new("RGBA", (2 * half, 2 * half), (0, 0, 0, 0))
    draw = ImageDraw.Draw(layer)
    draw.fontmode = "L" if opts.antialias else "1"
    fill = tuple(int(c) for c in attrs.color) + (255,)
    anchored = isinstance(face, ImageFont.FreeTypeFont)
    for g in layout.glyphs:
        if g.char.isspace():
            continue
        x = int(round(g.x)) - ox
        if anchored:
            draw.text((x, int(round(g.baseline)) - oy), g.char, font=face, fill=fill, anchor="ls")
        else:
            draw.text((x, int(round(g.baseline - layout.ascent)) - oy), g.char, font=face, fill=fill)
    if attrs.angle:
        resample = Image.BICUBIC if opts.antialias else Image.NEAREST
        layer = layer.rotate(attrs.angle, resample=resample, center=(cx - ox, cy - oy))
    _paste_clipped(target, layer, ox, oy)


# ----------------------
# Canvas states
# ----------------------

def _draw_one(target: Image.Image, element: Element, attrs: Optional[ElementAttributes], store: FontStore,
              opts: RenderOptions) -> None:
    if attrs is None:
        raise MissingAttributes(element.id)
    if element.is_text:
        if attrs.text is None:
            raise MissingAttributes(element.id)
        render_text(target, element, attrs.text, attrs.bbox, store, opts)
    else:
        draw_image(target, element, attrs.bbox)


def _draw_elements(target: Image.Image, design: Design, element_ids: Sequence[str], store: FontStore,
                   opts: RenderOptions) -> None:
    for element_id in element_ids:
        _draw_one(target, design.element(element_id), design.attributes.get(element_id), store, opts)



def composite_layer(prev: CanvasState, design: Design, role: SemanticRole, store: FontStore,
                    opts: RenderOptions = RenderOptions()) -> CanvasState:
    """G_i from G_{i-1}: draw the members of layer i on top of the previous state."""
    if int(role) != prev.level + 1:
        raise RenderError(f"Layer {role.label} cannot be composited onto G{prev.level}")
    target = Image.fromarray(prev.image, "RGB").convert("RGBA")
    _draw_elements(target, design, design.plan.members(role), store, opts)
    return CanvasState.at(int(role), np.asarray(target.convert("RGB")).copy())


def overlay_elements(state: CanvasState, design: Design, element_ids: Sequence[str], store: FontStore,
                     opts: RenderOptions = RenderOptions()) -> np.ndarray:
    """Raster of `state` with the given elements drawn on top; the state level is not advanced."""
    target = Image.fromarray(state.image, "RGB").convert("RGBA")
    _draw_elements(target, design, element_ids, store, opts)
    return np.asarray(target.convert("RGB")).copy()


def render_states(design: Design, store: FontStore, opts: RenderOptions = RenderOptions(),
                  upto: int = 5, start: Optional[CanvasState] = None) -> List[CanvasState]:
    """G0..G_upto (or from `start` onward when resuming from a cached state)."""
    if not 0 <= upto <= 5:
        raise ValueError(f"upto must be 0..5, got {upto}")
    states = [start if start is not None else CanvasState.at(0, blank_canvas(design.canvas, opts))]
    for role in ROLES_IN_ORDER:
        if int(role) <= states[-1].level:
            continue
        if int(role) > upto:
            break
        states.append(composite_layer(states[-1], design, role, store, opts))
    return states


def render_state(design: Design, upto: int, store: FontStore,
                 opts: RenderOptions = RenderOptions()) -> CanvasState:
    return render_states(design, store, opts, upto)[-1]


def save_png(raster: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(raster)).save(path, format="PNG")


def load_png(path, mode: str = "RGB") -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert(mode)).copy()


def render_attributed(canvas: Canvas, elements: Sequence[Element], attributes: Mapping[str, ElementAttributes],
                      store: FontStore, opts: RenderOptions = RenderOptions()) -> np.ndarray:
    """The complete design drawn in record z-order (attribute index), no layer plan needed."""
    target = Image.fromarray(blank_canvas(canvas, opts), "RGB").convert("RGBA")
    for element in sorted(elements, key=lambda e: (attributes[e.id].index if e.id in attributes else -1)):
        _draw_one(target, element, attributes.get(element.id), store, opts)
    return np.asarray(target.convert("RGB")).copy()
