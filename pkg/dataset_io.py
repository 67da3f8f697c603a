"""Design corpora on disk: schema, loading, filtering, render cache and saliency.

A corpus directory holds `designs/*.json` (one DesignRecord each), the element
PNGs they reference (paths relative to the JSON file) and optional
`splits/{split}.txt` id lists.
"""
import base64
import binascii
import hashlib
import io
import json
import logging
import os
import tempfile
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import cv2
import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, field_validator

from design_model import (
    ROLES_IN_ORDER, BBox, Canvas, CanvasState, Design, Element, ElementAttributes, LayerPlan, SemanticRole,
    TextAttributes, demote_extra_backgrounds, validate_design,
)
from layer_planner import PlannerMode, plan_layers
from renderer import FontStore, RenderOptions, load_png, render_attributed, render_states

logger = logging.getLogger(__name__)

MAX_ELEMENTS = 25
SALIENCY_WIDTH = 128
CACHE_INDEX_NAME = "index.json"


class DatasetError(RuntimeError):
    pass


class SchemaError(DatasetError, ValueError):
    def __init__(self, record_id: str, field_name: str, detail: str = ""):
        super().__init__(f"Record {record_id}: invalid {field_name}{': ' + detail if detail else ''}")
        self.record_id = record_id
        self.field = field_name


class MissingAsset(DatasetError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"Asset not found: {path}")
        self.path = str(path)


# ----------------------
# Schema
# ----------------------

class CanvasRecord(BaseModel):
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    background_color: Tuple[int, int, int] = (255, 255, 255)


class AttributesRecord(BaseModel):
    """Same keys as the layer output objects; text keys only for text elements."""

    index: int = Field(ge=0)
    left: int
    top: int
    width: int = Field(ge=0)
    height: int = Field(ge=0)
    angle: Optional[float] = None
    font: Optional[str] = None
    font_size: Optional[int] = Field(default=None, gt=0)
    color: Optional[Tuple[int, int, int]] = None
    text_align: Optional[Literal["left", "center", "right"]] = None
    capitalize: Optional[bool] = None
    letter_spacing: Optional[float] = Field(default=None, ge=0)
    line_height: Optional[float] = Field(default=None, gt=0)

    @field_validator("capitalize", mode="before")
    @classmethod
    def _string_bool(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("true", "false"):
            return v.strip().lower() == "true"
        return v

    def has_text_attributes(self) -> bool:
        return self.font is not None


class ElementRecord(BaseModel):
    id: str = Field(min_length=1)
    modality: Literal["image", "text"]
    text: Optional[str] = None
    image_path: Optional[str] = None
    image_data: Optional[str] = None
    intrinsic_width: Optional[int] = Field(default=None, ge=1)
    intrinsic_height: Optional[int] = Field(default=None, ge=1)
    role: Optional[str] = None
    attributes: Optional[AttributesRecord] = None


class DesignRecord(BaseModel):
    id: str = Field(min_length=1)
    canvas: CanvasRecord
    elements: List[ElementRecord]


DESIGN_SCHEMA = DesignRecord.model_json_schema()

TEXT_KEYS = ("angle", "font", "font_size", "color", "text_align", "capitalize", "letter_spacing", "line_height")


def _validate_record(record: dict) -> DesignRecord:
    try:
        return DesignRecord.model_validate(record)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise SchemaError(str(record.get("id", "?")) if isinstance(record, dict) else "?", where, first["msg"]) from e


def decode_image_data(data: str) -> np.ndarray:
    if data.startswith("data:"):
        data = data.split(",", 1)[1]
    try:
        raw = base64.b64decode(data, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGBA")).copy()
    except (binascii.Error, OSError, ValueError) as e:
        raise DatasetError(f"Could not decode inline image: {e}") from e


def encode_image_data(raster: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(raster)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def file_resolver(base_dir) -> Callable[[str], np.ndarray]:
    base = Path(base_dir)

    def _resolve(ref: str) -> np.ndarray:
        path = (base / ref) if not os.path.isabs(ref) else Path(ref)
        if not path.is_file():
            raise MissingAsset(path)
        return load_png(path, "RGBA")

    return _resolve


# ----------------------
# Records <-> designs
# ----------------------

@dataclass
class ElementManifest:
    """Elements of one design before (or partly after) planning and composition."""

    id: str
    canvas: Canvas
    elements: List[Element]
    roles: Dict[str, SemanticRole] = field(default_factory=dict)
    attributes: Dict[str, ElementAttributes] = field(default_factory=dict)

    @property
    def fully_planned(self) -> bool:
        return all(e.id in self.roles for e in self.elements)

    def training_context(self, store: Optional[FontStore] = None) -> Dict[str, object]:
        """Rendered complete design and per-element bbox sizes; empty unless every element is attributed."""
        if not self.elements or any(e.id not in self.attributes for e in self.elements):
            return {}
        raster = render_attributed(self.canvas, self.elements, self.attributes, store or FontStore(None))
        sizes = {i: (a.bbox.width, a.bbox.height) for i, a in self.attributes.items()}
        return {"design_raster": raster, "element_sizes": sizes}

    def plan(self, mode: PlannerMode = PlannerMode.HEURISTIC, client=None, jobs: int = 1,
             store: Optional[FontStore] = None) -> LayerPlan:
        """Roles from the record, planner labels for elements without one.

        Remote labeling of a fully attributed record also sees the rendered design and the bbox sizes.
        """
        ids = [e.id for e in self.elements]
        if self.fully_planned:
            return LayerPlan.from_assignment(ids, self.roles)
        unplanned = [e for e in self.elements if e.id not in self.roles]
        context = self.training_context(store) if PlannerMode(mode) != PlannerMode.HEURISTIC else {}
        planned = plan_layers(unplanned, self.canvas, mode, client, jobs, **context)

        assignment = dict(self.roles)
        assignment.update(planned.assignment)
        return LayerPlan.from_assignment(ids, demote_extra_backgrounds(self.elements, assignment))

    def design(self, plan: Optional[LayerPlan] = None) -> Design:
        return Design(self.canvas, tuple(self.elements), plan or self.plan(), dict(self.attributes), self.id)


def manifest_from_record(record: dict, resolve_image: Callable[[str], np.ndarray]) -> ElementManifest:
    rec = _validate_record(record)
    canvas = Canvas(rec.canvas.width, rec.canvas.height, tuple(rec.canvas.background_color))
    elements, roles, attributes = [], {}, {}
    for er in rec.elements:
        if er.modality == "text":
            if not er.text or not er.text.strip():
                raise SchemaError(rec.id, f"elements.{er.id}.text", "text element needs text")
            element = Element.text(er.id, er.text)
        else:
            if er.image_data:
                rgba = decode_image_data(er.image_data)
            elif er.image_path:
                rgba = resolve_image(er.image_path)
            else:
                raise SchemaError(rec.id, f"elements.{er.id}.image_path", "image element needs an image")
            element = Element.image(er.id, rgba)
        elements.append(element)
        if er.role is not None:
            try:
                roles[er.id] = SemanticRole.from_label(er.role)
            except ValueError as e:
                raise SchemaError(rec.id, f"elements.{er.id}.role", str(e)) from e
        if er.attributes is not None:
            attributes[er.id] = _attributes(rec.id, er, element)
    return ElementManifest(rec.id, canvas, elements, roles, attributes)


def _attributes(record_id: str, er: ElementRecord, element: Element) -> ElementAttributes:
    a = er.attributes
    bbox = BBox(a.left, a.top, a.width, a.height)
    text = None
    if element.is_text:
        missing = [k for k in TEXT_KEYS if getattr(a, k) is None]
        if missing:
            raise SchemaError(record_id, f"elements.{er.id}.attributes.{missing[0]}", "required for text")
        text = TextAttributes(a.angle, a.font, a.font_size, tuple(a.color), a.text_align, a.capitalize,
                              a.letter_spacing, a.line_height)
    elif a.has_text_attributes():
        raise SchemaError(record_id, f"elements.{er.id}.attributes.font", "image elements take no text attributes")
    return ElementAttributes(er.id, a.index, bbox, text)


def design_from_record(record: dict, resolve_image: Callable[[str], np.ndarray],
                       planner_mode: PlannerMode = PlannerMode.HEURISTIC, client=None,
                       require_attributes: bool = True,
                       font_vocab: Optional[Sequence[str]] = None, store: Optional[FontStore] = None) -> Design:
    """Validated Design; elements without a role are labelled by the layer planner."""
    manifest = manifest_from_record(record, resolve_image)
    design = manifest.design(manifest.plan(planner_mode, client, store=store))
    violations = validate_design(design, frozenset(font_vocab) if font_vocab else None, require_attributes)
    if violations:
        v = violations[0]
        raise SchemaError(design.id, v.rule, str(v))
    return design


def design_to_record(design: Design, image_ref: Callable[[Element], Dict[str, str]]) -> dict:
    elements = []
    for e in design.elements:
        row: Dict[str, object] = {"id": e.id, "modality": e.modality.value}
        if e.is_text:
            row["text"] = e.text_content
        else:
            row.update(image_ref(e))
            row["intrinsic_width"] = e.intrinsic_width
            row["intrinsic_height"] = e.intrinsic_height
        if e.id in design.plan.assignment:
            row["role"] = design.plan.role_of(e.id).label
        a = design.attributes.get(e.id)
        if a is not None:
            attrs: Dict[str, object] = {"index": a.index, "left": a.bbox.left, "top": a.bbox.top,
                                        "width": a.bbox.width, "height": a.bbox.height}
            if a.text is not None:
                t = a.text
                attrs.update({"angle": t.angle, "font": t.font, "font_size": t.font_size, "color": list(t.color),
                              "text_align": t.text_align, "capitalize": t.capitalize,
                              "letter_spacing": t.letter_spacing, "line_height": t.line_height})
            row["attributes"] = attrs
        elements.append(row)
    # plan order inside each layer is carried by element order
    order = {i: k for k, i in enumerate(design.plan.in_order())}
    elements.sort(key=lambda r: order.get(r["id"], len(order)))
    c = design.canvas
    return {"id": design.id,
            "canvas": {"width": c.width, "height": c.height, "background_color": list(c.background_color)},
            "elements": elements}


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_design(design: Design, path) -> Path:
    """Write the design record plus one PNG per image element next to it."""
    path = Path(path)
    asset_dir = path.parent / "assets" / design.id

    def _ref(e: Element) -> Dict[str, str]:
        target = asset_dir / f"{e.id}.png"
        buf = io.BytesIO()
        Image.fromarray(e.image_content, "RGBA").save(buf, format="PNG")
        _write_atomic(target, buf.getvalue())
        return {"image_path": target.relative_to(path.parent).as_posix()}

    record = design_to_record(design, _ref)
    _write_atomic(path, json.dumps(record, indent=2, ensure_ascii=False).encode("utf-8"))
    return path


def _record_file(path) -> Path:
    path = Path(path)
    if path.is_dir():
        for name in ("elements.json", "design.json"):
            if (path / name).is_file():
                return path / name
        raise MissingAsset(path / "elements.json")
    if not path.is_file():
        raise MissingAsset(path)
    return path


def _read_json(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(path.stem, "json", str(e)) from e


def load_elements(path) -> ElementManifest:
    """Element manifest from a record file (or a directory holding elements.json)."""
    file = _record_file(path)
    return manifest_from_record(_read_json(file), file_resolver(file.parent))


def load_design(path, planner_mode: PlannerMode = PlannerMode.HEURISTIC, client=None,
                require_attributes: bool = True) -> Design:
    file = _record_file(path)
    return design_from_record(_read_json(file), file_resolver(file.parent), planner_mode, client, require_attributes)


# ----------------------
# Corpus
# ----------------------

@dataclass
class CorpusManifest:
    split: str
    design_count: int
    element_histogram: Dict[int, int]
    font_vocab: List[str]
    filter_report: Dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "design_count": self.design_count,
            "element_histogram": {str(k): v for k, v in sorted(self.element_histogram.items())},
            "font_vocab": list(self.font_vocab),
            "filter_report": dict(self.filter_report),
        }


def filter_by_element_count(designs: Sequence[Design], max_elements: int = MAX_ELEMENTS
                            ) -> Tuple[List[Design], List[Design]]:
    kept, dropped = [], []
    for d in designs:
        (kept if len(d.elements) <= max_elements else dropped).append(d)
    return kept, dropped


def _designs_dir(path: Path) -> Path:
    return path / "designs" if (path / "designs").is_dir() else path


def _split_ids(path: Path, split: str) -> Optional[List[str]]:
    split_file = path / "splits" / f"{split}.txt"
    if not split_file.is_file():
        if split != "all":
            logger.warning(f"[Dataset] No split file {split_file}; loading every design")
        return None
    with open(split_file, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def load_corpus(path, split: str = "all", max_elements: Optional[int] = None, jobs: int = 1,
                planner_mode: PlannerMode = PlannerMode.HEURISTIC, client=None,
                store: Optional[FontStore] = None) -> Tuple[List[Design], CorpusManifest]:
    root = Path(path)
    if not root.is_dir():
        raise MissingAsset(root)
    files = sorted(_designs_dir(root).glob("*.json"))
    ids = _split_ids(root, split)
    if ids is not None:
        by_stem = {f.stem: f for f in files}
        absent = [i for i in ids if i not in by_stem]
        if absent:
            raise MissingAsset(_designs_dir(root) / f"{absent[0]}.json")
        files = [by_stem[i] for i in ids]

    def _load(file: Path) -> Design:
        return design_from_record(_read_json(file), file_resolver(file.parent), planner_mode, client, store=store)

    if jobs > 1 and len(files) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            designs = list(pool.map(_load, files))
    else:
        designs = [_load(f) for f in files]

    report: Dict[str, str] = {}
    if max_elements is not None:
        designs, dropped = filter_by_element_count(designs, max_elements)
        for d in dropped:
            report[d.id] = f"{len(d.elements)} elements > {max_elements}"
    fonts = sorted({a.text.font for d in designs for a in d.attributes.values() if a.text is not None})
    manifest = CorpusManifest(split, len(designs), dict(Counter(len(d.elements) for d in designs)), fonts, report)
    logger.info(f"[Dataset] Loaded {len(designs)} designs from {root} ({len(report)} filtered)")
    return designs, manifest


# ----------------------
# Render cache
# ----------------------

def _element_digest(e: Element) -> str:
    h = hashlib.sha256()
    if e.is_text:
        h.update(e.text_content.encode("utf-8"))
    else:
        h.update(str(e.image_content.shape).encode("ascii"))
        h.update(np.ascontiguousarray(e.image_content).tobytes())
    return h.hexdigest()


def state_hashes(design: Design) -> Dict[int, str]:
    """Content hash of G_i: canvas plus plan, elements and attributes of layers 1..i."""
    c = design.canvas
    h = hashlib.sha256(json.dumps([c.width, c.height, list(c.background_color)]).encode("utf-8"))
    out = {}
    for role in ROLES_IN_ORDER:
        for element_id in design.plan.members(role):
            a = design.attributes.get(element_id)
            t = a.text if a is not None else None
            payload = [int(role), element_id, _element_digest(design.element(element_id)),
                       None if a is None else [a.bbox.left, a.bbox.top, a.bbox.width, a.bbox.height],
                       None if t is None else [t.angle, t.font, t.font_size, list(t.color), t.text_align,
                                               t.capitalize, t.letter_spacing, t.line_height]]
            h.update(json.dumps(payload).encode("utf-8"))
        h.update(f"|{int(role)}|".encode("ascii"))
        out[int(role)] = h.copy().hexdigest()
    return out


@dataclass
class CacheIndex:
    cache_dir: Path
    entries: Dict[str, Dict[str, dict]] = field(default_factory=dict)
    rendered: List[Tuple[str, int]] = field(default_factory=list)
    hits: int = 0

    def path(self, design_id: str, level: int) -> Path:
        return self.cache_dir / self.entries[design_id][f"G{level}"]["path"]

    def states(self, design_id: str) -> Dict[int, np.ndarray]:
        return {lvl: load_png(self.path(design_id, lvl)) for lvl in range(1, 6)}


def _load_index(cache_dir: Path) -> Dict[str, Dict[str, dict]]:
    file = cache_dir / CACHE_INDEX_NAME
    if not file.is_file():
        return {}
    try:
        with open(file, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError):
        logger.warning(f"[Cache] Unreadable index {file}; starting a fresh one")
        return {}


def cache_states(designs: Sequence[Design], store: FontStore, cache_dir,
                 opts: RenderOptions = RenderOptions(), jobs: int = 1) -> CacheIndex:
    """Render and store G1..G5 per design, re-rendering only from the first stale level."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index = CacheIndex(cache_dir, _load_index(cache_dir))
    lock = threading.Lock()

    def _one(design: Design) -> None:
        hashes = state_hashes(design)
        with lock:
            known = dict(index.entries.get(design.id, {}))
        first_stale = 6
        for lvl in range(1, 6):
            entry = known.get(f"G{lvl}")
            if not entry or entry.get("hash") != hashes[lvl] or not (cache_dir / entry["path"]).is_file():
                first_stale = lvl
                break
        hits = first_stale - 1
        if first_stale == 6:
            logger.debug(f"[Cache] {design.id}: all states cached")
            with lock:
                index.hits += hits
            return
        start = None
        if first_stale > 1:
            start = CanvasState.at(first_stale - 1, load_png(cache_dir / known[f"G{first_stale - 1}"]["path"]))
        states = render_states(design, store, opts, start=start)
        fresh = {}
        for state in states:
            if state.level < first_stale:
                continue
            rel = f"{design.id}/G{state.level}-{hashes[state.level][:16]}.png"
            buf = io.BytesIO()
            Image.fromarray(state.image).save(buf, format="PNG")
            _write_atomic(cache_dir / rel, buf.getvalue())
            old = known.get(f"G{state.level}")
            if old and old.get("path") != rel and (cache_dir / old["path"]).is_file():
                os.unlink(cache_dir / old["path"])
            fresh[f"G{state.level}"] = {"hash": hashes[state.level], "path": rel}
        logger.info(f"[Cache] {design.id}: {hits} hits, rendered G{first_stale}..G5")
        with lock:
            index.entries.setdefault(design.id, {}).update(fresh)
            index.hits += hits
            index.rendered += [(design.id, lvl) for lvl in range(first_stale, 6)]
            _write_atomic(cache_dir / CACHE_INDEX_NAME,
                          json.dumps(index.entries, indent=2, sort_keys=True).encode("utf-8"))

    if jobs > 1 and len(designs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_one, designs))
    else:
        for d in designs:
            _one(d)
    return index


# ----------------------
# Saliency
# ----------------------

def compute_saliency(raster: np.ndarray, width: int = SALIENCY_WIDTH) -> np.ndarray:
    """Spectral-residual saliency in [0, 1] at the raster's size; flat inputs give all zeros."""
    rgb = np.ascontiguousarray(raster[:, :, :3]) if raster.ndim == 3 else raster
    gray = cv2.cvtColor(rgb, cv2.COLOR_RGB2GRAY) if rgb.ndim == 3 else rgb
    h, w = gray.shape
    if int(gray.max()) == int(gray.min()):
        return np.zeros((h, w), dtype=np.float32)
    new_h = max(1, int(round(width * h / float(w))))
    small = cv2.resize(gray, (width, new_h), interpolation=cv2.INTER_AREA).astype(np.float32)

    c = cv2.dft(small, flags=cv2.DFT_COMPLEX_OUTPUT)
    mag = np.sqrt(c[:, :, 0] ** 2 + c[:, :, 1] ** 2)
    log_mag = np.log(mag + 1e-8)
    residual = np.exp(log_mag - cv2.boxFilter(log_mag, -1, (3, 3)))
    c[:, :, 0] = c[:, :, 0] * residual / (mag + 1e-8)
    c[:, :, 1] = c[:, :, 1] * residual / (mag + 1e-8)
    inv = cv2.dft(c, flags=cv2.DFT_INVERSE | cv2.DFT_SCALE)
    sal = inv[:, :, 0] ** 2 + inv[:, :, 1] ** 2

    sal = cv2.GaussianBlur(sal, (9, 9), 3)
    sal = cv2.resize(sal, (w, h), interpolation=cv2.INTER_LINEAR)
    lo, hi = float(sal.min()), float(sal.max())
    if hi - lo < 1e-12:
        return np.zeros((h, w), dtype=np.float32)
    return ((sal - lo) / (hi - lo)).astype(np.float32)


def load_saliency_png(path, canvas: Canvas) -> np.ndarray:
    if not Path(path).is_file():
        raise MissingAsset(path)
    gray = load_png(path, "L").astype(np.float32) / 255.0
    if gray.shape != (canvas.height, canvas.width):
        gray = cv2.resize(gray, (canvas.width, canvas.height), interpolation=cv2.INTER_LINEAR)
    return gray


def saliency_dir_provider(directory) -> Callable[[Design], Optional[np.ndarray]]:
    """Saliency maps named {design_id}.png; designs without one fall back to the computed map."""
    directory = Path(directory)

    def _provide(design: Design) -> Optional[np.ndarray]:
        file = directory / f"{design.id}.png"
        return load_saliency_png(file, design.canvas) if file.is_file() else None

    return _provide


# ----------------------
# Crello conversion
# ----------------------

_CRELLO_ALIGN = {1: "left", 2: "center", 3: "right"}
_crello_warned = threading.Event()


def convert_crello_record(row: dict) -> dict:
    """Map one row of the public Crello export to a DesignRecord dict.

    Geometry is stored normalized in Crello and scaled by the canvas size here.
    Font size, letter spacing and alignment codes are taken at face value.
    """
    if not _crello_warned.is_set():
        _crello_warned.set()
        logger.warning("[Dataset] Crello unit assumptions (font_size px, letter_spacing px, align codes 1..3) "
                       "are unverified against dataset renders")
    W, H = int(row["canvas_width"]), int(row["canvas_height"])
    design_id = str(row.get("id", "crello"))
    elements = []
    for k, kind in enumerate(row["type"]):
        element_id = f"{design_id}_{k}"
        left = int(round(float(row["left"][k]) * W))
        top = int(round(float(row["top"][k]) * H))
        width = int(round(float(row["width"][k]) * W))
        height = int(round(float(row["height"][k]) * H))
        attrs: Dict[str, object] = {"index": k, "left": left, "top": top, "width": width, "height": height}
        is_text = str(kind).lower().startswith("text")
        rec: Dict[str, object] = {"id": element_id, "modality": "text" if is_text else "image"}
        if is_text:
            align = row["text_align"][k]
            attrs.update({
                "angle": float(row.get("angle", [0.0] * len(row["type"]))[k]),
                "font": str(row["font"][k]),
                "font_size": max(1, int(round(float(row["font_size"][k])))),
                "color": [int(c) for c in row["color"][k]][:3],
                "text_align": _CRELLO_ALIGN.get(align, align) if not isinstance(align, str) else align,
                "capitalize": bool(row["capitalize"][k]) if not isinstance(row["capitalize"][k], str)
                else row["capitalize"][k],
                "letter_spacing": max(0.0, float(row["letter_spacing"][k])),
                "line_height": float(row["line_height"][k]) or 1.0,
            })
            rec["text"] = str(row["text"][k])
            rec["role"] = "text"
        else:
            image = row["image"][k]
            if isinstance(image, str):
                rec["image_path"] = image
            else:
                rgba = np.asarray(image.convert("RGBA")) if isinstance(image, Image.Image) else np.asarray(image)
                rec["image_data"] = encode_image_data(rgba)
        rec["attributes"] = attrs
        elements.append(rec)
    return {"id": design_id, "canvas": {"width": W, "height": H}, "elements": elements}
