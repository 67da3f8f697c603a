"""Layout quality metrics.

Geometry: validity, overlap, alignment, underlay effectiveness (loose and strict).
Content: canvas utility, occlusion and text readability against a saliency map
and the rendered non-text layers.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd

from design_model import BBox, Design, SemanticRole, area, clip_to_canvas, intersect

logger = logging.getLogger(__name__)

GEOMETRY_COLUMNS = ["Val", "Ove", "Ali", "Und_l", "Und_s"]
CONTENT_COLUMNS = ["Uti", "Occ", "Rea"]
METRIC_COLUMNS = GEOMETRY_COLUMNS + CONTENT_COLUMNS

# Published ground-truth rows: metric -> (value, tolerance)
GT_REFERENCE: Dict[str, Tuple[float, float]] = {
    "Val": (0.9265, 0.02),
    "Ove": (0.0768, 0.02),
    "Ali": (0.0015, 0.001),
    "Und_l": (0.6848, 0.03),
    "Und_s": (0.6732, 0.03),
    "Uti": (0.4737, 0.05),
    "Occ": (0.1628, 0.05),
    "Rea": (0.0709, 0.03),
}


class MetricError(ValueError):
    pass


class NoScorableElements(MetricError):
    pass


class EmptyNonSalientRegion(MetricError):
    pass


@dataclass(frozen=True)
class EligibilityPolicy:
    exclude_background: bool = True
    underlays_in_geometry: bool = False
    validity_area_ratio: float = 0.001
    saliency_threshold: float = 0.5
    alignment_eps: float = 1e-6


DEFAULT_POLICY = EligibilityPolicy()


# ----------------------
# Element sets
# ----------------------

def _scorable(design: Design, policy: EligibilityPolicy) -> List[Tuple[str, SemanticRole, Optional[BBox]]]:
    out = []
    for element_id in design.plan.in_order():
        role = design.plan.role_of(element_id)
        if policy.exclude_background and role == SemanticRole.BACKGROUND:
            continue
        attrs = design.attributes.get(element_id)
        if attrs is None:
            raise MetricError(f"Element {element_id} has no attributes")
        out.append((element_id, role, clip_to_canvas(attrs.bbox, design.canvas)))
    return out


def _is_valid(b: Optional[BBox], design: Design, policy: EligibilityPolicy) -> bool:
    return b is not None and area(b) >= policy.validity_area_ratio * design.canvas.area


def _eligible(design: Design, policy: EligibilityPolicy) -> List[BBox]:
    return [b for _, role, b in _scorable(design, policy)
            if _is_valid(b, design, policy) and (policy.underlays_in_geometry or role != SemanticRole.UNDERLAY)]


# ----------------------
# Geometry metrics
# ----------------------

def score_validity(design: Design, policy: EligibilityPolicy = DEFAULT_POLICY) -> float:
    items = _scorable(design, policy)
    if not items:
        raise NoScorableElements(f"Design {design.id} has no scorable elements")
    return sum(1 for _, _, b in items if _is_valid(b, design, policy)) / float(len(items))


def score_overlap(design: Design, policy: EligibilityPolicy = DEFAULT_POLICY) -> float:
    boxes = _eligible(design, policy)
    if len(boxes) < 2:
        return 0.0
    ratios = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            smaller = min(area(boxes[i]), area(boxes[j]))
            ratios.append(area(intersect(boxes[i], boxes[j])) / float(smaller))
    return float(np.mean(ratios))


def _axes(b: BBox, width: int, height: int) -> np.ndarray:
    x0, x1 = b.left / float(width), b.right / float(width)
    y0, y1 = b.top / float(height), b.bottom / float(height)
    return np.array([x0, (x0 + x1) / 2.0, x1, y0, (y0 + y1) / 2.0, y1])


def score_alignment(design: Design, policy: EligibilityPolicy = DEFAULT_POLICY) -> float:
    boxes = _eligible(design, policy)
    if len(boxes) < 2:
        return 0.0
    axes = np.stack([_axes(b, design.canvas.width, design.canvas.height) for b in boxes])
    # pairwise per-axis distances, (n, n, 6)
    dist = np.abs(axes[:, None, :] - axes[None, :, :])
    n = len(boxes)
    dist[np.arange(n), np.arange(n), :] = np.inf
    d = np.clip(dist.min(axis=(1, 2)), 0.0, 1.0 - policy.alignment_eps)
    return float(np.mean(-np.log(1.0 - d)))


def score_underlay(design: Design,
                   policy: EligibilityPolicy = DEFAULT_POLICY) -> Optional[Tuple[float, float]]:
    """(loose, strict) means over underlays; None when the design has no underlay."""
    items = _scorable(design, policy)
    underlays = [b for _, role, b in items if role == SemanticRole.UNDERLAY]
    if not underlays:
        return None
    others = [b for _, role, b in items if role != SemanticRole.UNDERLAY and _is_valid(b, design, policy)]
    loose, strict = [], []
    for u in underlays:
        best, contained = 0.0, 0.0
        if u is not None:
            for e in others:
                covered = area(intersect(e, u))
                best = max(best, covered / float(area(e)))
                if covered == area(e):
                    contained = 1.0
        loose.append(best)
        strict.append(contained)
    return float(np.mean(loose)), float(np.mean(strict))


# ----------------------
# Content metrics
# ----------------------

def _union_mask(boxes: Sequence[Optional[BBox]], height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        if b is not None:
            mask[b.top:b.bottom, b.left:b.right] = True
    return mask


def _check_saliency(saliency: np.ndarray, design: Design) -> np.ndarray:
    if saliency.shape[:2] != (design.canvas.height, design.canvas.width):
        raise MetricError(f"Saliency map {saliency.shape} does not match canvas "
                          f"{design.canvas.width}x{design.canvas.height}")
    return saliency.astype(np.float64)


def score_utility(design: Design, saliency: np.ndarray, policy: EligibilityPolicy = DEFAULT_POLICY) -> float:
    sal = _check_saliency(saliency, design)
    free = sal < policy.saliency_threshold
    if not free.any():
        raise EmptyNonSalientRegion(f"Design {design.id} has no non-salient pixels")
    covered = _union_mask([b for _, _, b in _scorable(design, policy)], *sal.shape)
    return float((covered & free).sum()) / float(free.sum())


def score_occlusion(design: Design, saliency: np.ndarray, policy: EligibilityPolicy = DEFAULT_POLICY) -> float:
    sal = _check_saliency(saliency, design)
    covered = _union_mask([b for _, _, b in _scorable(design, policy)], *sal.shape)
    if not covered.any():
        return 0.0
    return float(sal[covered].mean())


def gradient_magnitude(raster: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude of the grayscale raster scaled to [0, 1]."""
    if raster.ndim == 3:
        gray = cv2.cvtColor(np.ascontiguousarray(raster[:, :, :3]), cv2.COLOR_RGB2GRAY)
    else:
        gray = raster
    gy, gx = np.gradient(gray.astype(np.float64) / 255.0)
    return np.sqrt(gx ** 2 + gy ** 2)


def score_readability(design: Design, background_raster: np.ndarray,
                      policy: EligibilityPolicy = DEFAULT_POLICY) -> float:
    """Mean background gradient under each text box; 0 with no on-canvas text."""
    magnitude = gradient_magnitude(background_raster)
    per_text = []
    for element_id in design.plan.members(SemanticRole.TEXT):
        b = clip_to_canvas(design.attributes[element_id].bbox, design.canvas)
        if b is None:
            continue
        per_text.append(float(magnitude[b.top:b.bottom, b.left:b.right].mean()))
    return float(np.mean(per_text)) if per_text else 0.0


# ----------------------
# Reports
# ----------------------

@dataclass
class ScoreReport:
    rows: List[dict] = field(default_factory=list)
    errors: Dict[str, str] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=["design_id", "elements"] + METRIC_COLUMNS)
        return frame.set_index("design_id")

    @property
    def means(self) -> Dict[str, float]:
        """Arithmetic means over designs; missing values (no underlay, errors) are skipped."""
        frame = self.to_frame()
        out = {}
        for col in METRIC_COLUMNS:
            values = pd.to_numeric(frame[col], errors="coerce")
            out[col] = float(values.mean()) if values.notna().any() else float("nan")
        return out

    def to_table(self, columns: Optional[Sequence[str]] = None) -> str:
        columns = list(columns or METRIC_COLUMNS)
        means = pd.DataFrame([self.means], index=["mean"])[columns]
        return means.to_string(float_format=lambda v: f"{v:.4f}", na_rep="-")

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, float_format="%.6f")

    def to_json(self) -> dict:
        clean = lambda v: None if isinstance(v, float) and math.isnan(v) else v
        return {
            "designs": [{k: clean(v) for k, v in row.items()} for row in self.rows],
            "means": {k: clean(v) for k, v in self.means.items()},
            "errors": dict(self.errors),
        }


def score_design(design: Design, saliency: Optional[np.ndarray] = None,
                 background: Optional[np.ndarray] = None,
                 policy: EligibilityPolicy = DEFAULT_POLICY) -> dict:
    row = {"design_id": design.id, "elements": len(design.elements)}
    row["Val"] = score_validity(design, policy)
    row["Ove"] = score_overlap(design, policy)
    row["Ali"] = score_alignment(design, policy)
    und = score_underlay(design, policy)
    row["Und_l"], row["Und_s"] = und if und is not None else (float("nan"), float("nan"))
    nan = float("nan")
    row["Uti"] = score_utility(design, saliency, policy) if saliency is not None else nan
    row["Occ"] = score_occlusion(design, saliency, policy) if saliency is not None else nan
    row["Rea"] = score_readability(design, background, policy) if background is not None else nan
    return row


def default_content_inputs(design: Design, store=None) -> Tuple[np.ndarray, np.ndarray]:
    """Saliency of the rendered background layer (G1) and the non-text render (G3)."""
    from dataset_io import compute_saliency
    from renderer import FontStore, render_states

    states = render_states(design, store or FontStore(None), upto=3)
    return compute_saliency(states[1].image), states[3].image


def evaluate_corpus(designs: Sequence[Design],
                    saliency_provider: Optional[Callable[[Design], Optional[np.ndarray]]] = None,
                    with_content: bool = True, policy: EligibilityPolicy = DEFAULT_POLICY,
                    jobs: int = 1, store=None) -> ScoreReport:
    """Per-design scores plus corpus means; a failing design is reported, not raised."""

    def _one(design: Design):
        try:
            saliency = background = None
            if with_content:
                fallback_saliency, background = default_content_inputs(design, store)
                supplied = saliency_provider(design) if saliency_provider is not None else None
                saliency = supplied if supplied is not None else fallback_saliency
            return score_design(design, saliency, background, policy), None
        except Exception as e:
            logger.warning(f"[Eval] {design.id}: {type(e).__name__}: {e}")
            return None, f"{type(e).__name__}: {e}"

    if jobs > 1 and len(designs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one, designs))
    else:
        results = [_one(d) for d in designs]

    report = ScoreReport()
    for design, (row, error) in zip(designs, results):
        if error is not None:
            report.errors[design.id] = error
            row = {"design_id": design.id, "elements": len(design.elements)}
            row.update({col: float("nan") for col in METRIC_COLUMNS})
        report.rows.append(row)
    logger.info(f"[Eval] Scored {len(designs) - len(report.errors)}/{len(designs)} designs")
    return report


def calibration_check(report: ScoreReport) -> Dict[str, dict]:
    means = report.means
    out = {}
    for metric, (reference, tolerance) in GT_REFERENCE.items():
        value = means.get(metric, float("nan"))
        passed = not math.isnan(value) and abs(value - reference) <= tolerance
        out[metric] = {"value": value, "reference": reference, "tolerance": tolerance, "passed": passed}
    return out
