from flask import Flask, request, jsonify
import logging
import math
import os
from dotenv import load_dotenv

from chat_client import ChatError, make_client
from codec import load_font_vocab
from composer import ComposeError, ComposeOptions, compose, compose_partial, make_backend
from dataset_io import (
    DatasetError, design_from_record, design_to_record, encode_image_data, manifest_from_record,
)
from design_model import ROLES_IN_ORDER, Canvas
from layer_planner import PlannerError, PlannerMode, plan_layers_with_rationale
from metrics import MetricError, default_content_inputs, score_design
from renderer import FontStore, RenderError

load_dotenv()

logger = logging.getLogger(__name__)

FONTS_DIR = os.getenv("LAYERED_FONTS", os.path.join(os.path.dirname(os.path.abspath(__file__)), "fonts"))
FONT_VOCAB_PATH = os.path.join(FONTS_DIR, "font_vocab.txt")

app = Flask(__name__)

# Initialized on first use
font_store = None
font_vocab = None


def get_fonts():
    """Font store and vocabulary shared by every request"""
    global font_store, font_vocab
    if font_store is None:
        font_store = FontStore(FONTS_DIR)
        font_vocab = load_font_vocab(FONT_VOCAB_PATH) if os.path.isfile(FONT_VOCAB_PATH) else None
        logger.info(f"[Service] Fonts ready ({len(font_store.families)} faces)")
    return font_store, font_vocab


def _no_images(ref):
    raise DatasetError(f"Image {ref!r} must be sent inline as image_data")


def _inline_image(element):
    return {"image_data": encode_image_data(element.image_content)}


def _client_for(backend_name):
    if backend_name == "remote":
        return make_client("remote", os.getenv("LAYERED_MODEL"), os.getenv("LAYERED_BASE_URL"))
    if backend_name == "gemini":
        return make_client("gemini", os.getenv("LAYERED_MODEL"))
    return None


def _body():
    body = request.get_json(silent=True)
    if not isinstance(body, dict):
        raise DatasetError("Request body must be a JSON object")
    return body


@app.route('/plan', methods=['POST'])
def plan():
    try:
        body = _body()
        manifest = manifest_from_record(body, _no_images)
        mode = PlannerMode(body.get("mode", PlannerMode.HEURISTIC.value))
        client = _client_for("remote") if mode != PlannerMode.HEURISTIC else None
        layer_plan, rationale = plan_layers_with_rationale(manifest.elements, manifest.canvas, mode, client)
    except (DatasetError, ValueError) as e:
        return jsonify({"status": "error", "message": str(e)}), 400
    except (PlannerError, ChatError) as e:
        logger.error(f"[Service] Planning failed: {e}")
        return jsonify({"status": "error", "message": str(e)}), 500
    return jsonify({
        "status": "success",
        "design_id": manifest.id,
        "layers": {role.label: list(layer_plan.members(role)) for role in ROLES_IN_ORDER},
        "rationale": rationale,
    })


@app.route('/compose', methods=['POST'])
def compose_route():
    try:
        body = _body()
        manifest = manifest_from_record(body, _no_images)
        backend_name = body.get("backend", "heuristic")
        if backend_name not in ("heuristic", "remote", "gemini"):
            raise ValueError(f"Unknown backend {backend_name!r}")
        canvas = manifest.canvas
        if body.get("canvas"):
            canvas = Canvas(int(body["canvas"]["width"]), int(body["canvas"]["height"]))
        given_layers = body.get("given_layers")
        store, vocab = get_fonts()
        opts = ComposeOptions(seed=body.get("seed"), font_vocab=vocab, font_store=store)
    except (DatasetError, ValueError, KeyError, TypeError) as e:
        return jsonify({"status": "error", "message": str(e)}), 400

    try:
        backend = make_backend(backend_name, _client_for(backend_name))
        layer_plan = manifest.plan()
        if given_layers is not None:
            design, trace = compose_partial(manifest.design(layer_plan), backend, opts, int(given_layers))
        else:
            design, trace = compose(manifest.elements, canvas, layer_plan, backend, opts, design_id=manifest.id)
        g5 = trace.states[-1].image
    except (ComposeError, PlannerError, RenderError, ChatError) as e:
        logger.error(f"[Service] Composition failed: {e}")
        return jsonify({"status": "error", "message": str(e)}), 500

    return jsonify({
        "status": "success",
        "design": design_to_record(design, _inline_image),
        "g5_png": encode_image_data(g5),
        "backend_calls": trace.backend_calls,
    })


@app.route('/score', methods=['POST'])
def score():
    try:
        body = _body()
        design = design_from_record(body, _no_images)
    except (DatasetError, ValueError) as e:
        return jsonify({"status": "error", "message": str(e)}), 400

    try:
        saliency = background = None
        if body.get("with_content"):
            store, _ = get_fonts()
            saliency, background = default_content_inputs(design, store)
        row = score_design(design, saliency, background)
    except MetricError as e:
        return jsonify({"status": "error", "message": str(e)}), 400
    except RenderError as e:
        return jsonify({"status": "error", "message": str(e)}), 500

    scores = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
    return jsonify({"status": "success", "scores": scores})


if __name__ == '__main__':
    app.run(debug=True, port=5001)
