"""Command-line entry point: plan, compose, render, export and eval.

Settings resolve as flags > --config file > LAYERED_* environment > defaults.
Credentials are only read from the environment variable named by api_key_env.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import psutil
from dotenv import dotenv_values, load_dotenv

from chat_client import ChatError, ConfigError, DEFAULT_GEMINI_KEY_ENV, DEFAULT_OPENAI_KEY_ENV, make_client
from codec import (
    CodecError, conversation_to_record, export_flat_conversation, export_training_conversation, load_font_vocab,
)
from composer import (
    DEFAULT_RETRIES, DEFAULT_TEMPERATURE, DEFAULT_TOP_P, ComposeError, ComposeOptions, CompositionTrace,
    LayerFailed, compose, compose_partial, fill_elements, make_backend, resize_compose, sample_variants,
)
from dataset_io import (
    DatasetError, cache_states, load_corpus, load_design, load_elements, saliency_dir_provider, save_design,
)
from design_model import ROLES_IN_ORDER, Canvas, Design
from layer_planner import PlannerError, PlannerMode, plan_layers_with_rationale
from metrics import GEOMETRY_COLUMNS, METRIC_COLUMNS, MetricError, calibration_check, evaluate_corpus
from renderer import FontStore, RenderError, RenderOptions, render_state, save_png

logger = logging.getLogger(__name__)

HERE = Path(__file__).resolve().parent
ENV_PREFIX = "LAYERED_"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


def _physical_cores() -> int:
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


@dataclass
class RunConfig:
    backend: str = "heuristic"
    model: Optional[str] = None
    base_url: Optional[str] = None
    api_key_env: Optional[str] = None
    planner_mode: str = PlannerMode.HEURISTIC.value
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    retries: int = DEFAULT_RETRIES
    seed: Optional[int] = 0
    jobs: int = 0
    fonts: str = str(HERE / "fonts")
    font_vocab: str = str(HERE / "fonts" / "font_vocab.txt")
    cache: Optional[str] = None
    out: str = "out"
    antialias: bool = True

    @classmethod
    def resolve(cls, flags: Dict[str, object], config_file: Optional[str] = None,
                environ: Optional[Dict[str, str]] = None) -> "RunConfig":
        environ = os.environ if environ is None else environ
        layers: List[Dict[str, object]] = [
            {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items() if k.startswith(ENV_PREFIX)},
        ]
        if config_file:
            if not Path(config_file).is_file():
                raise UsageError(f"Config file not found: {config_file}")
            values = dotenv_values(config_file)
            layers.append({k[len(ENV_PREFIX):].lower(): v for k, v in values.items()
                           if k.startswith(ENV_PREFIX) and v is not None})
        layers.append({k: v for k, v in flags.items() if v is not None})
        cfg, defaults = cls(), cls()
        known = {f.name for f in fields(cls)}
        for layer in layers:
            for key, value in layer.items():
                if key in known:
                    try:
                        setattr(cfg, key, _coerce(key, value, getattr(defaults, key)))
                    except ValueError:
                        raise UsageError(f"Invalid value for {key}: {value!r}")
        if cfg.jobs <= 0:
            cfg.jobs = _physical_cores()
        if cfg.backend not in ("heuristic", "replay", "remote", "gemini"):
            raise UsageError(f"Unknown backend {cfg.backend!r}")
        if cfg.planner_mode not in [m.value for m in PlannerMode]:
            raise UsageError(f"Unknown planner mode {cfg.planner_mode!r}")
        return cfg

    def compose_options(self) -> ComposeOptions:
        vocab = load_font_vocab(self.font_vocab) if Path(self.font_vocab).is_file() else None
        return ComposeOptions(self.temperature, self.top_p, self.retries, self.seed, vocab, FontStore(self.fonts),
                              self.render_options(), self.jobs)

    def render_options(self) -> RenderOptions:
        return RenderOptions(antialias=self.antialias)

    def client(self, kind: Optional[str] = None):
        kind = kind or ("gemini" if self.backend == "gemini" else "remote")
        default_env = DEFAULT_GEMINI_KEY_ENV if kind == "gemini" else DEFAULT_OPENAI_KEY_ENV
        return make_client(kind, self.model, self.base_url, self.api_key_env or default_env)


def _coerce(key: str, value, default):
    if isinstance(value, str):
        if isinstance(default, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        if key in ("retries", "jobs", "seed"):
            return None if key == "seed" and value.strip().lower() in ("", "none") else int(value)
        if key in ("temperature", "top_p"):
            return float(value)
    return value


def _parse_canvas(text: str) -> Canvas:
    try:
        w, h = text.lower().split("x")
        return Canvas(int(w), int(h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"canvas must look like 1080x1920, got {text!r}")


# ----------------------
# Output helpers
# ----------------------

def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)


def write_composition(out_dir: Path, design: Design, trace: CompositionTrace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_design(design, out_dir / "design.json")
    for state in trace.states[1:]:
        save_png(state.image, out_dir / f"G{state.level}.png")
    _write_json(out_dir / "trace.json", trace.to_json())
    logger.info(f"[CLI] Wrote {design.id} to {out_dir}")


def _plan_json(design_id: str, plan, rationale: Dict[str, str]) -> dict:
    return {
        "design_id": design_id,
        "layers": {role.label: list(plan.members(role)) for role in ROLES_IN_ORDER},
        "rationale": dict(rationale),
    }


# ----------------------
# Commands
# ----------------------

def cmd_plan(args, cfg: RunConfig) -> int:
    manifest = load_elements(args.elements)
    mode = PlannerMode(cfg.planner_mode)
    client = cfg.client() if mode != PlannerMode.HEURISTIC else None
    plan, rationale = plan_layers_with_rationale(manifest.elements, manifest.canvas, mode, client, cfg.jobs)
    _write_json(Path(cfg.out) / "plan.json", _plan_json(manifest.id, plan, rationale))
    return EXIT_OK


def _backend(args, cfg: RunConfig):
    client = cfg.client() if cfg.backend in ("remote", "gemini") else None
    record = args.record
    if record is not None and record.isdigit():
        record = int(record)
    return make_backend(cfg.backend, client, args.transcript, record if record is not None else 0)


def cmd_compose(args, cfg: RunConfig) -> int:
    if cfg.backend == "replay" and not args.transcript:
        raise UsageError("--backend replay needs --transcript")
    opts = replace(cfg.compose_options(), layered=not args.unlayered)
    backend = _backend(args, cfg)
    out = Path(cfg.out)
    mode = PlannerMode(cfg.planner_mode)
    planner_client = cfg.client() if mode != PlannerMode.HEURISTIC else None

    if args.fill:
        base = load_design(args.fill)
        new = load_elements(args.elements)
        design, trace = fill_elements(base, new.elements, backend, opts, mode, planner_client)
        write_composition(out, design, trace)
        return EXIT_OK

    manifest = load_elements(args.elements)
    plan = manifest.plan(mode, planner_client, cfg.jobs)
    if args.given_layers is not None:
        design, trace = compose_partial(manifest.design(plan), backend, opts, args.given_layers)
        write_composition(out, design, trace)
    elif args.canvas:
        for design, trace in resize_compose(manifest.elements, plan, backend, args.canvas, opts, with_traces=True):
            write_composition(out / design.id, design, trace)
    elif args.variants > 1:
        for design, trace in sample_variants(manifest.elements, manifest.canvas, plan, backend, args.variants,
                                             opts, with_traces=True):
            write_composition(out / design.id, design, trace)
    else:
        design, trace = compose(manifest.elements, manifest.canvas, plan, backend, opts, design_id=manifest.id)
        write_composition(out, design, trace)
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    design = load_design(args.design)
    state = render_state(design, args.upto, FontStore(cfg.fonts), cfg.render_options())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(state.image, out / f"G{state.level}.png")
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    mode = PlannerMode(cfg.planner_mode)
    client = cfg.client() if mode != PlannerMode.HEURISTIC else None
    store = FontStore(cfg.fonts)
    designs, manifest = load_corpus(args.corpus, args.split, args.max_elements, cfg.jobs, mode, client, store)
    if not designs:
        raise UsageError(f"No designs found under {args.corpus}")
    out = Path(cfg.out)
    index = None
    if args.variant == "layered":
        index = cache_states(designs, store, cfg.cache or out / "cache", cfg.render_options(), cfg.jobs)
    lines = []
    for k, design in enumerate(designs):
        seed = None if args.identity else (cfg.seed or 0) + k
        if args.variant == "layered":
            conv = export_training_conversation(design, seed, index.states(design.id))
        else:
            conv = export_flat_conversation(design, seed, planned=args.variant == "flat")
        paths = {}
        for slot, raster in conv.slots.items():
            if slot.startswith("G") and index is not None:
                target = index.path(design.id, int(slot[1:]))
            else:
                target = out / "images" / design.id / f"{slot}.png"
                target.parent.mkdir(parents=True, exist_ok=True)
                save_png(raster, target)
            paths[slot] = os.path.relpath(target, out)
        lines.append(json.dumps(conversation_to_record(conv, paths), ensure_ascii=False))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "conversations.jsonl", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    _write_json(out / "manifest.json", manifest.to_json())
    logger.info(f"[CLI] Exported {len(lines)} conversations to {out / 'conversations.jsonl'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    designs_dir = Path(args.designs)
    if not designs_dir.is_dir():
        raise UsageError(f"Not a directory: {designs_dir}")
    designs, _ = load_corpus(designs_dir, args.split, None, cfg.jobs)
    if not designs:
        raise UsageError(f"No designs found under {designs_dir}")
    provider = saliency_dir_provider(args.saliency) if args.saliency else None
    report = evaluate_corpus(designs, provider, not args.geometry_only, jobs=cfg.jobs, store=FontStore(cfg.fonts))
    columns = GEOMETRY_COLUMNS if args.geometry_only else METRIC_COLUMNS
    print(report.to_table(columns))
    out = Path(cfg.out)
    payload = report.to_json()
    if args.calibrate:
        payload["calibration"] = calibration_check(report)
        for metric, row in payload["calibration"].items():
            if metric in columns:
                status = "ok" if row["passed"] else "OFF"
                print(f"{metric:>6} {row['value']:.4f} vs {row['reference']:.4f} +/- {row['tolerance']} {status}")
    _write_json(out / "report.json", payload)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    return EXIT_OK


# ----------------------
# Parser
# ----------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--out")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--jobs", type=int)
    shared.add_argument("--fonts")
    shared.add_argument("--font-vocab", dest="font_vocab")
    shared.add_argument("--backend", choices=["replay", "heuristic", "remote", "gemini"])
    shared.add_argument("--temperature", type=float)
    shared.add_argument("--top-p", dest="top_p", type=float)
    shared.add_argument("--retries", type=int)
    shared.add_argument("--model")
    shared.add_argument("--base-url", dest="base_url")
    shared.add_argument("--api-key-env", dest="api_key_env", help="name of the env var holding the key")
    shared.add_argument("--no-antialias", dest="antialias", action="store_const", const=False)
    shared.add_argument("--config", help="dotenv-format file with LAYERED_* settings")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="layered", description="Layered design composition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[shared], help="assign semantic layers to elements")
    p.add_argument("--elements", required=True)
    p.add_argument("--mode", dest="planner_mode", choices=[m.value for m in PlannerMode])
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("compose", parents=[shared], help="compose a design layer by layer")
    p.add_argument("--elements", required=True)
    p.add_argument("--mode", dest="planner_mode", choices=[m.value for m in PlannerMode])
    p.add_argument("--transcript")
    p.add_argument("--record", help="conversation id or line number in the transcript")
    p.add_argument("--given-layers", dest="given_layers", type=int, choices=range(0, 6))
    p.add_argument("--variants", type=int, default=1)
    p.add_argument("--canvas", type=_parse_canvas, action="append")
    p.add_argument("--fill", help="base design to add the elements to")
    p.add_argument("--unlayered", action="store_true", help="do not feed intermediate renders back")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("render", parents=[shared], help="render a design up to a layer")
    p.add_argument("--design", required=True)
    p.add_argument("--upto", type=int, default=5, choices=range(0, 6))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export", parents=[shared], help="export training conversations")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", dest="planner_mode", choices=[m.value for m in PlannerMode],
                   help="labels for records without roles; remote modes see the rendered design")
    p.add_argument("--split", default="all")
    p.add_argument("--cache")
    p.add_argument("--max-elements", dest="max_elements", type=int)
    p.add_argument("--variant", choices=["layered", "flat", "flat-unplanned"], default="layered")
    p.add_argument("--identity", action="store_true", help="keep plan order instead of shuffling")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", parents=[shared], help="score a directory of designs")
    p.add_argument("--designs", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--saliency", help="directory of {design_id}.png saliency maps")
    p.add_argument("--geometry-only", dest="geometry_only", action="store_true")
    p.add_argument("--calibrate", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        flags = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
        cfg = RunConfig.resolve(flags, args.config)
        logger.debug(f"[CLI] Config: {asdict(cfg)}")
        return args.func(args, cfg)
    except (UsageError, ConfigError) as e:
        logger.error(f"[CLI] {e}")
        return EXIT_USAGE
    except LayerFailed as e:
        logger.error(f"[CLI] {e}")
        return EXIT_RUNTIME
    except (ComposeError, PlannerError, CodecError, RenderError, DatasetError, MetricError, ChatError,
            ValueError) as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
