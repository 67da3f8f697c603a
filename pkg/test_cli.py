import json
import random

import pytest

from cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, RunConfig, UsageError, main
from conftest import SPRING_CLEAN
from dataset_io import load_design, save_design

ROLES = {"e0": "background", "e1": "logo/image", "e2": "text", "e3": "text"}


@pytest.fixture
def planned_dir(spring_clean_dir):
    """The worked example with its layer roles written into the manifest."""
    path = spring_clean_dir / "elements.json"
    record = json.loads(path.read_text(encoding="utf-8"))
    for element in record["elements"]:
        element["role"] = ROLES[element["id"]]
    path.write_text(json.dumps(record), encoding="utf-8")
    return spring_clean_dir


def test_config_precedence(tmp_path):
    config = tmp_path / "run.env"
    config.write_text("LAYERED_SEED=5\nLAYERED_BACKEND=replay\n", encoding="utf-8")
    env = {"LAYERED_SEED": "3", "LAYERED_TEMPERATURE": "0.2", "LAYERED_ANTIALIAS": "false", "OTHER": "x"}
    cfg = RunConfig.resolve({"seed": None}, str(config), env)
    assert cfg.seed == 5 and cfg.backend == "replay"
    assert cfg.temperature == 0.2 and cfg.antialias is False
    assert cfg.jobs >= 1
    assert RunConfig.resolve({"seed": 9}, str(config), env).seed == 9
    with pytest.raises(UsageError):
        RunConfig.resolve({}, str(tmp_path / "missing.env"), {})
    with pytest.raises(UsageError):
        RunConfig.resolve({}, None, {"LAYERED_RETRIES": "many"})
    with pytest.raises(UsageError):
        RunConfig.resolve({"planner_mode": "psychic"}, None, {})


def test_plan_writes_layers(spring_clean_dir, tmp_path):
    out = tmp_path / "plan"
    assert main(["plan", "--elements", str(spring_clean_dir), "--out", str(out)]) == EXIT_OK
    plan = json.loads((out / "plan.json").read_text(encoding="utf-8"))
    assert plan["design_id"] == "spring_clean"
    assert plan["layers"]["text"] == ["e2", "e3"]
    assert set(plan["rationale"]) == {"e0", "e1", "e2", "e3"}


def test_compose_replay_writes_states(planned_dir, tmp_path):
    out = tmp_path / "composed"
    code = main(["compose", "--elements", str(planned_dir), "--backend", "replay",
                 "--transcript", str(SPRING_CLEAN / "transcript.jsonl"), "--record", "spring_clean", "--out", str(out)])
    assert code == EXIT_OK
    for level in range(1, 6):
        assert (out / f"G{level}.png").is_file()
    design = load_design(out / "design.json")
    assert design.attributes["e2"].text.font_size == 125
    trace = json.loads((out / "trace.json").read_text(encoding="utf-8"))
    assert trace["queried_turns"] == [1, 2, 3, 4, 5]


def test_replay_against_a_different_plan_fails(spring_clean_dir, tmp_path):
    # the heuristic plan swaps the two images, so the recorded layers no longer fit
    code = main(["compose", "--elements", str(spring_clean_dir), "--backend", "replay", "--retries", "0",
                 "--transcript", str(SPRING_CLEAN / "transcript.jsonl"), "--out", str(tmp_path / "x")])
    assert code == EXIT_RUNTIME


def test_replay_needs_a_transcript(planned_dir, tmp_path):
    assert main(["compose", "--elements", str(planned_dir), "--backend", "replay",
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_compose_variants_and_canvases(planned_dir, tmp_path):
    out = tmp_path / "many"
    assert main(["compose", "--elements", str(planned_dir), "--variants", "2", "--jobs", "1",
                 "--out", str(out)]) == EXIT_OK
    assert (out / "variant_0" / "G5.png").is_file() and (out / "variant_1" / "G5.png").is_file()
    sized = tmp_path / "sized"
    assert main(["compose", "--elements", str(planned_dir), "--canvas", "600x600", "--canvas", "800x400",
                 "--out", str(sized)]) == EXIT_OK
    assert load_design(sized / "canvas_800x400" / "design.json").canvas.width == 800


def test_compose_given_layers(spring_clean_design, tmp_path):
    base = save_design(spring_clean_design, tmp_path / "base" / "design.json")
    out = tmp_path / "typography"
    assert main(["compose", "--elements", str(base), "--given-layers", "3", "--out", str(out)]) == EXIT_OK
    design = load_design(out / "design.json")
    assert design.attributes["e1"] == spring_clean_design.attributes["e1"]
    trace = json.loads((out / "trace.json").read_text(encoding="utf-8"))
    assert trace["queried_turns"] == [4, 5]


def test_compose_fill(spring_clean_design, tmp_path):
    base = save_design(spring_clean_design, tmp_path / "base" / "design.json")
    extra = tmp_path / "extra.json"
    extra.write_text(json.dumps({"id": "extra", "canvas": {"width": 1080, "height": 1920},
                                 "elements": [{"id": "e4", "modality": "text", "text": "Read more"}]}),
                     encoding="utf-8")
    out = tmp_path / "filled"
    assert main(["compose", "--elements", str(extra), "--fill", str(base), "--out", str(out)]) == EXIT_OK
    assert "e4" in load_design(out / "design.json").attributes


def test_render_upto(spring_clean_design, tmp_path):
    path = save_design(spring_clean_design, tmp_path / "d" / "design.json")
    assert main(["render", "--design", str(path), "--upto", "3", "--out", str(tmp_path / "r")]) == EXIT_OK
    assert (tmp_path / "r" / "G3.png").is_file()


def test_export_identity_matches_the_recorded_transcript(spring_clean_design, spring_clean_record, write_corpus,
                                                         tmp_path):
    root = write_corpus([spring_clean_design])
    out = tmp_path / "export"
    assert main(["export", "--corpus", str(root), "--identity", "--out", str(out)]) == EXIT_OK
    lines = (out / "conversations.jsonl").read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[0])
    assert [c["value"] for c in record["conversations"]] == [c["value"] for c in spring_clean_record["conversations"]]
    assert sorted(record["images"]) == sorted(spring_clean_record["images"])
    for rel in record["images"].values():
        assert (out / rel).is_file()
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["design_count"] == 1


def test_export_flat_variant(spring_clean_design, write_corpus, tmp_path):
    root = write_corpus([spring_clean_design])
    out = tmp_path / "flat"
    assert main(["export", "--corpus", str(root), "--variant", "flat", "--out", str(out)]) == EXIT_OK
    record = json.loads((out / "conversations.jsonl").read_text(encoding="utf-8").splitlines()[0])
    assert record["variant"] == "flat"
    assert len(record["conversations"]) == 2


def test_export_is_reproducible_for_a_seed(spring_clean_design, random_design, write_corpus, tmp_path):
    rng = random.Random(2)
    root = write_corpus([spring_clean_design] + [random_design(rng, design_id=f"r{k}") for k in range(2)])
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["export", "--corpus", str(root), "--seed", "0", "--out", str(out)]) == EXIT_OK
        outputs.append((out / "conversations.jsonl").read_bytes())
    assert outputs[0] == outputs[1]
    lines = outputs[0].decode("utf-8").splitlines()
    assert len(lines) == 3
    assert all(sum(c["from"] == "gpt" for c in json.loads(line)["conversations"]) == 5 for line in lines)


def test_eval_prints_and_writes_reports(spring_clean_design, write_corpus, tmp_path, capsys):
    root = write_corpus([spring_clean_design])
    out = tmp_path / "eval"
    assert main(["eval", "--designs", str(root), "--geometry-only", "--calibrate", "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "Val" in printed and "Uti" not in printed
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["designs"][0]["design_id"] == "spring_clean"
    assert "calibration" in report
    assert (out / "report.csv").is_file()


def test_eval_missing_directory(tmp_path):
    assert main(["eval", "--designs", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_bad_canvas_flag_is_an_argparse_error(planned_dir):
    with pytest.raises(SystemExit) as exc:
        main(["compose", "--elements", str(planned_dir), "--canvas", "wide"])
    assert exc.value.code == 2


def test_identical_compose_runs_write_identical_files(planned_dir, tmp_path):
    outs = [tmp_path / "first", tmp_path / "second"]
    for out in outs:
        assert main(["compose", "--elements", str(planned_dir), "--backend", "heuristic", "--seed", "7",
                     "--out", str(out)]) == EXIT_OK
    names = sorted(p.relative_to(outs[0]).as_posix() for p in outs[0].rglob("*") if p.is_file())
    assert "trace.json" in names and "G5.png" in names
    assert names == sorted(p.relative_to(outs[1]).as_posix() for p in outs[1].rglob("*") if p.is_file())
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
