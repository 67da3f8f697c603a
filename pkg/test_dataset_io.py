import json
import random
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dataset_io import (
    DESIGN_SCHEMA, MissingAsset, SchemaError, cache_states, compute_saliency, convert_crello_record,
    decode_image_data, design_from_record, design_to_record, encode_image_data, filter_by_element_count,
    load_corpus, load_design, load_elements, load_saliency_png, manifest_from_record, save_design,
    saliency_dir_provider, state_hashes,
)
from design_model import Canvas, Design, Element, ElementAttributes, LayerPlan, SemanticRole
from renderer import save_png
from conftest import CANVAS, gradient_rgba, solid_rgba


def _no_files(ref):
    raise MissingAsset(ref)


def _text_record(**attrs):
    base = {"index": 0, "left": 0, "top": 0, "width": 10, "height": 10, "angle": 0, "font": "Raleway",
            "font_size": 12, "color": [0, 0, 0], "text_align": "left", "capitalize": "false",
            "letter_spacing": 0, "line_height": 1.0}
    base.update(attrs)
    return {"id": "t", "canvas": {"width": 40, "height": 40},
            "elements": [{"id": "a", "modality": "text", "text": "Hi", "attributes": base}]}


def test_load_elements_from_directory(spring_clean_dir):
    manifest = load_elements(spring_clean_dir)
    assert manifest.id == "spring_clean"
    assert (manifest.canvas.width, manifest.canvas.height) == (1080, 1920)
    assert [e.id for e in manifest.elements] == ["e0", "e1", "e2", "e3"]
    assert manifest.elements[0].image_content.shape == (460, 1101, 4)
    assert not manifest.fully_planned
    plan = manifest.plan()
    assert plan.role_of("e1") == SemanticRole.BACKGROUND
    assert plan.members(SemanticRole.TEXT) == ("e2", "e3")


def test_save_and_load_design(spring_clean_design, tmp_path):
    path = save_design(spring_clean_design, tmp_path / "out" / "design.json")
    assert (tmp_path / "out" / "assets" / "spring_clean" / "e0.png").is_file()
    loaded = load_design(path)
    assert dict(loaded.attributes) == dict(spring_clean_design.attributes)
    assert loaded.plan.in_order() == spring_clean_design.plan.in_order()
    for a, b in zip(loaded.elements, spring_clean_design.elements):
        assert a.id == b.id
        if not a.is_text:
            assert np.array_equal(a.image_content, b.image_content)


def test_record_carries_roles_and_text_keys(spring_clean_design):
    record = design_to_record(spring_clean_design, lambda e: {"image_path": f"{e.id}.png"})
    assert [e["role"] for e in record["elements"]] == ["background", "logo/image", "text", "text"]
    text = record["elements"][2]["attributes"]
    assert text["font"] == "Raleway" and text["color"] == [29, 29, 27]
    assert "font" not in record["elements"][0]["attributes"]
    json.dumps(record)


def test_string_booleans_are_accepted():
    design = design_from_record(_text_record(capitalize="true"), _no_files)
    assert design.attributes["a"].text.capitalize is True


@pytest.mark.parametrize("record", [
    {"id": "x", "elements": []},
    {"id": "x", "canvas": {"width": 0, "height": 5}, "elements": []},
    _text_record(text_align="justify"),
    _text_record(font_size=0),
    {"id": "x", "canvas": {"width": 5, "height": 5}, "elements": [{"id": "a", "modality": "text", "text": " "}]},
    {"id": "x", "canvas": {"width": 5, "height": 5}, "elements": [{"id": "a", "modality": "image"}]},
    {"id": "x", "canvas": {"width": 5, "height": 5},
     "elements": [{"id": "a", "modality": "text", "text": "hi", "role": "sticker"}]},
])
def test_schema_errors(record):
    with pytest.raises(SchemaError):
        design_from_record(record, _no_files, require_attributes=False)


def test_text_attributes_must_be_complete():
    record = _text_record()
    del record["elements"][0]["attributes"]["line_height"]
    with pytest.raises(SchemaError) as exc:
        design_from_record(record, _no_files)
    assert "line_height" in exc.value.field


def test_missing_image_file(spring_clean_dir):
    (spring_clean_dir / "element_1.png").unlink()
    with pytest.raises(MissingAsset):
        load_elements(spring_clean_dir)
    with pytest.raises(MissingAsset):
        load_elements(spring_clean_dir / "nope")


def test_inline_image_data():
    raster = solid_rgba(3, 2, (1, 2, 3))
    encoded = encode_image_data(raster)
    assert np.array_equal(decode_image_data(encoded), raster)
    assert np.array_equal(decode_image_data("data:image/png;base64," + encoded), raster)
    record = {"id": "x", "canvas": {"width": 5, "height": 5},
              "elements": [{"id": "a", "modality": "image", "image_data": encoded, "role": "embellishment"}]}
    manifest = manifest_from_record(record, _no_files)
    assert manifest.fully_planned
    assert manifest.plan().role_of("a") == SemanticRole.EMBELLISHMENT


def test_corpus_splits_and_filter(spring_clean_design, random_design, write_corpus):
    rng = random.Random(5)
    others = [random_design(rng, design_id=f"r{k}") for k in range(3)]
    root = write_corpus([spring_clean_design] + others, splits={"test": ["r0", "spring_clean"]})
    designs, manifest = load_corpus(root, split="test")
    assert [d.id for d in designs] == ["r0", "spring_clean"]
    assert manifest.design_count == 2
    everything, _ = load_corpus(root, split="validation")
    assert len(everything) == 4
    small, manifest = load_corpus(root, max_elements=4, jobs=2)
    assert all(len(d.elements) <= 4 for d in small)
    assert set(manifest.filter_report) == {d.id for d in everything if len(d.elements) > 4}
    assert "Raleway" in load_corpus(root, split="test")[1].font_vocab
    kept, dropped = filter_by_element_count(everything, 0)
    assert kept == [] and len(dropped) == 4
    json.dumps(manifest.to_json())


def test_split_listing_unknown_design(write_corpus, spring_clean_design):
    root = write_corpus([spring_clean_design], splits={"test": ["ghost"]})
    with pytest.raises(MissingAsset):
        load_corpus(root, split="test")


def test_cache_renders_once_and_resumes(spring_clean_design, font_store, tmp_path):
    cache = tmp_path / "cache"
    first = cache_states([spring_clean_design], font_store, cache)
    assert len(first.rendered) == 5
    assert (cache / "index.json").is_file()
    states = first.states("spring_clean")
    assert sorted(states) == [1, 2, 3, 4, 5]

    second = cache_states([spring_clean_design], font_store, cache)
    assert second.rendered == [] and second.hits == 5

    moved = dict(spring_clean_design.attributes)
    old = moved["e3"]
    moved["e3"] = ElementAttributes("e3", old.index, replace(old.bbox, top=old.bbox.top + 40), old.text)
    edited = spring_clean_design.with_attributes(moved)
    third = cache_states([edited], font_store, cache)
    assert third.rendered == [("spring_clean", 4), ("spring_clean", 5)]
    assert third.hits == 3
    assert len(list((cache / "spring_clean").glob("*.png"))) == 5


def test_state_hashes_only_change_from_the_edited_layer(spring_clean_design):
    before = state_hashes(spring_clean_design)
    moved = dict(spring_clean_design.attributes)
    old = moved["e1"]
    moved["e1"] = ElementAttributes("e1", old.index, replace(old.bbox, left=0), None)
    after = state_hashes(spring_clean_design.with_attributes(moved))
    assert [before[k] == after[k] for k in range(1, 6)] == [True, True, False, False, False]


def test_saliency_range_and_flat_input(tmp_path):
    flat = np.full((40, 60, 3), 90, dtype=np.uint8)
    assert not compute_saliency(flat).any()
    busy = gradient_rgba(60, 40)[:, :, :3].copy()
    busy[10:20, 20:30] = 255
    sal = compute_saliency(busy)
    assert sal.shape == (40, 60)
    assert float(sal.min()) == pytest.approx(0.0) and float(sal.max()) == pytest.approx(1.0)
    provider = saliency_dir_provider(tmp_path)
    assert provider(type("D", (), {"id": "none", "canvas": CANVAS})()) is None


def test_crello_row_converts_to_a_valid_design():
    row = {
        "id": "c1", "canvas_width": 200, "canvas_height": 100,
        "type": ["imageElement", "textElement"],
        "left": [0.0, 0.1], "top": [0.0, 0.2], "width": [1.0, 0.5], "height": [1.0, 0.2],
        "angle": [0.0, 0.0], "text_align": [None, 2], "font": [None, "Raleway"], "font_size": [None, 12.0],
        "color": [None, [10, 20, 30]], "capitalize": [None, False], "letter_spacing": [None, 0.0],
        "line_height": [None, 1.2], "text": [None, "Hi"], "image": [solid_rgba(4, 2), None],
    }
    record = convert_crello_record(row)
    assert record["elements"][1]["attributes"]["left"] == 20
    design = design_from_record(record, _no_files)
    assert design.attributes["c1_1"].text.text_align == "center"
    # a small flat raster reads as an underlay whatever its placed size
    assert design.plan.role_of("c1_0") == SemanticRole.UNDERLAY


def test_schema_is_exported():
    assert set(DESIGN_SCHEMA["properties"]) == {"id", "canvas", "elements"}


def test_readme_documents_every_schema_field():
    readme = (Path(__file__).parent / "README.md").read_text(encoding="utf-8")
    section = readme.split("## Design JSON", 1)[1]
    fields = set(DESIGN_SCHEMA["properties"])
    for definition in DESIGN_SCHEMA["$defs"].values():
        fields |= set(definition["properties"])
    for name in fields:
        assert name in section, name


def _word_design(n):
    elements = tuple(Element.text(f"w{k}", "word") for k in range(n))
    plan = LayerPlan.from_assignment([e.id for e in elements], {e.id: SemanticRole.TEXT for e in elements})
    return Design(CANVAS, elements, plan, {}, f"n{n}")


def test_element_count_filter_boundary():
    kept, dropped = filter_by_element_count([_word_design(25), _word_design(26)])
    assert [d.id for d in kept] == ["n25"]
    assert [d.id for d in dropped] == ["n26"]
    assert filter_by_element_count([]) == ([], [])


def test_saliency_files_are_resized_to_the_canvas(tmp_path):
    sal = np.zeros((20, 10), dtype=np.uint8)
    sal[:, 5:] = 255
    save_png(sal, tmp_path / "poster.png")
    design = type("D", (), {"id": "poster", "canvas": Canvas(20, 40)})()
    loaded = saliency_dir_provider(tmp_path)(design)
    assert loaded.shape == (40, 20)
    assert float(loaded[:, :8].max()) == 0.0 and float(loaded[:, 12:].min()) == pytest.approx(1.0)
    with pytest.raises(MissingAsset):
        load_saliency_png(tmp_path / "none.png", Canvas(20, 40))


def _unlabelled_gt_record():
    logo = {"id": "logo", "modality": "image", "image_data": encode_image_data(solid_rgba(4, 4, (200, 30, 30))),
            "attributes": {"index": 0, "left": 5, "top": 5, "width": 30, "height": 12}}
    record = _text_record(index=1, top=20, width=30)
    record["id"] = "gt"
    record["elements"].insert(0, logo)
    return record


def test_remote_labels_of_attributed_records_see_the_whole_design(scripted_client, tmp_path):
    root = tmp_path / "corpus" / "designs"
    root.mkdir(parents=True)
    (root / "gt.json").write_text(json.dumps(_unlabelled_gt_record()), encoding="utf-8")
    client = scripted_client(["Logo/Image"])
    designs, _ = load_corpus(root.parent, planner_mode="remote", client=client)
    assert designs[0].plan.role_of("logo") == SemanticRole.LOGO_IMAGE
    assert designs[0].plan.role_of("a") == SemanticRole.TEXT
    (message,) = client.calls[0]["messages"]
    assert len(message.images) == 2
    assert "The canvas width is 40px, canvas height is 40px." in message.text
    # the ground-truth bbox, not the 4x4 source raster
    assert "The element width is 30px, element height is 12px." in message.text


def test_unattributed_elements_get_the_element_only_prompt(scripted_client):
    record = _unlabelled_gt_record()
    del record["elements"][0]["attributes"]
    client = scripted_client(["Embellishment"])
    manifest = manifest_from_record(record, _no_files)
    assert manifest.training_context() == {}
    assert manifest.plan("remote", client).role_of("logo") == SemanticRole.EMBELLISHMENT
    (message,) = client.calls[0]["messages"]
    assert len(message.images) == 1
