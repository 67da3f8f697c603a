import numpy as np
import pytest

from chat_client import ChatTransportError
from design_model import Canvas, Element, SemanticRole
from layer_planner import (
    LABELING_INSTRUCTIONS, LabelingRequest, PlannerMode, RemoteUnavailable, UnrecognizedLabel,
    build_labeling_prompt, heuristic_label, heuristic_label_with_rule, make_thumbnail, parse_label,
    plan_layers, plan_layers_with_rationale,
)
from conftest import CANVAS, auth_error, gradient_rgba, rejecting_openai_client, solid_rgba

SMALL = Canvas(100, 100)


def test_text_elements_always_go_to_text(spring_clean_elements):
    plan = plan_layers(spring_clean_elements, CANVAS)
    assert plan.members(SemanticRole.TEXT) == ("e2", "e3")


def test_heuristic_rules_in_order():
    assert heuristic_label(Element.image("bg", gradient_rgba(90, 90)), SMALL) == SemanticRole.BACKGROUND
    assert heuristic_label(Element.image("u", solid_rgba(40, 20)), SMALL) == SemanticRole.UNDERLAY
    assert heuristic_label(Element.image("em", gradient_rgba(10, 10)), SMALL) == SemanticRole.EMBELLISHMENT
    assert heuristic_label(Element.image("logo", gradient_rgba(40, 40)), SMALL) == SemanticRole.LOGO_IMAGE


def test_transparent_corners_are_not_a_rectangle():
    disc = solid_rgba(40, 40)
    yy, xx = np.mgrid[:40, :40]
    disc[(yy - 20) ** 2 + (xx - 20) ** 2 > 400, 3] = 0
    role, why = heuristic_label_with_rule(Element.image("disc", disc), SMALL)
    assert role == SemanticRole.LOGO_IMAGE
    assert why.startswith("rule 4")


def test_heuristic_worked_example_roles(spring_clean_elements):
    # a flat rectangle reads as an underlay; the oversized photo covers the canvas
    plan, rationale = plan_layers_with_rationale(spring_clean_elements, CANVAS)
    assert plan.role_of("e0") == SemanticRole.UNDERLAY
    assert plan.role_of("e1") == SemanticRole.BACKGROUND
    assert rationale["e2"] == "text content"


def test_remote_labels_worked_example(spring_clean_elements, scripted_client):
    client = scripted_client(["Background", "Logo/Image"])
    plan = plan_layers(spring_clean_elements, CANVAS, PlannerMode.REMOTE, client)
    assert [plan.role_of(i) for i in ("e0", "e1", "e2", "e3")] == [
        SemanticRole.BACKGROUND, SemanticRole.LOGO_IMAGE, SemanticRole.TEXT, SemanticRole.TEXT]
    assert all(c["temperature"] == 0.0 for c in client.calls)
    assert len(client.calls) == 2


def test_two_backgrounds_keep_the_larger(scripted_client):
    elements = [Element.image("small", gradient_rgba(10, 10)), Element.image("big", gradient_rgba(50, 50))]
    plan, rationale = plan_layers_with_rationale(elements, SMALL, PlannerMode.REMOTE,
                                                 scripted_client(lambda m: "background"))
    assert plan.members(SemanticRole.BACKGROUND) == ("big",)
    assert plan.role_of("small") == SemanticRole.LOGO_IMAGE
    assert "demoted" in rationale["small"]


def test_remote_mode_propagates_label_errors(scripted_client):
    elements = [Element.image("x", gradient_rgba(10, 10))]
    with pytest.raises(UnrecognizedLabel):
        plan_layers(elements, SMALL, PlannerMode.REMOTE, scripted_client(["Sticker"]))
    with pytest.raises(RemoteUnavailable):
        plan_layers(elements, SMALL, PlannerMode.REMOTE, scripted_client([]))
    with pytest.raises(RemoteUnavailable):
        plan_layers(elements, SMALL, PlannerMode.REMOTE, None)


def test_fallback_mode_uses_heuristic(scripted_client):
    elements = [Element.image("x", gradient_rgba(10, 10)), Element.image("y", solid_rgba(40, 20))]
    plan, rationale = plan_layers_with_rationale(elements, SMALL, PlannerMode.REMOTE_WITH_FALLBACK,
                                                 scripted_client(["Nonsense"]))
    assert plan.role_of("x") == SemanticRole.EMBELLISHMENT
    assert rationale["x"].startswith("fallback")
    assert rationale["y"].startswith("fallback")


def test_parallel_labels_are_keyed_by_element(scripted_client):
    def _reply(messages):
        return "Embellishment" if messages[0].images[0].shape[0] < 20 else "Logo/Image"

    elements = [Element.image(f"i{k}", gradient_rgba(10 + 10 * (k % 2), 10 + 10 * (k % 2))) for k in range(8)]
    plan = plan_layers(elements, SMALL, PlannerMode.REMOTE, scripted_client(_reply), jobs=4)
    for k in range(8):
        expected = SemanticRole.EMBELLISHMENT if k % 2 == 0 else SemanticRole.LOGO_IMAGE
        assert plan.role_of(f"i{k}") == expected
    assert plan.in_order()[:1] == ["i1"]


def test_parse_label_tolerates_punctuation():
    assert parse_label(" Underlay.\n") == SemanticRole.UNDERLAY
    assert parse_label("**Logo/Image**") == SemanticRole.LOGO_IMAGE
    with pytest.raises(UnrecognizedLabel):
        parse_label("The role is background")


def test_prompt_variants():
    img = solid_rgba(4, 4)
    short = build_labeling_prompt(LabelingRequest(img))
    assert short.text.startswith(LABELING_INSTRUCTIONS)
    assert short.text.count("<image>") == 1
    full = build_labeling_prompt(LabelingRequest(img, solid_rgba(8, 8), (1080, 1920), (4, 4)))
    assert full.text.count("<image>") == 2
    assert "canvas width is 1080px, canvas height is 1920px" in full.text
    assert "element width is 4px, element height is 4px" in full.text


def test_thumbnail_bounds_longest_side():
    thumb = make_thumbnail(gradient_rgba(1228, 1842))
    assert max(thumb.shape[:2]) == 512


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        plan_layers([], SMALL)


def test_heuristic_planning_is_repeatable():
    rng = np.random.default_rng(9)
    elements = []
    for k in range(6):
        h, w = (int(v) for v in rng.integers(4, 90, size=2))
        elements.append(Element.image(f"i{k}", rng.integers(0, 256, size=(h, w, 4), dtype=np.uint8)))
    elements.append(Element.text("t", "Hello"))
    first = plan_layers(elements, SMALL)
    for _ in range(1000):
        assert plan_layers(elements, SMALL) == first


def test_rejected_credentials_fall_back_per_element():
    elements = [Element.image("x", gradient_rgba(90, 90)), Element.image("y", gradient_rgba(10, 10))]
    client, _ = rejecting_openai_client(auth_error())
    plan, rationale = plan_layers_with_rationale(elements, SMALL, PlannerMode.REMOTE_WITH_FALLBACK, client)
    assert plan.role_of("x") == SemanticRole.BACKGROUND
    assert plan.role_of("y") == SemanticRole.EMBELLISHMENT
    assert all(why.startswith("fallback") for why in rationale.values())
    with pytest.raises(RemoteUnavailable):
        plan_layers(elements, SMALL, PlannerMode.REMOTE, client)
