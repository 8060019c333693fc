from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bc2chat import simenv
from bc2chat.datagen import (
    PRESETS,
    AuxConfig,
    AuxEntry,
    AuxKind,
    BaseKind,
    GenRecipe,
    MissingDetectionsError,
    aux_pool,
    build_action_prediction,
    build_detection,
    build_dinbc,
    build_future_prediction,
    build_inbc,
    build_localization,
    build_rt2,
    build_spatial_scene,
    build_temporal,
    generate_dataset,
    mix,
    round_half_away,
    subsample,
    target_size,
)
from bc2chat.model import Conversation, FrameKind, Observation, SceneState, Step, Trajectory
from bc2chat.promptbank import ACTION_FORMAT_BLOCK, PoolKind, load_pool
from bc2chat.textcodec import parse_actions, parse_relation, parse_scene, parse_tokens, round_scene

import reference_rows as R


# --- base datasets -----------------------------------------------------------


def test_inbc_published_row():
    conv = build_inbc(R.put_into_trajectory())[1]
    assert conv.human == R.human_rows(R.TASK_LINE_INBC)
    assert conv.assistant == R.OUTPUT_STEP2
    assert conv.image_ref == "images/step1.ppm"


def test_dinbc_published_row_up_to_final_period():
    conv = build_dinbc(R.put_into_trajectory())[1]
    printed = R.human_rows(R.TASK_LINE_DINBC_PRINTED)
    assert conv.human == printed.replace("</b></task>", "</b>.</task>")
    assert conv.assistant == R.OUTPUT_STEP2


def test_first_step_has_no_history():
    conv = build_inbc(R.put_into_trajectory())[0]
    assert "You have finished" not in conv.human
    assert conv.assistant.splitlines() == [
        "Step 1: Pick up the <p>rainbow letter T</p> at <b>(0.480, 0.367)</b>, rotate <r>[0]</r> "
        "degrees, and drop it at <b>(0.727, 0.547)</b>.",
        R.OUTPUT_STEP2,
    ]


def test_plan_and_history_switches():
    t = R.put_into_trajectory()
    conv = build_inbc(t, GenRecipe(history=False, multi_step_plan=False))[0]
    assert conv.human == "\n".join(["<image>", R.TASK_LINE_INBC, ACTION_FORMAT_BLOCK])
    assert len(conv.assistant.splitlines()) == 1


def test_rt2_assistant_is_tokens():
    t = R.put_into_trajectory()
    convs = build_rt2(t)
    assert ACTION_FORMAT_BLOCK not in convs[1].human
    [tok] = parse_tokens(convs[1].assistant)
    assert len(tok.tokens) == 5
    described = build_rt2(t, describe=True)[1]
    assert "<b>(0.457, 0.531), {0.195, 0.328}</b>" in described.human


def test_missing_detections():
    t = R.put_into_trajectory()
    frames = dict(t.ref_frames)
    frames["base_obj"] = replace(frames["base_obj"], content=SceneState())
    with pytest.raises(MissingDetectionsError):
        build_dinbc(replace(t, ref_frames=frames))


def test_multi_object_frames():
    t = simenv.record_trajectory("stack_order", 1)
    inbc = build_inbc(t)[0].human
    assert "Stack objects in this order frame_0 frame_1 frame_2." in inbc
    dinbc = build_dinbc(t)[0].human
    assert dinbc.count("<scene>") == 3
    assert t.ref_frames["frame_0"].kind is FrameKind.MULTI_OBJECT_SCENE


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([k.value for k in simenv.TASK_KINDS]), st.integers(0, 10_000))
def test_base_answers_reparse(kind, seed):
    t = simenv.record_trajectory(kind, seed)
    for k, conv in enumerate(build_inbc(t)):
        acts = parse_actions(conv.assistant)
        assert len(acts) == len(t.steps) - k
        assert acts[0].step_index == k + 1
        assert conv.human.count("<image>") == 1


# --- auxiliary builders on published rows ---------------------------------------


def test_detection_answer_row():
    conv = build_detection(R.SCENE_T0, "img", GenRecipe(), "k")
    assert conv.assistant == R.DETECTION_ANSWER
    assert conv.human.split("\n", 1)[1] in load_pool(PoolKind.DETECTION)


def test_localization_answer_shape():
    conv = build_localization(R.SCENE_T0, "img", GenRecipe(seed=3), "k")
    name = conv.human.split("<p>")[1].split("</p>")[0]
    target = R.by_name(R.SCENE_T0, name)
    assert conv.assistant == f"<p>{name}</p> at " + conv.assistant.split(" at ", 1)[1]
    assert parse_scene("<scene>" + conv.assistant + "</scene>").objects[0] == round_scene(SceneState((target,))).objects[0]


def _two_frame_trajectory():
    first = R.SCENE_T0
    steps = (Step(Observation("a", first, 0), R.PREDICTED_ACTION),)
    return Trajectory("aux-fixture", R.put_into_trajectory().task, R.put_into_trajectory().ref_frames,
                      steps, Observation("b", R.SCENE_T1, 1))


def _seed_for(kind: PoolKind, prefix: str, build) -> Conversation:
    for seed in range(500):
        conv = build(seed)
        if conv.human.split("\n", 1)[1].startswith(prefix):
            return conv
    raise AssertionError("no seed picks the published template")


def test_action_prediction_row():
    t = _two_frame_trajectory()
    conv = _seed_for(PoolKind.ACTION_PREDICTION, "Can you explain what needs to be done to adjust",
                     lambda s: build_action_prediction(t, 0, GenRecipe(seed=s)))
    assert conv.human == "<image>\n" + R.ACTION_PREDICTION_QUESTION
    assert conv.assistant == R.ACTION_PREDICTION_ANSWER


def test_future_prediction_row():
    t = _two_frame_trajectory()
    conv = _seed_for(PoolKind.FUTURE_PREDICTION, "An image depicts a scene containing",
                     lambda s: build_future_prediction(t, 0, GenRecipe(seed=s)))
    assert conv.human == "<image>\n" + R.FUTURE_PREDICTION_QUESTION
    assert conv.assistant == "\n".join(
        ["<scene>"] + [ln for ln in R.SCENE_T1_INLINE[7:-8].replace("</b>. ", "</b>.\n").split("\n")] + ["</scene>"]
    )


def test_spatial_sample_is_self_consistent():
    conv = build_spatial_scene(R.SCENE_T0, "img", GenRecipe(seed=1), "k")
    rel = parse_relation(conv.assistant)
    assert f"<p>{rel.ego}</p>" in conv.human and f"<p>{rel.ref}</p>" in conv.human
    example = parse_relation(conv.human)
    assert {example.ego, example.ref} != {rel.ego, rel.ref}


def test_temporal_sample_is_self_consistent():
    t = _two_frame_trajectory()
    for seed in range(20):
        conv = build_temporal(t, 0, GenRecipe(seed=seed))
        rel = parse_relation(conv.assistant)
        example = parse_relation(conv.human)
        assert {example.ego, example.ref} != {rel.ego, rel.ref}
        assert R.SCENE_T1_INLINE in conv.human


def test_spatial_needs_three_objects():
    two = SceneState(R.SCENE_T0.objects[:2])
    assert build_spatial_scene(two, "img", GenRecipe(), "k") is None


def test_reference_images_switch():
    t = simenv.record_trajectory("put_on_top", 4)
    with_ref = aux_pool(AuxKind.LOCALIZATION, t, GenRecipe(), True)
    without = aux_pool(AuxKind.LOCALIZATION, t, GenRecipe(), False)
    assert len(with_ref) == len(without) + len(t.ref_frames)
    assert all(":" not in c.id for c in without)


# --- mixing -----------------------------------------------------------------------


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, 2.4999)] == [1, 2, 3, -1, 2]


@given(st.floats(0, 3, allow_nan=False), st.integers(1, 500), st.integers(0, 2000))
def test_target_size_rule(ratio, n_base, pool):
    n = target_size(ratio, n_base, pool)
    if ratio == 0 or pool == 0:
        assert n == 0
    else:
        assert 1 <= n <= pool
        assert n == min(max(round_half_away(ratio * n_base), 1), pool)


def _fake(prefix: str, n: int) -> list[Conversation]:
    return [Conversation(f"{prefix}{i}", "img", "h", "a") for i in range(n)]


@pytest.mark.parametrize("preset,size", [("A", 3000), ("B", 5000), ("C", 6000), ("D", 7000)])
def test_preset_sizes(preset, size):
    builders = {k: (lambda _u, k=k: _fake(k.value, 1500)) for k in AuxKind}
    out = mix(_fake("base", 1000), builders, AuxConfig.preset(preset, 1.0), seed=0)
    assert len(out) == size
    assert len({c.id for c in out.conversations}) == size


def test_starred_presets_drop_reference_images():
    for name, marks in PRESETS.items():
        cfg = AuxConfig.preset(name)
        for kind in cfg.enabled():
            assert cfg.entry(kind).use_reference_images is (not marks[kind])
    assert not AuxConfig.preset("D*").entry(AuxKind.SPATIAL).use_reference_images
    assert AuxConfig.preset("D*").entry(AuxKind.TEMPORAL).use_reference_images
    with pytest.raises(ValueError):
        AuxConfig.preset("E")


def test_mix_small_pool_and_empty_base():
    cfg = AuxConfig({AuxKind.DETECTION: AuxEntry(True, 5.0)})
    out = mix(_fake("b", 10), {AuxKind.DETECTION: lambda _u: _fake("d", 7)}, cfg, 1)
    assert out.counts == {"base": 10, "detection": 7}
    with pytest.raises(ValueError):
        mix([], {}, cfg, 1)


def test_mix_is_deterministic():
    builders = {k: (lambda _u, k=k: _fake(k.value, 50)) for k in AuxKind}
    a = mix(_fake("b", 20), builders, AuxConfig.preset("D", 0.5), 9)
    b = mix(_fake("b", 20), builders, AuxConfig.preset("D", 0.5), 9)
    c = mix(_fake("b", 20), builders, AuxConfig.preset("D", 0.5), 10)
    assert a.conversations == b.conversations != c.conversations


def test_generate_dataset_jobs_invariant():
    trajs = [simenv.record_trajectory(k, s) for k in simenv.TASK_KINDS for s in range(4)]
    recipe = GenRecipe(base=BaseKind.D_INBC, aux=AuxConfig.preset("D"), seed=5)
    one = generate_dataset(trajs, recipe, jobs=1)
    many = generate_dataset(trajs, recipe, jobs=3)
    assert one.mixed.conversations == many.mixed.conversations
    m = one.manifest(recipe)
    assert m["counts"]["base"] == sum(len(t.steps) for t in trajs)
    assert m["reference_sourced"]["spatial"] is True


def test_generate_dataset_skips_undescribable():
    t = R.put_into_trajectory()
    frames = dict(t.ref_frames)
    frames["base_obj"] = replace(frames["base_obj"], content=SceneState())
    out = generate_dataset([replace(t, ref_frames=frames), t], GenRecipe(base=BaseKind.D_INBC))
    assert [i for i, _ in out.skipped] == ["fixture-put-into"]
    assert len(out.mixed) == 2


# --- subsample ----------------------------------------------------------------------


def test_subsample_order_independent():
    trajs = [replace(R.put_into_trajectory(), id=f"t{i}") for i in range(40)]
    a = subsample(trajs, count=10, seed=3)
    b = subsample(list(reversed(trajs)), count=10, seed=3)
    assert {t.id for t in a} == {t.id for t in b}
    assert len(subsample(trajs, fraction=0.25, seed=3)) == 10
    with pytest.raises(ValueError):
        subsample(trajs, count=41)
    with pytest.raises(ValueError):
        subsample(trajs)
