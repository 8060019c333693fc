from __future__ import annotations

import math
import random
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bc2chat.model import Action, BBox, NormPoint, ObjectInstance, SceneState
from bc2chat.textcodec import (
    CLOSER,
    FARTHER,
    N_BINS,
    SAME_DISTANCE,
    TOKEN_BASE,
    TOKEN_MAX,
    RelationParseError,
    SceneParseError,
    SpatialRelation,
    TemporalRelation,
    TokenAction,
    action_clause,
    dequantize,
    encode_action,
    encode_plan,
    encode_scene,
    encode_spatial_relation,
    encode_temporal_relation,
    fmt3,
    format_tokens,
    parse_actions,
    parse_actions_detailed,
    parse_relation,
    parse_relations,
    parse_scene,
    parse_scenes,
    parse_tokens,
    quantize,
    round_action,
    round_scene,
    rt2_decode,
    rt2_encode,
)

from reference_rows import OUTPUT_STEP2, STEP2, obj

grid = st.integers(0, 1000).map(lambda i: i / 1000)
unit = st.floats(0, 1, allow_nan=False)
rotation = st.integers(-359, 359)
names = st.text(st.characters(blacklist_characters="<>", blacklist_categories=("Cs",)), min_size=1, max_size=20)


def fraction_round3(x: float) -> str:
    """Independent half-away-from-zero rounding on the exact binary value's shortest decimal."""
    q = Fraction(Decimal(repr(x))) * 1000
    n = math.floor(abs(q) + Fraction(1, 2))
    n = -n if q < 0 else n
    s = f"{'-' if n < 0 else ''}{abs(n) // 1000}.{abs(n) % 1000:03d}"
    return "0.000" if s == "-0.000" else s


# --- numbers ------------------------------------------------------------------


@pytest.mark.parametrize("x,expected", [
    (0.5, "0.500"), (0.0005, "0.001"), (0.0015, "0.002"), (0.0025, "0.003"),
    (-0.0005, "-0.001"), (-0.0004, "0.000"), (-0.0, "0.000"), (0.9995, "1.000"), (1.0, "1.000"),
    (0.2465, "0.247"), (0.123456, "0.123"),
])
def test_fmt3_table(x, expected):
    assert fmt3(x) == expected


@given(st.floats(-10, 10, allow_nan=False))
def test_fmt3_matches_fraction_oracle(x):
    assert fmt3(x) == fraction_round3(x)


@given(st.floats(-10, 10, allow_nan=False))
def test_fmt3_shape_and_error(x):
    s = fmt3(x)
    assert s.split(".")[1].__len__() == 3
    assert abs(float(s) - x) <= 0.0005 + 1e-12


# --- actions --------------------------------------------------------------------


def test_encode_action_published_row():
    assert encode_action(STEP2) == OUTPUT_STEP2


def test_encode_action_anonymous_and_no_prefix():
    a = Action(NormPoint(0.48, 0.367), NormPoint(0.727, 0.547))
    assert encode_action(a) == (
        "Pick up the object at <b>(0.480, 0.367)</b>, rotate <r>[0]</r> degrees, "
        "and drop it at <b>(0.727, 0.547)</b>."
    )
    assert encode_action(STEP2, include_step_prefix=False).startswith("Pick up the <p>rainbow")


def test_action_clause_is_midsentence():
    c = action_clause(STEP2)
    assert c.startswith("pick up the <p>rainbow letter V</p>")
    assert c.endswith("</b>")


def test_parse_published_row():
    [a] = parse_actions(OUTPUT_STEP2)
    assert a == STEP2


def test_parse_no_actions():
    assert parse_actions("no actions here") == []


def test_parse_multi_step_keeps_textual_order():
    first = Action(NormPoint(0.1, 0.2), NormPoint(0.3, 0.4), 5, None, 3)
    second = Action(NormPoint(0.5, 0.6), NormPoint(0.7, 0.8), -5, "x", 4)
    got = parse_actions("plan:\n" + encode_plan([first, second]))
    assert got == [first, second]


def test_parse_is_lenient_on_case_and_spacing():
    text = "step 1:  pick up the OBJECT at <b>( 0.1 ,0.2 )</b> rotate <r>[ -7 ]</r> degrees and drop it at <b>(1, 0)</b>"
    [a] = parse_actions(text)
    assert a == Action(NormPoint(0.1, 0.2), NormPoint(1.0, 0.0), -7, None, 1)


@pytest.mark.parametrize("bad", [
    "Pick up the object at <b>(1.5, 0.2)</b>, rotate <r>[0]</r> degrees, and drop it at <b>(0.1, 0.1)</b>.",
    "Pick up the object at <b>(0.5, 0.2)</b>, rotate <r>[360]</r> degrees, and drop it at <b>(0.1, 0.1)</b>.",
    "Pick up the object at <b>(0.5, nan)</b>, rotate <r>[0]</r> degrees, and drop it at <b>(0.1, 0.1)</b>.",
    "Pick up the object at <b>(0.5, 0.2)</b>, rotate <r>[1.5]</r> degrees, and drop it at <b>(0.1, 0.1)</b>.",
    "Pick up the object at <b>(0.5)</b>, rotate <r>[1]</r> degrees, and drop it at <b>(0.1, 0.1)</b>.",
])
def test_parse_rejects_malformed_numbers_with_offset(bad):
    res = parse_actions_detailed("xé " + bad)
    assert res.actions == []
    assert [e.offset for e in res.errors] == [len("xé ".encode())]


@given(grid, grid, grid, grid, rotation, st.one_of(st.none(), names), st.one_of(st.none(), st.integers(1, 99)))
def test_roundtrip_grid_exact(px, py, qx, qy, r, name, step):
    a = Action(NormPoint(px, py), NormPoint(qx, qy), r, name, step)
    assert parse_actions(encode_action(a)) == [a]


@given(unit, unit, unit, unit, rotation)
def test_roundtrip_arbitrary_within_half_ulp(px, py, qx, qy, r):
    a = Action(NormPoint(px, py), NormPoint(qx, qy), r)
    [b] = parse_actions(encode_action(a))
    for u, v in ((a.pick.x, b.pick.x), (a.pick.y, b.pick.y), (a.place.x, b.place.x), (a.place.y, b.place.y)):
        assert abs(u - v) <= 5e-4 + 1e-12
    assert b.rotation_deg == r
    assert b == round_action(a)


@settings(max_examples=300)
@given(st.binary(max_size=300))
def test_parser_fuzz_never_raises(data):
    parse_actions_detailed(data)
    parse_scenes(data)
    parse_relations(data)
    parse_tokens(data)


@settings(max_examples=200)
@given(st.lists(st.sampled_from([
    "Pick up the ", "<p>", "</p>", " at ", "<b>(", "0.5", ", ", ")</b>", "rotate ", "<r>[", "]</r>",
    " degrees", ", and drop it at ", ".", "Step 3: ", "object", "-", "9",
]), max_size=40))
def test_parser_fuzz_grammar_fragments(parts):
    res = parse_actions_detailed("".join(parts))
    for a in res.actions:
        assert 0 <= a.pick.x <= 1 and -359 <= a.rotation_deg <= 359


# --- scenes -----------------------------------------------------------------------

objects = st.builds(
    lambda n, x, y, w, h: ObjectInstance(n, BBox(NormPoint(x, y), w, h)),
    names, grid, grid, grid, grid,
)


def test_encode_scene_forms():
    s = SceneState((obj("a", 0.1, 0.2, 0.3, 0.4), obj("b", 0.5, 0.5, 0.1, 0.1)))
    assert encode_scene(s) == (
        "<scene><p>a</p> at <b>(0.100, 0.200), {0.300, 0.400}</b>. "
        "<p>b</p> at <b>(0.500, 0.500), {0.100, 0.100}</b>.</scene>"
    )
    assert encode_scene(s, multiline=True).splitlines()[0] == "<scene>"
    assert encode_scene(SceneState()) == "<scene></scene>"


@given(st.lists(objects, max_size=6), st.booleans())
def test_scene_roundtrip(objs, multiline):
    s = SceneState(tuple(objs))
    assert parse_scene(encode_scene(s, multiline)) == round_scene(s)


def test_scene_errors():
    with pytest.raises(SceneParseError):
        parse_scene("<scene><p>a</p> at <b>(0.1, 0.2), {0.3, 0.4}</b>.")
    with pytest.raises(SceneParseError):
        parse_scene("<scene>garbage</scene>")
    with pytest.raises(SceneParseError):
        parse_scene("nothing")
    scenes, errors = parse_scenes("<scene></scene> <scene>bad</scene>")
    assert scenes == [SceneState()] and len(errors) == 1


# --- RT-2 tokens --------------------------------------------------------------------


def test_token_bijection_all_bins():
    for tok in range(TOKEN_BASE, TOKEN_MAX + 1):
        assert quantize(dequantize(tok)) == tok
    with pytest.raises(ValueError):
        dequantize(TOKEN_MAX + 1)


@given(unit)
def test_quantize_error_bound(v):
    assert abs(dequantize(quantize(v)) - v) <= 1 / (2 * N_BINS)


def test_quantize_clamps_edges():
    assert quantize(0.0) == TOKEN_BASE
    assert quantize(1.0) == TOKEN_MAX
    assert quantize(-3.0) == TOKEN_BASE and quantize(7.0) == TOKEN_MAX


@given(unit, unit, unit, unit, rotation)
def test_rt2_roundtrip_bounds(px, py, qx, qy, r):
    a = Action(NormPoint(px, py), NormPoint(qx, qy), r)
    b = rt2_decode(rt2_encode(a))
    assert abs(b.pick.x - px) <= 1 / 512 and abs(b.place.y - qy) <= 1 / 512
    assert abs(b.rotation_deg - r) <= math.ceil(718 / 512)
    assert rt2_encode(b) == rt2_encode(a)


def test_token_text_roundtrip():
    t = rt2_encode(STEP2)
    assert parse_tokens("reply: " + format_tokens(t)) == [t]
    assert parse_tokens("⟨act_31000⟩ ⟨act_31001⟩") == []
    with pytest.raises(ValueError):
        TokenAction((1, 2, 3, 4, 5))


# --- relations ------------------------------------------------------------------------


def test_spatial_same_position():
    a, b = obj("a", 0.3, 0.3, 0.1, 0.1), obj("b", 0.3, 0.3, 0.2, 0.2)
    text = encode_spatial_relation(a, b)
    assert "is at the same position as" in text
    assert parse_relation(text) == SpatialRelation("a", "b", (), 0.0, 0.0, 0.0)


@given(objects, objects)
def test_spatial_roundtrip(ego, ref):
    rel = parse_relation(encode_spatial_relation(ego, ref))
    dx, dy = ego.bbox.center.x - ref.bbox.center.x, ego.bbox.center.y - ref.bbox.center.y
    assert isinstance(rel, SpatialRelation)
    assert (rel.ego, rel.ref) == (ego.name, ref.name)
    assert rel.dx == float(fmt3(dx)) and rel.dy == float(fmt3(dy))
    assert rel.euclid == float(fmt3(math.hypot(dx, dy)))
    assert ("left" in rel.directions) == (dx < 0) and ("bottom" in rel.directions) == (dy > 0)


@given(objects, objects, grid, grid)
def test_temporal_roundtrip_and_verb(ego, ref, nx, ny):
    moved = ObjectInstance(ego.name, BBox(NormPoint(nx, ny), ego.bbox.w, ego.bbox.h))
    text = encode_temporal_relation(ego, ref, moved, ref)
    rel = parse_relation(text)
    assert isinstance(rel, TemporalRelation)
    d0 = math.dist((ego.bbox.center.x, ego.bbox.center.y), (ref.bbox.center.x, ref.bbox.center.y))
    d1 = math.dist((nx, ny), (ref.bbox.center.x, ref.bbox.center.y))
    expected = "same" if fmt3(d1 - d0) in ("0.000",) else ("farther" if d1 > d0 else "closer")
    assert rel.trend == expected
    assert text.startswith(f"<p>{ref.name}</p> ")


def test_temporal_verbs_are_distinct():
    assert len({FARTHER, CLOSER, SAME_DISTANCE}) == 3


def test_relations_in_order_and_error():
    a, b = obj("a", 0.1, 0.1, 0.1, 0.1), obj("b", 0.5, 0.5, 0.1, 0.1)
    text = encode_temporal_relation(a, b, b, a) + " then " + encode_spatial_relation(a, b)
    kinds = [type(r) for r in parse_relations(text)]
    assert kinds == [TemporalRelation, SpatialRelation]
    with pytest.raises(RelationParseError):
        parse_relation("nothing")


def test_random_bytes_smoke():
    rng = random.Random(0)
    for _ in range(200):
        parse_actions_detailed(bytes(rng.randrange(256) for _ in range(rng.randrange(64))))
