"""Decorator-tagged action/scene/relation text and the 256-bin token codec.

Grammar summary (full contract in ``docs/grammar.md``)::

    action   := ["Step N: "] "Pick up the " ("<p>NAME</p>" | "object")
                " at <b>(X, Y)</b>, rotate <r>[R]</r> degrees, and drop it at <b>(X, Y)</b>."
    scene    := "<scene>" {"<p>NAME</p> at <b>(X, Y), {W, H}</b>."} "</scene>"
    spatial  := "<p>EGO</p> is DIR from <p>REF</p> with 2d center distance (x,y) of
                 <d>(X, Y)</d> and euclidean center distance of <e>E</e>."
    temporal := "<p>REF</p> VERB <p>EGO</p>. 2d center distance (x,y) of <p>EGO</p> from
                 <p>REF</p> changes by <d>(X, Y)</d> and Euclidean center distance between
                 them <e>E</e>."

Numbers are printed with exactly three decimals, rounding half away from zero.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence, Union

from . import kernels
from .model import Action, BBox, NormPoint, ObjectInstance, SceneState, ROTATION_LIMIT

_Q = Decimal("0.001")


def round3(x: float) -> float:
    return float(fmt3(x))


def fmt3(x: float) -> str:
    """Three-decimal string, half away from zero on the shortest decimal repr of ``x``."""
    s = str(Decimal(repr(float(x))).quantize(_Q, rounding=ROUND_HALF_UP))
    return "0.000" if s == "-0.000" else s


def format_point(p: NormPoint) -> str:
    return f"<b>({fmt3(p.x)}, {fmt3(p.y)})</b>"


def format_bbox(b: BBox) -> str:
    return f"<b>({fmt3(b.center.x)}, {fmt3(b.center.y)}), {{{fmt3(b.w)}, {fmt3(b.h)}}}</b>"


def format_object(o: ObjectInstance) -> str:
    """``<p>NAME</p> at <b>(x, y), {w, h}</b>`` without the closing period."""
    return f"<p>{o.name}</p> at {format_bbox(o.bbox)}"


def encode_action(a: Action, include_step_prefix: bool = True) -> str:
    who = "object" if a.picked_object_name is None else f"<p>{a.picked_object_name}</p>"
    body = (
        f"Pick up the {who} at {format_point(a.pick)}, rotate <r>[{a.rotation_deg}]</r> degrees, "
        f"and drop it at {format_point(a.place)}."
    )
    if include_step_prefix and a.step_index is not None:
        return f"Step {a.step_index}: {body}"
    return body


def encode_plan(actions: Sequence[Action]) -> str:
    """Several actions, one per line, each with its step prefix."""
    return "\n".join(encode_action(a) for a in actions)


def action_clause(a: Action) -> str:
    """Action sentence embedded mid-sentence: lower-case first letter, no final period."""
    s = encode_action(a, include_step_prefix=False)
    return s[0].lower() + s[1:-1]


# ---------------------------------------------------------------------------
# action parsing

_NUM = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)\Z")
_INT = re.compile(r"[-+]?\d+\Z")

_ACTION_RE = re.compile(
    r"(?:Step\s*(?P<step>\d+)\s*:\s*)?"
    r"Pick\s+up\s+the\s+(?:<p>(?P<name>[^<]*)</p>|object)\s*"
    r"at\s*<b>(?P<pick>[^<]*)</b>\s*,?\s*"
    r"rotate\s*<r>(?P<rot>[^<]*)</r>\s*degrees\s*,?\s*"
    r"and\s+drop\s+it\s+at\s*<b>(?P<place>[^<]*)</b>",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class ParseError:
    offset: int  # UTF-8 byte offset of the offending match
    message: str


@dataclass
class ActionParse:
    actions: list[Action] = field(default_factory=list)
    errors: list[ParseError] = field(default_factory=list)


def _as_text(text: Union[str, bytes]) -> str:
    if isinstance(text, (bytes, bytearray)):
        return bytes(text).decode("utf-8", errors="replace")
    return text


def _byte_offset(text: str, idx: int) -> int:
    return len(text[:idx].encode("utf-8", errors="surrogatepass"))


def _number(s: str) -> float:
    s = s.strip()
    if not _NUM.match(s):
        raise ValueError(f"malformed number {s!r}")
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"non-finite number {s!r}")
    return v


def _parse_pair(inner: str, what: str) -> NormPoint:
    inner = inner.strip()
    if not (inner.startswith("(") and inner.endswith(")")):
        raise ValueError(f"{what}: expected '(x, y)', got {inner!r}")
    parts = inner[1:-1].split(",")
    if len(parts) != 2:
        raise ValueError(f"{what}: expected two coordinates, got {inner!r}")
    x, y = (_number(p) for p in parts)
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"{what}: coordinates out of [0,1]: {inner!r}")
    return NormPoint(x, y)


def _parse_rotation(inner: str) -> int:
    inner = inner.strip()
    if not (inner.startswith("[") and inner.endswith("]")):
        raise ValueError(f"rotation: expected '[r]', got {inner!r}")
    body = inner[1:-1].strip()
    if not _INT.match(body):
        raise ValueError(f"rotation: malformed integer {body!r}")
    r = int(body)
    if not -ROTATION_LIMIT <= r <= ROTATION_LIMIT:
        raise ValueError(f"rotation {r} out of [-359,359]")
    return r


def parse_actions_detailed(text: Union[str, bytes]) -> ActionParse:
    """All grammar matches in order; malformed numerics become :class:`ParseError`."""
    text = _as_text(text)
    out = ActionParse()
    for m in _ACTION_RE.finditer(text):
        try:
            pick = _parse_pair(m.group("pick"), "pick")
            rot = _parse_rotation(m.group("rot"))
            place = _parse_pair(m.group("place"), "place")
        except ValueError as exc:
            out.errors.append(ParseError(_byte_offset(text, m.start()), str(exc)))
            continue
        step = m.group("step")
        name = m.group("name")
        out.actions.append(
            Action(
                pick=pick,
                place=place,
                rotation_deg=rot,
                picked_object_name=None if name is None else name,
                step_index=None if step is None or int(step) < 1 else int(step),
            )
        )
    return out


def parse_actions(text: Union[str, bytes]) -> list[Action]:
    return parse_actions_detailed(text).actions


# ---------------------------------------------------------------------------
# scenes


def encode_scene(s: SceneState, multiline: bool = False) -> str:
    """Scene block. ``multiline`` puts each clause on its own line (detection answers)."""
    clauses = [format_object(o) + "." for o in s.objects]
    if not clauses:
        return "<scene></scene>"
    if multiline:
        return "<scene>\n" + "\n".join(clauses) + "\n</scene>"
    return "<scene>" + " ".join(clauses) + "</scene>"


class SceneParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


_CLAUSE_RE = re.compile(
    r"\s*<p>(?P<name>[^<]*)</p>\s*at\s*<b>\s*\((?P<xy>[^)<]*)\)\s*,\s*\{(?P<wh>[^}<]*)\}\s*</b>\s*\.?"
)


def _parse_box(xy: str, wh: str) -> BBox:
    pxy = xy.split(",")
    pwh = wh.split(",")
    if len(pxy) != 2 or len(pwh) != 2:
        raise ValueError("expected (x, y), {w, h}")
    x, y = (_number(v) for v in pxy)
    w, h = (_number(v) for v in pwh)
    return BBox(NormPoint(x, y), w, h)


def _parse_scene_at(text: str, start: int) -> tuple[SceneState, int]:
    """Parse the scene whose ``<scene>`` tag starts at ``start``; returns (scene, end)."""
    body_start = start + len("<scene>")
    end = text.find("</scene>", body_start)
    if end < 0:
        raise SceneParseError("missing </scene>", _byte_offset(text, start))
    objects = []
    pos = body_start
    while pos < end:
        if not text[pos:end].strip():
            break
        m = _CLAUSE_RE.match(text, pos, end)
        if m is None:
            raise SceneParseError("malformed scene clause", _byte_offset(text, pos))
        try:
            box = _parse_box(m.group("xy"), m.group("wh"))
        except ValueError as exc:
            raise SceneParseError(f"malformed scene clause: {exc}", _byte_offset(text, pos)) from None
        objects.append(ObjectInstance(m.group("name"), box, 0))
        pos = m.end()
    return SceneState(tuple(objects)), end + len("</scene>")


def parse_scene(text: Union[str, bytes]) -> SceneState:
    """Parse the first ``<scene>`` block of ``text``."""
    text = _as_text(text)
    start = text.find("<scene>")
    if start < 0:
        raise SceneParseError("no <scene> tag", 0)
    return _parse_scene_at(text, start)[0]


def parse_scenes(text: Union[str, bytes]) -> tuple[list[SceneState], list[SceneParseError]]:
    text = _as_text(text)
    scenes, errors = [], []
    pos = text.find("<scene>")
    while pos >= 0:
        try:
            scene, nxt = _parse_scene_at(text, pos)
            scenes.append(scene)
        except SceneParseError as exc:
            errors.append(exc)
            nxt = pos + len("<scene>")
        pos = text.find("<scene>", nxt)
    return scenes, errors


def round_scene(s: SceneState) -> SceneState:
    """What a scene looks like after a trip through text: 3-decimal boxes, no rotation."""
    return SceneState(
        tuple(
            ObjectInstance(
                o.name,
                BBox(NormPoint(round3(o.bbox.center.x), round3(o.bbox.center.y)),
                     round3(o.bbox.w), round3(o.bbox.h)),
                0,
            )
            for o in s.objects
        )
    )


def round_action(a: Action) -> Action:
    return replace(
        a,
        pick=NormPoint(round3(a.pick.x), round3(a.pick.y)),
        place=NormPoint(round3(a.place.x), round3(a.place.y)),
    )


# ---------------------------------------------------------------------------
# RT-2 style token codec

TOKEN_BASE = 31000
N_BINS = 256
TOKEN_MAX = TOKEN_BASE + N_BINS - 1


def normalize_rotation(r: float) -> float:
    return (r + ROTATION_LIMIT) / (2 * ROTATION_LIMIT)


def denormalize_rotation(v: float) -> float:
    return v * (2 * ROTATION_LIMIT) - ROTATION_LIMIT


@dataclass(frozen=True)
class TokenAction:
    tokens: tuple[int, int, int, int, int]

    def __post_init__(self):
        if len(self.tokens) != 5:
            raise ValueError(f"expected 5 tokens, got {len(self.tokens)}")
        for t in self.tokens:
            if not TOKEN_BASE <= t <= TOKEN_MAX:
                raise ValueError(f"token {t} outside [{TOKEN_BASE}, {TOKEN_MAX}]")


def action_vector(a: Action) -> list[float]:
    """Normalized (pick.x, pick.y, rotation, place.x, place.y)."""
    return [a.pick.x, a.pick.y, normalize_rotation(a.rotation_deg), a.place.x, a.place.y]


def quantize(v: float) -> int:
    return TOKEN_BASE + kernels.quantize_bins([v], N_BINS)[0]


def dequantize(token: int) -> float:
    if not TOKEN_BASE <= token <= TOKEN_MAX:
        raise ValueError(f"token {token} outside [{TOKEN_BASE}, {TOKEN_MAX}]")
    return (token - TOKEN_BASE + 0.5) / N_BINS


def rt2_encode(a: Action) -> TokenAction:
    bins = kernels.quantize_bins(action_vector(a), N_BINS)
    return TokenAction(tuple(TOKEN_BASE + b for b in bins))


def rt2_decode(t: TokenAction) -> Action:
    px, py, rot, qx, qy = (dequantize(tok) for tok in t.tokens)
    return Action(
        pick=NormPoint(px, py),
        place=NormPoint(qx, qy),
        rotation_deg=int(round(denormalize_rotation(rot))),
    )


def format_tokens(t: TokenAction) -> str:
    """Textual surrogate of the special tokens, e.g. ``⟨act_31000⟩ ⟨act_31128⟩ ...``."""
    return " ".join(f"⟨act_{tok}⟩" for tok in t.tokens)


_TOKEN_RE = re.compile("⟨act_(\\d+)⟩")


def parse_tokens(text: Union[str, bytes]) -> list[TokenAction]:
    """Group token surrogates in order into 5-token actions; out-of-range groups are dropped."""
    ids = [int(m.group(1)) for m in _TOKEN_RE.finditer(_as_text(text))]
    out = []
    for i in range(0, len(ids) - 4, 5):
        group = tuple(ids[i : i + 5])
        if all(TOKEN_BASE <= t <= TOKEN_MAX for t in group):
            out.append(TokenAction(group))
    return out


# ---------------------------------------------------------------------------
# relations


def center_offset(ego: ObjectInstance, ref: ObjectInstance) -> tuple[float, float]:
    return (ego.bbox.center.x - ref.bbox.center.x, ego.bbox.center.y - ref.bbox.center.y)


def direction_words(dx: float, dy: float) -> list[str]:
    words = []
    if dx < 0:
        words.append("left")
    elif dx > 0:
        words.append("right")
    if dy < 0:
        words.append("top")
    elif dy > 0:
        words.append("bottom")
    return words


SAME_PLACE = "at the same position as"


def encode_spatial_relation(ego: ObjectInstance, ref: ObjectInstance) -> str:
    dx, dy = center_offset(ego, ref)
    words = direction_words(dx, dy)
    where = f"is {' and '.join(words)} from" if words else f"is {SAME_PLACE}"
    return (
        f"<p>{ego.name}</p> {where} <p>{ref.name}</p> with 2d center distance (x,y) of "
        f"<d>({fmt3(dx)}, {fmt3(dy)})</d> and euclidean center distance of "
        f"<e>{fmt3(math.hypot(dx, dy))}</e>."
    )


FARTHER = "moves far away from"
CLOSER = "gets closer to"
SAME_DISTANCE = "stays the same distance from"


def encode_temporal_relation(
    ego0: ObjectInstance, ref0: ObjectInstance, ego1: ObjectInstance, ref1: ObjectInstance
) -> str:
    dx0, dy0 = center_offset(ego0, ref0)
    dx1, dy1 = center_offset(ego1, ref1)
    de = math.hypot(dx1, dy1) - math.hypot(dx0, dy0)
    de_text = fmt3(de)
    if float(de_text) == 0.0:
        verb = SAME_DISTANCE
    else:
        verb = FARTHER if de > 0 else CLOSER
    return (
        f"<p>{ref0.name}</p> {verb} <p>{ego0.name}</p>. 2d center distance (x,y) of "
        f"<p>{ego0.name}</p> from <p>{ref0.name}</p> changes by "
        f"<d>({fmt3(dx1 - dx0)}, {fmt3(dy1 - dy0)})</d> and Euclidean center distance "
        f"between them <e>{de_text}</e>."
    )


@dataclass(frozen=True)
class SpatialRelation:
    ego: str
    ref: str
    directions: tuple[str, ...]
    dx: float
    dy: float
    euclid: float


@dataclass(frozen=True)
class TemporalRelation:
    ego: str
    ref: str
    trend: str  # "farther" | "closer" | "same"
    ddx: float
    ddy: float
    deuclid: float


Relation = Union[SpatialRelation, TemporalRelation]

_D = r"<d>\s*\((?P<dx>[^,<]*),(?P<dy>[^)<]*)\)\s*</d>"
_SPATIAL_RE = re.compile(
    r"<p>(?P<ego>[^<]*)</p>\s*is\s+(?P<where>[a-z ]+?)\s*<p>(?P<ref>[^<]*)</p>\s*"
    r"with\s+2d\s+center\s+distance\s*\(x,\s*y\)\s*of\s*" + _D +
    r"\s*and\s+euclidean\s+center\s+distance\s+of\s*<e>(?P<e>[^<]*)</e>",
    re.IGNORECASE,
)
_TEMPORAL_RE = re.compile(
    r"<p>(?P<ref>[^<]*)</p>\s*(?P<verb>moves far away from|gets closer to|stays the same distance from)"
    r"\s*<p>(?P<ego>[^<]*)</p>\.\s*2d\s+center\s+distance\s*\(x,\s*y\)\s*of\s*<p>(?P<ego2>[^<]*)</p>"
    r"\s*from\s*<p>(?P<ref2>[^<]*)</p>\s*changes\s+by\s*" + _D +
    r"\s*and\s+Euclidean\s+center\s+distance\s+between\s+them\s*<e>(?P<e>[^<]*)</e>",
    re.IGNORECASE,
)
_TRENDS = {FARTHER: "farther", CLOSER: "closer", SAME_DISTANCE: "same"}
_DIR_WORDS = {"left", "right", "top", "bottom"}


class RelationParseError(ValueError):
    pass


def _spatial_from_match(m: re.Match) -> SpatialRelation:
    where = " ".join(m.group("where").lower().split())
    if where == SAME_PLACE:
        dirs: tuple[str, ...] = ()
    else:
        if not where.endswith(" from"):
            raise RelationParseError(f"bad direction phrase {where!r}")
        dirs = tuple(w for w in where[: -len(" from")].split(" and "))
        if not dirs or any(w not in _DIR_WORDS for w in dirs):
            raise RelationParseError(f"bad direction phrase {where!r}")
    return SpatialRelation(
        m.group("ego"), m.group("ref"), dirs,
        _number(m.group("dx")), _number(m.group("dy")), _number(m.group("e")),
    )


def _temporal_from_match(m: re.Match) -> TemporalRelation:
    if m.group("ego") != m.group("ego2") or m.group("ref") != m.group("ref2"):
        raise RelationParseError("object names disagree between the two clauses")
    return TemporalRelation(
        m.group("ego"), m.group("ref"), _TRENDS[m.group("verb").lower()],
        _number(m.group("dx")), _number(m.group("dy")), _number(m.group("e")),
    )


def parse_relations(text: Union[str, bytes]) -> list[Relation]:
    """Every well-formed relation in ``text``, in order of appearance."""
    text = _as_text(text)
    found = []
    for m in _TEMPORAL_RE.finditer(text):
        try:
            found.append((m.start(), _temporal_from_match(m)))
        except ValueError:
            pass
    for m in _SPATIAL_RE.finditer(text):
        try:
            found.append((m.start(), _spatial_from_match(m)))
        except ValueError:
            pass
    found.sort(key=lambda x: x[0])
    return [r for _, r in found]


def parse_relation(text: Union[str, bytes]) -> Relation:
    rels = parse_relations(text)
    if not rels:
        raise RelationParseError("no relation found")
    return rels[0]
