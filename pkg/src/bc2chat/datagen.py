"""Compile trajectories into conversation datasets.

Base datasets (one conversation per step): inBC, D-inBC, RT-2 style and its
detection-described twin. Auxiliary datasets: localization, detection,
action prediction, future prediction, spatial and temporal relations.
:func:`mix` combines a base dataset with sampled auxiliary pools.

Every seeded choice goes through :func:`bc2chat.promptbank.choice_index` with
a key of ``(trajectory id, step, dataset kind, field)``.
"""

from __future__ import annotations

import enum
import hashlib
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .model import (
    IMAGE_TOKEN,
    Action,
    Conversation,
    FrameKind,
    ObjectInstance,
    RefFrame,
    SceneState,
    TaskSpec,
    Trajectory,
    normalize_name,
)
from .promptbank import (
    ACTION_FORMAT_BLOCK,
    HISTORY_PREFIX,
    TASK_CLOSE,
    TASK_OPEN,
    PoolKind,
    choice_index,
    fill_template,
    pick_template,
)
from .textcodec import (
    action_clause,
    encode_action,
    encode_plan,
    encode_scene,
    encode_spatial_relation,
    encode_temporal_relation,
    format_object,
    format_tokens,
    rt2_encode,
)


class BaseKind(str, enum.Enum):
    INBC = "inBC"
    D_INBC = "D_inBC"
    RT2 = "RT2"
    D_RT2 = "D_RT2"

    @property
    def describes_frames(self) -> bool:
        return self in (BaseKind.D_INBC, BaseKind.D_RT2)

    @property
    def tokens(self) -> bool:
        return self in (BaseKind.RT2, BaseKind.D_RT2)


class AuxKind(str, enum.Enum):
    LOCALIZATION = "localization"
    DETECTION = "detection"
    ACTION_PREDICTION = "action_prediction"
    FUTURE_PREDICTION = "future_prediction"
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


# kinds whose candidate scenes may come from reference images
REFERENCE_SOURCED = (AuxKind.LOCALIZATION, AuxKind.DETECTION, AuxKind.SPATIAL)


@dataclass(frozen=True)
class AuxEntry:
    enabled: bool = False
    ratio: float = 0.0
    use_reference_images: bool = True


@dataclass(frozen=True)
class AuxConfig:
    entries: Mapping[AuxKind, AuxEntry] = field(default_factory=dict)

    def entry(self, kind: AuxKind) -> AuxEntry:
        return self.entries.get(kind, AuxEntry())

    def enabled(self) -> list[AuxKind]:
        return [k for k in AuxKind if self.entry(k).enabled]

    @classmethod
    def none(cls) -> "AuxConfig":
        return cls({})

    @classmethod
    def preset(cls, name: str, ratio: float = 1.0) -> "AuxConfig":
        """Named configurations A, A*, B, C, D, D*; ``none`` disables everything."""
        if name.lower() == "none":
            return cls.none()
        try:
            marks = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown aux preset {name!r}; known: {sorted(PRESETS)}") from None
        return cls({
            kind: AuxEntry(True, ratio, use_reference_images=not starred)
            for kind, starred in marks.items()
        })

    def to_json(self) -> dict:
        return {
            k.value: {
                "enabled": e.enabled,
                "ratio": e.ratio,
                "use_reference_images": e.use_reference_images,
            }
            for k, e in ((k, self.entry(k)) for k in AuxKind)
        }


_L, _D, _A, _F, _S, _T = AuxKind
# kind -> starred (reference images not used)
PRESETS: dict[str, dict[AuxKind, bool]] = {
    "A": {_L: False, _D: False},
    "A*": {_L: True, _D: True},
    "B": {_L: False, _D: False, _A: False, _F: False},
    "C": {_L: False, _D: False, _A: False, _F: False, _S: False},
    "D": {_L: False, _D: False, _A: False, _F: False, _S: False, _T: False},
    "D*": {_L: True, _D: True, _A: False, _F: False, _S: True, _T: False},
}


@dataclass(frozen=True)
class GenRecipe:
    base: BaseKind = BaseKind.INBC
    aux: AuxConfig = field(default_factory=AuxConfig.none)
    seed: int = 0
    history: bool = True
    multi_step_plan: bool = True

    def to_json(self) -> dict:
        return {
            "base": self.base.value,
            "aux": self.aux.to_json(),
            "seed": self.seed,
            "history": self.history,
            "multi_step_plan": self.multi_step_plan,
        }


class MissingDetectionsError(ValueError):
    """A reference frame has no detections, so it cannot be described in text."""


# ---------------------------------------------------------------------------
# human turn pieces, shared with the inference-time prompt assembly


def render_task(task: TaskSpec, ref_frames: Mapping[str, RefFrame], describe: bool) -> str:
    parts = []
    for seg in task.segments:
        if isinstance(seg, str):
            parts.append(seg)
            continue
        frame = ref_frames[seg.frame_id]
        if describe:
            if not frame.content.objects:
                raise MissingDetectionsError(f"frame {seg.frame_id!r} has no detections")
            if frame.kind is FrameKind.SINGLE_OBJECT:
                parts.append(format_object(frame.content.objects[0]))
            else:
                parts.append(encode_scene(frame.content))
        elif frame.kind is FrameKind.SINGLE_OBJECT and frame.content.objects:
            parts.append(f"<p>{frame.content.objects[0].name}</p>")
        else:
            parts.append(seg.frame_id)
    return TASK_OPEN + "".join(parts) + TASK_CLOSE


def history_clause(history: Sequence[Action]) -> str:
    done = [
        encode_action(replace(a, picked_object_name=None, step_index=i + 1))
        for i, a in enumerate(history)
    ]
    return HISTORY_PREFIX + " ".join(done)


def human_turn(
    task: TaskSpec,
    ref_frames: Mapping[str, RefFrame],
    recipe: GenRecipe,
    history: Sequence[Action],
) -> str:
    lines = [IMAGE_TOKEN, render_task(task, ref_frames, recipe.base.describes_frames)]
    if not recipe.base.tokens:
        lines.append(ACTION_FORMAT_BLOCK)
    if recipe.history and history:
        lines.append(history_clause(history))
    return "\n".join(lines)


def _numbered(actions: Sequence[Action], first_index: int) -> list[Action]:
    return [replace(a, step_index=first_index + i) for i, a in enumerate(actions)]


def base_assistant(t: Trajectory, k: int, recipe: GenRecipe) -> str:
    if recipe.base.tokens:
        return format_tokens(rt2_encode(t.steps[k].action))
    end = len(t.steps) if recipe.multi_step_plan else k + 1
    return encode_plan(_numbered([s.action for s in t.steps[k:end]], k + 1))


# ---------------------------------------------------------------------------
# base datasets


def build_base(t: Trajectory, recipe: GenRecipe) -> list[Conversation]:
    """One conversation per step for the recipe's base dataset kind."""
    convs = []
    history: list[Action] = []
    for k, st in enumerate(t.steps):
        convs.append(
            Conversation(
                id=_key(t.id, k, recipe.base.value),
                image_ref=st.observation.image_ref,
                human=human_turn(t.task, t.ref_frames, recipe, history),
                assistant=base_assistant(t, k, recipe),
            )
        )
        history.append(st.action)
    return convs


def build_inbc(t: Trajectory, recipe: GenRecipe = GenRecipe()) -> list[Conversation]:
    return build_base(t, replace(recipe, base=BaseKind.INBC))


def build_dinbc(t: Trajectory, recipe: GenRecipe = GenRecipe()) -> list[Conversation]:
    return build_base(t, replace(recipe, base=BaseKind.D_INBC))


def build_rt2(t: Trajectory, recipe: GenRecipe = GenRecipe(), describe: bool = False) -> list[Conversation]:
    return build_base(t, replace(recipe, base=BaseKind.D_RT2 if describe else BaseKind.RT2))


# ---------------------------------------------------------------------------
# auxiliary samples


def _human(text: str) -> str:
    return f"{IMAGE_TOKEN}\n{text}"


def _tagged(name: str) -> str:
    return f"<p>{name}</p>"


def _unique_objects(scene: SceneState) -> list[ObjectInstance]:
    """Objects whose normalized name occurs once in the scene."""
    counts: dict[str, int] = {}
    for o in scene.objects:
        counts[normalize_name(o.name)] = counts.get(normalize_name(o.name), 0) + 1
    return [o for o in scene.objects if counts[normalize_name(o.name)] == 1]


def _key(*parts: object) -> str:
    return "/".join(map(str, parts))


def build_localization(
    scene: SceneState, image_ref: str, recipe: GenRecipe, key: str
) -> Optional[Conversation]:
    if not scene.objects:
        return None
    obj = scene.objects[choice_index(len(scene.objects), recipe.seed, key, "object")]
    if scene.find(obj.name) is None:
        return None
    template = pick_template(PoolKind.LOCALIZATION, recipe.seed, key)
    return Conversation(
        id=key,
        image_ref=image_ref,
        human=_human(fill_template(template, {"object": _tagged(obj.name)})),
        assistant=format_object(obj) + ".",
    )


def build_detection(
    scene: SceneState, image_ref: str, recipe: GenRecipe, key: str
) -> Optional[Conversation]:
    if not scene.objects:
        return None
    template = pick_template(PoolKind.DETECTION, recipe.seed, key)
    return Conversation(key, image_ref, _human(template), encode_scene(scene, multiline=True))


def build_action_prediction(t: Trajectory, k: int, recipe: GenRecipe) -> Optional[Conversation]:
    nxt = t.observation_after(k)
    if nxt is None:
        return None
    key = _key(t.id, k, AuxKind.ACTION_PREDICTION.value)
    template = pick_template(PoolKind.ACTION_PREDICTION, recipe.seed, key)
    text = fill_template(template, {"scene": encode_scene(nxt.scene)}) + " " + ACTION_FORMAT_BLOCK
    action = replace(t.steps[k].action, step_index=None)
    return Conversation(key, t.steps[k].observation.image_ref, _human(text), encode_action(action, False))


def build_future_prediction(t: Trajectory, k: int, recipe: GenRecipe) -> Optional[Conversation]:
    nxt = t.observation_after(k)
    if nxt is None:
        return None
    key = _key(t.id, k, AuxKind.FUTURE_PREDICTION.value)
    template = pick_template(PoolKind.FUTURE_PREDICTION, recipe.seed, key)
    text = fill_template(template, {"pick and place": action_clause(t.steps[k].action)})
    return Conversation(
        key, t.steps[k].observation.image_ref, _human(text), encode_scene(nxt.scene, multiline=True)
    )


def _pick_pair_and_exemplar(n: int, seed: int, key: str) -> Optional[tuple[tuple[int, int], tuple[int, int]]]:
    """Ordered (ego, ref) pair plus an exemplar pair over a different unordered pair."""
    if n < 3:
        return None
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    chosen = pairs[choice_index(len(pairs), seed, key, "pair")]
    others = [p for p in pairs if set(p) != set(chosen)]
    exemplar = others[choice_index(len(others), seed, key, "example")]
    return chosen, exemplar


def _as_exemplar(sentence: str) -> str:
    # templates already close the sentence after {example}
    return sentence[:-1] if sentence.endswith(".") else sentence


def build_spatial_scene(
    scene: SceneState, image_ref: str, recipe: GenRecipe, key: str
) -> Optional[Conversation]:
    objs = _unique_objects(scene)
    picked = _pick_pair_and_exemplar(len(objs), recipe.seed, key)
    if picked is None:
        return None
    (i, j), (a, b) = picked
    template = pick_template(PoolKind.SPATIAL, recipe.seed, key)
    text = fill_template(template, {
        "ego_obj": _tagged(objs[i].name),
        "ref_obj": _tagged(objs[j].name),
        "example": _as_exemplar(encode_spatial_relation(objs[a], objs[b])),
    })
    return Conversation(key, image_ref, _human(text), encode_spatial_relation(objs[i], objs[j]))


def build_spatial(t: Trajectory, k: int, recipe: GenRecipe) -> Optional[Conversation]:
    obs = t.steps[k].observation
    return build_spatial_scene(obs.scene, obs.image_ref, recipe, _key(t.id, k, AuxKind.SPATIAL.value))


def build_temporal(t: Trajectory, k: int, recipe: GenRecipe) -> Optional[Conversation]:
    nxt = t.observation_after(k)
    if nxt is None:
        return None
    before = t.steps[k].observation.scene
    later = {normalize_name(o.name): o for o in _unique_objects(nxt.scene)}
    objs = [o for o in _unique_objects(before) if normalize_name(o.name) in later]
    key = _key(t.id, k, AuxKind.TEMPORAL.value)
    picked = _pick_pair_and_exemplar(len(objs), recipe.seed, key)
    if picked is None:
        return None
    (i, j), (a, b) = picked

    def rel(e: ObjectInstance, r: ObjectInstance) -> str:
        return encode_temporal_relation(e, r, later[normalize_name(e.name)], later[normalize_name(r.name)])

    template = pick_template(PoolKind.TEMPORAL, recipe.seed, key)
    text = fill_template(template, {
        "scene": encode_scene(nxt.scene),
        "ego_obj": _tagged(objs[i].name),
        "ref_obj": _tagged(objs[j].name),
        "example": _as_exemplar(rel(objs[a], objs[b])),
    })
    return Conversation(key, t.steps[k].observation.image_ref, _human(text), rel(objs[i], objs[j]))


# ---------------------------------------------------------------------------
# candidate pools


def _source_scenes(t: Trajectory, use_reference_images: bool, min_objects: int = 1):
    """(tag, scene, image_ref) for every observation, plus reference images if allowed."""
    out = [(f"s{k}", st.observation.scene, st.observation.image_ref) for k, st in enumerate(t.steps)]
    if t.final_observation is not None:
        out.append(("final", t.final_observation.scene, t.final_observation.image_ref))
    if use_reference_images:
        for fid in sorted(t.ref_frames):
            f = t.ref_frames[fid]
            if f.image_ref:
                out.append((f"ref:{fid}", f.content, f.image_ref))
    return [s for s in out if len(s[1]) >= min_objects]


def aux_pool(kind: AuxKind, t: Trajectory, recipe: GenRecipe, use_reference_images: bool = True) -> list[Conversation]:
    """All candidate samples of one auxiliary kind from one trajectory."""
    kind = AuxKind(kind)
    found: Iterable[Optional[Conversation]]
    if kind in (AuxKind.LOCALIZATION, AuxKind.DETECTION, AuxKind.SPATIAL):
        build = {
            AuxKind.LOCALIZATION: build_localization,
            AuxKind.DETECTION: build_detection,
            AuxKind.SPATIAL: build_spatial_scene,
        }[kind]
        found = (
            build(scene, image_ref, recipe, _key(t.id, tag, kind.value))
            for tag, scene, image_ref in _source_scenes(t, use_reference_images)
        )
    else:
        build_step = {
            AuxKind.ACTION_PREDICTION: build_action_prediction,
            AuxKind.FUTURE_PREDICTION: build_future_prediction,
            AuxKind.TEMPORAL: build_temporal,
        }[kind]
        found = (build_step(t, k, recipe) for k in range(len(t.steps)))
    return [c for c in found if c is not None]


# ---------------------------------------------------------------------------
# mixing


def round_half_away(x: float) -> int:
    return int(Decimal(repr(float(x))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def target_size(ratio: float, n_base: int, pool_size: int) -> int:
    if ratio <= 0 or pool_size == 0:
        return 0
    return min(max(round_half_away(ratio * n_base), 1), pool_size)


@dataclass
class MixedDataset:
    conversations: list[Conversation]
    counts: dict[str, int]
    pool_sizes: dict[str, int]

    def __len__(self) -> int:
        return len(self.conversations)


def mix(
    base_convs: Sequence[Conversation],
    aux_builders: Mapping[AuxKind, Callable[[bool], Sequence[Conversation]]],
    cfg: AuxConfig,
    seed: int,
) -> MixedDataset:
    """Base samples plus, per enabled aux kind, a uniform sample sized by its ratio.

    ``aux_builders[kind](use_reference_images)`` returns the full candidate pool.
    """
    if not base_convs:
        raise ValueError("base dataset is empty")
    out = list(base_convs)
    counts = {"base": len(base_convs)}
    pool_sizes: dict[str, int] = {}
    for kind in cfg.enabled():
        entry = cfg.entry(kind)
        builder = aux_builders.get(kind)
        pool = list(builder(entry.use_reference_images)) if builder else []
        n = target_size(entry.ratio, len(base_convs), len(pool))
        rng = random.Random(f"{seed}:mix:{kind.value}")
        out.extend(pool[i] for i in sorted(rng.sample(range(len(pool)), n)))
        counts[kind.value] = n
        pool_sizes[kind.value] = len(pool)
    random.Random(f"{seed}:mix:shuffle").shuffle(out)
    return MixedDataset(out, counts, pool_sizes)


# ---------------------------------------------------------------------------
# whole-dataset generation


@dataclass
class TrajectoryOutput:
    trajectory_id: str
    base: list[Conversation]
    pools: dict[AuxKind, list[Conversation]]
    error: Optional[str] = None


def compile_trajectory(t: Trajectory, recipe: GenRecipe) -> TrajectoryOutput:
    try:
        base = build_base(t, recipe)
    except MissingDetectionsError as exc:
        return TrajectoryOutput(t.id, [], {}, error=str(exc))
    pools = {
        kind: aux_pool(kind, t, recipe, recipe.aux.entry(kind).use_reference_images)
        for kind in recipe.aux.enabled()
    }
    return TrajectoryOutput(t.id, base, pools)


def _compile_star(args):
    return compile_trajectory(*args)


@dataclass
class GeneratedDataset:
    mixed: MixedDataset
    skipped: list[tuple[str, str]]

    def manifest(self, recipe: GenRecipe) -> dict:
        return {
            "recipe": recipe.to_json(),
            "seed": recipe.seed,
            "counts": self.mixed.counts,
            "pool_sizes": self.mixed.pool_sizes,
            "total": len(self.mixed),
            "reference_sourced": {
                k.value: (k in REFERENCE_SOURCED and recipe.aux.entry(k).use_reference_images)
                for k in recipe.aux.enabled()
            },
            "skipped": [{"id": i, "reason": r} for i, r in self.skipped],
        }


def generate_dataset(trajs: Sequence[Trajectory], recipe: GenRecipe, jobs: int = 1) -> GeneratedDataset:
    """Compile every trajectory then mix. Output does not depend on ``jobs``."""
    work = [(t, recipe) for t in trajs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_compile_star, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        outs = [compile_trajectory(t, r) for t, r in work]
    skipped = [(o.trajectory_id, o.error) for o in outs if o.error]
    base = [c for o in outs for c in o.base]
    pools = {k: [c for o in outs for c in o.pools.get(k, [])] for k in recipe.aux.enabled()}
    builders = {k: (lambda _use_ref, p=p: p) for k, p in pools.items()}
    if not base:
        return GeneratedDataset(MixedDataset([], {"base": 0}, {}), skipped)
    return GeneratedDataset(mix(base, builders, recipe.aux, recipe.seed), skipped)


# ---------------------------------------------------------------------------
# subsampling


def _rank(seed: int, tid: str) -> bytes:
    return hashlib.sha256(f"{seed}\x1fsubsample\x1f{tid}".encode("utf-8")).digest()


def subsample(
    trajs: Sequence[Trajectory],
    count: Optional[int] = None,
    fraction: Optional[float] = None,
    seed: int = 0,
) -> list[Trajectory]:
    """Uniform selection without replacement, keyed on trajectory ids.

    The chosen set depends only on ``seed`` and the ids, never on input order;
    results keep the input order.
    """
    if (count is None) == (fraction is None):
        raise ValueError("give exactly one of count or fraction")
    if fraction is not None:
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        count = max(1, round_half_away(fraction * len(trajs)))
    assert count is not None
    if not 0 < count <= len(trajs):
        raise ValueError(f"count {count} outside (0, {len(trajs)}]")
    ranked = sorted(range(len(trajs)), key=lambda i: _rank(seed, trajs[i].id))
    keep = set(ranked[:count])
    return [t for i, t in enumerate(trajs) if i in keep]
