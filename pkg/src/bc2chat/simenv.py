"""Deterministic symbolic tabletop simulator.

Objects are axis-aligned boxes in normalized front-view image coordinates.
An action teleports the topmost object under the pick point so that its
center lands on the place point and adds the rotation. There is no physics.

Generalization levels are artifact-defined:

* ``L1``: seen object combinations, placements on the training lattice.
* ``L2``: seen combinations, off-lattice placements and non-zero initial yaw.
* ``L3``: held-out texture/shape combinations, lattice placements.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from . import kernels
from .model import (
    Action,
    BBox,
    FrameKind,
    NormPoint,
    ObjectInstance,
    Observation,
    RefFrame,
    RefSlot,
    SceneState,
    Step,
    TaskKind,
    TaskSpec,
    Trajectory,
    scene_to_json,
)
from .promptbank import choice_index

LEVELS = ("L1", "L2", "L3")
TASK_KINDS = (TaskKind.PLACE_INTO, TaskKind.ROTATE, TaskKind.PUT_ON_TOP, TaskKind.STACK_ORDER)

# judge constants
CONTAIN_RATIO = 0.5
ROTATION_TOLERANCE_DEG = 15
POSITION_DRIFT = 0.05
STACK_X_TOLERANCE = 0.05
# vertical offset between consecutive stacked objects in the front view
STACK_DY = 0.07

DEFAULT_MAX_STEPS = 8
# seen-layout placement grid (cells per unit length)
LATTICE = 64
IMAGE_WIDTH = 256
IMAGE_HEIGHT = 128
BACKGROUND = (96, 76, 58)

TEXTURES = (
    "red", "green", "blue", "yellow", "purple", "rainbow",
    "wooden", "green paisley", "granite", "polka dot", "magma", "tiger",
)
SHAPES = {
    "letter V": (0.094, 0.156),
    "letter T": (0.102, 0.188),
    "letter A": (0.094, 0.156),
    "letter M": (0.102, 0.156),
    "block": (0.094, 0.227),
    "heart": (0.094, 0.141),
    "star": (0.098, 0.148),
    "cross": (0.094, 0.156),
    "ring": (0.090, 0.141),
    "triangle": (0.094, 0.133),
    "hexagon": (0.094, 0.148),
    "diamond": (0.086, 0.156),
}
CONTAINERS = {
    "bowl": (0.195, 0.328),
    "pan": (0.215, 0.344),
    "frame": (0.195, 0.313),
}


@dataclass(frozen=True)
class CatalogItem:
    name: str
    w: float
    h: float
    container: bool = False


def is_held_out(texture: str, shape: str) -> bool:
    """Texture/shape combinations reserved for the L3 split (about one in five)."""
    return choice_index(5, 0, "held-out", texture, shape) == 0


def object_catalog(level: str = "L1") -> list[CatalogItem]:
    """Catalog for a level; L3 only offers held-out combinations."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    want_held_out = level == "L3"
    items = []
    for shapes, container in ((SHAPES, False), (CONTAINERS, True)):
        for shape, (w, h) in shapes.items():
            for tex in TEXTURES:
                if is_held_out(tex, shape) == want_held_out:
                    items.append(CatalogItem(f"{tex} {shape}", w, h, container))
    return items


@dataclass(frozen=True)
class Goal:
    kind: TaskKind
    roles: tuple[str, ...]  # place_into/put_on_top: (source, target); rotate: (obj,); stack: bottom..top
    angle: Optional[int] = None


@dataclass(frozen=True)
class EnvState:
    scene: SceneState
    task: TaskSpec
    ref_frames: dict
    goal: Goal
    initial_scene: SceneState
    z_order: tuple[str, ...]
    step_count: int = 0
    max_steps: int = DEFAULT_MAX_STEPS
    rng_seed: int = 0
    level: str = "L1"

    def obj(self, name: str) -> ObjectInstance:
        for o in self.scene.objects:
            if o.name == name:
                return o
        raise KeyError(name)


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    steps_taken: int
    failure_reason: Optional[str] = None


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# geometry


def rect(b: BBox) -> tuple[float, float, float, float]:
    return (b.x0, b.y0, b.x1, b.y1)


def overlap_ratio(obj: BBox, target: BBox) -> float:
    """Fraction of ``obj``'s area lying inside ``target``."""
    if obj.area <= 0:
        return 0.0
    return kernels.intersection_area(rect(obj), rect(target)) / obj.area


def wrap_rotation(r: int) -> int:
    while r > 359:
        r -= 360
    while r < -359:
        r += 360
    return r


def angle_gap(a: int, b: int) -> int:
    """Smallest absolute difference between two angles, in degrees."""
    d = (a - b) % 360
    return min(d, 360 - d)


def signed_turn(delta: int) -> int:
    """Equivalent rotation in [-180, 180)."""
    return (delta + 180) % 360 - 180


# ---------------------------------------------------------------------------
# task generation


def _sample_center(rng: random.Random, w: float, h: float, level: str, y_min: float) -> NormPoint:
    margin = 0.02
    lo_x, hi_x = w / 2 + margin, 1 - w / 2 - margin
    lo_y, hi_y = max(h / 2 + margin, y_min), 1 - h / 2 - margin
    if level == "L2":
        return NormPoint(rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
    n = LATTICE
    return NormPoint(
        rng.randint(math.ceil(lo_x * n), math.floor(hi_x * n)) / n,
        rng.randint(math.ceil(lo_y * n), math.floor(hi_y * n)) / n,
    )


def _inflate(r: Sequence[float], pad: float) -> tuple[float, float, float, float]:
    return (r[0] - pad, r[1] - pad, r[2] + pad, r[3] + pad)


def _stack_footprint(bottom: BBox, members: Sequence[CatalogItem]) -> tuple[float, float, float, float]:
    wmax = max(m.w for m in members)
    hmax = max(m.h for m in members)
    top_y = bottom.center.y - STACK_DY * (len(members) - 1)
    return (
        bottom.center.x - wmax / 2 - STACK_X_TOLERANCE,
        top_y - hmax / 2,
        bottom.center.x + wmax / 2 + STACK_X_TOLERANCE,
        bottom.y1,
    )


def _place_objects(
    rng: random.Random, items: Sequence[CatalogItem], level: str, stack_members: int = 0,
    tries: int = 200,
) -> list[ObjectInstance]:
    """Non-overlapping placements. With ``stack_members`` > 0 the first item is a stack
    base and its whole future column is kept clear of every other object."""
    placed: list[ObjectInstance] = []
    blocked: list[tuple[float, float, float, float]] = []
    for idx, item in enumerate(items):
        y_min = 0.0
        if idx == 0 and stack_members:
            hmax = max(i.h for i in items[:stack_members])
            y_min = STACK_DY * (stack_members - 1) + hmax / 2 + 0.03
        for _ in range(tries):
            c = _sample_center(rng, item.w, item.h, level, y_min)
            box = BBox(c, item.w, item.h)
            probe = _inflate(rect(box), 0.01)
            if kernels.first_overlap(blocked, probe) == -1:
                break
        else:
            raise GenerationError(f"could not place {item.name!r} without overlap")
        rot = rng.randint(-90, 90) if level == "L2" else 0
        placed.append(ObjectInstance(item.name, box, rot))
        blocked.append(rect(box))
        if idx == 0 and stack_members:
            blocked[-1] = _stack_footprint(box, items[:stack_members])
    return placed


def _single_frame(fid: str, obj: ObjectInstance) -> RefFrame:
    return RefFrame(fid, FrameKind.SINGLE_OBJECT, SceneState((obj,)))


def generate_task(
    kind: TaskKind | str,
    object_catalog_items: Optional[Sequence[CatalogItem]] = None,
    seed: int = 0,
    level: str = "L1",
    angle_range: tuple[int, int] = (-180, 180),
    n_distractors: int = 2,
    max_steps: int = DEFAULT_MAX_STEPS,
    attempts: int = 20,
) -> tuple[EnvState, TaskSpec]:
    """Random initial scene and task; a pure function of its arguments."""
    kind = TaskKind(kind)
    if kind not in TASK_KINDS:
        raise ValueError(f"cannot generate tasks of kind {kind.value!r}")
    catalog = list(object_catalog_items) if object_catalog_items is not None else object_catalog(level)
    regular = [c for c in catalog if not c.container]
    containers = [c for c in catalog if c.container]
    rng = random.Random(f"task:{kind.value}:{level}:{seed}")

    need = {TaskKind.PLACE_INTO: 1, TaskKind.ROTATE: 1, TaskKind.PUT_ON_TOP: 2, TaskKind.STACK_ORDER: 3}[kind]
    if len(regular) < need + n_distractors or (kind is TaskKind.PLACE_INTO and not containers):
        raise GenerationError(f"catalog too small for {kind.value}")

    for _ in range(attempts):
        picks = rng.sample(regular, need + n_distractors)
        if kind is TaskKind.PLACE_INTO:
            items = [rng.choice(containers)] + picks
        else:
            items = picks
        try:
            objects = _place_objects(rng, items, level, stack_members=need if kind is TaskKind.STACK_ORDER else 0)
        except GenerationError:
            continue
        break
    else:
        raise GenerationError(f"no overlap-free layout for {kind.value} seed {seed}")

    angle = None
    if kind is TaskKind.PLACE_INTO:
        target, source = objects[0], objects[1]
        goal = Goal(kind, (source.name, target.name))
        segments = ("Put ", RefSlot("dragged_obj"), " into ", RefSlot("base_obj"), ".")
        frames = {"dragged_obj": _single_frame("dragged_obj", source), "base_obj": _single_frame("base_obj", target)}
    elif kind is TaskKind.PUT_ON_TOP:
        source, target = objects[0], objects[1]
        goal = Goal(kind, (source.name, target.name))
        segments = ("Move the ", RefSlot("dragged_obj"), " on the top of the ", RefSlot("base_obj"), ".")
        frames = {"dragged_obj": _single_frame("dragged_obj", source), "base_obj": _single_frame("base_obj", target)}
    elif kind is TaskKind.ROTATE:
        source = objects[0]
        # angles within tolerance of zero would be solved before the first step
        candidates = [a for a in range(angle_range[0], angle_range[1] + 1)
                      if angle_gap(a, 0) > ROTATION_TOLERANCE_DEG]
        if not candidates:
            raise GenerationError(f"angle range {angle_range} only holds trivial rotations")
        angle = rng.choice(candidates)
        goal = Goal(kind, (source.name,), angle)
        segments = ("Rotate the ", RefSlot("dragged_obj"), f" by {angle} degrees.")
        frames = {"dragged_obj": _single_frame("dragged_obj", source)}
    else:
        goal = Goal(kind, tuple(o.name for o in objects[:need]))
        segments = ("Stack objects in this order ",)
        frames = {}
        for i in range(need):
            if i:
                segments += (" ",)
            segments += (RefSlot(f"frame_{i}"),)
        segments += (".",)

    names = tuple(o.name for o in objects)
    scene = SceneState(tuple(objects))
    task = TaskSpec(segments, kind)
    env = EnvState(scene, task, frames, goal, scene, names, 0, max_steps, seed, level)
    if kind is TaskKind.STACK_ORDER:
        env = replace(env, ref_frames=_stack_frames(env))
    return env, task


def _stack_frames(env: EnvState) -> dict:
    """Reference scenes of the stack members after 0, 1, ... expert steps."""
    frames = {}
    cur = env
    members = env.goal.roles
    for i in range(len(members)):
        content = SceneState(tuple(cur.obj(n) for n in members))
        frames[f"frame_{i}"] = RefFrame(f"frame_{i}", FrameKind.MULTI_OBJECT_SCENE, content)
        a = oracle_policy(cur)
        if a is not None and i < len(members) - 1:
            cur = step(cur, a)
    return frames


# ---------------------------------------------------------------------------
# dynamics and judging


def picked_object(env: EnvState, p: NormPoint) -> Optional[ObjectInstance]:
    """Topmost object whose box contains ``p`` (z-order = placement recency)."""
    best, best_rank = None, -1
    rank = {n: i for i, n in enumerate(env.z_order)}
    for o in env.scene.objects:
        if o.bbox.contains(p) and rank[o.name] > best_rank:
            best, best_rank = o, rank[o.name]
    return best


def step(env: EnvState, a: Action) -> EnvState:
    if env.step_count >= env.max_steps:
        raise ValueError("episode is over: step budget exhausted")
    target = picked_object(env, a.pick)
    if target is None:
        return replace(env, step_count=env.step_count + 1)
    moved = ObjectInstance(
        target.name,
        BBox(NormPoint(a.place.x, a.place.y), target.bbox.w, target.bbox.h),
        wrap_rotation(target.rotation_deg + a.rotation_deg),
    )
    objects = tuple(moved if o.name == target.name else o for o in env.scene.objects)
    z = tuple(n for n in env.z_order if n != target.name) + (target.name,)
    return replace(env, scene=SceneState(objects), z_order=z, step_count=env.step_count + 1)


def _initial(env: EnvState, name: str) -> ObjectInstance:
    for o in env.initial_scene.objects:
        if o.name == name:
            return o
    raise KeyError(name)


def _stack_level_ok(env: EnvState, k: int) -> bool:
    names = env.goal.roles
    base = env.obj(names[0])
    below, here = env.obj(names[k - 1]), env.obj(names[k])
    return (
        abs(here.bbox.center.x - base.bbox.center.x) <= STACK_X_TOLERANCE
        and here.bbox.center.y < below.bbox.center.y
        and kernels.intersection_area(rect(here.bbox), rect(below.bbox)) > 0.0
    )


def judge(env: EnvState) -> EpisodeResult:
    g = env.goal
    n = env.step_count
    if g.kind in (TaskKind.PLACE_INTO, TaskKind.PUT_ON_TOP):
        ratio = overlap_ratio(env.obj(g.roles[0]).bbox, env.obj(g.roles[1]).bbox)
        if ratio > CONTAIN_RATIO:
            return EpisodeResult(True, n)
        return EpisodeResult(False, n, f"overlap ratio {ratio:.3f} not above {CONTAIN_RATIO}")
    if g.kind is TaskKind.ROTATE:
        now, start = env.obj(g.roles[0]), _initial(env, g.roles[0])
        turned = now.rotation_deg - start.rotation_deg
        gap = angle_gap(turned, g.angle)
        drift = math.dist(
            (now.bbox.center.x, now.bbox.center.y), (start.bbox.center.x, start.bbox.center.y)
        )
        if gap <= ROTATION_TOLERANCE_DEG and drift <= POSITION_DRIFT:
            return EpisodeResult(True, n)
        return EpisodeResult(False, n, f"rotation off by {gap} deg, drift {drift:.3f}")
    if g.kind is TaskKind.STACK_ORDER:
        for k in range(1, len(g.roles)):
            if not _stack_level_ok(env, k):
                return EpisodeResult(False, n, f"{g.roles[k]!r} not stacked on {g.roles[k - 1]!r}")
        return EpisodeResult(True, n)
    raise ValueError(f"no judge for task kind {g.kind.value!r}")


def oracle_policy(env: EnvState) -> Optional[Action]:
    """Next expert action, or None when the task is already solved."""
    if judge(env).success:
        return None
    g = env.goal
    idx = env.step_count + 1
    if g.kind in (TaskKind.PLACE_INTO, TaskKind.PUT_ON_TOP):
        src, dst = env.obj(g.roles[0]), env.obj(g.roles[1])
        return Action(src.bbox.center, dst.bbox.center, 0, src.name, idx)
    if g.kind is TaskKind.ROTATE:
        obj = env.obj(g.roles[0])
        turned = obj.rotation_deg - _initial(env, g.roles[0]).rotation_deg
        turn = g.angle if env.step_count == 0 else signed_turn(g.angle - turned)
        return Action(obj.bbox.center, obj.bbox.center, turn, obj.name, idx)
    if g.kind is TaskKind.STACK_ORDER:
        base = env.obj(g.roles[0])
        for k in range(1, len(g.roles)):
            if not _stack_level_ok(env, k):
                obj = env.obj(g.roles[k])
                dest = NormPoint(base.bbox.center.x, base.bbox.center.y - STACK_DY * k)
                return Action(obj.bbox.center, dest, 0, obj.name, idx)
    return None


def oracle_plan(env: EnvState) -> list[Action]:
    """Expert actions from ``env`` to task completion (rolled out on a copy)."""
    plan = []
    cur = env
    while cur.step_count < cur.max_steps:
        a = oracle_policy(cur)
        if a is None:
            break
        plan.append(a)
        cur = step(cur, a)
    return plan


# ---------------------------------------------------------------------------
# rendering


def name_color(name: str) -> tuple[int, int, int]:
    d = hashlib.sha256(name.encode("utf-8")).digest()
    return (40 + d[0] * 200 // 255, 40 + d[1] * 200 // 255, 40 + d[2] * 200 // 255)


def render(
    scene: SceneState,
    z_order: Optional[Sequence[str]] = None,
    width: int = IMAGE_WIDTH,
    height: int = IMAGE_HEIGHT,
) -> bytes:
    """Binary PPM (P6) of the scene: flat rectangles painted bottom to top.

    Pixel column ``c`` covers ``[c, c+1)`` in ``x * width`` units and is
    painted when it overlaps the box; rows likewise with ``height``.
    """
    objs = list(scene.objects)
    if z_order is not None:
        rank = {n: i for i, n in enumerate(z_order)}
        objs.sort(key=lambda o: rank.get(o.name, -1))
    pixels = kernels.raster_rects(
        width, height, BACKGROUND, [rect(o.bbox) for o in objs], [name_color(o.name) for o in objs]
    )
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels


def scene_digest(scene: SceneState, z_order: Optional[Sequence[str]] = None) -> str:
    payload = json.dumps(
        {"scene": scene_to_json(scene), "z": list(z_order) if z_order is not None else None},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:24]


def image_ref_for(scene: SceneState, z_order: Optional[Sequence[str]] = None, prefix: str = "images") -> str:
    return f"{prefix}/{scene_digest(scene, z_order)}.ppm"


def write_image(
    scene: SceneState, image_dir, z_order: Optional[Sequence[str]] = None, prefix: str = "images"
) -> str:
    """Render into ``image_dir`` under its content address; returns the image_ref."""
    ref = image_ref_for(scene, z_order, prefix)
    path = Path(image_dir) / Path(ref).name
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(render(scene, z_order))
        os.replace(tmp, path)
    return ref


# ---------------------------------------------------------------------------
# expert recording


def observe(env: EnvState, image_dir=None) -> Observation:
    if image_dir is not None:
        ref = write_image(env.scene, image_dir, env.z_order)
    else:
        ref = image_ref_for(env.scene, env.z_order)
    return Observation(ref, env.scene, env.step_count)


def _with_frame_images(frames: dict, image_dir) -> dict:
    out = {}
    for fid, f in frames.items():
        if image_dir is not None:
            ref = write_image(f.content, image_dir)
        else:
            ref = image_ref_for(f.content)
        out[fid] = replace(f, image_ref=ref)
    return out


def record_trajectory(
    kind: TaskKind | str,
    seed: int,
    level: str = "L1",
    image_dir=None,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> Trajectory:
    """Run the expert closed-loop and record every observation and action."""
    kind = TaskKind(kind)
    env, task = generate_task(kind, seed=seed, level=level, max_steps=max_steps)
    frames = _with_frame_images(env.ref_frames, image_dir)
    steps = []
    while True:
        a = oracle_policy(env)
        if a is None:
            break
        if env.step_count >= env.max_steps:
            raise GenerationError(f"expert did not finish {kind.value} seed {seed}")
        steps.append(Step(observe(env, image_dir), a))
        env = step(env, a)
    return Trajectory(
        id=f"{kind.value}-{level}-{seed}",
        task=task,
        ref_frames=frames,
        steps=tuple(steps),
        final_observation=observe(env, image_dir),
    )


def env_for_trajectory(t: Trajectory, level: str = "L1", max_steps: int = DEFAULT_MAX_STEPS) -> EnvState:
    """Rebuild the initial environment of a recorded trajectory from its id."""
    kind, lvl, seed = t.id.rsplit("-", 2)
    env, _ = generate_task(TaskKind(kind), seed=int(seed), level=lvl, max_steps=max_steps)
    return env
