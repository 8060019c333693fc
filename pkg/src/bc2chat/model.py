"""Domain types shared by the data pipeline, simulator and policies.

All types are frozen dataclasses. Construction never validates; call
:func:`validate_trajectory` to get a list of rule violations instead. The
JSON helpers at the bottom implement the canonical JSON-lines trajectory
schema (see ``docs/formats.md``).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence, Union

ROTATION_LIMIT = 359


class FrameKind(str, enum.Enum):
    SINGLE_OBJECT = "single_object"
    MULTI_OBJECT_SCENE = "multi_object_scene"


class TaskKind(str, enum.Enum):
    PLACE_INTO = "place_into"
    ROTATE = "rotate"
    PUT_ON_TOP = "put_on_top"
    STACK_ORDER = "stack_order"
    OTHER = "other"


@dataclass(frozen=True)
class NormPoint:
    """A point in image coordinates normalized to the image size."""

    x: float
    y: float


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box given by its center and normalized width/height."""

    center: NormPoint
    w: float
    h: float

    @property
    def x0(self) -> float:
        return self.center.x - self.w / 2

    @property
    def x1(self) -> float:
        return self.center.x + self.w / 2

    @property
    def y0(self) -> float:
        return self.center.y - self.h / 2

    @property
    def y1(self) -> float:
        return self.center.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def contains(self, p: NormPoint) -> bool:
        return self.x0 <= p.x <= self.x1 and self.y0 <= p.y <= self.y1


@dataclass(frozen=True)
class ObjectInstance:
    name: str
    bbox: BBox
    rotation_deg: int = 0


@dataclass(frozen=True)
class SceneState:
    objects: tuple[ObjectInstance, ...] = ()

    def __len__(self) -> int:
        return len(self.objects)

    def __iter__(self) -> Iterator[ObjectInstance]:
        return iter(self.objects)

    def names(self) -> list[str]:
        return [o.name for o in self.objects]

    def find(self, name: str) -> Optional[ObjectInstance]:
        """Return the unique object called ``name``, or None if absent or ambiguous."""
        key = normalize_name(name)
        hits = [o for o in self.objects if normalize_name(o.name) == key]
        return hits[0] if len(hits) == 1 else None


@dataclass(frozen=True)
class Action:
    """One pick-and-place action: pick point, clockwise rotation, place point."""

    pick: NormPoint
    place: NormPoint
    rotation_deg: int = 0
    picked_object_name: Optional[str] = None
    step_index: Optional[int] = None


@dataclass(frozen=True)
class RefFrame:
    """A reference image slot of a multimodal task.

    ``image_ref`` is optional; only frames that carry one can be used as
    image sources for the auxiliary datasets.
    """

    frame_id: str
    kind: FrameKind
    content: SceneState
    image_ref: Optional[str] = None


@dataclass(frozen=True)
class RefSlot:
    """Placeholder for a reference frame inside the task text."""

    frame_id: str


Segment = Union[str, RefSlot]


@dataclass(frozen=True)
class TaskSpec:
    segments: tuple[Segment, ...]
    task_kind: TaskKind = TaskKind.OTHER

    def frame_ids(self) -> list[str]:
        return [s.frame_id for s in self.segments if isinstance(s, RefSlot)]


@dataclass(frozen=True)
class Observation:
    image_ref: str
    scene: SceneState
    timestamp: int = 0


@dataclass(frozen=True)
class Step:
    observation: Observation
    action: Action


@dataclass(frozen=True)
class Trajectory:
    id: str
    task: TaskSpec
    ref_frames: Mapping[str, RefFrame]
    steps: tuple[Step, ...]
    final_observation: Optional[Observation] = None

    def observation_after(self, k: int) -> Optional[Observation]:
        """Observation that follows step ``k`` (the next step's, or the final one)."""
        if k + 1 < len(self.steps):
            return self.steps[k + 1].observation
        return self.final_observation


@dataclass(frozen=True)
class Conversation:
    id: str
    image_ref: str
    human: str
    assistant: str


IMAGE_TOKEN = "<image>"


def normalize_name(name: str) -> str:
    return " ".join(name.split())


# ---------------------------------------------------------------------------
# validation


def _point_violations(p: NormPoint, where: str) -> list[str]:
    out = []
    for axis in ("x", "y"):
        v = getattr(p, axis)
        if not (0.0 <= v <= 1.0):
            out.append(f"{where}.{axis} out of [0,1]")
    return out


def _bbox_violations(b: BBox, where: str) -> list[str]:
    out = _point_violations(b.center, f"{where}.center")
    for dim in ("w", "h"):
        v = getattr(b, dim)
        if not (0.0 <= v <= 1.0):
            out.append(f"{where}.{dim} out of [0,1]")
    return out


def _rotation_violation(r: Any, where: str) -> list[str]:
    if not isinstance(r, int) or isinstance(r, bool):
        return [f"{where} is not an integer"]
    if not (-ROTATION_LIMIT <= r <= ROTATION_LIMIT):
        return [f"{where} out of [-359,359]"]
    return []


def _scene_violations(s: SceneState, where: str) -> list[str]:
    out = []
    for i, o in enumerate(s.objects):
        w = f"{where}.objects[{i}]"
        if not o.name or not o.name.strip():
            out.append(f"{w}.name is empty")
        out += _bbox_violations(o.bbox, f"{w}.bbox")
        out += _rotation_violation(o.rotation_deg, f"{w}.rotation_deg")
    return out


def _observation_violations(obs: Observation, where: str) -> list[str]:
    out = []
    if not obs.image_ref:
        out.append(f"{where}.image_ref is empty")
    if obs.timestamp < 0:
        out.append(f"{where}.timestamp is negative")
    out += _scene_violations(obs.scene, f"{where}.scene")
    return out


def validate_action(a: Action, where: str = "action") -> list[str]:
    out = _point_violations(a.pick, f"{where}.pick")
    out += _point_violations(a.place, f"{where}.place")
    out += _rotation_violation(a.rotation_deg, f"{where}.rotation_deg")
    if a.step_index is not None and a.step_index < 1:
        out.append(f"{where}.step_index must be >= 1")
    return out


def validate_trajectory(t: Trajectory) -> list[str]:
    """Check every invariant of ``t``; returns one message per violation."""
    out: list[str] = []
    if not t.id:
        out.append("id is empty")
    if not any(isinstance(s, str) for s in t.task.segments):
        out.append("task.segments has no text segment")
    for fid in t.task.frame_ids():
        if fid not in t.ref_frames:
            out.append(f"task references frame_id {fid!r} absent from ref_frames")
    for fid, frame in t.ref_frames.items():
        w = f"ref_frames[{fid!r}]"
        if frame.frame_id != fid:
            out.append(f"{w}.frame_id does not match its key")
        if frame.kind is FrameKind.SINGLE_OBJECT and len(frame.content) != 1:
            out.append(f"{w} is single_object but holds {len(frame.content)} objects")
        out += _scene_violations(frame.content, f"{w}.content")
    if not t.steps:
        out.append("steps is empty")
    prev = None
    for i, st in enumerate(t.steps):
        out += _observation_violations(st.observation, f"steps[{i}].observation")
        out += validate_action(st.action, f"steps[{i}].action")
        ts = st.observation.timestamp
        if prev is not None and ts <= prev:
            out.append(f"steps[{i}].observation.timestamp not strictly increasing")
        prev = ts
    if t.final_observation is not None:
        out += _observation_violations(t.final_observation, "final_observation")
        if prev is not None and t.final_observation.timestamp <= prev:
            out.append("final_observation.timestamp not strictly increasing")
    return out


def action_history(t: Trajectory, upto: int) -> list[Action]:
    """Actions of ``t.steps[:upto]``, in order."""
    if not 0 <= upto <= len(t.steps):
        raise IndexError(f"upto={upto} outside [0, {len(t.steps)}]")
    return [st.action for st in t.steps[:upto]]


# ---------------------------------------------------------------------------
# JSON codec


def point_to_json(p: NormPoint) -> list[float]:
    return [p.x, p.y]


def point_from_json(v: Sequence[float]) -> NormPoint:
    x, y = v
    return NormPoint(float(x), float(y))


def bbox_to_json(b: BBox) -> dict:
    return {"center": point_to_json(b.center), "w": b.w, "h": b.h}


def bbox_from_json(d: Mapping) -> BBox:
    return BBox(point_from_json(d["center"]), float(d["w"]), float(d["h"]))


def object_to_json(o: ObjectInstance) -> dict:
    return {"name": o.name, "bbox": bbox_to_json(o.bbox), "rotation_deg": o.rotation_deg}


def object_from_json(d: Mapping) -> ObjectInstance:
    return ObjectInstance(d["name"], bbox_from_json(d["bbox"]), int(d.get("rotation_deg", 0)))


def scene_to_json(s: SceneState) -> dict:
    return {"objects": [object_to_json(o) for o in s.objects]}


def scene_from_json(d: Mapping) -> SceneState:
    return SceneState(tuple(object_from_json(o) for o in d["objects"]))


def action_to_json(a: Action) -> dict:
    return {
        "pick": point_to_json(a.pick),
        "place": point_to_json(a.place),
        "rotation_deg": a.rotation_deg,
        "picked_object_name": a.picked_object_name,
        "step_index": a.step_index,
    }


def action_from_json(d: Mapping) -> Action:
    step = d.get("step_index")
    return Action(
        pick=point_from_json(d["pick"]),
        place=point_from_json(d["place"]),
        rotation_deg=int(d["rotation_deg"]),
        picked_object_name=d.get("picked_object_name"),
        step_index=None if step is None else int(step),
    )


def frame_to_json(f: RefFrame) -> dict:
    return {
        "frame_id": f.frame_id,
        "kind": f.kind.value,
        "content": scene_to_json(f.content),
        "image_ref": f.image_ref,
    }


def frame_from_json(d: Mapping) -> RefFrame:
    return RefFrame(
        d["frame_id"], FrameKind(d["kind"]), scene_from_json(d["content"]), d.get("image_ref")
    )


def task_to_json(t: TaskSpec) -> dict:
    segs = [s if isinstance(s, str) else {"frame": s.frame_id} for s in t.segments]
    return {"segments": segs, "task_kind": t.task_kind.value}


def task_from_json(d: Mapping) -> TaskSpec:
    segs = tuple(s if isinstance(s, str) else RefSlot(s["frame"]) for s in d["segments"])
    return TaskSpec(segs, TaskKind(d.get("task_kind", "other")))


def observation_to_json(o: Observation) -> dict:
    return {"image_ref": o.image_ref, "scene": scene_to_json(o.scene), "timestamp": o.timestamp}


def observation_from_json(d: Mapping) -> Observation:
    return Observation(d["image_ref"], scene_from_json(d["scene"]), int(d["timestamp"]))


def trajectory_to_json(t: Trajectory) -> dict:
    return {
        "id": t.id,
        "task": task_to_json(t.task),
        "ref_frames": {k: frame_to_json(v) for k, v in t.ref_frames.items()},
        "steps": [
            {"observation": observation_to_json(s.observation), "action": action_to_json(s.action)}
            for s in t.steps
        ],
        "final_observation": (
            None if t.final_observation is None else observation_to_json(t.final_observation)
        ),
    }


def trajectory_from_json(d: Mapping) -> Trajectory:
    final = d.get("final_observation")
    return Trajectory(
        id=d["id"],
        task=task_from_json(d["task"]),
        ref_frames={k: frame_from_json(v) for k, v in d.get("ref_frames", {}).items()},
        steps=tuple(
            Step(observation_from_json(s["observation"]), action_from_json(s["action"]))
            for s in d["steps"]
        ),
        final_observation=None if final is None else observation_from_json(final),
    )


def conversation_to_json(c: Conversation) -> dict:
    return {
        "id": c.id,
        "image": c.image_ref,
        "conversations": [
            {"from": "human", "value": c.human},
            {"from": "gpt", "value": c.assistant},
        ],
    }


def conversation_from_json(d: Mapping) -> Conversation:
    turns = {t["from"]: t["value"] for t in d["conversations"]}
    return Conversation(d["id"], d["image"], turns["human"], turns["gpt"])


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps_line(row))
            fh.write("\n")
            n += 1
    return n


@dataclass
class LoadReport:
    trajectories: list[Trajectory] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)


def load_trajectories(path) -> LoadReport:
    """Read a trajectory JSONL file; bad lines are collected with 1-based line numbers."""
    report = LoadReport()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                t = trajectory_from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                report.errors.append((lineno, f"{type(exc).__name__}: {exc}"))
                continue
            problems = validate_trajectory(t)
            if problems:
                report.errors.append((lineno, "; ".join(problems)))
                continue
            report.trajectories.append(t)
    return report


def strip_name(a: Action) -> Action:
    return replace(a, picked_object_name=None)
