"""Instruction template pools and the fixed instruction blocks.

Pools live in ``prompts/v1/<kind>.txt``, one template per line, ``#`` lines
ignored. Selection is a keyed hash of ``(seed, kind, sample_key)`` rather
than a stateful RNG, so generation order never changes which template a
sample gets.
"""

from __future__ import annotations

import enum
import hashlib
import re
from functools import lru_cache
from importlib import resources
from typing import Mapping

ACTION_FORMAT_BLOCK = (
    "Every action you take must include two locations in the format of <b>(x, y)</b> and one "
    "clockwise rotation angle in the format of <r>[r]</r>. The first location is the image "
    "coordinate where you use a suction cup to pick up the object, and the second location is "
    "where you place the object. The image coordinate ranges from 0 to 1. The rotation angle "
    "indicates how many degrees you rotate the object clockwise, and it ranges from -359 to 359."
)
TASK_OPEN = "<task>"
TASK_CLOSE = "</task>"
HISTORY_PREFIX = "You have finished: "

POOL_VERSION = "v1"
SLOTS = frozenset({"object", "scene", "ego_obj", "ref_obj", "example", "pick and place"})
# braces that are part of the answer format, not slots
LITERAL_BRACES = frozenset({"w, h"})

_BRACE_RE = re.compile(r"\{([^{}]*)\}")


class PoolKind(str, enum.Enum):
    ACTION_INFERENCE = "action_inference"
    LOCALIZATION = "localization"
    DETECTION = "detection"
    ACTION_PREDICTION = "action_prediction"
    FUTURE_PREDICTION = "future_prediction"
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


# rows printed in the source tables; two pools print 14
POOL_SIZES = {
    PoolKind.ACTION_INFERENCE: 15,
    PoolKind.LOCALIZATION: 15,
    PoolKind.DETECTION: 15,
    PoolKind.ACTION_PREDICTION: 15,
    PoolKind.FUTURE_PREDICTION: 15,
    PoolKind.SPATIAL: 14,
    PoolKind.TEMPORAL: 14,
}


class PoolError(ValueError):
    pass


def template_slots(template: str) -> list[str]:
    return [m.group(1) for m in _BRACE_RE.finditer(template) if m.group(1) not in LITERAL_BRACES]


def _check_pool(kind: PoolKind, templates: tuple[str, ...]) -> None:
    if len(templates) != POOL_SIZES[kind]:
        raise PoolError(f"pool {kind.value}: {len(templates)} templates, expected {POOL_SIZES[kind]}")
    for i, t in enumerate(templates):
        unknown = [s for s in template_slots(t) if s not in SLOTS]
        if unknown:
            raise PoolError(f"pool {kind.value} template {i}: unknown slots {unknown}")


@lru_cache(maxsize=None)
def load_pool(kind: PoolKind | str) -> tuple[str, ...]:
    kind = PoolKind(kind)
    text = (
        resources.files("bc2chat")
        .joinpath("prompts", POOL_VERSION, f"{kind.value}.txt")
        .read_text(encoding="utf-8")
    )
    templates = tuple(ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#"))
    _check_pool(kind, templates)
    return templates


def load_all() -> dict[PoolKind, tuple[str, ...]]:
    return {k: load_pool(k) for k in PoolKind}


def choice_index(n: int, seed: int, *key: object) -> int:
    """Uniform index in ``range(n)`` from a keyed hash; pure function of its inputs."""
    if n <= 0:
        raise ValueError("cannot choose from an empty range")
    payload = "\x1f".join([str(seed), *map(str, key)]).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") % n


def pick_template(kind: PoolKind | str, rng_seed: int, sample_key: str) -> str:
    try:
        kind = PoolKind(kind)
    except ValueError:
        raise PoolError(f"unknown pool kind {kind!r}") from None
    pool = load_pool(kind)
    return pool[choice_index(len(pool), rng_seed, "template", kind.value, sample_key)]


def fill_template(template: str, bindings: Mapping[str, str]) -> str:
    """Substitute every slot verbatim. Extra bindings are ignored."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name in LITERAL_BRACES or name not in SLOTS:
            return m.group(0)
        if name not in bindings:
            raise KeyError(f"no binding for slot {{{name}}}")
        return bindings[name]

    return _BRACE_RE.sub(sub, template)
