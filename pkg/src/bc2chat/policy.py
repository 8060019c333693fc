"""Closed-loop policies and the episode runner.

A policy maps a :class:`PolicyQuery` (prompt text plus observation image) to
reply text. The runner parses every reply, executes only its first action and
re-queries with the grown action history.

Remote wire protocol: ``POST {base_url}/v1/act`` with JSON body
``{"prompt": str, "image": base64(PPM bytes), "format": "pixmap-v1"}``; the
response must be JSON ``{"text": str}``.
"""

from __future__ import annotations

import base64
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

from . import simenv
from .datagen import GenRecipe, human_turn
from .model import Action, RefFrame, TaskSpec
from .promptbank import PoolKind, pick_template
from .simenv import EnvState, EpisodeResult
from .textcodec import (
    encode_plan,
    format_tokens,
    parse_actions,
    parse_tokens,
    rt2_decode,
    rt2_encode,
)

log = logging.getLogger(__name__)

WIRE_FORMAT = "pixmap-v1"
DEFAULT_TIMEOUT = 60.0


@dataclass(frozen=True)
class PolicyQuery:
    image_ref: str
    prompt_text: str
    image_bytes: Optional[bytes] = None


@dataclass(frozen=True)
class PolicyReply:
    raw_text: str
    parsed_actions: tuple[Action, ...]
    chosen: Optional[Action]


class TransportError(RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


def assemble_query(
    task: TaskSpec,
    ref_frames: Mapping[str, RefFrame],
    recipe: GenRecipe,
    history: Sequence[Action],
    seed: int,
    sample_key: str,
    image_ref: str = "",
    image_bytes: Optional[bytes] = None,
) -> PolicyQuery:
    """Training-time human turn followed by one seeded inference sentence."""
    sentence = pick_template(PoolKind.ACTION_INFERENCE, seed, sample_key)
    prompt = human_turn(task, ref_frames, recipe, history) + "\n" + sentence
    return PolicyQuery(image_ref, prompt, image_bytes)


def parse_reply(text: str) -> PolicyReply:
    """Text actions first; RT-2 token surrogates only if no text action parses."""
    actions = parse_actions(text)
    if not actions:
        actions = [rt2_decode(t) for t in parse_tokens(text)]
    return PolicyReply(text, tuple(actions), actions[0] if actions else None)


class Policy:
    """Base class. ``complete`` returns raw reply text."""

    needs_image = False

    def complete(self, query: PolicyQuery, env: EnvState) -> str:
        raise NotImplementedError


class OraclePolicy(Policy):
    """Replies with the expert's remaining plan, rendered through the text codec."""

    def __init__(self, tokens: bool = False):
        self.tokens = tokens

    def complete(self, query: PolicyQuery, env: EnvState) -> str:
        plan = simenv.oracle_plan(env)
        if not plan:
            return ""
        if self.tokens:
            return format_tokens(rt2_encode(plan[0]))
        first = env.step_count + 1
        return encode_plan([replace(a, step_index=first + i) for i, a in enumerate(plan)])


class ReplayPolicy(Policy):
    """Returns pre-recorded texts in order, then ``default`` once exhausted."""

    def __init__(self, texts: Sequence[str] = (), default: str = ""):
        self.texts = list(texts)
        self.default = default
        self.calls = 0

    def complete(self, query: PolicyQuery, env: EnvState) -> str:
        i = self.calls
        self.calls += 1
        return self.texts[i] if i < len(self.texts) else self.default


class RemotePolicy(Policy):
    """HTTP client for a text-emitting model server."""

    needs_image = True

    def __init__(
        self,
        base_url: str,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = 2,
        backoff: float = 1.0,
        max_in_flight: int = 4,
    ):
        self.url = base_url.rstrip("/") + "/v1/act"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def payload(self, query: PolicyQuery) -> bytes:
        body = {
            "prompt": query.prompt_text,
            "image": base64.b64encode(query.image_bytes or b"").decode("ascii"),
            "format": WIRE_FORMAT,
        }
        return json.dumps(body, ensure_ascii=False).encode("utf-8")

    def _post(self, data: bytes) -> str:
        req = urllib.request.Request(
            self.url, data=data, headers={"Content-Type": "application/json"}, method="POST"
        )
        with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as resp:
            reply = json.loads(resp.read().decode("utf-8"))
        if not isinstance(reply, dict) or not isinstance(reply.get("text"), str):
            raise ValueError("response lacks a string 'text' field")
        return reply["text"]

    def complete(self, query: PolicyQuery, env: EnvState) -> str:
        data = self.payload(query)
        attempts = 0
        while True:
            attempts += 1
            try:
                return self._post(data)
            except urllib.error.HTTPError as exc:
                if exc.code < 500 or attempts > self.retries:
                    raise TransportError(f"HTTP {exc.code} from {self.url}", attempts) from exc
                err: Exception = exc
            except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
                if attempts > self.retries:
                    raise TransportError(f"{type(exc).__name__}: {exc}", attempts) from exc
                err = exc
            log.warning("attempt %d to %s failed: %s", attempts, self.url, err)
            time.sleep(self.backoff)


def act(policy: Policy, query: PolicyQuery, env: EnvState) -> PolicyReply:
    return parse_reply(policy.complete(query, env))


def run_episode(
    policy: Policy,
    env: EnvState,
    max_steps: Optional[int] = None,
    recipe: GenRecipe = GenRecipe(),
    seed: int = 0,
    raise_transport: bool = False,
    transcript: Optional[list] = None,
) -> EpisodeResult:
    """Query, execute the first parsed action, judge; repeat until success or budget.

    Unparseable replies and (unless ``raise_transport``) transport failures
    consume one step as a no-op.
    """
    if max_steps is not None:
        if max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        env = replace(env, max_steps=max_steps)
    history: list[Action] = []
    episode_key = f"{env.goal.kind.value}-{env.level}-{env.rng_seed}"
    while env.step_count < env.max_steps:
        image_ref = simenv.image_ref_for(env.scene, env.z_order)
        image = simenv.render(env.scene, env.z_order) if policy.needs_image else None
        query = assemble_query(
            env.task, env.ref_frames, recipe, history, seed,
            f"{episode_key}/{env.step_count}", image_ref, image,
        )
        try:
            reply = act(policy, query, env)
        except TransportError:
            if raise_transport:
                raise
            log.warning("episode %s step %d: transport failure, no-op", episode_key, env.step_count)
            reply = PolicyReply("", (), None)
        if transcript is not None:
            transcript.append(reply)
        if reply.chosen is None:
            log.info("episode %s step %d: no parseable action, no-op", episode_key, env.step_count)
            env = replace(env, step_count=env.step_count + 1)
        else:
            env = simenv.step(env, reply.chosen)
            history.append(reply.chosen)
        verdict = simenv.judge(env)
        if verdict.success:
            return verdict
    return simenv.judge(env)
