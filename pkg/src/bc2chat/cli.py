"""Command-line entry point: ``bc2chat {simulate,generate,evaluate,parse,inspect}``.

Option values resolve as: command-line flag, then environment variable
``BC2CHAT_<OPTION>`` (upper case, dashes as underscores), then the flat
``key = value`` file given by ``--config``, then the built-in default.

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from . import __version__, simenv
from .datagen import AuxConfig, AuxEntry, AuxKind, BaseKind, GenRecipe, generate_dataset, subsample
from .model import (
    action_to_json,
    conversation_from_json,
    conversation_to_json,
    dumps_line,
    load_trajectories,
    scene_to_json,
    trajectory_to_json,
    validate_trajectory,
)
from .policy import OraclePolicy, Policy, RemotePolicy, ReplayPolicy, TransportError, run_episode
from .textcodec import SpatialRelation, parse_actions_detailed, parse_relations, parse_scenes, parse_tokens

ENV_PREFIX = "BC2CHAT_"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _kinds(v: str) -> list[str]:
    out = [k.strip() for k in v.split(",") if k.strip()]
    known = [k.value for k in simenv.TASK_KINDS]
    for k in out:
        if k not in known:
            raise ValueError(f"unknown task kind {k!r}; known: {','.join(known)}")
    return out


def _levels(v: str) -> list[str]:
    out = [k.strip() for k in v.split(",") if k.strip()]
    for k in out:
        if k not in simenv.LEVELS:
            raise ValueError(f"unknown level {k!r}; known: {','.join(simenv.LEVELS)}")
    return out


def _ratios(v: str) -> dict[str, float]:
    out = {}
    for part in filter(None, (p.strip() for p in v.split(","))):
        name, _, num = part.partition("=")
        AuxKind(name.strip())
        out[name.strip()] = float(num)
    return out


@dataclass(frozen=True)
class Opt:
    flags: tuple[str, ...]
    dest: str
    conv: Callable[[str], Any]
    default: Any
    help: str
    flag: bool = False
    metavar: Optional[str] = None


_ALL_KINDS = ",".join(k.value for k in simenv.TASK_KINDS)

COMMON = [
    Opt(("--config",), "config", str, None, "flat key = value file of option defaults"),
]
SIMULATE = [
    Opt(("--out", "-o"), "out", str, None, "trajectory JSONL to write (required)"),
    Opt(("--episodes", "-n"), "episodes", int, 10, "number of expert episodes"),
    Opt(("--kinds",), "kinds", _kinds, _kinds(_ALL_KINDS), "comma-separated task kinds, used round-robin"),
    Opt(("--level",), "level", str, "L1", "generalization level: L1, L2 or L3"),
    Opt(("--seed",), "seed", int, None, "base seed (required)"),
    Opt(("--max-steps",), "max_steps", int, simenv.DEFAULT_MAX_STEPS, "step budget per episode"),
    Opt(("--images",), "images", str, None, "image directory (default: images/ next to --out)"),
    Opt(("--jobs", "-j"), "jobs", int, 1, "worker processes"),
]
GENERATE = [
    Opt(("--input", "-i"), "input", str, None, "trajectory JSONL (required)"),
    Opt(("--out", "-o"), "out", str, None, "conversation JSONL to write (required)"),
    Opt(("--base",), "base", str, "inBC", "base dataset: inBC, D_inBC, RT2, D_RT2"),
    Opt(("--aux",), "aux", str, "none", "auxiliary preset: none, A, A*, B, C, D, D*"),
    Opt(("--ratio",), "ratio", float, 1.0, "size ratio of each preset auxiliary set to the base set"),
    Opt(("--aux-ratios",), "aux_ratios", _ratios, None,
        "explicit per-set ratios, e.g. localization=1,spatial=0.5 (overrides --aux)"),
    Opt(("--seed",), "seed", int, None, "generation seed (required)"),
    Opt(("--no-history",), "no_history", _bool, False, "omit the action-history clause", flag=True),
    Opt(("--no-plan",), "no_plan", _bool, False, "answer with the next action only", flag=True),
    Opt(("--subsample",), "subsample", float, None,
        "keep this many trajectories (>= 1) or this fraction (< 1)"),
    Opt(("--jobs", "-j"), "jobs", int, 1, "worker processes"),
]
EVALUATE = [
    Opt(("--policy",), "policy", str, "oracle", "oracle, replay:FILE or an http(s) base URL"),
    Opt(("--out", "-o"), "out", str, None, "results JSONL to write"),
    Opt(("--kinds",), "kinds", _kinds, _kinds(_ALL_KINDS), "comma-separated task kinds"),
    Opt(("--levels",), "levels", _levels, ["L1"], "comma-separated levels"),
    Opt(("--seeds",), "seeds", int, 20, "episodes per level and kind"),
    Opt(("--seed",), "seed", int, 0, "first task seed; prompt templates are keyed on it too"),
    Opt(("--max-steps",), "max_steps", int, simenv.DEFAULT_MAX_STEPS, "step budget per episode"),
    Opt(("--base",), "base", str, "inBC", "prompt format: inBC, D_inBC, RT2, D_RT2"),
    Opt(("--no-history",), "no_history", _bool, False, "omit the action-history clause", flag=True),
    Opt(("--timeout",), "timeout", float, 60.0, "remote request timeout in seconds"),
    Opt(("--jobs", "-j"), "jobs", int, 1, "concurrent episodes (threads)"),
]
PARSE = [
    Opt(("--file", "-f"), "file", str, None, "read text from this file ('-' for stdin)"),
]
INSPECT = [
    Opt(("--show",), "show", int, None, "print the record at this 0-based index"),
]

COMMANDS = {
    "simulate": (SIMULATE, "record expert trajectories in the tabletop simulator"),
    "generate": (GENERATE, "compile trajectories into a conversation dataset"),
    "evaluate": (EVALUATE, "run closed-loop episodes and report success rates"),
    "parse": (PARSE, "extract actions, scenes, relations and tokens from text"),
    "inspect": (INSPECT, "summarize a trajectory or conversation JSONL file"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bc2chat",
        description="Turn tabletop behavior-cloning trajectories into instruction-tuning "
        "conversations and evaluate text-emitting policies.",
        epilog=f"Options also read {ENV_PREFIX}<OPTION> environment variables and --config files.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (opts, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if name == "parse":
            p.add_argument("text", nargs="?", help="text to parse (default: --file)")
        if name == "inspect":
            p.add_argument("path", help="JSONL file")
        for o in COMMON + opts:
            shown = "" if o.default is None or o.flag else f" (default: {_show(o.default)})"
            if o.flag:
                p.add_argument(*o.flags, dest=o.dest, action="store_const", const=True,
                               default=None, help=o.help)
            else:
                p.add_argument(*o.flags, dest=o.dest, type=str, default=None,
                               metavar=o.metavar or o.dest.upper(), help=o.help + shown)
    return parser


def _show(v: Any) -> str:
    return ",".join(v) if isinstance(v, list) else str(v)


def read_config(path: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys may use dashes."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(command: str, ns: argparse.Namespace, environ: Optional[dict] = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    opts = COMMON + COMMANDS[command][0]
    config = read_config(ns.config) if ns.config else {}
    known = {o.dest for o in opts}
    unknown = set(config) - known
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    cfg: dict[str, Any] = {}
    for o in opts:
        raw, source = getattr(ns, o.dest), "flag"
        if raw is None and ENV_PREFIX + o.dest.upper() in environ:
            raw, source = environ[ENV_PREFIX + o.dest.upper()], "environment"
        if raw is None and o.dest in config:
            raw, source = config[o.dest], "config"
        if raw is None:
            cfg[o.dest] = o.default
            continue
        if o.flag and raw is True:
            cfg[o.dest] = True
            continue
        try:
            cfg[o.dest] = o.conv(raw)
        except ValueError as exc:
            raise ConfigError(f"invalid {o.flags[0]} from {source}: {exc}") from None
    for extra in ("text", "path"):
        if hasattr(ns, extra):
            cfg[extra] = getattr(ns, extra)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _positive(cfg: dict, key: str, allow_zero: bool = False) -> None:
    v = cfg[key]
    if v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(f"--{key.replace('_', '-')} must be {'>= 0' if allow_zero else '> 0'}")


def write_manifest(out: Path, manifest: dict) -> Path:
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# simulate


def episode_seed(base: int, i: int) -> int:
    return base * 1_000_000 + i


def _record(args) -> Any:
    return simenv.record_trajectory(*args)


def cmd_simulate(cfg: dict) -> int:
    _require(cfg, "out", "seed")
    _positive(cfg, "episodes", allow_zero=True)
    _positive(cfg, "max_steps")
    _positive(cfg, "jobs")
    if cfg["level"] not in simenv.LEVELS:
        raise ConfigError(f"unknown level {cfg['level']!r}")
    if not cfg["kinds"]:
        raise ConfigError("--kinds is empty")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    image_dir = Path(cfg["images"]) if cfg["images"] else out.parent / "images"
    kinds = cfg["kinds"]
    work = [
        (kinds[i % len(kinds)], episode_seed(cfg["seed"], i), cfg["level"], str(image_dir), cfg["max_steps"])
        for i in range(cfg["episodes"])
    ]
    if cfg["jobs"] > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as ex:
            trajs = list(ex.map(_record, work, chunksize=max(1, len(work) // (4 * cfg["jobs"]))))
    else:
        trajs = [_record(w) for w in work]
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajs:
            fh.write(dumps_line(trajectory_to_json(t)) + "\n")
    os.replace(tmp, out)
    counts = Counter(t.task.task_kind.value for t in trajs)
    write_manifest(out, {
        "command": "simulate",
        "seed": cfg["seed"],
        "level": cfg["level"],
        "episodes": cfg["episodes"],
        "max_steps": cfg["max_steps"],
        "kinds": kinds,
        "counts": dict(sorted(counts.items())),
        "images": os.path.relpath(image_dir, out.parent),
    })
    for k in kinds:
        print(f"{k}\t{counts.get(k, 0)}")
    print(f"total\t{len(trajs)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate


def recipe_from(cfg: dict) -> GenRecipe:
    try:
        base = BaseKind(cfg["base"])
    except ValueError:
        raise ConfigError(f"unknown base {cfg['base']!r}; known: {', '.join(b.value for b in BaseKind)}") from None
    if cfg.get("aux_ratios"):
        aux = AuxConfig({AuxKind(k): AuxEntry(True, r) for k, r in cfg["aux_ratios"].items()})
    else:
        try:
            aux = AuxConfig.preset(cfg.get("aux", "none"), cfg.get("ratio", 1.0))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return GenRecipe(
        base=base,
        aux=aux,
        seed=cfg["seed"],
        history=not cfg.get("no_history", False),
        multi_step_plan=not cfg.get("no_plan", False),
    )


def cmd_generate(cfg: dict) -> int:
    _require(cfg, "input", "out", "seed")
    _positive(cfg, "jobs")
    recipe = recipe_from(cfg)
    if not Path(cfg["input"]).is_file():
        raise ConfigError(f"input {cfg['input']} does not exist")
    report = load_trajectories(cfg["input"])
    if report.errors:
        for lineno, msg in report.errors:
            print(f"{cfg['input']}:{lineno}: {msg}", file=sys.stderr)
        print(f"{len(report.errors)} invalid trajectory line(s); nothing written", file=sys.stderr)
        return EXIT_RUNTIME
    trajs = report.trajectories
    if cfg["subsample"] is not None and trajs:
        s = cfg["subsample"]
        if s <= 0:
            raise ConfigError("--subsample must be positive")
        if s >= 1:
            trajs = subsample(trajs, count=min(int(s), len(trajs)), seed=recipe.seed)
        else:
            trajs = subsample(trajs, fraction=s, seed=recipe.seed)
    result = generate_dataset(trajs, recipe, jobs=cfg["jobs"])
    for tid, reason in result.skipped:
        print(f"skipped {tid}: {reason}", file=sys.stderr)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for c in result.mixed.conversations:
            fh.write(dumps_line(conversation_to_json(c)) + "\n")
    os.replace(tmp, out)
    manifest = {"command": "generate", "input": os.path.basename(cfg["input"]),
                "trajectories": len(trajs), **result.manifest(recipe)}
    write_manifest(out, manifest)
    print(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False))
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def load_replay(path: str) -> dict[str, list[str]]:
    """Replay file: JSONL rows ``{"episode": "<kind>-<level>-<seed>", "texts": [...]}``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[str(row["episode"])] = [str(t) for t in row["texts"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{n}: bad replay row: {exc}") from None
    return out


def policy_factory(cfg: dict) -> Callable[[str], Policy]:
    choice = cfg["policy"]
    tokens = BaseKind(cfg["base"]).tokens
    if choice == "oracle":
        return lambda _episode: OraclePolicy(tokens=tokens)
    if choice.startswith("replay:"):
        path = choice[len("replay:"):]
        if not Path(path).is_file():
            raise ConfigError(f"replay file {path} does not exist")
        table = load_replay(path)
        return lambda episode: ReplayPolicy(table.get(episode, ()))
    if choice.startswith(("http://", "https://")):
        remote = RemotePolicy(choice, timeout=cfg["timeout"], max_in_flight=max(1, cfg["jobs"]))
        return lambda _episode: remote
    raise ConfigError(f"unknown policy {choice!r}; use oracle, replay:FILE or an http(s) URL")


def _episode_row(kind: str, level: str, seed: int, cfg: dict, make: Callable[[str], Policy],
                 recipe: GenRecipe) -> dict:
    env, _ = simenv.generate_task(kind, seed=seed, level=level, max_steps=cfg["max_steps"])
    episode = f"{kind}-{level}-{seed}"
    result = run_episode(make(episode), env, recipe=recipe, seed=cfg["seed"], raise_transport=True)
    return {"episode": episode, "kind": kind, "level": level, "seed": seed,
            "success": result.success, "steps": result.steps_taken}


def summary_table(rows: Sequence[dict], levels: Sequence[str], kinds: Sequence[str]) -> str:
    lines = ["level\t" + "\t".join(kinds) + "\tmean"]
    for lvl in levels:
        cells, rates = [], []
        for k in kinds:
            got = [r["success"] for r in rows if r["level"] == lvl and r["kind"] == k]
            rate = 100.0 * sum(got) / len(got) if got else float("nan")
            rates.append(rate)
            cells.append(f"{rate:.1f}")
        mean = sum(rates) / len(rates) if rates else float("nan")
        lines.append(f"{lvl}\t" + "\t".join(cells) + f"\t{mean:.1f}")
    return "\n".join(lines)


def cmd_evaluate(cfg: dict) -> int:
    _positive(cfg, "seeds")
    _positive(cfg, "max_steps")
    _positive(cfg, "jobs")
    if cfg["base"] not in [b.value for b in BaseKind]:
        raise ConfigError(f"unknown base {cfg['base']!r}")
    make = policy_factory(cfg)
    recipe = GenRecipe(base=BaseKind(cfg["base"]), seed=cfg["seed"], history=not cfg["no_history"])
    work = [(k, lvl, cfg["seed"] + i) for lvl in cfg["levels"] for k in cfg["kinds"] for i in range(cfg["seeds"])]
    rows: list[dict] = []
    fh = None
    if cfg["out"]:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        fh = open(cfg["out"], "w", encoding="utf-8", newline="\n")
    failure: Optional[TransportError] = None
    try:
        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as ex:
            futures = [ex.submit(_episode_row, k, lvl, s, cfg, make, recipe) for k, lvl, s in work]
            for fut in futures:
                try:
                    row = fut.result()
                except TransportError as exc:
                    failure = exc
                    for f in futures:
                        f.cancel()
                    break
                rows.append(row)
                if fh:
                    fh.write(dumps_line(row) + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    if cfg["out"]:
        write_manifest(Path(cfg["out"]), {
            "command": "evaluate", "policy": cfg["policy"], "seed": cfg["seed"], "seeds": cfg["seeds"],
            "levels": cfg["levels"], "kinds": cfg["kinds"], "max_steps": cfg["max_steps"],
            "base": cfg["base"], "completed": len(rows), "aborted": failure is not None,
        })
    print(summary_table(rows, cfg["levels"], cfg["kinds"]))
    if failure is not None:
        print(f"aborted: {failure}; {len(rows)} of {len(work)} episodes kept", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# parse and inspect


def parse_dump(text: str) -> dict:
    detailed = parse_actions_detailed(text)
    scenes, scene_errors = parse_scenes(text)
    relations = parse_relations(text)
    tokens = parse_tokens(text)
    return {
        "counts": {"actions": len(detailed.actions), "scenes": len(scenes),
                   "relations": len(relations), "token_actions": len(tokens)},
        "actions": [action_to_json(a) for a in detailed.actions],
        "action_errors": [{"offset": e.offset, "message": e.message} for e in detailed.errors],
        "scenes": [scene_to_json(s) for s in scenes],
        "scene_errors": [{"offset": e.offset, "message": str(e)} for e in scene_errors],
        "relations": [{"type": "spatial" if isinstance(r, SpatialRelation) else "temporal", **asdict(r)} for r in relations],
        "token_actions": [list(t.tokens) for t in tokens],
    }


def cmd_parse(cfg: dict) -> int:
    if cfg.get("text") is not None and cfg.get("file"):
        raise ConfigError("give text or --file, not both")
    if cfg.get("text") is not None:
        text = cfg["text"]
    elif cfg.get("file") in (None, "-"):
        text = sys.stdin.read()
    else:
        try:
            text = Path(cfg["file"]).read_text(encoding="utf-8", errors="replace")
        except OSError as exc:
            raise ConfigError(f"cannot read {cfg['file']}: {exc}") from None
    print(json.dumps(parse_dump(text), indent=2, ensure_ascii=False))
    return EXIT_OK


def cmd_inspect(cfg: dict) -> int:
    path = Path(cfg["path"])
    if not path.is_file():
        raise ConfigError(f"{path} does not exist")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except ValueError as exc:
                    print(f"{path}:{n}: {exc}", file=sys.stderr)
                    return EXIT_RUNTIME
    if cfg["show"] is not None:
        if not 0 <= cfg["show"] < len(rows):
            raise ConfigError(f"--show {cfg['show']} out of range (0..{len(rows) - 1})")
        print(json.dumps(rows[cfg["show"]], indent=2, ensure_ascii=False))
        return EXIT_OK
    if rows and "conversations" in rows[0]:
        convs = [conversation_from_json(r) for r in rows]
        kinds = Counter(c.id.rsplit("/", 1)[-1] for c in convs)
        print(f"conversations\t{len(convs)}")
        for k, n in sorted(kinds.items()):
            print(f"{k}\t{n}")
        return EXIT_OK
    report = load_trajectories(path)
    print(f"trajectories\t{len(report.trajectories)}")
    print(f"steps\t{sum(len(t.steps) for t in report.trajectories)}")
    for k, n in sorted(Counter(t.task.task_kind.value for t in report.trajectories).items()):
        print(f"{k}\t{n}")
    problems = sum(1 for t in report.trajectories if validate_trajectory(t))
    print(f"invalid_lines\t{len(report.errors)}")
    print(f"invariant_violations\t{problems}")
    return EXIT_RUNTIME if report.errors else EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "parse": cmd_parse,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except ConfigError as exc:
        print(f"bc2chat {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"bc2chat {ns.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
