"""Command-line entry point: ``latchlab <subcommand> [flags]``.

Every subcommand resolves its settings from defaults, then an optional JSON
config document (``--config``), then flags; flags win. The resolved settings,
seed and artifact checksums go to ``manifest.json`` in the output directory,
and a manifest is itself accepted as ``--config`` to replay a run.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import re
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from latchlab import __version__
from latchlab.bandit import BanditParams, as_cmdp, expert_policy
from latchlab.core import CMDPValidationError, ExpertPolicy, load_cmdp, random_expert
from latchlab.filters import FilterMode, episode_uniforms, fmt, run_bandit_episodes
from latchlab.momentgame import GameConfig, realizability_probe, solve_game
from latchlab.rng import RandomStream
from latchlab.sweeps import RULES, SweepConfig, cells_for_mode, emit_grid, run_sweep
from latchlab.theory import cliff_gap_formula, cliff_simulate, theorem1_suite

SEED_ENV = "LATCHLAB_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line when known."""


# key -> (type, default, help); "seq" is a list of numbers
SCHEMAS: dict[str, dict[str, tuple]] = {
    "sweep": {
        "K": ("int", 5, "number of arms (contexts)"),
        "T": ("int", 2000, "pulls per episode"),
        "trials": ("int", 100, "episodes per cell"),
        "eps_exp_grid": ("seq", list(SweepConfig().eps_exp_grid), "expert noise values (columns)"),
        "eps_obs_grid": ("seq", list(SweepConfig().eps_obs_grid), "feedback noise values (rows)"),
        "margin": ("float", 0.12, "consistency margin"),
        "rule": ("str", "expert-matching", f"consistency rule, one of {', '.join(RULES)}"),
        "mode": ("str", "both", "filter mode: on, off or both"),
        "svg": ("bool", False, "also write SVG dot plots"),
    },
    "bandit-run": {
        "K": ("int", 5, "number of arms (contexts)"),
        "eps_obs": ("float", 0.2, "feedback noise"),
        "eps_exp": ("float", 0.05, "expert noise"),
        "T": ("int", 2000, "pulls in the episode"),
        "context": ("int", -1, "hidden context; -1 draws it from the seed"),
    },
    "cliff": {
        "T": ("int", 3, "horizon"),
        "simulate": ("bool", False, "also simulate the falling learner"),
        "trials": ("int", 4000, "simulated episodes"),
    },
    "verify-theorems": {
        "instances": ("int", 100, "random CMDP and policy pairs"),
    },
    "moment-game": {
        "cmdp": ("str", "", "CMDP document; empty uses the bandit below"),
        "expert": ("str", "", "expert table JSON {\"probs\": [s][c][a]}; empty draws one from the seed"),
        "variant": ("str", "reward", "reward or on_q"),
        "iters": ("int", GameConfig().iterations, "solver iterations"),
        "T": ("int", 3, "horizon of the game"),
        "K": ("int", 2, "bandit arms when no CMDP is given"),
        "eps_obs": ("float", 0.2, "bandit feedback noise"),
        "eps_exp": ("float", 0.1, "bandit expert noise"),
    },
    "realizability": {
        "K": ("int", 2, "bandit arms"),
        "eps_obs": ("float", 0.2, "feedback noise"),
        "eps_exp": ("float", 0.1, "expert noise"),
        "horizons": ("seq", [2, 4, 8], "horizon ladder"),
        "iters": ("int", 1500, "solver iterations per horizon"),
        "variant": ("str", "reward", "reward or on_q"),
    },
}
COMMON = {"base_seed": ("int", 0, f"64-bit base seed; falls back to ${SEED_ENV}, then 0")}


@dataclass
class RunConfig:
    subcommand: str
    config_path: str | None
    overrides: dict
    base_seed: int
    out_dir: Path
    settings: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _check_type(key: str, kind: str, value):
    if kind == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif kind == "bool":
        ok = isinstance(value, bool)
    elif kind == "str":
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    if not ok:
        raise ValueError(f"{key}: expected {kind}, got {value!r}")
    return value


def load_config(path: str, subcommand: str) -> dict:
    """Read a config document or a manifest and check its keys and types."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: line 1: top level must be an object")
    if "subcommand" in doc and "config" in doc:
        if doc["subcommand"] != subcommand:
            raise ConfigError(f"{path}: line {_line_of(text, 'subcommand')}: manifest is for "
                              f"{doc['subcommand']!r}, not {subcommand!r}")
        doc = doc["config"]
    schema = {**COMMON, **SCHEMAS[subcommand]}
    out = {}
    for key, value in doc.items():
        if key not in schema:
            raise ConfigError(f"{path}: line {_line_of(text, key)}: unknown key {key!r} for {subcommand}")
        try:
            out[key] = _check_type(key, schema[key][0], value)
        except ValueError as exc:
            raise ConfigError(f"{path}: line {_line_of(text, key)}: {exc}") from exc
    return out


def resolve(subcommand: str, config_path: str | None, overrides: dict, out_dir: str) -> RunConfig:
    settings = {k: v[1] for k, v in SCHEMAS[subcommand].items()}
    from_file = load_config(config_path, subcommand) if config_path else {}
    seed = from_file.pop("base_seed", None)
    settings.update(from_file)
    seed = overrides.pop("base_seed", None) if overrides.get("base_seed") is not None else seed
    overrides.pop("base_seed", None)
    settings.update({k: v for k, v in overrides.items() if v is not None})
    if seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            seed = int(env) if env else 0
        except ValueError as exc:
            raise ConfigError(f"${SEED_ENV}: expected an integer, got {env!r}") from exc
    if not 0 <= seed < 2**64:
        raise ConfigError(f"base_seed must be a 64-bit unsigned integer, got {seed}")
    return RunConfig(subcommand, config_path, overrides, seed, Path(out_dir), settings)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


class Artifacts:
    """Collects outputs in memory so nothing is written unless the run succeeds."""

    def __init__(self):
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data: str | bytes) -> None:
        self.files[name] = data.encode() if isinstance(data, str) else data

    def write(self, run: RunConfig) -> None:
        run.out_dir.mkdir(parents=True, exist_ok=True)
        for name, data in self.files.items():
            (run.out_dir / name).write_bytes(data)
        manifest = {
            "subcommand": run.subcommand,
            "version": __version__,
            "config": {"base_seed": run.base_seed, **run.settings},
            "artifacts": {n: hashlib.sha256(d).hexdigest() for n, d in sorted(self.files.items())},
        }
        (run.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _round(x):
    return None if x is None else float(fmt(x))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def bandit_run(params: BanditParams, steps: int, seed: int, context: int = -1) -> dict[str, str]:
    """Paired single-episode traces of both filters on one exogenous event stream."""
    cu, u = episode_uniforms(RandomStream(seed).child(0), steps)
    c = min(int(cu * params.K), params.K - 1) if context < 0 else context
    out = {}
    for mode in (FilterMode.OFF_POLICY, FilterMode.ON_POLICY):
        b = run_bandit_episodes(params, mode, np.array([c]), u[None], record=True)
        buf = io.StringIO()
        K = params.K
        buf.write(",".join(["t"] + [f"c{k}" for k in range(K)]
                           + ["intended_arm", "executed_arm", "feedback", "argmax_arm", "success_prob"]) + "\n")
        for t in range(steps):
            post = b.posteriors[0, t]
            row = [str(t + 1)] + [fmt(v) for v in post]
            row += [str(b.intended[0, t]), str(b.executed[0, t]), "+" if b.feedback_plus[0, t] else "-",
                    str(int(np.argmax(post))), fmt(b.success_trace[0, t])]
            buf.write(",".join(row) + "\n")
        out[mode.value] = buf.getvalue()
    return out


def _validated_params(s: dict) -> BanditParams:
    try:
        return BanditParams(s["K"], s["eps_obs"], s["eps_exp"], s.get("T", 2))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_sweep(run: RunConfig, art: Artifacts) -> int:
    s = run.settings
    modes = {"both": ("off", "on"), "on": ("on",), "off": ("off",)}.get(s["mode"])
    if modes is None:
        raise ConfigError(f"mode must be on, off or both, got {s['mode']!r}")
    try:
        cfg = SweepConfig(K=s["K"], T=s["T"], trials=s["trials"], eps_exp_grid=s["eps_exp_grid"],
                          eps_obs_grid=s["eps_obs_grid"], margin=s["margin"], base_seed=run.base_seed,
                          modes=modes, rule=s["rule"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cells = run_sweep(cfg)
    for m in modes:
        mc = cells_for_mode(cells, m)
        art.add(f"sweep_{m}.csv", emit_grid(mc, "csv"))
        art.add(f"grid_{m}.pgm", emit_grid(mc, "pgm"))
        if s["svg"]:
            art.add(f"grid_{m}.svg", emit_grid(mc, "svg"))
        ok = sum(c.consistent for c in mc)
        print(f"{m}: {ok}/{len(mc)} cells consistent")
    return 0


def cmd_bandit_run(run: RunConfig, art: Artifacts) -> int:
    s = run.settings
    params = _validated_params(s)
    if s["context"] >= params.K:
        raise ConfigError(f"context must be below K={params.K}")
    traces = bandit_run(params, s["T"], run.base_seed, s["context"])
    for mode, text in traces.items():
        art.add(f"trace_{mode}.csv", text)
        last = text.rstrip("\n").rsplit("\n", 1)[-1].split(",")
        print(f"{mode}: final argmax arm {last[-2]}, success_prob {last[-1]}")
    return 0


def cmd_cliff(run: RunConfig, art: Artifacts) -> int:
    s = run.settings
    if s["T"] < 1 or s["trials"] < 2:
        raise ConfigError("T must be >= 1 and trials >= 2")
    value: Fraction = cliff_gap_formula(s["T"])
    print(f"cliff_gap_formula,{value},{fmt(float(value))}")
    summary = ["T,formula_exact,formula,simulated_aig,simulated_aig_stderr,exact_aig"]
    row = [str(s["T"]), str(value), fmt(float(value))]
    if s["simulate"]:
        res = cliff_simulate(s["T"], s["trials"], RandomStream(run.base_seed))
        print(f"simulated_aig,{fmt(res.aig)},{fmt(res.aig_stderr)}")
        print(f"exact_aig,{fmt(res.exact_aig)}")
        lines = ["t,eps_off,eps_off_stderr,eps_off_times_t_plus_1"]
        for t, (e, se) in enumerate(zip(res.eps_off.eps, res.eps_off.eps_stderr), start=1):
            lines.append(f"{t},{fmt(e)},{fmt(se)},{fmt(e * (t + 1))}")
        csv = "\n".join(lines) + "\n"
        sys.stdout.write(csv)
        art.add("cliff_eps_off.csv", csv)
        row += [fmt(res.aig), fmt(res.aig_stderr), fmt(res.exact_aig)]
    else:
        row += ["", "", ""]
    art.add("cliff_summary.csv", "\n".join(summary + [",".join(row)]) + "\n")
    return 0


def cmd_verify(run: RunConfig, art: Artifacts) -> int:
    n = run.settings["instances"]
    if n < 1:
        raise ConfigError("instances must be >= 1")
    lines = ["instance,S,A,C,T,gap,H,bound_rew,bound_on,bound_off,min_slack,ok"]
    failures = 0
    for i, m, rep in theorem1_suite(n, run.base_seed):
        slack = min(rep.slack.values())
        failures += not rep.ok
        lines.append(",".join([str(i), str(m.num_states), str(m.num_actions), str(m.num_contexts),
                               str(m.horizon), fmt(rep.gap), fmt(rep.H)]
                              + [fmt(rep.bounds[k]) for k in ("rew", "on", "off")]
                              + [fmt(slack), "true" if rep.ok else "false"]))
    art.add("theorem1.csv", "\n".join(lines) + "\n")
    print(f"{n - failures}/{n} instances satisfy every bound")
    return 1 if failures else 0


def _load_expert(path: str, cmdp) -> ExpertPolicy:
    try:
        doc = json.loads(Path(path).read_text())
        ex = ExpertPolicy(np.asarray(doc["probs"], dtype=float))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid expert table ({exc})") from exc
    if ex.probs.shape != (cmdp.num_states, cmdp.num_contexts, cmdp.num_actions):
        raise ConfigError(f"{path}: expert table shape {ex.probs.shape} does not match the CMDP")
    return ex


def cmd_moment_game(run: RunConfig, art: Artifacts) -> int:
    s = run.settings
    if s["cmdp"]:
        try:
            cmdp = load_cmdp(s["cmdp"])
        except CMDPValidationError as exc:
            raise ConfigError(f"{s['cmdp']}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"{s['cmdp']}: cannot read CMDP ({exc.strerror})") from exc
        expert = (_load_expert(s["expert"], cmdp) if s["expert"]
                  else random_expert(RandomStream(run.base_seed).generator(), cmdp))
    else:
        params = _validated_params(s)
        cmdp, expert = as_cmdp(params, s["T"]), expert_policy(params)
    try:
        config = GameConfig(s["variant"], s["iters"], horizon_T=s["T"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cert = solve_game(cmdp, expert, config)
    doc = {k: (_round(v) if isinstance(v, float) else v) for k, v in cert.to_dict().items()}
    doc["best_response_payoffs"] = [_round(v) for v in cert.best_response_payoffs]
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    sys.stdout.write(text)
    art.add("certificate.json", text)
    art.add("gap_trace.csv", "iteration,duality_gap\n"
            + "".join(f"{i},{fmt(g)}\n" for i, g in cert.gap_trace))
    if cert.aig_bound is not None and cert.measured_aig > cert.aig_bound + 1e-9:
        print("certificate violated: measured AIG exceeds the bound", file=sys.stderr)
        return 1
    return 0


def cmd_realizability(run: RunConfig, art: Artifacts) -> int:
    s = run.settings
    horizons = s["horizons"]
    if not horizons or any(int(h) != h or h < 1 for h in horizons):
        raise ConfigError("horizons must be positive integers")
    params = _validated_params({**s, "T": int(max(horizons))})
    if s["variant"] not in ("reward", "on_q") or s["iters"] < 1:
        raise ConfigError("variant must be reward or on_q and iters >= 1")
    report = realizability_probe(as_cmdp(params, int(max(horizons))), expert_policy(params),
                                 horizons=[int(h) for h in horizons], variant=s["variant"],
                                 iterations=s["iters"])
    lines = ["T,minimax_error,lower_bound,duality_gap"]
    lines += [f"{T},{fmt(v)},{fmt(lo)},{fmt(g)}" for T, v, lo, g in report.to_rows()]
    csv = "\n".join(lines) + "\n"
    sys.stdout.write(csv)
    art.add("realizability.csv", csv)
    return 0


COMMANDS = {
    "sweep": cmd_sweep,
    "bandit-run": cmd_bandit_run,
    "cliff": cmd_cliff,
    "verify-theorems": cmd_verify,
    "moment-game": cmd_moment_game,
    "realizability": cmd_realizability,
}

# flag name -> (settings key, argparse type)
FLAGS = {
    "sweep": {"--K": ("K", int), "--T": ("T", int), "--trials": ("trials", int), "--margin": ("margin", float),
              "--rule": ("rule", str), "--mode": ("mode", str), "--svg": ("svg", "store_true")},
    "bandit-run": {"--K": ("K", int), "--eps-obs": ("eps_obs", float), "--eps-exp": ("eps_exp", float),
                   "--T": ("T", int), "--steps": ("T", int), "--context": ("context", int)},
    "cliff": {"--T": ("T", int), "--simulate": ("simulate", "store_true"), "--trials": ("trials", int)},
    "verify-theorems": {"--instances": ("instances", int)},
    "moment-game": {"--cmdp": ("cmdp", str), "--expert": ("expert", str), "--variant": ("variant", str),
                    "--iters": ("iters", int), "--T": ("T", int), "--K": ("K", int),
                    "--eps-obs": ("eps_obs", float), "--eps-exp": ("eps_exp", float)},
    "realizability": {"--K": ("K", int), "--eps-obs": ("eps_obs", float), "--eps-exp": ("eps_exp", float),
                      "--horizons": ("horizons", lambda v: [int(x) for x in v.split(",")]),
                      "--iters": ("iters", int), "--variant": ("variant", str)},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latchlab", description="Hidden-context imitation experiments.")
    parser.add_argument("--version", action="version", version=f"latchlab {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, flags in FLAGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config document or manifest")
        p.add_argument("--seed", dest="base_seed", type=int, help=COMMON["base_seed"][2])
        p.add_argument("--out-dir", default="latchlab-out", help="directory for artifacts")
        for flag, (key, kind) in flags.items():
            help_text = SCHEMAS[name][key][2]
            if kind == "store_true":
                p.add_argument(flag, dest=key, action="store_true", default=None, help=help_text)
            else:
                p.add_argument(flag, dest=key, type=kind, help=help_text)
    return parser


def parse_and_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    values = vars(args)
    name = values.pop("subcommand")
    config_path, out_dir = values.pop("config"), values.pop("out_dir")
    try:
        run = resolve(name, config_path, values, out_dir)
        art = Artifacts()
        code = COMMANDS[name](run, art)
    except ConfigError as exc:
        print(f"latchlab {name}: {exc}", file=sys.stderr)
        return 2
    art.write(run)
    return code


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
