"""Command-line pipeline: init -> collect -> train -> eval -> analyze.

Every command reads a JSON run config (see ``DEFAULT_CONFIG``). Relative paths
are resolved against the config file's directory; ``FLOWDPT_OUT`` overrides the
output directory. All randomness derives from the single root seed through
named streams, so identical config + seed reproduces every output file.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import envsuite as env
from . import ndgrad as nd
from .datagen import NoiseSchedule, collect_cnd, demonstrator_prompt, load_dataset, write_shard
from .evalkit import (ScoreRecord, contraction_analysis, demo_sweep, save_svg_plots, sweep_iqm_by_size,
                      task_baselines, write_contraction_csv, write_scores_csv, write_sweep_csv)
from .flowhead import FlowConfig
from .model import ModelConfig
from .runtime import Checkpoint, TrainerConfig, TrainingDiverged, rollout_offline_many, rollout_online_many, train

log = logging.getLogger("flowdpt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

DEFAULT_CONFIG = {
    "registry": "registry.json",
    "data_dir": "data",
    "checkpoint": "checkpoint",
    "out_dir": "out",
    "seed": 0,
    "collect": {"levels": [0.0, 0.25, 0.5, 1.0, 2.0], "episodes_per_level": 40},
    "model": {"backbone": {"n_layers": 2, "n_heads": 4, "d_model": 64, "d_ff": 256, "L_max": 100,
                           "activation": "gelu"},
              "d_gamma": 32, "f_min": 1.0, "f_max": 1000.0, "dtype": "float32"},
    "trainer": {"lr": 1e-3, "batch_size": 32, "steps": 1500, "L": 100, "head": "flow", "warmup": 100,
                "cosine_decay": True, "checkpoint_every": 250},
    "eval": {"mode": "online", "episodes": 50, "L": 100, "prompt_size": None, "M": 32, "solver": "heun",
             "seeds": [0, 1, 2, 3], "splits": ["train", "test"], "reset_context": False,
             "score_last": 10, "baseline_episodes": 2000},
    "analyze": {"split": "test", "prompt_sizes": [0, 5, 25, 100], "seeds": [0, 1, 2, 3], "episodes": 10,
                "contraction_sizes": [0, 10, 100, 500], "n_samples": 100, "contraction_task": None,
                "svg": False},
}


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- config ------------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply_override(cfg: dict, item: str) -> None:
    """``a.b.c=value``; value parsed as JSON, falling back to a plain string."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    node[parts[-1]] = value


def load_config(path: str | Path, overrides=(), seed: int | None = None) -> dict:
    path = Path(path)
    try:
        user = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULT_CONFIG, user)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    root = path.resolve().parent
    for k in ("registry", "data_dir", "checkpoint", "out_dir"):
        cfg[k] = str((root / cfg[k]).resolve())
    if os.environ.get("FLOWDPT_OUT"):
        cfg["out_dir"] = str(Path(os.environ["FLOWDPT_OUT"]).resolve())
    return cfg


def _trainer(cfg: dict) -> TrainerConfig:
    try:
        return TrainerConfig(**{**cfg["trainer"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"trainer config: {exc}") from None


def _model_cfg(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**{**cfg["model"], "head": cfg["trainer"].get("head", "flow")})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model config: {exc}") from None


def _registry(cfg: dict) -> list[env.TaskInstance]:
    try:
        return env.load_registry(cfg["registry"])
    except FileNotFoundError:
        raise ConfigError(f"registry not found: {cfg['registry']}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad registry {cfg['registry']}: {exc}") from None


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _out_dir(cfg: dict) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- commands ------------------------------------------------------------------------------

def cmd_init(args) -> int:
    """Write a default config and a task registry next to it."""
    path = Path(args.config)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.kind == "linear_control":
        tasks = env.linear_control_registry(args.n_train, args.n_test, seed=args.registry_seed)
    else:
        tasks = env.goal_registry(args.kind, args.n_train, args.n_test, seed=args.registry_seed)
    env.save_registry(path.parent / cfg["registry"], tasks)
    path.write_text(json.dumps(cfg, indent=2))
    print(f"wrote {path} and {path.parent / cfg['registry']} ({len(tasks)} tasks)")
    return EXIT_OK


def _collect_one(job):
    task_json, levels, episodes, seed, data_dir = job
    task = env.TaskInstance.from_json(task_json)
    try:
        shard = collect_cnd(task, NoiseSchedule(tuple(levels), episodes), nd.stream(seed, f"collect/{task.task_id}"))
        write_shard(Path(data_dir) / task.task_id, shard)
        return task.task_id, shard.n, None
    except Exception as exc:  # keep going with the other tasks
        return task.task_id, 0, str(exc)


def cmd_collect(cfg: dict, jobs: int = 1) -> int:
    tasks = [t for t in _registry(cfg) if t.split == "train"]
    if not tasks:
        log.warning("registry has no training tasks; nothing collected")
        return EXIT_OK
    c = cfg["collect"]
    try:
        NoiseSchedule(tuple(c["levels"]), int(c["episodes_per_level"]))
    except ValueError as exc:
        raise ConfigError(f"collect config: {exc}") from None
    Path(cfg["data_dir"]).mkdir(parents=True, exist_ok=True)
    jobs_ = [(t.to_json(), c["levels"], int(c["episodes_per_level"]), cfg["seed"], cfg["data_dir"]) for t in tasks]
    failed = 0
    for task_id, n, err in _map(_collect_one, jobs_, jobs):
        if err:
            failed += 1
            log.error("collect %s failed: %s", task_id, err)
        else:
            print(f"{task_id}\t{n} transitions")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_train(cfg: dict, resume: bool = False) -> int:
    tc = _trainer(cfg)
    mc = _model_cfg(cfg)
    ds = load_dataset(cfg["data_dir"]) if Path(cfg["data_dir"]).is_dir() else None
    if ds is None or not ds.shards:
        raise ConfigError(f"no shards in {cfg['data_dir']} (run collect first)")
    ck_dir = Path(cfg["checkpoint"])
    start = Checkpoint.load(ck_dir) if resume and (ck_dir / "manifest.json").exists() else None
    if start is not None:
        log.info("resuming from step %d", start.step)
        start.trainer = {**start.trainer, **vars(tc)}
    out = _out_dir(cfg)
    try:
        ck = train(tc, ds, mc, checkpoint=start, loss_csv=None)
    except TrainingDiverged as exc:
        exc.last_good.save(ck_dir)
        log.error("%s; last good checkpoint (step %d) saved to %s", exc, exc.last_good.step, ck_dir)
        return EXIT_RUNTIME
    ck.save(ck_dir)
    _append_losses(out / "loss.csv", ck.losses, fresh=start is None)
    last = ck.losses[-1][1] if ck.losses else float("nan")
    print(f"step {ck.step} final loss {last!r} -> {ck_dir}")
    return EXIT_OK


def _append_losses(path: Path, losses, fresh: bool) -> None:
    mode = "w" if fresh or not path.exists() else "a"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(["step", "loss"])
        for s, l in losses:
            w.writerow([s, repr(l)])


def _load_checkpoint(cfg: dict) -> Checkpoint:
    ck_dir = Path(cfg["checkpoint"])
    if not (ck_dir / "manifest.json").exists():
        raise ConfigError(f"checkpoint not found: {ck_dir} (run train first)")
    return Checkpoint.load(ck_dir)


def _lockstep(tasks):
    keyed: dict[tuple, list] = {}
    for t in tasks:
        keyed.setdefault((t.group.group_id, t.horizon), []).append(t)
    return list(keyed.values())


def _flow(e: dict) -> FlowConfig:
    try:
        return FlowConfig(int(e["M"]), e["solver"])
    except ValueError as exc:
        raise ConfigError(f"eval config: {exc}") from None


def _eval_seed(job):
    model, tasks, e, mode, seed, root, baselines = job
    flow = FlowConfig(int(e["M"]), e["solver"])
    records, returns = [], []
    for group in _lockstep(tasks):
        rngs = [nd.stream(root, f"eval/{mode}/{seed}/{t.task_id}") for t in group]
        if mode == "online":
            L = min(int(e["L"]), model.L_max)
            R = rollout_online_many(model, group, int(e["episodes"]), L, rngs, flow,
                                    reset_context=bool(e["reset_context"]))
            raw = R[:, -int(e["score_last"]):].mean(axis=1)
        else:
            K = int(e["prompt_size"] or 0)
            prompts = [demonstrator_prompt(t, K, nd.stream(root, f"eval/prompt/{seed}/{t.task_id}")) for t in group]
            R = rollout_offline_many(model, group, prompts, int(e["episodes"]), rngs, flow)
            raw = R.mean(axis=1)
        for t, r, row in zip(group, raw, R):
            rnd, exp = baselines[t.task_id]
            records.append(ScoreRecord(t.task_id, t.split, seed, float(r), rnd, exp))
            returns.extend((ep + 1, float(v), seed, t.task_id) for ep, v in enumerate(row))
    return records, returns


def cmd_eval(cfg: dict, mode: str | None = None, prompt_size: int | None = None, jobs: int = 1) -> int:
    e = dict(cfg["eval"])
    mode = mode or e["mode"]
    if mode not in ("online", "offline"):
        raise ConfigError(f"unknown eval mode {mode!r}")
    if prompt_size is not None:
        e["prompt_size"] = prompt_size
    if mode == "online" and e.get("prompt_size") is not None:
        log.warning("online mode starts from an empty context; ignoring prompt_size=%s", e["prompt_size"])
    if mode == "offline" and e.get("prompt_size") is None:
        raise ConfigError("offline mode needs a prompt size (--prompt-size K or eval.prompt_size)")
    _flow(e)
    tasks = [t for t in _registry(cfg) if t.split in e["splits"]]
    ck = _load_checkpoint(cfg)
    model = ck.model
    if mode == "offline" and int(e["prompt_size"]) > model.L_max:
        raise ConfigError(f"prompt_size {e['prompt_size']} exceeds L_max={model.L_max}")
    missing = {t.group.group_id for t in tasks} - set(model.groups)
    if missing:
        raise ConfigError(f"checkpoint has no codec for groups {sorted(missing)}")
    out = _out_dir(cfg)
    baselines = {t.task_id: task_baselines(t, int(e["baseline_episodes"]), cfg["seed"]) for t in tasks}
    jobs_ = [(model, tasks, e, mode, int(s), cfg["seed"], baselines) for s in e["seeds"]] if tasks else []
    try:
        results = _map(_eval_seed, jobs_, jobs)
    except (FloatingPointError, ValueError) as exc:
        log.error("evaluation failed: %s", exc)
        return EXIT_RUNTIME
    records = [r for recs, _ in results for r in recs]
    write_scores_csv(out / "scores.csv", records)
    with open(out / "returns.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return", "seed", "task"])
        for recs in results:
            for ep, v, seed, tid in recs[1]:
                w.writerow([ep, repr(v), seed, tid])
    if not tasks:
        log.warning("no tasks in splits %s; wrote empty scores.csv", e["splits"])
    for split in e["splits"]:
        vals = [r.normalized for r in records if r.split == split]
        if vals:
            print(f"{mode} {split}: mean normalized {np.mean(vals):.4f} over {len(vals)} (task, seed) pairs")
    return EXIT_OK


def cmd_analyze(cfg: dict, jobs: int = 1) -> int:
    a = cfg["analyze"]
    flow = _flow(cfg["eval"])
    tasks = [t for t in _registry(cfg) if t.split == a["split"]]
    ck = _load_checkpoint(cfg)
    model = ck.model
    out = _out_dir(cfg)
    sizes = [int(s) for s in a["prompt_sizes"]]
    if any(s > model.L_max for s in sizes):
        raise ConfigError(f"prompt sizes {sizes} exceed L_max={model.L_max}")
    if not tasks:
        log.warning("no %s tasks; nothing to analyze", a["split"])
        return EXIT_OK
    root = cfg["seed"]
    baselines = {t.task_id: task_baselines(t, int(cfg["eval"]["baseline_episodes"]), root) for t in tasks}
    cells = []
    for group in _lockstep(tasks):
        cells += demo_sweep(model, group, sizes, [root * 1000 + int(s) for s in a["seeds"]],
                            int(a["episodes"]), baselines, flow)
    write_sweep_csv(out / "sweep.csv", cells)
    for size, v in sweep_iqm_by_size(cells).items():
        print(f"prompt {size}: IQM normalized {v:.4f}")
    target = a.get("contraction_task")
    task = next((t for t in tasks if t.task_id == target), None) if target else tasks[0]
    if task is None:
        raise ConfigError(f"contraction_task {target!r} not in the {a['split']} split")
    o_q = env.reset(task, nd.stream(root, "analyze/query")).obs
    rep = contraction_analysis(model, task, o_q, sorted(int(s) for s in a["contraction_sizes"]),
                               int(a["n_samples"]), nd.stream(root, "analyze/samples"),
                               nd.stream(root, "analyze/prompt"), flow)
    write_contraction_csv(out / "contraction.csv", [rep])
    for s in rep.sizes:
        print(f"context {s}: entropy proxy {rep.entropy[s]:.4f} nats")
    if a.get("svg"):
        try:
            losses = _read_losses(out / "loss.csv")
            returns = None
            written = save_svg_plots(out, losses=losses, returns=returns, contraction=rep)
            print("plots:", ", ".join(p.name for p in written))
        except ImportError:
            log.warning("matplotlib not installed; skipping SVG plots")
    return EXIT_OK


def _read_losses(path: Path):
    if not path.exists():
        return None
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["loss"])) for r in rows]


# -- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowdpt", description=__doc__.split("\n")[0])
    p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", "-c", default="config.json", help="run config JSON (default config.json)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, dotted keys, JSON values (repeatable)")
        sp.add_argument("--seed", type=int, help="root seed; overrides the config's seed")
        sp.add_argument("--jobs", type=int, default=1, help="max worker processes (default 1)")

    sp = sub.add_parser("init", help="write a default config and task registry")
    sp.add_argument("--config", "-c", default="config.json", help="config path to create")
    sp.add_argument("--kind", default="goal_bandit", choices=env.KINDS, help="task family for the registry")
    sp.add_argument("--n-train", type=int, default=64, help="training tasks (default 64)")
    sp.add_argument("--n-test", type=int, default=16, help="held-out tasks (default 16)")
    sp.add_argument("--registry-seed", type=int, default=0, help="seed for drawing task parameters")
    sp.add_argument("--force", action="store_true", help="overwrite an existing config")

    common(sub.add_parser("collect", help="roll noise-distilled demonstrations into shards"))
    sp = sub.add_parser("train", help="train a checkpoint on the collected shards")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    sp = sub.add_parser("eval", help="score a checkpoint online or offline")
    common(sp)
    sp.add_argument("--mode", choices=("online", "offline"), help="inference protocol (default from config)")
    sp.add_argument("--prompt-size", type=int, metavar="K", help="demonstrator prompt length for offline mode")
    common(sub.add_parser("analyze", help="demonstration sweep and posterior-contraction report"))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "init":
            return cmd_init(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.set, args.seed)
        if args.command == "collect":
            return cmd_collect(cfg, args.jobs)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.mode, args.prompt_size, args.jobs)
        return cmd_analyze(cfg, args.jobs)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:
        log.exception("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
