"""Command-line entry point: gen, pretrain, train, eval, sweep.

Exit codes: 0 success, 2 bad arguments, 3 infeasible dataset generation,
4 non-finite loss during training, 5 checkpoint/vocabulary mismatch.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
import time
from pathlib import Path

EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NONFINITE, EXIT_VOCAB = 2, 3, 4, 5

TRAIN_FLAGS = {
    # flag -> (TrainConfig field, type)
    "G": ("G", int), "eps": ("eps", float), "beta": ("beta", float), "gamma": ("gamma", float),
    "lr": ("lr", float), "steps": ("steps", int), "temperature": ("temperature", float),
    "top_p": ("top_p", float), "max_len": ("max_len", int), "seed": ("seed", int),
    "reward_mode": ("reward_mode", str), "mask_mode": ("mask_mode", str),
    "guidance_keep": ("guidance_keep_fraction", float), "batch_size": ("batch_size", int),
    "momentum": ("momentum", float), "inner_epochs": ("inner_epochs", int),
    "sft_steps": ("sft_steps", int), "sft_lr": ("sft_lr", float),
}


class UsageError(Exception):
    pass


def default_seed() -> int:
    env = os.environ.get("MOLOPT_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"MOLOPT_SEED must be an integer, got {env!r}") from exc


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("config file must hold a JSON object")
    return obj


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _kinds(text: str) -> list[str]:
    from .tasks import TaskKind
    names = [k.strip() for k in text.split(",") if k.strip()]
    if not names:
        raise UsageError("--kinds is empty")
    for k in names:
        try:
            kind = TaskKind.parse(k)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        from .patterns import group_library
        for g in kind.groups:
            if g not in group_library():
                raise UsageError(f"unknown group {g!r} in {k!r}")
    return names


def build_train_config(args, file_cfg: dict):
    """defaults < MOLOPT_SEED < config file < flags."""
    from .optim import TrainConfig
    values = {"seed": default_seed()}
    values.update({k: v for k, v in file_cfg.items() if k in TrainConfig.__dataclass_fields__})
    for flag, (name, _) in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            values[name] = val
    if getattr(args, "length_normalize_guidance", False):
        values["length_normalize_guidance"] = True
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from exc


# ------------------------------------------------------------------ gen

def cmd_gen(args) -> int:
    from .bench import DEFAULT_KINDS, Infeasible, gen_split, write_dataset
    cfg = _load_config(args.config)
    kinds = _kinds(args.kinds or ",".join(cfg.get("kinds", [])) or ",".join(DEFAULT_KINDS))
    seed = args.seed if args.seed is not None else cfg.get("seed", default_seed())
    n = args.n if args.n is not None else cfg.get("n", 200)
    n_eval = args.eval_n if args.eval_n is not None else cfg.get("eval_n", 0)
    if n < 1 or n_eval < 0:
        raise UsageError("--n must be >= 1 and --eval-n >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kw = dict(delta=args.delta if args.delta is not None else cfg.get("delta", 0.5),
              max_atoms=args.max_atoms if args.max_atoms is not None else cfg.get("max_atoms"),
              augment=args.augment if args.augment is not None else cfg.get("augment", 0.0))
    try:
        train, evals = gen_split(n, n_eval, kinds, seed, unseen_eval=args.unseen_eval, **kw)
    except Infeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    write_dataset(train, out / "train.jsonl")
    if n_eval > 0:
        write_dataset(evals, out / "eval.jsonl")
    print(f"wrote {len(train)} train and {n_eval} eval tasks to {out}")
    return 0


# ------------------------------------------------------------------ pretrain / train

def _load_tasks(path):
    from .bench import read_dataset
    tasks = read_dataset(_require_file(path, "dataset"))
    if not tasks:
        raise UsageError(f"dataset {path} is empty")
    return tasks


def _load_params(path):
    from .policy import VocabMismatch, load_checkpoint
    _require_file(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except VocabMismatch:
        raise
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from exc


def cmd_pretrain(args) -> int:
    from .optim import pretrain_base
    from .policy import init_params, save_checkpoint
    tasks = _load_tasks(args.train)
    seed = args.seed if args.seed is not None else default_seed()
    params = pretrain_base(tasks, init_params(seed), steps=args.steps, batch_size=args.batch_size,
                           lr=args.lr, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out)
    print(f"wrote base checkpoint {out}")
    return 0


def _eval_rows(step: int, report) -> dict:
    d = report.to_dict()
    return {"step": step, **{k: d[k] for k in ("n", "sr", "sim", "product", "validity",
                                               "mean_length", "unique_valid_per_query")}}


def run_training(variant: str, train_tasks, eval_tasks, cfg, init, out: Path,
                 eval_every: int = 0, eval_seed: int = 0):
    """Train, writing checkpoint.json, log.jsonl, eval.csv and config.json under ``out``."""
    from .bench import evaluate
    from .optim import NonFiniteLoss, train
    from .policy import DecodeConfig, save_checkpoint
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"variant": variant, **cfg.to_dict()},
                                                indent=2, sort_keys=True) + "\n")
    decode = DecodeConfig(cfg.temperature, cfg.top_p, cfg.max_len)
    last_good = {"params": init}
    eval_fh = open(out / "eval.csv", "w", newline="")
    writer = None
    log_fh = open(out / "log.jsonl", "w")

    def do_eval(step, params):
        nonlocal writer
        if not eval_tasks:
            return
        rep = evaluate(params, eval_tasks, 1, decode, seed=eval_seed).report
        row = _eval_rows(step, rep)
        if writer is None:
            writer = csv.DictWriter(eval_fh, fieldnames=list(row), lineterminator="\n")
            writer.writeheader()
        writer.writerow(row)
        eval_fh.flush()

    def on_step(step, params, log):
        last_good["params"] = params
        log_fh.write(log.to_json() + "\n")
        if eval_every and (step + 1) % eval_every == 0:
            do_eval(step + 1, params)

    try:
        do_eval(0, init)
        params, logs = train(variant, train_tasks, cfg, init, on_step=on_step)
        if not eval_every or (len(logs) % eval_every):
            do_eval(len(logs), params)
    except NonFiniteLoss:
        save_checkpoint(last_good["params"], out / "checkpoint.json")
        raise
    finally:
        log_fh.close()
        eval_fh.close()
    save_checkpoint(params, out / "checkpoint.json")
    return params, logs


def _init_params(args, train_tasks, seed: int):
    from .optim import pretrain_base
    from .policy import init_params
    if args.init:
        return _load_params(args.init)
    return pretrain_base(train_tasks, init_params(seed), steps=args.pretrain_steps, seed=seed)


def cmd_train(args) -> int:
    from .bench import corrupt
    file_cfg = _load_config(args.config)
    cfg = build_train_config(args, file_cfg)
    train_tasks = _load_tasks(args.train)
    if args.corruption:
        train_tasks = corrupt(train_tasks, args.corruption, cfg.seed)
    eval_tasks = _load_tasks(args.eval) if args.eval else []
    init = _init_params(args, train_tasks, cfg.seed)
    run_training(args.variant, train_tasks, eval_tasks, cfg, init, Path(args.out),
                 args.eval_every, cfg.seed)
    print(f"wrote {args.out}/checkpoint.json")
    return 0


# ------------------------------------------------------------------ eval

def cmd_eval(args) -> int:
    from .bench import evaluate
    from .policy import DecodeConfig
    from .reward import rows_to_csv, summary_json
    params = _load_params(args.checkpoint)
    tasks = _load_tasks(args.data)
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    seed = args.seed if args.seed is not None else default_seed()
    decode = DecodeConfig(args.temperature, args.top_p, args.max_len, args.greedy)
    res = evaluate(params, tasks, args.k, decode, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = res.rows()
    (out / "results.csv").write_text(rows_to_csv([r for r in rows if r["sample"] == 0]))
    (out / "summary.json").write_text(summary_json(res.report) + "\n")
    with open(out / "best_of_k.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "sr", "sim", "product", "validity", "unique_valid_per_query"])
        for j, rep in sorted(res.best_of.items()):
            w.writerow([j, rep.sr, rep.sim, rep.product, rep.validity, rep.unique_valid_per_query])
    if args.per_kind:
        with open(out / "per_kind.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "n", "sr", "sim", "product", "validity"])
            for name, rep in res.per_kind.items():
                w.writerow([name, rep.n, rep.sr, rep.sim, rep.product, rep.validity])
    print(summary_json(res.report))
    return 0


# ------------------------------------------------------------------ sweep

SWEEP_AXES = ("beta", "mask_mode", "corruption", "guidance_keep_fraction", "reward_mode",
              "length_normalize_guidance", "gamma", "variant")


def sweep_cells(spec: dict) -> list[dict]:
    """Grid cells from a sweep spec.

    ``mode: "axes"`` (default) varies one axis at a time around the base
    settings; ``mode: "product"`` takes the full Cartesian product.
    """
    grid = spec.get("grid") or {}
    if not isinstance(grid, dict) or not grid or any(not isinstance(v, list) or not v
                                                     for v in grid.values()):
        raise UsageError("sweep grid must map at least one axis to a non-empty list")
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise UsageError(f"unknown sweep axes: {sorted(unknown)}")
    mode = spec.get("mode", "axes")
    if mode == "product":
        names = sorted(grid)
        return [dict(zip(names, combo)) for combo in itertools.product(*(grid[n] for n in names))]
    if mode != "axes":
        raise UsageError(f"unknown sweep mode {mode!r}")
    cells = []
    for name in grid:
        for val in grid[name]:
            cells.append({name: val})
    return cells


LONG_COLUMNS = ("cell", "variant", "beta", "mask_mode", "corruption", "guidance_keep_fraction",
                "reward_mode", "length_normalize_guidance", "gamma", "status", "metric", "value")


def cmd_sweep(args) -> int:
    from .bench import corrupt
    from .optim import NonFiniteLoss, TrainConfig
    spec = _load_config(args.config)
    if not spec:
        raise UsageError("sweep needs a config file with a grid")
    cells = sweep_cells(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_tasks = _load_tasks(spec.get("train") or args.train)
    eval_path = spec.get("eval") or args.eval
    eval_tasks = _load_tasks(eval_path) if eval_path else []
    base = {"seed": default_seed(), **spec.get("base", {})}
    if args.seed is not None:
        base["seed"] = args.seed
    init_path = spec.get("init") or args.init
    rows = []
    init = _load_params(init_path) if init_path else None
    for n, cell in enumerate(cells):
        settings = {"variant": spec.get("variant", "repo"), "corruption": 0.0, **cell}
        cfg_vals = {**base, **{k: v for k, v in settings.items()
                               if k in TrainConfig.__dataclass_fields__}}
        status, metrics = "ok", {}
        cell_dir = out / f"cell_{n:03d}"
        t0 = time.time()
        try:
            cfg = TrainConfig(**cfg_vals)
            tasks = corrupt(train_tasks, float(settings["corruption"]), cfg.seed)
            start = init
            if start is None:
                from .optim import pretrain_base
                from .policy import init_params
                start = pretrain_base(train_tasks, init_params(cfg.seed),
                                      steps=int(spec.get("pretrain_steps", 1000)), seed=cfg.seed)
            params, logs = run_training(settings["variant"], tasks, eval_tasks, cfg, start, cell_dir,
                                        0, cfg.seed)
            metrics["final_mean_reward"] = logs[-1].mean_reward if logs else float("nan")
            if eval_tasks:
                with open(cell_dir / "eval.csv") as fh:
                    last = list(csv.DictReader(fh))[-1]
                for key in ("sr", "sim", "product", "validity", "mean_length"):
                    metrics[key] = float(last[key])
        except NonFiniteLoss as exc:
            status = f"failed: {exc}"
        except Exception as exc:  # a failing cell must not stop the sweep
            status = f"failed: {type(exc).__name__}: {exc}"
        if cell_dir.is_dir():
            (cell_dir / "timing.json").write_text(
                json.dumps({"seconds": round(time.time() - t0, 3)}) + "\n")
        params_cols = {k: settings.get(k, base.get(k, _default(k))) for k in LONG_COLUMNS[1:9]}
        if not metrics:
            metrics["final_mean_reward"] = float("nan")
        for key, val in metrics.items():
            rows.append({"cell": n, **params_cols, "status": status, "metric": key, "value": val})
        print(f"cell {n}: {cell} -> {status}")
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LONG_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {out / 'results.csv'}")
    return 0


def _default(name: str):
    from .optim import TrainConfig
    f = TrainConfig.__dataclass_fields__.get(name)
    return f.default if f is not None else ""


# ------------------------------------------------------------------ parser

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for flag, (_, typ) in TRAIN_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)
    p.add_argument("--length-normalize-guidance", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="molrepo", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate train/eval task datasets")
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--eval-n", type=int, default=None)
    g.add_argument("--kinds", default=None,
                   help="comma-separated task kinds (default: the twelve standard kinds)")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default="data")
    g.add_argument("--delta", type=float, default=None)
    g.add_argument("--max-atoms", type=int, default=None)
    g.add_argument("--augment", type=float, default=None)
    g.add_argument("--unseen-eval", action="store_true")
    g.add_argument("--config", default=None)
    g.set_defaults(func=cmd_gen)

    pt = sub.add_parser("pretrain", help="fit the format-only base policy")
    pt.add_argument("--train", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--steps", type=int, default=1000)
    pt.add_argument("--batch-size", type=int, default=16)
    pt.add_argument("--lr", type=float, default=0.1)
    pt.add_argument("--seed", type=int, default=None)
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--variant", required=True, choices=("sft", "grpo", "grpo-sft-init", "repo"))
    t.add_argument("--train", required=True)
    t.add_argument("--eval", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--init", default=None, help="starting checkpoint (default: pretrain a base)")
    t.add_argument("--pretrain-steps", type=int, default=1000)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--corruption", type=float, default=0.0)
    t.add_argument("--config", default=None)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--per-kind", action="store_true")
    e.add_argument("--greedy", action="store_true")
    e.add_argument("--temperature", type=float, default=0.75)
    e.add_argument("--top-p", type=float, default=0.85)
    e.add_argument("--max-len", type=int, default=160)
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run an ablation grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--train", default=None)
    s.add_argument("--eval", default=None)
    s.add_argument("--init", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    from .optim import NonFiniteLoss
    from .policy import VocabMismatch
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VocabMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VOCAB
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
