"""``promptts`` command line: synth, train, forecast, classify, eval."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as config_mod
from . import numerics as nx
from .episodes import builders as B
from .episodes.curriculum import ABLATIONS, EpisodeSampler
from .episodes.pool import generate_pool, read_pool, write_pool
from .infer import InferenceConfig, classify, forecast, run_episode
from .metrics import mase, seasonal_naive, win_rate_and_skill, wql, write_leaderboard
from .model import ModelConfig, build_model, with_tokens
from .numerics import Rng
from .preprocess import denormalize
from .prompt import Covariate, Episode, read_episodes, write_episodes
from .train import LOG_FIELDS, PHASES, StepRecord, Trainer, train_curriculum

log = logging.getLogger("promptts")

ABLATION_ALIASES = {"no-examples": "noexmp", "no-tokens": "notoks", "no-meta": "nometa"}


def _setup(args) -> config_mod.Config:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = config_mod.load(args.config, overrides)
    nx.set_mode(cfg.precision)
    torch.set_num_threads(max(1, int(os.environ.get("PROMPTTS_THREADS", "1"))))
    msg = f"config_hash={cfg.hash} active={cfg.active} seed={cfg.seed} precision={cfg.precision}"
    print(msg)
    log.info(msg)
    return cfg


def _ablation(args) -> str | None:
    a = getattr(args, "ablation", None)
    for flag, name in ABLATION_ALIASES.items():
        if getattr(args, flag.replace("-", "_"), False):
            if a not in (None, name):
                raise SystemExit(f"conflicting ablation flags: {a} and {name}")
            a = name
    return a


def _model_cfg(cfg: config_mod.Config, ablation: str | None) -> ModelConfig:
    return with_tokens(cfg.model, False) if ablation == "notoks" else cfg.model


def _pool(cfg: config_mod.Config, root: Rng, path: str | None = None):
    if path and os.path.exists(path):
        return read_pool(path)
    return generate_pool(root.child("pool"), cfg.pool_size, cfg.series_length)


def _write_json(path, obj) -> None:
    if path in (None, "-"):
        json.dump(obj, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> dict:
    cfg = _setup(args)
    root = Rng(cfg.seed)
    out = args.out or "synth_out"
    os.makedirs(out, exist_ok=True)
    pool = _pool(cfg, root)
    pool_path = os.path.join(out, "pool.jsonl")
    write_pool(pool_path, pool)
    ablation = _ablation(args)
    phases = [args.phase] if args.phase else list(PHASES)
    files = {}
    for ph in phases:
        sampler = EpisodeSampler(pool, ph, cfg.episodes, ablation=ablation)
        rng = root.child(f"synth/{ph}")
        eps = [sampler.sample(rng.child(i)) for i in range(args.n_episodes)]
        if args.k_examples is not None:
            # caps supports of forecasting episodes; other tasks need their full support
            eps = [Episode(e.examples[: args.k_examples], e.query, e.meta)
                   if e.task in B.FORECAST_TASKS else e for e in eps]
        p = os.path.join(out, f"episodes_{ph}.jsonl")
        for e in eps:
            e.meta["config_hash"] = cfg.hash
        write_episodes(p, eps)
        files[ph] = p
    manifest = {"config_hash": cfg.hash, "pool": pool_path, "episodes": files, "ablation": ablation,
                "sources": {k: len(v) for k, v in sorted(pool.systems.items())}}
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return manifest


# ------------------------------------------------------------------ train


def _build_trainer(cfg: config_mod.Config, mcfg: ModelConfig, root: Rng, log_path: str) -> Trainer:
    model = build_model(mcfg, seed=int(root.child("init").integers(0, 2**31 - 1)))
    return Trainer(model, cfg.train, root.child("train"), log_path=log_path)


def cmd_train(args) -> dict:
    cfg = _setup(args)
    root = Rng(cfg.seed)
    ablation = _ablation(args)
    out = args.out or "train_out"
    os.makedirs(out, exist_ok=True)
    pool = _pool(cfg, root, args.pool)
    mcfg = _model_cfg(cfg, ablation)
    log_path = os.path.join(out, "train_log.csv")
    if os.path.exists(log_path) and not (args.init or args.resume):
        os.remove(log_path)
    if os.path.exists(log_path) and args.resume:
        _truncate_log(log_path, args.resume)
    tr = _build_trainer(cfg, mcfg, root, log_path)
    phases = [args.phase] if args.phase else list(PHASES)
    resume = None
    if args.resume:
        man = tr.restore(args.resume, cfg.hash)
        resume = (man["extra"]["phase"], int(man["extra"]["phase_step"]))
        if resume[0] not in phases:
            raise SystemExit(f"checkpoint phase {resume[0]} is not among {phases}")
        tr.log = _read_log(log_path)
    elif args.init:
        ckpt.load(args.init, tr.model)
    elif args.phase and args.phase != "A":
        prev = os.path.join(out, f"phase_{PHASES[PHASES.index(args.phase) - 1]}")
        if os.path.exists(prev + ".json"):
            ckpt.load(prev, tr.model)
    samplers = {ph: EpisodeSampler(pool, ph, cfg.episodes, ablation=ablation) for ph in phases}
    extra = {"model": dataclasses.asdict(mcfg), "ablation": ablation}
    paths = train_curriculum(tr, samplers, out, cfg.hash, phases, extra=extra, resume=resume,
                             save_every=args.save_every)
    losses = [r.loss for r in tr.log]
    summary = {"config_hash": cfg.hash, "checkpoints": paths, "log": log_path,
               "final_loss": losses[-1] if losses else None, "steps": len(losses)}
    _write_json(os.path.join(out, "train_summary.json"), summary)
    return summary


def _read_log(path: str) -> list:
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [StepRecord(int(r["step"]), r["phase"], int(r["phase_step"]), r["task_mix"], float(r["loss"]),
                           float(r["lr"]), float(r["grad_norm"]), bool(int(r["skipped"])))
                for r in csv.DictReader(fh)]


def _truncate_log(path: str, ckpt_path: str) -> None:
    """Drop log rows past the resume point so the log matches an unbroken run."""
    with open(ckpt_path + ".json", encoding="utf-8") as fh:
        ex = json.load(fh)["extra"]
    order = {p: i for i, p in enumerate(PHASES)}
    keep = [r for r in _read_log(path)
            if (order[r.phase], r.phase_step) < (order[ex["phase"]], int(ex["phase_step"]))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in keep:
            w.writerow(r.row())


def load_model(path: str):
    """Rebuild a model from a checkpoint written by ``train``."""
    with open(path + ".json", encoding="utf-8") as fh:
        man = json.load(fh)
    m = dict(man["extra"].get("model") or {})
    if "quantiles" in m:
        m["quantiles"] = tuple(m["quantiles"])
    mcfg = ModelConfig(**m)
    model = build_model(mcfg, 0, dtype=torch.float64 if man["dtype"] == "float64" else torch.float32)
    ckpt.load(path, model)
    model.eval()
    return model, man


# ------------------------------------------------------- forecast / classify


def cmd_forecast(args) -> dict:
    cfg = _setup(args)
    model, man = load_model(args.checkpoint)
    with open(args.input, encoding="utf-8") as fh:
        req = json.load(fh)
    covs = [Covariate(np.asarray(c["values"], dtype=np.float64), known=bool(c.get("known", False)))
            for c in req.get("covariates", [])]
    k = args.k_examples if args.k_examples is not None else InferenceConfig().k_examples
    fc = forecast(model, req["target"], covs, int(req["horizon"]), InferenceConfig(k_examples=k),
                  rng=Rng(cfg.seed).child("infer"))
    res = dict(fc.to_json(), median=fc.median().tolist(), config_hash=cfg.hash,
               checkpoint_hash=man["config_hash"], k_examples=k)
    _write_json(args.out, res)
    return res


def cmd_classify(args) -> dict:
    cfg = _setup(args)
    model, man = load_model(args.checkpoint)
    with open(args.input, encoding="utf-8") as fh:
        req = json.load(fh)
    supports = [(s["series"], s["label"]) for s in req["supports"]]
    pred = classify(model, req["query"], supports, rng=Rng(cfg.seed).child("infer"))
    res = {"label": pred.label, "score": pred.score, "codes": pred.codes, "config_hash": cfg.hash,
           "checkpoint_hash": man["config_hash"]}
    _write_json(args.out, res)
    return res


# ------------------------------------------------------------------- eval


def _eval_episodes(cfg, root: Rng, n: int, k: int) -> list:
    pool = generate_pool(root.child("eval/pool"), max(4, cfg.pool_size // 4), cfg.series_length)
    rng = root.child("eval/episodes")
    eps, i = [], 0
    while len(eps) < n:
        r = rng.child(i)
        i += 1
        try:
            eps.append(B.build_forecast(pool.sample(r), r, k, cfg.episodes))
        except B.InsufficientLength:
            continue
    return eps


def cmd_eval(args) -> dict:
    cfg = _setup(args)
    root = Rng(cfg.seed)
    model, man = load_model(args.checkpoint)
    k = args.k_examples if args.k_examples is not None else 4
    eps = list(read_episodes(args.episodes)) if args.episodes else _eval_episodes(cfg, root, args.n_episodes, k)
    eps = [e for e in eps if e.answer is not None and e.task in B.FORECAST_TASKS]
    if args.k_examples == 0:
        eps = [B.strip_examples(e) for e in eps]
    out = args.out or "eval_out"
    os.makedirs(out, exist_ok=True)
    levels = model.cfg.quantiles
    table = {"model": {}, "seasonal_naive": {}}
    rows, per_ep = [], []
    for j, ep in enumerate(eps):
        task = f"{ep.task}/H{ep.horizon}/{j:04d}"
        qn, stats, _ = run_episode(model, ep)
        q = np.sort(np.stack([denormalize(qn[:, d], st) for d, st in enumerate(stats)], axis=1), axis=0)
        y = ep.answer
        hist = np.stack(ep.query.targets)
        med = q[int(np.argmin(np.abs(np.asarray(levels) - 0.5)))]
        sn = np.stack([seasonal_naive(h, ep.horizon, args.season) for h in hist])
        snq = np.broadcast_to(sn, (len(levels),) + sn.shape)
        scores = {
            "model": {"MASE": mase(med, y, hist, args.season), "WQL": wql(q, y, levels)},
            "seasonal_naive": {"MASE": mase(sn, y, hist, args.season), "WQL": wql(snq, y, levels)},
        }
        for name, sc in scores.items():
            table[name][task] = sc["WQL"]
            for metric, v in sc.items():
                rows.append((name, task, metric, v))
        per_ep.append((task, scores["model"]["MASE"], scores["model"]["WQL"],
                       scores["seasonal_naive"]["MASE"], scores["seasonal_naive"]["WQL"]))
    rep = win_rate_and_skill(table, "seasonal_naive")
    for name in table:
        rows.append((name, "ALL", "win_rate_WQL", rep.win_rate[name]))
        rows.append((name, "ALL", "skill_WQL", rep.skill[name]))
    lb = os.path.join(out, "leaderboard.csv")
    write_leaderboard(lb, rows, cfg.hash)
    plot = os.path.join(out, "per_task_scores.csv")
    with open(plot, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "model_MASE", "model_WQL", "snaive_MASE", "snaive_WQL"])
        for r in per_ep:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    if args.train_log and os.path.exists(args.train_log):
        with open(args.train_log, encoding="utf-8") as fh, \
                open(os.path.join(out, "loss_curve.csv"), "w", newline="", encoding="utf-8") as gh:
            rd = csv.DictReader(fh)
            w = csv.writer(gh)
            w.writerow(["step", "phase", "loss"])
            for r in rd:
                w.writerow([r["step"], r["phase"], r["loss"]])
    res = {"config_hash": cfg.hash, "leaderboard": lb, "per_task": plot, "n_tasks": len(per_ep),
           "win_rate": rep.win_rate, "skill": rep.skill}
    _write_json(os.path.join(out, "eval_summary.json"), res)
    return res


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptts", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file (defaults to the built-in one)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out")
        sp.add_argument("--k-examples", type=int, choices=range(0, 5), metavar="{0..4}")
        return sp

    def ablations(sp):
        sp.add_argument("--ablation", choices=ABLATIONS)
        for flag in ABLATION_ALIASES:
            sp.add_argument(f"--{flag}", action="store_true")

    s = common(sub.add_parser("synth", help="write a series pool and episode files"))
    ablations(s)
    s.add_argument("--phase", choices=PHASES)
    s.add_argument("--n-episodes", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run curriculum phases")
    common(t)
    ablations(t)
    t.add_argument("--phase", choices=PHASES)
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--pool", help="pool file from synth (generated when absent)")
    t.add_argument("--resume", help="continue from a 'last' checkpoint (weights, moments, step)")
    t.add_argument("--save-every", type=int, default=0, help="rewrite OUT/last every N steps")
    t.set_defaults(func=cmd_train)

    f = common(sub.add_parser("forecast", help="forecast a JSON request"))
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--input", required=True)
    f.set_defaults(func=cmd_forecast)

    c = common(sub.add_parser("classify", help="classify a JSON request"))
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--input", required=True)
    c.set_defaults(func=cmd_classify)

    e = common(sub.add_parser("eval", help="score forecasts and write a leaderboard"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", help="episode JSON-lines (synthetic hold-out when absent)")
    e.add_argument("--n-episodes", type=int, default=32)
    e.add_argument("--season", type=int, default=1)
    e.add_argument("--train-log")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
