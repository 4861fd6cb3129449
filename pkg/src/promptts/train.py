"""Episodic meta-training loop over the curriculum phases."""

from __future__ import annotations

import collections
import csv
import json
import math
import os
from dataclasses import dataclass, field

import torch

from . import checkpoint as ckpt
from . import numerics as nx
from .episodes.curriculum import EpisodeSampler
from .model import PromptModel, collate, prepare
from .numerics import Rng
from .objective import AdamW, TrainConfig, batch_pinball, clip_grad_norm, lr_schedule

PHASES = ("A", "B", "C", "D")
LOG_FIELDS = ("step", "phase", "phase_step", "task_mix", "loss", "lr", "grad_norm", "skipped")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class StepRecord:
    step: int
    phase: str
    phase_step: int
    task_mix: str
    loss: float
    lr: float
    grad_norm: float
    skipped: bool

    def row(self) -> dict:
        return {
            "step": self.step, "phase": self.phase, "phase_step": self.phase_step,
            "task_mix": self.task_mix, "loss": repr(self.loss), "lr": repr(self.lr),
            "grad_norm": repr(self.grad_norm), "skipped": int(self.skipped),
        }


@dataclass
class Trainer:
    """Holds the model, optimizer and log; one ``Trainer`` spans all phases.

    Episodes for step ``s`` and slot ``i`` come from ``rng.child(f"{phase}/{s}/{i}")``
    so a resumed run sees exactly the batches an uninterrupted one would.
    """

    model: PromptModel
    tcfg: TrainConfig
    rng: Rng
    opt: AdamW = None
    log: list = field(default_factory=list)
    max_bad_steps: int = 10
    log_path: str | None = None

    def __post_init__(self):
        if self.opt is None:
            self.opt = AdamW(list(self.model.parameters()), lr=1e-4, betas=self.tcfg.betas,
                             eps=self.tcfg.eps, weight_decay=self.tcfg.weight_decay)
        self._bad = 0

    def episodes_for(self, sampler: EpisodeSampler, phase: str, step: int) -> list:
        return [sampler.sample(self.rng.child(f"{phase}/{step}/{i}")) for i in range(self.tcfg.batch_size)]

    def loss_on(self, episodes: list) -> torch.Tensor:
        cfg = self.model.cfg
        items = [prepare(ep, cfg) for ep in episodes]
        batch = collate(items, cfg, self.model.dtype)
        out = self.model(batch)
        return batch_pinball(out.quantiles, batch.y, batch.y_mask, cfg.quantiles).mean()

    def step(self, sampler: EpisodeSampler, phase: str, phase_step: int, total: int,
             base_lr: float) -> StepRecord:
        episodes = self.episodes_for(sampler, phase, phase_step)
        mix = collections.Counter(ep.meta.get("curriculum_family", ep.task) for ep in episodes)
        lr = lr_schedule(phase_step, total, base_lr, self.tcfg.warmup_frac)
        self.opt.zero_grad()
        loss = self.loss_on(episodes)
        lv = float(loss.detach())
        gn = float("nan")
        if math.isfinite(lv):
            loss.backward()
            gn = clip_grad_norm(self.opt.params, self.tcfg.clip_norm)
            applied = self.opt.step(lr)
        else:
            applied = False
        self._bad = 0 if applied else self._bad + 1
        rec = StepRecord(
            step=len(self.log), phase=phase, phase_step=phase_step,
            task_mix=";".join(f"{k}:{v}" for k, v in sorted(mix.items())),
            loss=lv, lr=lr, grad_norm=gn, skipped=not applied,
        )
        self.log.append(rec)
        if self.log_path:
            self._append_log(rec)
        if self._bad >= self.max_bad_steps:
            raise NonFiniteLoss(f"{self._bad} consecutive non-finite steps ending at {phase}:{phase_step}")
        return rec

    def _append_log(self, rec: StepRecord) -> None:
        new = not os.path.exists(self.log_path)
        with open(self.log_path, "a", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new:
                w.writeheader()
            w.writerow(rec.row())

    def run_phase(self, sampler: EpisodeSampler, phase: str, steps: int | None = None,
                  base_lr: float | None = None, start: int = 0, stop: int | None = None,
                  callback=None) -> list:
        """Run steps ``start..stop`` of a phase whose schedule spans ``steps``."""
        steps = self.tcfg.phase_steps[phase] if steps is None else steps
        base_lr = self.tcfg.phase_lr[phase] if base_lr is None else base_lr
        out = []
        for s in range(start, steps if stop is None else min(stop, steps)):
            rec = self.step(sampler, phase, s, steps, base_lr)
            out.append(rec)
            if callback is not None:
                callback(rec)
        return out

    def dump_state(self, path: str, config_hash: str, extra: dict | None = None) -> None:
        info = dict(extra or {})
        info["log_tail"] = [r.row() for r in self.log[-self.max_bad_steps :]]
        ckpt.save(path, self.model, config_hash, info, optimizer=self.opt)

    def save(self, path: str, config_hash: str, phase: str, phase_step: int,
             extra: dict | None = None) -> None:
        info = {"phase": phase, "phase_step": phase_step, "rng_seed": self.rng.seed, "mode": nx.get_mode()}
        info.update(extra or {})
        ckpt.save(path, self.model, config_hash, info, optimizer=self.opt)

    def restore(self, path: str, config_hash: str | None = None) -> dict:
        return ckpt.load(path, self.model, self.opt, config_hash)


def train_curriculum(trainer: Trainer, samplers: dict, out_dir: str, config_hash: str,
                     phases=PHASES, callback=None, extra: dict | None = None,
                     resume: tuple | None = None, save_every: int = 0) -> dict:
    """Run phases in order; each starts from the previous phase's final weights.

    The last checkpoint of a phase is its selected one: no validation split is
    carried at desk scale. ``resume = (phase, phase_step)`` continues a run
    whose model and optimizer were restored from a ``last`` checkpoint, which
    is rewritten every ``save_every`` steps. Returns ``{phase: checkpoint path}``.
    """
    os.makedirs(out_dir, exist_ok=True)
    last = os.path.join(out_dir, "last")
    paths = {}
    phases = list(phases)
    first = 0
    if resume is not None:
        first = phases.index(resume[0])
        for ph in phases[:first]:
            p = os.path.join(out_dir, f"phase_{ph}")
            if os.path.exists(p + ".json"):
                paths[ph] = p
    for i, ph in enumerate(phases[first:], first):
        start = resume[1] if resume is not None and i == first else 0
        steps = trainer.tcfg.phase_steps[ph]

        def hook(rec, ph=ph):
            if save_every and (rec.phase_step + 1) % save_every == 0:
                trainer.save(last, config_hash, ph, rec.phase_step + 1, extra)
            if callback is not None:
                callback(rec)

        try:
            trainer.run_phase(samplers[ph], ph, start=start, callback=hook)
        except NonFiniteLoss:
            trainer.dump_state(os.path.join(out_dir, f"abort_{ph}"), config_hash, {"phase": ph})
            raise
        p = os.path.join(out_dir, f"phase_{ph}")
        trainer.save(p, config_hash, ph, steps, extra)
        paths[ph] = p
        # fresh moments per phase; the schedule restarts too
        trainer.opt = AdamW(trainer.opt.params, lr=1e-4, betas=trainer.tcfg.betas,
                            eps=trainer.tcfg.eps, weight_decay=trainer.tcfg.weight_decay)
    with open(os.path.join(out_dir, "checkpoints.json"), "w", encoding="utf-8") as fh:
        json.dump({"config_hash": config_hash, "phases": paths}, fh, indent=1, sort_keys=True)
    return paths
