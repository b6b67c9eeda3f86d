"""Training, continual fine-tuning and evaluation loops."""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .cmoe import ActivationHistogram
from .config import Config, dump_config
from .core import GradTape, backward, softmax
from .data.manifest import SampleRecord, TaskManifest, load_manifest
from .data.sampler import ReplaySampler, WeightedSampler
from .encoder import concat_bundles
from .errors import ConfigError, NumericError, UndefinedMetricError
from .metrics import image_metrics, pixel_metrics
from .model import UniMMAD, is_continual_param
from .objectives import LossBreakdown, coefficient_of_variation, total_loss
from .optim import Adam
from .priors import load_priors

log = logging.getLogger(__name__)

METRIC_KEYS = ("AUC_I", "AP_I", "MF1_I", "AUC_P", "MF1_P", "AUPRO")
LOSS_COLUMNS = ("step", "epoch", "l_dec", "l_moe", "total")


def load_manifests(paths: Sequence) -> list[TaskManifest]:
    return [load_manifest(p) for p in paths]


class SampleStore:
    """Loads sample tensors and their priors, memoizing both."""

    def __init__(self, model: UniMMAD, manifests: Sequence[TaskManifest], priors_dir: str = ""):
        self.model = model
        self.by_task = {m.task_id: m for m in manifests}
        self.priors_dir = priors_dir
        self._bundles: dict = {}
        self._priors: dict = {}

    def bundle(self, rec: SampleRecord) -> dict:
        key = (rec.task_id, rec.sample_id)
        if key not in self._bundles:
            self._bundles[key] = self.by_task[rec.task_id].load_sample(rec)
        return self._bundles[key]

    def priors(self, rec: SampleRecord) -> dict:
        key = (rec.task_id, rec.sample_id)
        if key not in self._priors:
            if self.priors_dir:
                names = self.by_task[rec.task_id].modality_names
                self._priors[key] = load_priors(Path(self.priors_dir) / rec.task_id, rec.sample_id,
                                                self.model.cfg, names)
            else:
                self._priors[key] = self.model.priors(self.bundle(rec))
        return self._priors[key]

    def batch(self, records: Sequence[SampleRecord]):
        bundle = concat_bundles([self.bundle(r) for r in records])
        priors = {m: [np.concatenate([self.priors(r)[m][l] for r in records]) for l in range(3)] for m in bundle}
        return bundle, priors


def first_non_finite(named) -> str | None:
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


class Trainer:
    """Runs optimization steps on ``model`` with batches from ``sampler``.

    Only the parameters in ``trainable`` receive updates; the rest are
    excluded from differentiation and stay bitwise unchanged.
    """

    def __init__(self, model: UniMMAD, opt: Adam, sampler, store: SampleStore, out, trainable=None,
                 epoch: int = 0, step: int = 0):
        self.model, self.opt, self.sampler, self.store = model, opt, sampler, store
        self.cfg = model.cfg
        self.out = Path(out)
        self.trainable = list(model.params) if trainable is None else [k for k in model.params if k in set(trainable)]
        for k, p in model.params.items():
            p.requires_grad = k in set(self.trainable)
        self.epoch, self.step = epoch, step
        self.histogram = ActivationHistogram()

    @property
    def steps_per_epoch(self) -> int:
        n = sum(len(m.split("train")) for m in self.store.by_task.values() if m.task_id in self._task_ids())
        return max(1, math.ceil(n / self.cfg.batch_size))

    def _task_ids(self):
        s = self.sampler.new if isinstance(self.sampler, ReplaySampler) else self.sampler
        return {k[0] for k in s.keys}

    def train_step(self, records: Sequence[SampleRecord], epoch: int, total_epochs: int) -> LossBreakdown:
        cfg = self.cfg
        bundle, priors = self.store.batch(records)
        with GradTape() as tape:
            out = self.model.forward(bundle, priors)
            lb = total_loss(out.maps, out.logits(), epoch, total_epochs, cfg.gamma, cfg.moe_loss)
        if not math.isfinite(lb.total):
            named = [(f"param.{k}", p.data) for k, p in self.model.params.items()]
            named += [(f"input.{m}", x) for m, x in bundle.items()]
            named += [(f"prior.{m}.l{l + 1}", priors[m][l]) for m in priors for l in range(3)]
            named += [(f"general.l{l + 1}", g.data) for l, g in enumerate(out.general)]
            named += [(f"decoded.{m}.l{l + 1}", p.data) for m, ps in out.decoded.items() for l, p in enumerate(ps)]
            named += [(f"map.{m}.l{l + 1}", a.data) for (m, l), a in out.maps.items()]
            named += [(f"logits.{m}.l{l + 1}", d.logits.data) for (m, l), d in out.decisions.items()]
            named += [("loss.l_dec", np.array(lb.l_dec)), ("loss.l_moe", np.array(lb.l_moe))]
            raise NumericError(f"non-finite loss at step {self.step}; first non-finite tensor: {first_non_finite(named)}")
        grads = backward(lb.loss, tape)
        bad = first_non_finite((f"grad.{k}", grads[self.model.params[k]]) for k in self.trainable)
        if bad is not None:
            raise NumericError(f"non-finite gradient at step {self.step}; first non-finite tensor: {bad}")
        self.opt.step(grads, self.trainable)
        for (m, l), d in sorted(out.decisions.items()):
            for rec, idx in zip(records, d.indices):
                self.histogram.add(rec.task_id, idx)
        return lb

    def run(self, epochs: int) -> Path:
        """Train ``epochs`` more epochs; checkpoint after each."""
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(dump_config(self.cfg))
        loss_path = self.out / "loss.csv"
        new_log = self.step == 0 or not loss_path.exists()
        ckpt = self.out / "checkpoint"
        with open(loss_path, "w" if new_log else "a", newline="") as fh:
            w = csv.writer(fh)
            if new_log:
                w.writerow(LOSS_COLUMNS)
            total = self.epoch + epochs
            for e in range(self.epoch, total):
                for _ in range(self.steps_per_epoch):
                    records = self.sampler.batch(self.step, self.cfg.batch_size)
                    lb = self.train_step(records, e, total)
                    w.writerow([self.step, e, repr(lb.l_dec), repr(lb.l_moe), repr(lb.total)])
                    self.step += 1
                fh.flush()
                log.info("epoch %d/%d loss %.5f", e + 1, total, lb.total)
                self.epoch = e + 1
                save_checkpoint(ckpt, self.model, self.opt, self.epoch, self.step)
        self.histogram.write_csv(self.out / "activations.csv", self.cfg.n_leaders)
        return ckpt


def train(cfg: Config, manifests: Sequence[TaskManifest] | None = None) -> Path:
    if manifests is None:
        if not cfg.data:
            raise ConfigError("no training data configured (set 'data')")
        manifests = load_manifests(cfg.data)
    model = UniMMAD(cfg)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sampler = WeightedSampler(manifests, cfg.seed)
    trainer = Trainer(model, opt, sampler, SampleStore(model, manifests, cfg.priors_dir), cfg.out)
    return trainer.run(cfg.epochs)


def resume(checkpoint, manifests: Sequence[TaskManifest], cfg: Config | None = None) -> Path:
    """Continue an interrupted run up to its configured epoch count."""
    model, opt, index = load_checkpoint(checkpoint, cfg)
    cfg = model.cfg
    sampler = WeightedSampler(manifests, cfg.seed)
    trainer = Trainer(model, opt, sampler, SampleStore(model, manifests, cfg.priors_dir), cfg.out,
                      epoch=index["epoch"], step=index["step"])
    return trainer.run(max(0, cfg.epochs - index["epoch"]))


def trainable_ratio(model: UniMMAD) -> tuple[int, int, float]:
    total = model.params.count()
    trainable = sum(p.data.size for k, p in model.params.items() if is_continual_param(k))
    return trainable, total, trainable / total


def continue_train(checkpoint, new: Sequence[TaskManifest], previous: Sequence[TaskManifest], cfg: Config,
                   replay_frac: float | None = None, epochs: int | None = None) -> tuple[Path, dict]:
    """Fine-tune leaders, routers and aggregation on ``new`` with replay.

    Returns (checkpoint path, ratio report).
    """
    replay_frac = cfg.replay_frac if replay_frac is None else replay_frac
    model, opt, index = load_checkpoint(checkpoint, cfg)
    n_train, n_total, ratio = trainable_ratio(model)
    report = {"trainable": n_train, "total": n_total, "ratio": ratio}
    if ratio >= 0.10:
        log.warning("continual trainable ratio %.4f is not below 0.10", ratio)
        report["warning"] = "trainable ratio >= 0.10"
    new_sampler = WeightedSampler(new, cfg.seed)
    prev_sampler = WeightedSampler(previous, cfg.seed) if previous and replay_frac > 0 else None
    sampler = ReplaySampler(new_sampler, prev_sampler, replay_frac, cfg.seed)
    store = SampleStore(model, list(new) + list(previous), cfg.priors_dir)
    trainable = [k for k in model.params if is_continual_param(k)]
    trainer = Trainer(model, opt, sampler, store, cfg.out, trainable)
    out = trainer.run(cfg.epochs if epochs is None else epochs)
    Path(cfg.out, "continual.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return out, report


def score_task(model: UniMMAD, store: SampleStore, manifest: TaskManifest, batch: int = 10, oracle: bool = False):
    """S_AL maps, S_AD scores, labels and masks for a task's test split."""
    records = manifest.split("test")
    maps, scores = [], []
    for i in range(0, len(records), batch):
        chunk = records[i:i + batch]
        bundle, priors = store.batch(chunk)
        s_al, s_ad = model.infer(bundle, priors, oracle=oracle)
        maps.extend(s_al[:, 0])
        scores.extend(np.atleast_1d(s_ad).tolist())
    labels = [r.label for r in records]
    masks = [manifest.load_mask(r) for r in records]
    return records, np.stack(maps), np.array(scores), np.array(labels), np.stack(masks)


def _metrics(fn, *args) -> dict:
    try:
        return fn(*args)
    except UndefinedMetricError as exc:
        return {"error": str(exc)}


def evaluate(model: UniMMAD, manifests: Sequence[TaskManifest], out=None, cache: bool = True,
             oracle: bool = False, priors_dir: str = "", fpr_limit: float | None = None) -> dict:
    """Score every test sample of every task and compute the metric report."""
    fpr_limit = model.cfg.aupro_limit if fpr_limit is None else fpr_limit
    model.eval(cache=cache)
    store = SampleStore(model, manifests, priors_dir)
    tasks = {}
    for m in manifests:
        records, maps, scores, labels, masks = score_task(model, store, m, oracle=oracle)
        entry = {
            "n_test": len(records),
            "image": _metrics(image_metrics, scores, labels),
            "pixel": _metrics(pixel_metrics, list(maps), list(masks), fpr_limit),
            "scores": {r.sample_id: float(s) for r, s in zip(records, scores)},
        }
        tasks[m.task_id] = entry
    mean = {}
    for key in METRIC_KEYS:
        vals = [t[g][key] for t in tasks.values() for g in ("image", "pixel") if key in t[g]]
        mean[key] = float(np.mean(vals)) if vals else None
    report = {"tasks": tasks, "mean": mean, "cache": cache, "aupro_fpr_limit": fpr_limit}
    model.train()
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def expert_load_cv(model: UniMMAD, manifests: Sequence[TaskManifest], split: str = "train", batch: int = 10) -> float:
    """Mean over (modality, level) of the CV of leader load, the load being
    the softmax of the gate logits averaged over every sample of ``split``."""
    store = SampleStore(model, manifests, model.cfg.priors_dir)
    records = [r for m in manifests for r in m.split(split)]
    sums: dict = {}
    for i in range(0, len(records), batch):
        bundle, priors = store.batch(records[i:i + batch])
        out = model.forward(bundle, priors)
        for key, d in out.decisions.items():
            probs = softmax(d.logits.data.astype(np.float64), axis=1).data.sum(axis=0)
            sums[key] = sums.get(key, 0) + probs
    cvs = [float(coefficient_of_variation(v / len(records)).data) for _, v in sorted(sums.items())]
    return float(np.mean(cvs))
