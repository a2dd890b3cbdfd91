"""Training loop: source pretraining, adaptation steps, evaluation and run reports."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import platform
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import affinity as aff
from .core import (ExperimentConfig, RunPaths, SourceBatch, TargetBatch, TrainStepLosses,
                   validate_config)
from .data import (DigitDataset, UnlabeledDigits, load_digits, preprocess, source_stream,
                   target_stream, task_geometry)
from .losses import adversarial_pair, grl_coefficient, msc_loss, supervised_ce, triplet_from_affinity
from .nets import DigitModel, load_checkpoint, reverse_gradient, save_checkpoint
from .similarity import pairwise_similarity

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
# classifier and discriminator learn 10x faster than the feature extractor
HEAD_LR_MULT = 10.0


class NonFiniteLossError(RuntimeError):
    pass


def lr_schedule(progress: float, lr0: float, alpha: float = 10.0, beta: float = 0.75) -> float:
    """Annealed rate ``lr0 / (1 + alpha * p) ** beta``."""
    return lr0 / (1.0 + alpha * progress) ** beta


@torch.no_grad()
def evaluate(model: DigitModel, dataset: DigitDataset, batch_size: int = 1000) -> float:
    """Top-1 accuracy of ``model`` on a labeled dataset."""
    if dataset.labels is None:
        raise ValueError("evaluation needs a labeled dataset")
    if len(dataset) == 0:
        return float("nan")
    preds = model.predict(dataset.images, batch_size)
    return float((preds == dataset.labels).double().mean())


def set_single_threaded(deterministic: bool = True) -> None:
    """The documented mode in which runs are bitwise reproducible."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(deterministic)


@dataclass
class RunReport:
    task: str
    method: str
    instance_loss: str
    pseudo_mode: str
    k: int
    mu: float
    seed: int
    config_fingerprint: str
    accuracy: list = field(default_factory=list)  # [iteration, accuracy] pairs
    final_accuracy: float = float("nan")
    best_accuracy: float = float("nan")
    losses: list = field(default_factory=list)  # metric rows
    manifest: str = ""
    wall_clock_s: float = 0.0
    status: str = "running"
    error: str = ""
    config: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def variant(self) -> str:
        """Row label used by comparative tables."""
        adv = float(self.config.get("lambda_adv", 1.0)) > 0
        ila = self.instance_loss != "none" and float(self.config.get("lambda_msc", 1.0)) > 0
        if not adv and not ila:
            return "source-only"
        base = self.method.upper() if adv else "no-adv"
        if not ila:
            return base
        tag = "ILA" if self.instance_loss == "msc" else "ILA-triplet"
        if self.pseudo_mode == "classifier":
            tag += "-clf"
        return f"{tag}+{base}"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        payload = json.loads(text)
        version = payload.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {version}")
        return cls(**payload)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunReport":
        return cls.from_json(Path(path).read_text())


class Trainer:
    """Owns the model, optimizers, batch streams and iteration counter.

    ``target`` is an image-only view; ``analysis_labels`` (optional) are
    consulted solely for logging pseudo-label precision and for affinity
    exports, never by the optimization path.
    """

    def __init__(self, cfg: ExperimentConfig, source: DigitDataset, target: UnlabeledDigits,
                 analysis_labels: Optional[torch.Tensor] = None, log_every: int = 10):
        self.cfg = validate_config(cfg)
        if source.labels is None:
            raise ValueError("source dataset must be labeled")
        if not isinstance(target, UnlabeledDigits):
            raise TypeError("target must be an UnlabeledDigits view")
        self.source = source
        self.target = target
        self.analysis_labels = analysis_labels
        self.log_every = log_every
        channels, side = source.images.shape[1], source.images.shape[-1]
        if target.images.shape[1:] != source.images.shape[1:]:
            raise ValueError("source and target images must share a shape after preprocessing")

        torch.manual_seed(self.cfg.seed)
        self.model = DigitModel(channels, side, self.cfg.num_classes, method=self.cfg.method,
                                seed=self.cfg.seed)
        opt_kw = dict(momentum=self.cfg.momentum, weight_decay=self.cfg.weight_decay)
        self.opt_gc = torch.optim.SGD([
            {"params": self.model.G.parameters(), "lr_mult": 1.0},
            {"params": self.model.C.parameters(), "lr_mult": HEAD_LR_MULT},
        ], lr=self.cfg.lr0, **opt_kw)
        self.opt_d = torch.optim.SGD([
            {"params": self.model.D.parameters(), "lr_mult": HEAD_LR_MULT},
        ], lr=self.cfg.lr0, **opt_kw)

        self.src_stream = source_stream(source.labels.numpy(), self.cfg.per_class, self.cfg.seed,
                                        self.cfg.num_classes)
        self.tgt_stream = target_stream(len(target), self.cfg.target_batch, self.cfg.seed + 1)
        self.iteration = 0
        self.history: list[dict[str, Any]] = []
        self.last_affinity: Optional[dict[str, Any]] = None

    # -- schedule -----------------------------------------------------------

    @property
    def progress(self) -> float:
        return min(1.0, self.iteration / self.cfg.total_iters)

    @property
    def adapting(self) -> bool:
        return self.iteration >= self.cfg.pretrain_iters

    def _set_lr(self) -> float:
        lr = lr_schedule(self.progress, self.cfg.lr0, self.cfg.lr_alpha, self.cfg.lr_beta)
        for opt in (self.opt_gc, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr * group["lr_mult"]
        return lr

    # -- batches ------------------------------------------------------------

    def next_batches(self) -> tuple[SourceBatch, TargetBatch, np.ndarray]:
        src_idx = torch.from_numpy(next(self.src_stream))
        tgt_idx = next(self.tgt_stream)
        src = SourceBatch(self.source.images[src_idx], self.source.labels[src_idx])
        tgt = TargetBatch(self.target.images[torch.from_numpy(tgt_idx)])
        return src, tgt, tgt_idx

    # -- one iteration ------------------------------------------------------

    def _instance_active(self) -> bool:
        cfg = self.cfg
        return self.adapting and cfg.instance_loss != "none" and cfg.lambda_msc > 0

    def _adversarial_active(self) -> bool:
        return self.cfg.lambda_adv > 0 and (self.adapting or self.cfg.adv_in_pretrain)

    def train_step(self, src: SourceBatch, tgt: TargetBatch) -> TrainStepLosses:
        cfg, model = self.cfg, self.model
        model.train()
        lr = self._set_lr()
        n_s = src.images.shape[0]
        y_s = src.labels

        features = model.G(torch.cat([src.images, tgt.images]))
        f_s, f_t = features[:n_s], features[n_s:]
        logits = model.C(features)
        l_sup = supervised_ce(logits[:n_s], y_s)
        total = l_sup

        use_adv = self._adversarial_active()
        coeff = grl_coefficient(self.progress)
        if cfg.method == "dann":
            d = model.D(reverse_gradient(features, coeff))
            l_adv, l_disc = adversarial_pair(d[:n_s], d[n_s:])
            if use_adv:
                total = total + cfg.lambda_adv * l_disc
        else:
            probs = F.softmax(logits, dim=1).detach()
            d = model.D(model.join(features, probs))
            l_adv, _ = adversarial_pair(d[:n_s], d[n_s:])
            if use_adv:
                total = total + cfg.lambda_adv * l_adv

        l_inst = torch.zeros(())
        self.last_affinity = None
        if self._instance_active():
            if cfg.pseudo_mode == "knn":
                a_filt, record, a_raw = aff.affinity_step(f_s, y_s, f_t, cfg)
            else:
                p_t = F.softmax(logits[n_s:].detach().double(), dim=1)
                a_filt, record, a_raw = aff.classifier_affinity_step(y_s, p_t, cfg)
            s = pairwise_similarity(f_s, f_t)
            if cfg.instance_loss == "msc":
                l_inst = msc_loss(s, a_filt)
            else:
                l_inst = triplet_from_affinity(s, a_filt, cfg.triplet_margin)
            total = total + cfg.lambda_msc * l_inst
            self.last_affinity = {"filtered": a_filt, "unfiltered": a_raw, "record": record,
                                  "source_labels": y_s.clone()}

        self.opt_gc.zero_grad(set_to_none=True)
        self.opt_d.zero_grad(set_to_none=True)
        if not torch.isfinite(total):
            raise NonFiniteLossError(f"non-finite generator objective at iteration {self.iteration}")
        total.backward()
        if cfg.method == "dann":
            self.opt_gc.step()
            if use_adv:
                self.opt_d.step()
        else:
            self.opt_gc.step()
            self.opt_d.zero_grad(set_to_none=True)
            if use_adv:
                d_det = model.D(model.join(features.detach(), probs))
                _, l_disc = adversarial_pair(d_det[:n_s], d_det[n_s:])
                l_disc.backward()
                self.opt_d.step()
            else:
                _, l_disc = adversarial_pair(d[:n_s].detach(), d[n_s:].detach())

        losses = TrainStepLosses(l_sup=l_sup.item(), l_adv=l_adv.item(), l_disc=l_disc.item(),
                                 l_instance=l_inst.item())
        if not losses.all_finite():
            raise NonFiniteLossError(f"non-finite loss at iteration {self.iteration}: {losses}")
        self._lr = lr
        self.iteration += 1
        return losses

    def step(self) -> TrainStepLosses:
        """Draw the next batches, run one iteration and record metrics."""
        src, tgt, tgt_idx = self.next_batches()
        try:
            losses = self.train_step(src, tgt)
        except NonFiniteLossError:
            self._postmortem = {"iteration": self.iteration, "source_images": src.images,
                                "source_labels": src.labels, "target_images": tgt.images,
                                "target_indices": tgt_idx}
            raise
        self._last_target_indices = tgt_idx
        if self.iteration % self.log_every == 0 or self.iteration == 1:
            self.history.append(self._metrics_row(losses, tgt_idx))
        return losses

    def _metrics_row(self, losses: TrainStepLosses, tgt_idx: np.ndarray) -> dict[str, Any]:
        row = {"iteration": self.iteration, **losses.as_dict(), "lr": self._lr,
               "kept_fraction": None, "pl_precision": None, "pl_precision_all": None}
        if self.last_affinity is not None:
            record = self.last_affinity["record"]
            row["kept_fraction"] = record.kept_fraction
            if self.analysis_labels is not None:
                y_true = self.analysis_labels[torch.from_numpy(tgt_idx)]
                row["pl_precision"] = _none_if_nan(record.precision(y_true))
                row["pl_precision_all"] = _none_if_nan(record.precision(y_true, kept_only=False))
        return row

    def pretrain_source(self) -> None:
        """Run the source-only warm-up until ``pretrain_iters`` iterations are done."""
        end = min(self.cfg.pretrain_iters, self.cfg.total_iters)
        while self.iteration < end:
            self.step()

    # -- persistence --------------------------------------------------------

    def state_extra(self) -> dict[str, Any]:
        return {
            "opt_gc": self.opt_gc.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "src_position": self.src_stream.position,
            "tgt_position": self.tgt_stream.position,
            "torch_rng": torch.get_rng_state(),
            "history": self.history,
        }

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.model, config=self.cfg.to_dict(), fingerprint=self.cfg.fingerprint(),
                        iteration=self.iteration, extra=self.state_extra())

    def load(self, path: Union[str, Path]) -> None:
        payload = load_checkpoint(path)
        if payload["config_fingerprint"] != self.cfg.fingerprint():
            raise ValueError("checkpoint was written for a different configuration")
        self.model.load_state_dict(payload["params"])
        extra = payload["extra"]
        self.iteration = payload["iteration"]
        if "opt_gc" in extra:
            self.opt_gc.load_state_dict(extra["opt_gc"])
            self.opt_d.load_state_dict(extra["opt_d"])
            self.src_stream = source_stream(self.source.labels.numpy(), self.cfg.per_class, self.cfg.seed,
                                            self.cfg.num_classes)
            self.tgt_stream = target_stream(len(self.target), self.cfg.target_batch, self.cfg.seed + 1)
            self.src_stream.advance(extra["src_position"])
            self.tgt_stream.advance(extra["tgt_position"])
            torch.set_rng_state(extra["torch_rng"])
            self.history = list(extra.get("history", []))


def _none_if_nan(x: float) -> Optional[float]:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


# ---------------------------------------------------------------------------
# full experiments
# ---------------------------------------------------------------------------

def load_task_data(cfg: ExperimentConfig, data_root=None) -> tuple[DigitDataset, DigitDataset, DigitDataset]:
    """Preprocessed (source train, target train, target eval) for ``cfg``."""
    src_name, tgt_name = cfg.domains
    domains = (src_name, tgt_name)
    source = preprocess(load_digits(src_name, "train", data_root), cfg.task, domains)
    target_train = preprocess(load_digits(tgt_name, "train", data_root), cfg.task, domains)
    if cfg.eval_split == "train":
        target_eval = target_train
    else:
        target_eval = preprocess(load_digits(tgt_name, "test", data_root), cfg.task, domains)
    return source, target_train, target_eval


def git_fingerprint() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path: Path, cfg: ExperimentConfig, trainer: Trainer) -> None:
    side, channels = task_geometry(cfg.task, cfg.domains)
    manifest = {
        "config": cfg.to_dict(),
        "config_fingerprint": cfg.fingerprint(),
        "seeds": {"model_and_dropout": cfg.seed, "source_sampler": cfg.seed, "target_sampler": cfg.seed + 1},
        "git": git_fingerprint(),
        "torch": torch.__version__,
        "python": platform.python_version(),
        "architecture": {
            "feature_extractor": "conv5x5x32-maxpool2-relu-conv5x5x48-dropout2d-maxpool2-relu-fc100-relu",
            "classifier": "fc100-relu-fc{}".format(cfg.num_classes),
            "discriminator": "fc500-relu-dropout-fc500-relu-dropout-fc1-sigmoid",
            "discriminator_input": trainer.model.D.net[0].in_features,
            "image": [channels, side, side],
        },
        "optimizer": {"type": "sgd", "momentum": cfg.momentum, "weight_decay": cfg.weight_decay,
                      "head_lr_mult": HEAD_LR_MULT},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def run_experiment(cfg: ExperimentConfig, run_dir: Optional[Union[str, Path]] = None, data_root=None,
                   datasets: Optional[tuple[DigitDataset, DigitDataset, DigitDataset]] = None,
                   log_every: int = 10, resume: bool = False, deterministic: bool = True) -> RunReport:
    """Pretrain, adapt with periodic evaluation, and write the run artifacts.

    ``datasets`` may supply preprocessed (source, target train, target eval)
    directly; otherwise they are loaded from ``data_root``.  On failure a
    partial report (``status == "aborted"``) is written before re-raising.
    """
    from .report import export_affinity

    cfg = validate_config(cfg)
    set_single_threaded(deterministic)
    source, target_train, target_eval = datasets if datasets is not None else load_task_data(cfg, data_root)
    trainer = Trainer(cfg, source, target_train.unlabeled(), analysis_labels=target_train.labels,
                      log_every=log_every)
    paths = RunPaths(run_dir) if run_dir is not None else None
    report = RunReport(task=cfg.task, method=cfg.method, instance_loss=cfg.instance_loss,
                       pseudo_mode=cfg.pseudo_mode, k=cfg.k, mu=cfg.mu, seed=cfg.seed,
                       config_fingerprint=cfg.fingerprint(), config=cfg.to_dict())
    if paths is not None:
        paths.root.mkdir(parents=True, exist_ok=True)
        write_manifest(paths.manifest, cfg, trainer)
        report.manifest = str(paths.manifest)
        if resume and paths.checkpoint.is_file():
            trainer.load(paths.checkpoint)
            if paths.report.is_file():
                previous = RunReport.load(paths.report)
                report.accuracy = previous.accuracy
    start = time.time()
    metrics_fh = open(paths.metrics, "a" if resume else "w") if paths is not None else None
    logged = len(trainer.history)
    exported = False
    try:
        while trainer.iteration < cfg.total_iters:
            trainer.step()
            if metrics_fh is not None:
                for row in trainer.history[logged:]:
                    metrics_fh.write(json.dumps(row) + "\n")
                metrics_fh.flush()
            logged = len(trainer.history)
            it = trainer.iteration
            if (paths is not None and not exported and cfg.export_affinity_epoch > 0
                    and trainer.tgt_stream.epoch + 1 >= cfg.export_affinity_epoch
                    and trainer.last_affinity is not None):
                target_labels = trainer.analysis_labels[torch.from_numpy(trainer._last_target_indices)]
                export_affinity(trainer.last_affinity, paths.affinity_dir, iteration=it, task=cfg.task,
                                target_labels=target_labels)
                exported = True
            if it % cfg.eval_every == 0 or it == cfg.total_iters:
                acc = evaluate(trainer.model, target_eval)
                report.accuracy.append([it, acc])
                log.info("iter %d  target acc %.4f  %s", it, acc, trainer.history[-1] if trainer.history else "")
                if paths is not None:
                    trainer.save(paths.checkpoint)
        report.status = "completed"
    except Exception as exc:
        report.status = "aborted"
        report.error = f"{type(exc).__name__}: {exc}"
        if paths is not None and getattr(trainer, "_postmortem", None) is not None:
            torch.save(trainer._postmortem, paths.root / "postmortem.pt")
        raise
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
        report.losses = trainer.history
        accs = [a for _, a in report.accuracy]
        if accs:
            report.final_accuracy = accs[-1]
            report.best_accuracy = max(accs)
        report.wall_clock_s += time.time() - start
        if paths is not None:
            report.save(paths.report)
    return report
