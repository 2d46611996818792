"""Joint optimisation loop: supervised warm-up, then EMA-teacher pseudo-labels,
soft-mix, soft segmentation + alignment losses and SGD with momentum."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import losses
from .data_io import RunConfig, SplitManifest, load_image, load_pair, substream
from .errors import ShapeError, TrainingError
from .eval_diag import mean_foreground_dice
from .model_core import (FeatureExtractor, ReferenceNet, ReferenceNetSpec, StubExtractor,
                         load_checkpoint, sa_input, sa_input_vjp, save_checkpoint)
from .pseudo_label import EmaState, argmax_labels, ema_update, generate_pseudo_labels, one_hot, softmax_probs
from .soft_mix import make_complementary_mixtures, sample_masks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerState:
    velocity: np.ndarray
    lr: float
    momentum: float
    weight_decay: float


def sgd_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState):
    """v <- momentum * v + g + wd * p;  p <- p - lr * v."""
    if params.shape != grads.shape or params.shape != state.velocity.shape:
        raise ShapeError("params, grads and velocity must have equal length")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise TrainingError(f"non-finite gradient ({bad} of {grads.size} entries)")
    v = state.momentum * state.velocity + grads + state.weight_decay * params
    new = params - state.lr * v
    return new.astype(params.dtype, copy=False), OptimizerState(
        v.astype(state.velocity.dtype, copy=False), state.lr, state.momentum, state.weight_decay)


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    l_soft: float
    l_sa: float
    total: float
    mean_nn_distance: float
    lr: float

    def to_line(self) -> str:
        return (f"{self.iteration}\t{self.l_soft:.9e}\t{self.l_sa:.9e}\t{self.total:.9e}"
                f"\t{self.mean_nn_distance:.9e}\t{self.lr:.9e}")

    @classmethod
    def from_line(cls, line: str) -> "TrainRecord":
        it, *rest = line.split("\t")
        return cls(int(it), *map(float, rest))

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, f.name)) for f in fields(self))


LOG_HEADER = "# iteration\tl_soft\tl_sa\ttotal\tmean_nn_distance\tlr"


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - np.sum(probs * grad_probs, axis=1, keepdims=True))


@dataclass
class Objective:
    total: float
    l_soft: float
    l_sa: float
    grad_params: np.ndarray


def soft_objective(probs: np.ndarray, targets: np.ndarray, cfg: RunConfig, n_groups: int = 1):
    """L_soft averaged over ``n_groups`` equal chunks of the batch (one per mixture)."""
    value, grad = 0.0, np.zeros_like(probs)
    for p, t, sl in _chunks(probs, targets, n_groups):
        r = losses.soft_segmentation_loss(p, t, cfg.dice_eps, cfg.prob_clamp, cfg.ce_reduction)
        value += r.value / n_groups
        grad[sl] = r.grad / n_groups
    return value, grad


def _chunks(probs, targets, n):
    size = len(probs) // n
    for k in range(n):
        sl = slice(k * size, (k + 1) * size)
        yield probs[sl], targets[sl], sl


def alignment_terms(images: np.ndarray, probs: np.ndarray, real_embed: np.ndarray,
                    extractor: FeatureExtractor, mode: str):
    """SA loss on ``sa_input(images, probs)`` against fixed real embeddings.

    Returns the loss and d(loss)/d(probs) routed through the extractor's
    input-gradient product; the real side is a constant.
    """
    x = sa_input(images, probs, mode)
    f_syn = extractor.embed(x)
    r = losses.sa_loss(f_syn, real_embed)
    g_x = extractor.vjp(x, r.grad)
    return r, sa_input_vjp(images, probs, mode, g_x)


def real_embeddings(images: np.ndarray, onehot: np.ndarray, extractor: FeatureExtractor, mode: str):
    # real side uses ground-truth label maps in place of predictions
    return extractor.embed(sa_input(images, onehot, mode))


def objective(model: ReferenceNet, images: np.ndarray, targets: np.ndarray, cfg: RunConfig,
              extractor: FeatureExtractor | None = None, real_embed: np.ndarray | None = None,
              n_groups: int = 1, lam: float | None = None) -> Objective:
    """Forward + backward of L = L_soft + lambda * L_SA for one batch.

    ``targets`` are used as given (already detached). Passing ``real_embed``
    enables the alignment term; its gradient only reaches the network through
    the predicted probabilities.
    """
    lam = cfg.lambda_sa if lam is None else lam
    logits = model.forward(images)
    probs = softmax_probs(logits, axis=1)
    l_soft, g_probs = soft_objective(probs, targets, cfg, n_groups)
    l_sa = 0.0
    if real_embed is not None:
        r, g_sa = alignment_terms(images, probs, real_embed, extractor, cfg.sa_input_mode)
        l_sa = r.value
        if lam > 0:
            g_probs = g_probs + lam * g_sa
    grad = model.backward(softmax_backward(probs, g_probs))
    return Objective(l_soft + lam * l_sa, l_soft, l_sa, grad)


class Trainer:
    """Owns student, teacher, optimiser and the seeded random streams."""

    def __init__(self, cfg: RunConfig, labeled_images: np.ndarray, labeled_masks: np.ndarray,
                 synthetic_images: np.ndarray | None = None, extractor: FeatureExtractor | None = None):
        if len(labeled_images) == 0:
            raise ValueError("no labeled images")
        if cfg.mode == "semi" and (synthetic_images is None or len(synthetic_images) == 0):
            raise ValueError("semi-supervised training needs synthetic images")
        self.cfg = cfg
        self.lab_x = np.asarray(labeled_images, dtype=np.float32)
        self.lab_y = one_hot(np.asarray(labeled_masks), cfg.num_classes)
        self.syn_x = None if synthetic_images is None else np.asarray(synthetic_images, dtype=np.float32)
        self.extractor = extractor or StubExtractor(seed=int(substream(cfg.seed, "extractor").integers(2**31)),
                                                    dim=cfg.embed_dim)
        spec = ReferenceNetSpec(in_channels=self.lab_x.shape[-1], num_classes=cfg.num_classes,
                                widths=tuple(cfg.widths))
        init_seed = int(substream(cfg.seed, "init").integers(2**31))
        self.student = ReferenceNet(spec, seed=init_seed)
        self.teacher: ReferenceNet | None = None
        self.ema: EmaState | None = None
        self.opt = OptimizerState(np.zeros(self.student.num_params, dtype=np.float32),
                                  cfg.lr, cfg.momentum, cfg.weight_decay)
        self.rng = {"shuffle": substream(cfg.seed, "shuffle"), "mask": substream(cfg.seed, "mask")}
        self.iteration = 0
        self.best_dice = -1.0
        if cfg.mode == "semi" and cfg.warmup == 0:
            self._start_teacher()

    # -- helpers ------------------------------------------------------------
    def current_lr(self) -> float:
        if self.cfg.lr_schedule == "poly" and self.cfg.iterations > 0:
            return self.cfg.lr * (1.0 - self.iteration / self.cfg.iterations) ** 0.9
        return self.cfg.lr

    def _start_teacher(self) -> None:
        self.teacher = self.student.copy().eval()
        self.ema = EmaState(self.teacher.get_params(), self.cfg.ema_decay)

    def _sample(self, n_pool: int, k: int) -> np.ndarray:
        return self.rng["shuffle"].choice(n_pool, size=k, replace=n_pool < k)

    def _apply(self, grad: np.ndarray) -> None:
        opt = OptimizerState(self.opt.velocity, self.current_lr(), self.opt.momentum, self.opt.weight_decay)
        params, self.opt = sgd_step(self.student.get_params(), grad, opt)
        self.student.set_params(params)

    def _diagnostic_distance(self, lab_idx, syn_idx) -> float:
        """Mean nearest-real distance of pure synthetic images under the student."""
        if self.syn_x is None:
            return 0.0
        syn = self.syn_x[syn_idx]
        probs = softmax_probs(self.student.predict(syn), axis=1)
        real = real_embeddings(self.lab_x[lab_idx], self.lab_y[lab_idx], self.extractor, self.cfg.sa_input_mode)
        f_syn = self.extractor.embed(sa_input(syn, probs, self.cfg.sa_input_mode))
        return float(losses.nn_min_distances(f_syn, real)[0].mean())

    @property
    def in_warmup(self) -> bool:
        return self.cfg.mode == "supervised" or self.iteration < self.cfg.warmup

    # -- steps --------------------------------------------------------------
    def warmup_step(self) -> TrainRecord:
        cfg = self.cfg
        lab_idx = self._sample(len(self.lab_x), cfg.batch_labeled)
        syn_idx = self._sample(len(self.syn_x), cfg.batch_unlabeled) if self.syn_x is not None else None
        lr = self.current_lr()
        obj = objective(self.student, self.lab_x[lab_idx], self.lab_y[lab_idx], cfg, lam=0.0)
        self._check(obj)
        self._apply(obj.grad_params)
        dist = self._diagnostic_distance(lab_idx, syn_idx)
        self.iteration += 1
        if cfg.mode == "semi" and self.iteration == cfg.warmup:
            self._start_teacher()
        return TrainRecord(self.iteration, obj.l_soft, 0.0, obj.total, dist, lr)

    def train_step(self) -> TrainRecord:
        cfg = self.cfg
        b = min(cfg.batch_labeled, cfg.batch_unlabeled)
        lab_idx = self._sample(len(self.lab_x), b)
        syn_idx = self._sample(len(self.syn_x), b)
        v_lab, l_lab, v_syn = self.lab_x[lab_idx], self.lab_y[lab_idx], self.syn_x[syn_idx]
        lr = self.current_lr()

        l_pseudo = generate_pseudo_labels(self.teacher, v_syn, cfg.connectivity)
        h, w = v_lab.shape[1:3]
        masks = sample_masks(b, h, w, cfg.patch_fraction, cfg.smooth_kernel, self.rng["mask"])
        mix = make_complementary_mixtures((v_lab, l_lab), (v_syn, l_pseudo), masks)
        images = np.concatenate([mix.v1, mix.v2]).astype(np.float32)
        targets = np.concatenate([mix.l1, mix.l2])
        if not cfg.soft_targets:
            targets = one_hot(argmax_labels(targets, axis=1), cfg.num_classes)

        real = real_embeddings(v_lab, l_lab, self.extractor, cfg.sa_input_mode)
        obj = objective(self.student, images, targets, cfg, self.extractor, real, n_groups=2)
        self._check(obj)
        self._apply(obj.grad_params)
        self.ema = ema_update(self.ema, self.student.get_params())
        self.teacher.set_params(self.ema.teacher)
        dist = self._diagnostic_distance(lab_idx, syn_idx)
        self.iteration += 1
        return TrainRecord(self.iteration, obj.l_soft, obj.l_sa, obj.total, dist, lr)

    def step(self) -> TrainRecord:
        return self.warmup_step() if self.in_warmup else self.train_step()

    def _check(self, obj: Objective) -> None:
        if not (np.isfinite(obj.total) and np.isfinite(obj.l_sa)):
            raise TrainingError(f"non-finite loss at iteration {self.iteration + 1}")

    def eval_model(self) -> ReferenceNet:
        if self.cfg.eval_model == "teacher" and self.teacher is not None:
            return self.teacher
        return self.student

    # -- persistence --------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"student": self.student.get_params(), "velocity": self.opt.velocity}
        if self.teacher is not None:
            arrays["teacher"] = self.teacher.get_params()
        return arrays

    def state_meta(self) -> dict:
        return {
            "format": "synalign-checkpoint",
            "iteration": self.iteration,
            "best_dice": self.best_dice,
            "rng": {k: g.bit_generator.state for k, g in self.rng.items()},
            "config": self.cfg.to_dict(),
            "spec": {"in_channels": self.student.spec.in_channels,
                     "num_classes": self.student.spec.num_classes,
                     "widths": list(self.student.spec.widths)},
        }

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.state_arrays(), self.state_meta())

    def load(self, path: str | Path) -> None:
        arrays, meta = load_checkpoint(path)
        self.student.set_params(arrays["student"])
        self.opt = OptimizerState(arrays["velocity"], self.opt.lr, self.opt.momentum, self.opt.weight_decay)
        if "teacher" in arrays:
            self.teacher = self.student.copy().eval()
            self.teacher.set_params(arrays["teacher"])
            self.ema = EmaState(arrays["teacher"], self.cfg.ema_decay)
        else:
            self.teacher, self.ema = None, None
        for k, state in meta["rng"].items():
            self.rng[k].bit_generator.state = state
        self.iteration = int(meta["iteration"])
        self.best_dice = float(meta["best_dice"])


def model_from_checkpoint(path: str | Path, which: str = "student") -> ReferenceNet:
    arrays, meta = load_checkpoint(path)
    if which not in arrays:
        raise KeyError(f"checkpoint {path} has no {which!r} parameters")
    spec = ReferenceNetSpec(in_channels=meta["spec"]["in_channels"], num_classes=meta["spec"]["num_classes"],
                            widths=tuple(meta["spec"]["widths"]))
    model = ReferenceNet(spec)
    model.set_params(arrays[which])
    return model.eval()


# --------------------------------------------------------------------------
# full runs

@dataclass
class RunResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_dice: float
    records: list[TrainRecord]


def load_split_arrays(split: SplitManifest, num_classes: int, mode: str = "semi"):
    """Read every image the run touches into memory."""
    def pairs(entries):
        if not entries:
            return np.zeros((0,)), np.zeros((0,), dtype=np.int64)
        xs, ys = zip(*(load_pair(e, num_classes) for e in entries))
        return np.stack(xs), np.stack(ys)

    lab_x, lab_y = pairs(split.labeled)
    val_x, val_y = pairs(split.val)
    syn = split.synthetic_in_use
    syn_x = np.stack([load_image(e.image_path) for e in syn]) if syn else None
    return lab_x, lab_y, syn_x, val_x, val_y


def run_training(cfg: RunConfig, split: SplitManifest, out_dir: str | Path,
                 resume: str | Path | None = None, stop_at: int | None = None,
                 extractor: FeatureExtractor | None = None) -> RunResult:
    """Warm-up then self-training for ``cfg.iterations`` steps.

    Writes ``train.log`` (one TrainRecord per line), ``eval.log``,
    ``last.ckpt`` and ``best.ckpt`` under ``out_dir``. ``stop_at`` ends the
    run early as if interrupted; ``resume`` continues from a checkpoint and
    reproduces the records an uninterrupted run would have written.
    """
    import torch

    torch.set_num_threads(cfg.num_threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lab_x, lab_y, syn_x, val_x, val_y = load_split_arrays(split, cfg.num_classes, cfg.mode)
    trainer = Trainer(cfg, lab_x, lab_y, syn_x, extractor)
    cfg.dump(out / "config.yaml")
    split.write(out / "split.tsv")

    log_path, eval_path = out / "train.log", out / "eval.log"
    last, best = out / "last.ckpt", out / "best.ckpt"
    records: list[TrainRecord] = []
    if resume is not None:
        trainer.load(resume)
        for path in (log_path, eval_path):
            kept = [l for l in path.read_text().splitlines()
                    if l.startswith("#") or int(l.split("\t")[0]) <= trainer.iteration] if path.exists() else []
            path.write_text("".join(l + "\n" for l in kept))
        records = [TrainRecord.from_line(l) for l in log_path.read_text().splitlines() if not l.startswith("#")]
    else:
        log_path.write_text(LOG_HEADER + "\n")
        eval_path.write_text("# iteration\tmean_dice\n")
        trainer.save(last)

    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    with open(log_path, "a") as flog, open(eval_path, "a") as feval:
        while trainer.iteration < end:
            try:
                rec = trainer.step()
            except TrainingError:
                log.error("aborting; last good checkpoint kept at %s", last)
                raise
            if not rec.is_finite():
                raise TrainingError(f"non-finite record at iteration {rec.iteration}; "
                                    f"last good checkpoint kept at {last}")
            records.append(rec)
            flog.write(rec.to_line() + "\n")
            if rec.iteration % cfg.eval_every == 0 or rec.iteration == cfg.iterations:
                flog.flush()
                dice = mean_foreground_dice(trainer.eval_model(), val_x, val_y, cfg.num_classes) \
                    if len(val_x) else 0.0
                feval.write(f"{rec.iteration}\t{dice:.9f}\n")
                feval.flush()
                if dice > trainer.best_dice:
                    trainer.best_dice = dice
                    trainer.save(best)
                trainer.save(last)
                log.info("iter %d  total %.4f  l_sa %.4f  val dice %.4f",
                         rec.iteration, rec.total, rec.l_sa, dice)
    if not best.exists():
        trainer.save(best)
    if trainer.iteration < cfg.iterations:
        # interrupted: the resumed run writes the summary
        return RunResult(out, best, last, log_path, trainer.best_dice, records)
    (out / "summary.json").write_text(json.dumps(
        {"best_dice": trainer.best_dice, "iterations": trainer.iteration}, indent=2) + "\n")
    return RunResult(out, best, last, log_path, trainer.best_dice, records)
