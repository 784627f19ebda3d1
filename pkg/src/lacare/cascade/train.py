"""End-to-end cascade training with checkpoints that resume bit-identically.

Each iteration draws from three named streams keyed by (seed, iteration):
``case`` picks the training case(s), ``augment`` drives spatial and
intensity augmentation, ``dropout`` drives the dropout masks. Nothing else
is random, so a run restarted from a checkpoint at iteration t continues
exactly as the uninterrupted run would.
"""
from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from lacare.augment import AugmentConfig, augment_training_crop
from lacare.cascade.model import (TWO_STAGE, CascadeModel, ConfigurationError, ParameterSet,
                                  build_cascade, loss_and_grads)
from lacare.cascade.unet import UNetConfig
from lacare.dataset import PreparedCase
from lacare.nn.checkpoint import load_checkpoint, save_checkpoint
from lacare.nn.optim import AdamState, EmaState, TrainingError, adam_step, ema_update
from lacare.preprocess import CropSpec
from lacare.rng import stream

CHECKPOINT_FORMAT = "lacare-cascade"
LOG_COLUMNS = ("iteration", "loss", "loss_stage1", "loss_stage2", "wall_time")


@dataclass
class TrainConfig:
    iterations: int = 100000
    learning_rate: float = 5e-4
    batch_size: int = 1
    ema_decay: float = 0.999
    seed: int = 0
    crop_size: tuple[int, int, int] = (128, 128, 160)
    eval_crop: tuple[int, int, int] = (192, 192, 240)
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    task_mode: str = TWO_STAGE
    loss_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.eval_crop = tuple(int(v) for v in self.eval_crop)
        self.loss_weights = tuple(float(v) for v in self.loss_weights)
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigurationError("iterations and batch_size must be at least 1")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be non-negative")

    def check(self, unet: UNetConfig) -> None:
        for name in ("crop_size", "eval_crop"):
            try:
                CropSpec((0.0, 0.0, 0.0), getattr(self, name)).check_divisible(unet.levels)
            except ValueError as exc:
                raise ConfigurationError(f"{name}: {exc}") from exc

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


DESK_UNET = UNetConfig(levels=3, base_filters=8)
# Stage-1 logits pass unbounded into Stage 2; at 5e-4 they outgrow the image
# channel within a few hundred desk iterations and Stage 2 saturates.
DESK_TRAIN = TrainConfig(iterations=4000, learning_rate=2e-4, ema_decay=0.99,
                         crop_size=(32, 32, 48), eval_crop=(48, 48, 64))
DESK_AUGMENT = AugmentConfig().scaled(0.25)


@dataclass
class TrainState:
    model: CascadeModel
    config: TrainConfig
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    iteration: int = 0  # completed iterations


# -- checkpoints ---------------------------------------------------------------

def _stage_key(i: int) -> str:
    return f"stage{i + 1}"


def save_training_checkpoint(path, state: TrainState) -> None:
    arrays = {}
    meta_stages = []
    for i, st in enumerate(state.model.stages):
        key = _stage_key(i)
        for name, a in st.params.items():
            arrays[f"{key}/live/{name}"] = a
            arrays[f"{key}/ema/{name}"] = st.ema.shadow[name]
            if name in st.adam.m:
                arrays[f"{key}/adam_m/{name}"] = st.adam.m[name]
                arrays[f"{key}/adam_v/{name}"] = st.adam.v[name]
        a = st.adam
        meta_stages.append({"adam": {"learning_rate": a.learning_rate, "beta1": a.beta1,
                                     "beta2": a.beta2, "epsilon": a.epsilon, "step": a.step},
                            "ema_decay": st.ema.decay})
    m = state.model
    meta = {"format": CHECKPOINT_FORMAT, "iteration": state.iteration,
            "unet": m.unet.to_dict(), "task_mode": m.task_mode,
            "loss_weights": list(m.loss_weights), "stages": meta_stages,
            "train": state.config.to_dict(), "augment": _augment_dict(state.augment)}
    save_checkpoint(path, arrays, meta)


def _augment_dict(a: AugmentConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(a).items()}


def load_training_checkpoint(path) -> TrainState:
    arrays, meta = load_checkpoint(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a cascade checkpoint")
    unet = UNetConfig(**meta["unet"])
    stages = []
    for i, sm in enumerate(meta["stages"]):
        key = _stage_key(i)

        def grab(kind):
            pre = f"{key}/{kind}/"
            return {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}

        params = grab("live")
        adam = AdamState(**sm["adam"], m=grab("adam_m"), v=grab("adam_v"))
        stages.append(ParameterSet(params, adam, EmaState(sm["ema_decay"], grab("ema"))))
    model = CascadeModel(unet, stages[0], stages[1] if len(stages) > 1 else None,
                         tuple(meta["loss_weights"]), meta["task_mode"])
    aug = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in meta["augment"].items()})
    return TrainState(model, TrainConfig.from_dict(meta["train"]), aug, int(meta["iteration"]))


# -- the loop ------------------------------------------------------------------

def new_training(unet: UNetConfig, config: TrainConfig, augment: AugmentConfig | None = None,
                 dtype=np.float32) -> TrainState:
    config.check(unet)
    model = build_cascade(unet, stream(config.seed, "init"), config.task_mode,
                          config.loss_weights, config.learning_rate, config.ema_decay, dtype)
    return TrainState(model, config, augment or AugmentConfig())


def training_batch(cases: list[PreparedCase], config: TrainConfig, augment: AugmentConfig,
                   iteration: int, centroids=None):
    """The augmented ``(image, labels, case_ids)`` batch of one iteration."""
    pick = stream(config.seed, "case", iteration).integers(0, len(cases), config.batch_size)
    imgs, labs, ids = [], [], []
    for b, ci in enumerate(pick):
        case = cases[int(ci)]
        center = centroids[int(ci)] if centroids is not None else case.centroid
        origin = CropSpec(center, config.crop_size).origin()
        rng = stream(config.seed, "augment", iteration, b)
        img, lab = augment_training_crop(case.image, case.labels, origin, config.crop_size, rng,
                                         augment)
        imgs.append(img)
        labs.append(lab)
        ids.append(case.case_id)
    image = np.stack(imgs)[:, None]
    return image, np.stack(labs).astype(np.int64), ids


def _check_cases(cases: list[PreparedCase], model: CascadeModel) -> None:
    if not cases:
        raise ConfigurationError("training set is empty")
    if any(c.labels is None for c in cases):
        raise ConfigurationError("every training case needs labels")
    if model.task_mode == TWO_STAGE and not any((c.labels == 2).any() for c in cases):
        raise ConfigurationError("two_stage training needs at least one case with scar (label 2)")


def train(cases: list[PreparedCase], state: TrainState, out_dir=None, until: int | None = None,
          log=None) -> TrainState:
    """Run iterations ``state.iteration .. until`` (default: config.iterations).

    With ``out_dir`` set, ``loss_log.csv`` is appended to and checkpoints
    ``ckpt_<iteration>.ckpt`` (every ``checkpoint_every``) and ``final.ckpt``
    are written there. ``log`` is an optional callable taking a dict per
    iteration.
    """
    cfg = state.config
    model = state.model
    _check_cases(cases, model)
    end = cfg.iterations if until is None else min(int(until), cfg.iterations)
    centroids = [c.centroid for c in cases]
    writer = logf = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "loss_log.csv")
        fresh = state.iteration == 0 or not os.path.exists(log_path)
        if fresh:
            logf = open(log_path, "w", newline="")
        else:
            _truncate_log(log_path, state.iteration)
            logf = open(log_path, "a", newline="")
        writer = csv.writer(logf, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()
    try:
        while state.iteration < end:
            it = state.iteration
            image, labels, ids = training_batch(cases, cfg, state.augment, it, centroids)
            drop_rng = stream(cfg.seed, "dropout", it)
            try:
                loss, terms, g1, g2 = loss_and_grads(model, image, labels, drop_rng, training=True)
                for st, g in zip(model.stages, (g1, g2)):
                    adam_step(st.params, g, st.adam, iteration=it)
            except TrainingError as exc:
                raise TrainingError(f"training diverged at iteration {it} on {ids}: {exc}") from exc
            for st in model.stages:
                ema_update(st.ema, st.params)
            state.iteration = it + 1
            row = {"iteration": state.iteration, "loss": float(loss), "loss_stage1": float(terms[0]),
                   "loss_stage2": float(terms[1]) if terms[1] is not None else float("nan"),
                   "wall_time": time.perf_counter() - t0}
            if writer is not None:
                writer.writerow([row["iteration"], f"{row['loss']:.8g}", f"{row['loss_stage1']:.8g}",
                                 f"{row['loss_stage2']:.8g}", f"{row['wall_time']:.3f}"])
            if log is not None:
                log(row)
            if out_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                logf.flush()
                save_training_checkpoint(
                    os.path.join(out_dir, f"ckpt_{state.iteration:06d}.ckpt"), state)
    finally:
        if logf is not None:
            logf.close()
    if out_dir is not None and state.iteration == cfg.iterations:
        save_training_checkpoint(os.path.join(out_dir, "final.ckpt"), state)
    return state


def _truncate_log(path, iteration: int) -> None:
    """Drop log rows past ``iteration`` so a resumed run does not duplicate them."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= iteration]
    with open(path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(keep)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
