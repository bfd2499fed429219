import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from metrics import STAGE_LATENCY, TRAIN_STEPS
from ml.detector import VertexDetector
from ml.matching import detection_loss
from ml.optim import build_optimizer, clip_grad_norm, cosine_lr
from ml.tensor import backward
from models import SceneSample, YawMode
from observability import get_logger, log_stage_event
from schemas import LossWeightsConfig, TrainConfig
from synthdata import augment_scene

logger = get_logger("trainer")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    grad_norm: float
    matches: int


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "loss", "lr", "grad_norm", "matches"]
        return pd.DataFrame([vars(r) for r in self.epochs], columns=columns)

    def write_csv(self, path):
        self.to_frame().to_csv(Path(path), index=False, float_format="%.17g")


def train(model: VertexDetector, scenes: Sequence[SceneSample], config: TrainConfig,
          weights: Optional[LossWeightsConfig] = None) -> TrainHistory:
    """
    Mini-batch training with deep supervision. Gradients are accumulated over
    `batch_size` scenes, clipped, and applied by the configured optimizer under a
    warmup + cosine learning-rate schedule. Deterministic for a fixed seed.
    """
    weights = (weights or LossWeightsConfig()).for_yaw_mode(model.config.yaw_mode)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    optimizer = build_optimizer(params, config)
    steps_per_epoch = math.ceil(len(scenes) / config.batch_size) if scenes else 0
    total_steps = config.epochs * steps_per_epoch
    rpe_mode = model.config.rpe_mode.value
    history = TrainHistory()
    step = 0

    for epoch in range(config.epochs):
        start = time.time()
        order = rng.permutation(len(scenes))
        epoch_loss, epoch_matches, last_norm = 0.0, 0, 0.0
        lr = config.lr
        batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        for batch in tqdm(batches, desc=f"epoch {epoch + 1}/{config.epochs}", leave=False):
            model.store.zero_grad()
            for idx in batch:
                scene = scenes[idx]
                if config.augment:
                    scene = augment_scene(scene, rng, rotate=model.config.yaw_mode == YawMode.FREE)
                result = model.forward(scene.points)
                loss, breakdown = detection_loss(result.predictions, scene.gt_boxes, weights,
                                                 model.config.n_classes, config.repeat_gt)
                if len(batch) > 1:
                    loss = loss * (1.0 / len(batch))
                backward(loss)
                epoch_loss += breakdown.total
                epoch_matches += breakdown.matches
                logger.debug(f"scene {scene.scene_id}: loss {breakdown.total:.6f} terms {breakdown.terms}")

            lr = cosine_lr(step, total_steps, config.lr, config.min_lr, config.warmup_fraction)
            optimizer.lr = lr
            last_norm = clip_grad_norm(params, config.clip_norm)
            optimizer.step()
            TRAIN_STEPS.labels(rpe_mode=rpe_mode).inc()
            step += 1

        mean_loss = epoch_loss / max(1, len(scenes))
        history.epochs.append(EpochRecord(epoch, mean_loss, lr, last_norm, epoch_matches))
        elapsed = time.time() - start
        STAGE_LATENCY.labels(stage="train_epoch").observe(elapsed)
        log_stage_event("train_epoch", f"epoch {epoch + 1} done", elapsed * 1000.0,
                        {"loss": round(mean_loss, 6), "lr": lr})
    return history
