"""Training loop (NLL + Adam) and restoration over datasets."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aft import write_aft
from .autodiff import Tensor
from .checkpoint import load_model, save_model
from .dataset import read_manifest
from .model import ArtifactFlowModel
from .optim import Adam
from .phantom import write_pgm

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_SKIPS = 50
CHECKPOINT_NAME = "checkpoint.afck"
LOSS_LOG_NAME = "loss_log.csv"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 8
    iters: int = 2000
    eval_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.beta1, self.beta2, self.batch,
               self.iters, self.eval_interval) <= 0:
            raise ValueError("all training settings must be positive")


class _BatchSampler:
    """Shuffled epochs of index slices; incomplete tails are dropped."""

    def __init__(self, count: int, batch: int, rng: np.random.Generator):
        if batch > count:
            raise ValueError(f"batch size {batch} exceeds dataset size {count}")
        self.count = count
        self.batch = batch
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos + self.batch > len(self._order):
            self._order = self.rng.permutation(self.count)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return idx


@dataclass
class TrainResult:
    losses: list[float]
    checkpoint_path: Path
    start_step: int


def _rng_state_str(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def _set_rng_state(rng: np.random.Generator, state_str: str):
    rng.bit_generator.state = json.loads(state_str)


def train(model: ArtifactFlowModel, corrupt: np.ndarray, clean: np.ndarray,
          config: TrainConfig, out_dir, resume_meta: dict[str, str] | None = None,
          resume_arrays: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Train in place; writes loss_log.csv and periodic checkpoints to out_dir.

    With resume_meta/arrays from a prior run's checkpoint, optimizer moments,
    step counter, sampler state and sampler RNG are restored so the run
    continues exactly as if uninterrupted.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_pairs = corrupt.shape[0]

    optimizer = Adam(model.named_params(), lr=config.lr,
                     beta1=config.beta1, beta2=config.beta2)
    rng = np.random.default_rng(config.seed)
    sampler = _BatchSampler(n_pairs, config.batch, rng)
    start_step = 0

    if resume_meta is not None:
        optimizer.load_state_arrays(resume_arrays, int(resume_meta["train.adam_t"]))
        start_step = int(resume_meta["train.step"])
        _set_rng_state(rng, resume_meta["train.rng_state"])
        sampler._order = np.array(json.loads(resume_meta["train.sampler_order"]), dtype=np.int64)
        sampler._pos = int(resume_meta["train.sampler_pos"])
        logger.info("resuming at step %d", start_step + 1)

    def checkpoint(step: int):
        extra_meta = {
            "train.step": str(step),
            "train.adam_t": str(optimizer.t),
            "train.rng_state": _rng_state_str(rng),
            "train.sampler_order": json.dumps(sampler._order.tolist()),
            "train.sampler_pos": str(sampler._pos),
        }
        save_model(out_dir / CHECKPOINT_NAME, model,
                   extra_meta=extra_meta, extra_arrays=optimizer.state_arrays())

    losses: list[float] = []
    log_lines = ["step,nll,lr"] if start_step == 0 else []
    consecutive_skips = 0

    for step in range(start_step + 1, config.iters + 1):
        idx = sampler.next_indices()
        x = Tensor(corrupt[idx])
        y = Tensor(clean[idx])

        skipped = False
        try:
            loss = model.nll(y, x, update_init=(step == 1))
            loss_value = loss.item()
        except ValueError as err:
            # singular 1x1 conv, log-domain violation from a non-finite
            # subnet output, and the like reject the step, not the run
            logger.warning("step %d: forward rejected (%s), skipped", step, err)
            loss_value = float("nan")
            skipped = True
        log_lines.append(f"{step},{loss_value!r},{config.lr!r}")

        if not skipped and not np.isfinite(loss_value):
            logger.warning("step %d: non-finite loss, skipped", step)
            skipped = True
        if not skipped:
            optimizer.zero_grad()
            loss.backward()
            if not optimizer.step():
                skipped = True

        if skipped:
            consecutive_skips += 1
            if consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                raise RuntimeError(
                    f"aborting: {consecutive_skips} consecutive skipped steps "
                    f"(last loss {loss_value!r})")
            continue
        consecutive_skips = 0
        losses.append(loss_value)
        if step % config.eval_interval == 0:
            checkpoint(step)

    checkpoint(config.iters)
    mode = "a" if start_step > 0 else "w"
    with open(out_dir / LOSS_LOG_NAME, mode) as fh:
        fh.write("\n".join(log_lines) + "\n")
    return TrainResult(losses=losses, checkpoint_path=out_dir / CHECKPOINT_NAME,
                       start_step=start_step)


def restore_directory(checkpoint_path, dataset_dir, out_dir, tau: float = 0.0,
                      seed: int = 0) -> list[str]:
    """Restore every corrupted image in a dataset dir; writes AFT1 + PGM pairs."""
    from .aft import read_aft

    model, _, _ = load_model(checkpoint_path)
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed) if tau != 0.0 else None

    ids = [rec["id"] for rec in read_manifest(dataset_dir)]
    for pair_id in ids:
        corrupt = read_aft(dataset_dir / f"{pair_id}_corrupt.aft")
        restored = model.restore(corrupt[None], tau=tau, rng=rng)[0]
        write_aft(out_dir / f"{pair_id}_restored.aft", restored)
        write_pgm(out_dir / f"{pair_id}_restored.pgm", restored[0])
    return ids
