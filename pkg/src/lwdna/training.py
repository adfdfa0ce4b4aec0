"""Training loop, evaluation and per-epoch logs."""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Protocol, Tuple, Union

import numpy as np
from tqdm import tqdm

from .autodiff import functional as F
from .autodiff.optim import SGD, lr_at
from .autodiff.tensor import Tape, Tensor
from .checkpoint import save_checkpoint
from .data import augment, iterate_batches
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .network import ConvNet
from .settings import get_settings
from .types import Dataset, EpochRow, EvalResult, TrainLog, TrainProtocol

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "train_loss", "train_err", "test_err", "wallclock"]


class Classifier(Protocol):
    def forward(self, x: Tensor, train: bool = False) -> Tensor: ...


def _batch_stats(model: Classifier, images: np.ndarray, labels: np.ndarray) -> Tuple[int, float]:
    logits = model.forward(Tensor(images), train=False)
    wrong = int(np.count_nonzero(np.argmax(logits.data, axis=1) != labels))
    loss = F.cross_entropy(logits, labels).item() * len(labels)
    return wrong, loss


def evaluate(model: Classifier, dataset: Dataset, batch_size: int = 256,
             threads: Optional[int] = None) -> EvalResult:
    """
    Top-1 error (percent) and mean cross-entropy.

    Batches run on up to `threads` workers (default LWDNA_THREADS); partial
    results are reduced in batch order.
    """
    if len(dataset) == 0:
        raise ShapeError("evaluate", "empty dataset")
    workers = threads or get_settings().threads
    batches = list(iterate_batches(dataset, batch_size))
    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda b: _batch_stats(model, *b), batches))
    else:
        results = [_batch_stats(model, x, y) for x, y in batches]
    wrong = sum(r[0] for r in results)
    loss = 0.0
    for _, batch_loss in results:
        loss += batch_loss
    n = len(dataset)
    return EvalResult(top1_err=100.0 * wrong / n, loss=loss / n, num_samples=n)


def write_log_csv(rows: List[EpochRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss), repr(row.train_err),
                             repr(row.test_err), f"{row.wallclock:.3f}"])
    return path


def train(model: ConvNet, dataset: Dataset, protocol: TrainProtocol, test_set: Optional[Dataset] = None,
          teacher: Optional[Classifier] = None, log_path: Optional[Union[str, Path]] = None,
          checkpoint_path: Optional[Union[str, Path]] = None, name: str = "model") -> TrainLog:
    """
    Train a freshly initialized model under `protocol`.

    Args:
        model: network to train in place
        dataset: training split
        protocol: recipe; its hash is embedded in the log
        test_set: evaluated after every epoch (defaults to the training split)
        teacher: distillation teacher, required when protocol.kd is set
        log_path: per-epoch CSV destination
        checkpoint_path: final checkpoint destination
        name: label used in log messages and progress bars

    Returns:
        TrainLog with one row per epoch and the final test metrics
    """
    if protocol.kd is not None and teacher is None:
        raise ConfigError("protocol enables distillation but no teacher was given")
    settings = get_settings()
    test_set = test_set if test_set is not None else dataset
    rng = np.random.default_rng(protocol.seed)
    params = model.parameters()
    optimizer = SGD(protocol.base_lr, momentum=protocol.momentum, weight_decay=protocol.weight_decay)
    rows: List[EpochRow] = []
    start = time.perf_counter()
    logger.info(f"[{name}] training {model.config.values} for {protocol.epochs} epochs "
                f"({model.num_parameters()} parameters)")

    for epoch in range(protocol.epochs):
        optimizer.lr = lr_at(protocol.schedule, epoch, protocol.base_lr, protocol.epochs)
        seen = wrong = 0
        loss_sum = 0.0
        batches = iterate_batches(dataset, protocol.batch_size, rng)
        total = -(-len(dataset) // protocol.batch_size)
        for b, (x, y) in enumerate(tqdm(batches, total=total, desc=f"{name} epoch {epoch + 1}",
                                        disable=not settings.progress, leave=False)):
            x = augment(x, rng, protocol.augmentation)
            teacher_logits = teacher.forward(Tensor(x), train=False).data if teacher is not None else None
            SGD.zero_grad(params)
            with Tape() as tape:
                logits = model.forward(Tensor(x), train=True)
                if protocol.kd is not None:
                    loss = F.kd_loss(logits, teacher_logits, y, protocol.kd.lam, protocol.kd.temperature)
                else:
                    loss = F.cross_entropy(logits, y)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, b, value)
                tape.backward(loss)
            optimizer.step(params)
            seen += len(y)
            wrong += int(np.count_nonzero(np.argmax(logits.data, axis=1) != y))
            loss_sum += value * len(y)

        result = evaluate(model, test_set, protocol.eval_batch_size)
        rows.append(EpochRow(epoch=epoch + 1, lr=optimizer.lr, train_loss=loss_sum / seen,
                             train_err=100.0 * wrong / seen, test_err=result.top1_err,
                             wallclock=time.perf_counter() - start))
        logger.info(f"[{name}] epoch {epoch + 1}/{protocol.epochs} lr={optimizer.lr:.4g} "
                    f"loss={rows[-1].train_loss:.4f} train_err={rows[-1].train_err:.2f}% "
                    f"test_err={result.top1_err:.2f}%")

    final = evaluate(model, test_set, protocol.eval_batch_size) if not rows else result
    log = TrainLog(arch=model.arch.name, config=list(model.config.values),
                   protocol_hash=protocol.protocol_hash(), rows=rows,
                   final_test_err=final.top1_err, final_test_loss=final.loss)
    if log_path is not None:
        write_log_csv(rows, log_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return log
