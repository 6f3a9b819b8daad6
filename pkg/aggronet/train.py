"""Sparse cross-entropy, Adam, step-decay schedule, seeded splits and the epoch loop."""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from aggronet.datapipe import augment_batch, prepare_inputs
from aggronet.layers import Mode
from aggronet.models import (
    AugmentParams,
    Dataset,
    DatasetError,
    DimensionError,
    DivergenceError,
    EvaluationResult,
    History,
    NonFiniteError,
    Partition,
    SplitAssignment,
    TrainConfig,
    TrainingError,
)
from aggronet.network import Model, backward_pass, forward_pass
from aggronet.tensor import Tensor

logger = logging.getLogger(__name__)

LOSS_EPSILON = 1e-12
EVAL_BATCH_SIZE = 64


class SplitCounts(NamedTuple):
    train: int
    val: int
    test: int


def sparse_ce_loss(probs: Tensor, labels: npt.NDArray[np.integer]) -> tuple[float, Tensor]:
    """
    Mean sparse categorical cross-entropy and its gradient with respect to the logits.

    Args:
        probs (Tensor): [N, K] softmax outputs.
        labels (np.ndarray): [N] integer class labels in [0, K).

    Returns:
        tuple[float, Tensor]: -(1/N) * sum(log(p[n, y_n] + 1e-12)) and (probs - onehot) / N.

    Raises:
        ValueError: If a label lies outside [0, K).
    """
    n, k = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(
            f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]"
        )
    picked = probs[np.arange(n), labels].astype(np.float64)
    loss = float(-np.mean(np.log(picked + LOSS_EPSILON)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad


@dataclass
class AdamState:
    m: dict[str, Tensor]
    v: dict[str, Tensor]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
    frozen: set[str] | frozenset[str] = frozenset(),
) -> AdamState:
    """
    One bias-corrected Adam update, applied to ``params`` in place.

    Frozen parameters (and their moments) are left untouched; the step counter advances once
    per call regardless.

    Args:
        params (dict[str, Tensor]): Parameters to update in place.
        grads (dict[str, Tensor]): Gradients with the same keys and shapes.
        state (AdamState): Moments and step counter, updated in place.
        lr (float): Learning rate.
        frozen: Parameter names that must not change.

    Returns:
        AdamState: ``state`` after the step.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, param in params.items():
        if name in frozen:
            continue
        grad = grads[name]
        if grad.shape != param.shape:
            raise DimensionError(
                f"gradient {grad.shape} does not match parameter {name} {param.shape}"
            )
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(grad)
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)
    return state


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step decay: base_lr * gamma ** floor(epoch / step_epochs)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return float(config.base_lr * config.gamma ** (epoch // config.step_epochs))


def split(n: int, counts: SplitCounts | Sequence[int], seed: int) -> SplitAssignment:
    """
    Partition ``range(n)`` by a seeded uniform permutation: the first ``train`` positions go to
    train, the next ``val`` to validation, the rest to test.

    Raises:
        DatasetError: If the counts are negative or do not sum to ``n``.
    """
    train, val, test = (int(c) for c in counts)
    if min(train, val, test) < 0 or train + val + test != n:
        raise DatasetError(f"split counts ({train}, {val}, {test}) must be >= 0 and sum to {n}")
    order = np.random.default_rng(seed).permutation(n)
    partitions = [Partition.TEST] * n
    for position, index in enumerate(order):
        if position < train:
            partitions[index] = Partition.TRAIN
        elif position < train + val:
            partitions[index] = Partition.VAL
    return SplitAssignment(partitions=tuple(partitions), seed=seed)


def counts_from_fractions(n: int, fractions: Sequence[float]) -> SplitCounts:
    """Val and test get floor(fraction * n); train gets the remainder."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(
            f"split fractions must be three non-negative numbers summing to 1, got {fractions}"
        )
    val = int(np.floor(fractions[1] * n))
    test = int(np.floor(fractions[2] * n))
    return SplitCounts(n - val - test, val, test)


def evaluate(
    model: Model,
    dataset: Dataset,
    indices: Sequence[int],
    inputs: Tensor | None = None,
    batch_size: int = EVAL_BATCH_SIZE,
    progress: bool = False,
) -> EvaluationResult:
    """
    Inference-mode loss, accuracy, argmax predictions and scores on ``indices``.

    Argmax ties go to the lowest class index.

    Args:
        model (Model): The model.
        dataset (Dataset): Source of images and labels.
        indices (Sequence[int]): Examples to evaluate, in order.
        inputs (Tensor | None): Pre-resized inputs for the whole dataset, if already prepared.
        batch_size (int): Examples per forward pass.
        progress (bool): Show a tqdm progress bar over batches.

    Returns:
        EvaluationResult: Aggregate loss and accuracy plus per-example outputs.

    Raises:
        DatasetError: If ``indices`` is empty.
    """
    if len(indices) == 0:
        raise DatasetError("Cannot evaluate an empty partition")
    if inputs is None:
        inputs = prepare_inputs(dataset, model.spec.input_size)
    index_array = np.asarray(indices, dtype=np.intp)
    labels = dataset.labels[index_array]
    scores = np.empty((len(index_array), model.spec.class_count), dtype=np.float32)
    starts = range(0, len(index_array), batch_size)
    for start in tqdm(starts, desc="evaluating", unit="batch", disable=not progress):
        chunk = index_array[start : start + batch_size]
        scores[start : start + len(chunk)] = forward_pass(model, inputs[chunk], Mode.INFER).probs
    loss, _ = sparse_ce_loss(scores, labels)
    predictions = scores.argmax(axis=1).astype(np.int64)
    accuracy = float(np.mean(predictions == labels))
    return EvaluationResult(
        loss=loss, accuracy=accuracy, predictions=predictions, labels=labels, scores=scores
    )


def evaluate_partition(
    model: Model,
    dataset: Dataset,
    partition: Partition,
    inputs: Tensor | None = None,
    progress: bool = False,
) -> EvaluationResult:
    if dataset.split is None:
        raise DatasetError("Dataset has no split assignment")
    indices = dataset.split.indices(partition)
    if not indices:
        raise DatasetError(f"Partition {partition.value} is empty")
    return evaluate(model, dataset, indices, inputs, progress=progress)


def train_loop(
    model: Model,
    dataset: Dataset,
    splits: SplitAssignment,
    config: TrainConfig,
    augment: AugmentParams | None = None,
    workers: int = 1,
    progress: bool = True,
) -> tuple[Model, History]:
    """
    Train ``model`` in place and return it with the per-epoch history.

    Each epoch shuffles the training indices with a seeded generator, augments every batch
    (the last, smaller batch included), runs forward in train mode, takes the fused
    softmax/cross-entropy gradient, backpropagates, applies Adam at ``lr_at(epoch)``, then
    measures the validation partition in inference mode without augmentation.

    Args:
        model (Model): Model to train; frozen layers are never updated.
        dataset (Dataset): Images and labels.
        splits (SplitAssignment): Train/val/test assignment.
        config (TrainConfig): Batch size, epochs, schedule, seed, shuffle.
        augment (AugmentParams | None): Training augmentation; defaults to AugmentParams().
        workers (int): Threads used for augmentation. Results do not depend on it.
        progress (bool): Show a tqdm progress bar over epochs.

    Returns:
        tuple[Model, History]: The trained model and its history.

    Raises:
        TrainingError: If the training or validation partition is empty, or the batch size
            exceeds the training partition.
        DivergenceError: If the loss or any activation becomes non-finite.
    """
    history = History()
    if config.epochs == 0:
        return model, history

    train_idx = np.asarray(splits.indices(Partition.TRAIN), dtype=np.intp)
    val_idx = splits.indices(Partition.VAL)
    if len(train_idx) == 0:
        raise TrainingError("Training partition is empty")
    if not val_idx:
        raise TrainingError("Validation partition is empty")
    if config.batch_size > len(train_idx):
        raise TrainingError(
            f"batch_size {config.batch_size} exceeds training partition size {len(train_idx)}"
        )

    augment = augment if augment is not None else AugmentParams()
    inputs = prepare_inputs(dataset, model.spec.input_size)
    labels = dataset.labels
    params = model.parameters()
    frozen = model.frozen_parameters()
    state = AdamState.zeros_like(params)
    shuffler = np.random.default_rng([config.seed, 0])
    logger.info(
        "Training on %d examples (%d val), %d epochs, batch size %d, %d frozen tensors",
        len(train_idx),
        len(val_idx),
        config.epochs,
        config.batch_size,
        len(frozen),
    )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        epochs = tqdm(range(config.epochs), desc="epochs", disable=not progress)
        for epoch in epochs:
            lr = lr_at(epoch, config)
            order = shuffler.permutation(train_idx) if config.shuffle else train_idx
            loss_sum, correct = 0.0, 0
            for batch, start in enumerate(range(0, len(order), config.batch_size)):
                chunk = order[start : start + config.batch_size]
                x = augment_batch(inputs, chunk, augment, config.seed, epoch, executor)
                y = labels[chunk]
                dropout_rng = np.random.default_rng([config.seed, 1, epoch, batch])
                try:
                    result = forward_pass(model, x, Mode.TRAIN, dropout_rng)
                    loss, grad_logits = sparse_ce_loss(result.probs, y)
                    if not np.isfinite(loss):
                        raise NonFiniteError(f"loss is {loss}")
                    grads = backward_pass(model, result, grad_logits)
                except NonFiniteError as e:
                    raise DivergenceError(epoch, batch, str(e)) from e
                adam_step(params, grads, state, lr, frozen)
                loss_sum += loss * len(chunk)
                correct += int(np.sum(result.probs.argmax(axis=1) == y))

            val = evaluate(model, dataset, val_idx, inputs)
            train_loss = loss_sum / len(order)
            train_acc = correct / len(order)
            history.append(train_loss, train_acc, val.loss, val.accuracy, lr)
            epochs.set_postfix(loss=f"{train_loss:.4f}", val_acc=f"{val.accuracy:.3f}")
            logger.debug(
                "epoch %d: train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f lr=%.2e",
                epoch,
                train_loss,
                train_acc,
                val.loss,
                val.accuracy,
                lr,
            )
    return model, history
