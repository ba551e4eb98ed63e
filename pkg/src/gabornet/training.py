"""Regularized losses, momentum SGD and the (free adversarial) training loop."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import FreeAdvConfig, RegConfig, TrainConfig
from .data import Dataset, csv_text
from .gabor import GaborFamily
from .models import Model
from .spectral import family_bound
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

class TrainingDiverged(T.NonFiniteError):
    def __init__(self, epoch: int, batch: int, detail: str):
        self.epoch, self.batch = epoch, batch
        self.op, self.index = "training", (epoch, batch)
        FloatingPointError.__init__(self, f"non-finite value at epoch {epoch}, batch {batch}: {detail}")


def regularized_loss(ce: Tensor, families: list[GaborFamily], reg: RegConfig) -> Tensor:
    """Cross-entropy minus the scale reward; larger sigma tightens the Lipschitz bound."""
    if reg.mode == "none":
        return ce
    if not families:
        raise ValueError(f"regularizer {reg.mode!r} needs at least one Gabor family")
    terms = []
    for fam in families:
        if reg.mode == "sigma2":
            terms.append(T.square(fam.sigma))
        else:
            terms.append(T.square(T.scale(T.tanh(fam.sigma), reg.mu)))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.sub(ce, T.scale(T.reshape(total, ce.shape), reg.beta))


def decays(name: str) -> bool:
    """Weight decay touches weights and Gabor scales, never biases or shape parameters."""
    return name.endswith(".weight") or name.endswith(".alpha")


def sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    """``v <- momentum*v + (grad + wd*w)``; ``w <- w - lr*v``."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        g = p.grad + weight_decay * p.data if decays(name) else p.grad
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        p.data -= lr * v


def update_perturbation(delta: np.ndarray, input_grad: np.ndarray, eps: float) -> np.ndarray:
    """Free adversarial step: ``clip(delta + eps*sign(grad), -eps, eps)``."""
    return np.clip(delta + eps * np.sign(input_grad), -eps, eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    drops = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * 0.1 ** drops


def cap_sigmas(families: list[GaborFamily], cap: float | None) -> None:
    if cap is None:
        return
    for fam in families:
        s = fam.sigma.data
        if abs(float(s)) > cap:
            warnings.warn(f"sigma {float(s):.3f} clipped to +/-{cap}", RuntimeWarning, stacklevel=2)
            s[...] = math.copysign(cap, float(s))


def accuracy(model: Model, data: Dataset, batch_size: int = 500) -> float:
    if len(data) == 0:
        return float("nan")
    return 100.0 * float((model.predict(data.images, batch_size) == data.labels).mean())


@dataclass
class TrainLog:
    header: list[str]
    rows: list[list] = field(default_factory=list)

    def csv(self) -> str:
        return csv_text(self.header, self.rows)


def _header(model: Model) -> list[str]:
    p = len(model.families())
    return (["epoch", "lr", "train_loss", "train_acc", "test_acc"]
            + [f"sigma_{i}" for i in range(p)]
            + [f"lipschitz_bound_{i}" for i in range(p)])


def _train(model: Model, train: Dataset, config: TrainConfig, test: Dataset | None,
           out_dir, free: FreeAdvConfig | None) -> TrainLog:
    if len(train) == 0:
        raise ValueError("training set is empty")
    replays = free.replays if free and free.enabled else 1
    eps = free.epsilon if free and free.enabled else 0.0
    adversarial = free is not None and free.enabled
    params = model.params()
    families = model.families()
    grids = [(fam, layer.grid) for layer in model.gabor_layers() for fam in layer.families]
    velocity: dict[str, np.ndarray] = {}
    rng = Rng(config.seed)
    trainlog = TrainLog(_header(model))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best = -1.0
    outer = math.ceil(config.epochs / replays)
    B = config.batch_size
    delta = np.zeros((B,) + train.images.shape[1:])

    for epoch in range(outer):
        lr = lr_at(epoch * replays, config)
        order = rng.permutation(len(train))
        loss_sum, correct, seen = 0.0, 0, 0
        for b, start in enumerate(range(0, len(train), B)):
            idx = order[start:start + B]
            xb, yb = train.images[idx], train.labels[idx]
            n = len(idx)
            for _ in range(replays):
                x_in = np.clip(xb + delta[:n], 0.0, 1.0) if adversarial else xb
                xt = Tensor(x_in, requires_grad=adversarial)
                model.zero_grad()
                try:
                    with T.Tape() as tape:
                        logits = model.forward(xt)
                        ce = T.softmax_cross_entropy(logits, yb)
                        loss = regularized_loss(ce, families, config.reg)
                        tape.backward(loss)
                except T.NonFiniteError as e:
                    raise TrainingDiverged(epoch, b, str(e)) from e
                sgd_step(params, velocity, lr, config.momentum, config.weight_decay)
                cap_sigmas(families, config.sigma_cap)
                for name, p in params.items():
                    if not np.isfinite(p.data).all():
                        raise TrainingDiverged(epoch, b, f"parameter {name}")
                if adversarial:
                    delta[:n] = update_perturbation(delta[:n], xt.grad, eps)
                loss_sum += ce.item() * n
                correct += int((logits.data.argmax(axis=1) == yb).sum())
                seen += n
        test_acc = accuracy(model, test, config.eval_batch) if test is not None else float("nan")
        sigmas = [fam.sigma.item() for fam in families]
        bounds = [family_bound(fam, grid) for fam, grid in grids]
        trainlog.rows.append([epoch, lr, loss_sum / seen, 100.0 * correct / seen, test_acc]
                             + sigmas + bounds)
        log.info("epoch %d lr %.4g loss %.4f train %.2f%% test %.2f%%",
                 epoch, lr, loss_sum / seen, 100.0 * correct / seen, test_acc)
        if out is not None:
            (out / "metrics.csv").write_text(trainlog.csv(), encoding="utf-8")
            if test is not None and test_acc > best:
                best = test_acc
                save_checkpoint(model, out / "best.ckpt", config.reg, config.seed)

    if out is not None:
        (out / "metrics.csv").write_text(trainlog.csv(), encoding="utf-8")
        save_checkpoint(model, out / "final.ckpt", config.reg, config.seed)
        if best < 0:
            save_checkpoint(model, out / "best.ckpt", config.reg, config.seed)
    return trainlog


def fit(model: Model, train: Dataset, config: TrainConfig, test: Dataset | None = None,
        out_dir=None) -> TrainLog:
    """Mini-batch SGD with per-seed shuffling; one metrics row per epoch."""
    return _train(model, train, config, test, out_dir, None)


def free_adv_fit(model: Model, train: Dataset, config: TrainConfig, free: FreeAdvConfig,
                 test: Dataset | None = None, out_dir=None) -> TrainLog:
    """Free adversarial training: each mini-batch is replayed ``free.replays``
    times, updating weights and a persistent perturbation from the same
    backward pass. ``config.epochs`` counts effective passes, so the outer
    loop runs ``ceil(epochs / replays)`` times."""
    return _train(model, train, config, test, out_dir, free)
