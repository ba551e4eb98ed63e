"""FGSM/PGD under an L-infinity budget and robustness metrics."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .config import AttackConfig
from .data import Dataset, append_csv_row
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

RESULTS_HEADER = ["model", "eps", "iters", "restarts", "clean_acc", "adv_acc", "flip_rate", "seed"]


def fgsm_step(x: np.ndarray, grad: np.ndarray, eps_step: float) -> np.ndarray:
    """``x + eps_step * sign(grad)`` with ``sign(0) = 0``."""
    x, grad = np.asarray(x, dtype=np.float64), np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise T.ShapeError(f"fgsm_step: x {x.shape} and grad {grad.shape} differ")
    return x + eps_step * np.sign(grad)


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Project onto ``{|x_adv - x|_inf <= eps} intersected with [0, 1]^d``."""
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _frozen(model):
    return model.frozen() if hasattr(model, "frozen") else _null()


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return None


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch."""
    xt = Tensor(x, requires_grad=True)
    with _frozen(model), T.Tape() as tape:
        loss = T.softmax_cross_entropy(model.forward(xt), y)
        tape.backward(loss)
    return xt.grad


def per_example_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -T.log_softmax_rows(logits)[np.arange(len(y)), y]


def _logits(model, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return model.forward(Tensor(x)).data


def pgd_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, rng: Rng | None = None) -> np.ndarray:
    """Untargeted L-infinity PGD on the cross-entropy of the true label.

    Each restart starts from a uniform point in the ball. Per example, the
    final iterate of a misclassifying restart is preferred (highest loss among
    those); otherwise the highest-loss final iterate is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("pgd_attack: inputs must lie in [0, 1]")
    rng = rng or Rng(cfg.seed)
    eps, step = cfg.epsilon, cfg.step
    best_x = x.copy()
    best_mis = np.zeros(len(x), dtype=bool)
    best_loss = np.full(len(x), -np.inf)
    for _ in range(cfg.restarts):
        xa = np.clip(x + rng.uniform(-eps, eps, x.shape), 0.0, 1.0)
        if eps > 0:
            for _ in range(cfg.iters):
                xa = project(fgsm_step(xa, input_gradient(model, xa, y), step), x, eps)
        logits = _logits(model, xa)
        loss = per_example_loss(logits, y)
        mis = logits.argmax(axis=1) != y
        better = (mis & ~best_mis) | ((mis == best_mis) & (loss > best_loss))
        best_x[better] = xa[better]
        best_mis |= mis
        best_loss = np.where(better, loss, best_loss)
    return best_x


def flip_rate(before: np.ndarray, after: np.ndarray) -> float:
    before, after = np.asarray(before), np.asarray(after)
    if len(before) == 0:
        raise ValueError("flip_rate of an empty set")
    return 100.0 * float((before != after).mean())


@dataclass
class RobustnessReport:
    clean_acc: float
    adv_acc: float
    flip_rate: float
    n_evaluated: int
    config: AttackConfig
    max_perturbation: float = 0.0

    def summary(self) -> str:
        c = self.config
        return (f"eps={c.epsilon:g} iters={c.iters} restarts={c.restarts} n={self.n_evaluated}: "
                f"clean {self.clean_acc:.2f}%  adversarial {self.adv_acc:.2f}%  flip rate {self.flip_rate:.2f}%")


def evaluate_robustness(model, data: Dataset, cfg: AttackConfig) -> RobustnessReport:
    data = data.head(cfg.max_samples)
    if len(data) == 0:
        raise ValueError("cannot evaluate robustness on an empty dataset")
    rng = Rng(cfg.seed)
    clean_pred, adv_pred = [], []
    max_pert = 0.0
    for s in range(0, len(data), cfg.batch_size):
        x, y = data.images[s:s + cfg.batch_size], data.labels[s:s + cfg.batch_size]
        xa = pgd_attack(model, x, y, cfg, rng)
        max_pert = max(max_pert, float(np.abs(xa - x).max()))
        clean_pred.append(_logits(model, x).argmax(axis=1))
        adv_pred.append(_logits(model, xa).argmax(axis=1))
    clean_pred, adv_pred = np.concatenate(clean_pred), np.concatenate(adv_pred)
    return RobustnessReport(
        clean_acc=100.0 * float((clean_pred == data.labels).mean()),
        adv_acc=100.0 * float((adv_pred == data.labels).mean()),
        flip_rate=flip_rate(clean_pred, adv_pred),
        n_evaluated=len(data),
        config=cfg,
        max_perturbation=max_pert,
    )


def append_result(path, model_name: str, report: RobustnessReport) -> None:
    c = report.config
    append_csv_row(path, RESULTS_HEADER, [model_name, float(c.epsilon), c.iters, c.restarts,
                                          report.clean_acc, report.adv_acc, report.flip_rate, c.seed])


def report_dict(report: RobustnessReport) -> dict:
    d = asdict(report)
    d["config"] = asdict(report.config)
    return d
