"""Central-difference check of every learnable scalar of a sequential model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import Model
from .tensor import Tensor


@dataclass
class GradCheckResult:
    n_checked: int
    worst_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    per_param: dict[str, float]
    failures: list[dict] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.worst_rel_err < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_model_gradients(model: Model, x: np.ndarray, y: np.ndarray, h: float = 1e-5,
                          floor: float = 1e-6, tol: float = 1e-4, fine_h: float = 1e-7) -> GradCheckResult:
    """Compare tape gradients of the mean cross-entropy with central differences.

    Perturbing a parameter of layer ``i`` only changes layers ``i`` onwards, so
    the cached input of layer ``i`` is reused and only the tail is recomputed.
    Every scalar whose relative error reaches ``tol`` is listed in ``failures``
    with its one-sided slopes at step ``h`` and a central difference at
    ``fine_h``. Unequal one-sided slopes mean a ReLU or max-pool kink lies
    within ``h`` of the current value.
    """
    model.zero_grad()
    with T.Tape() as tape:
        loss = T.softmax_cross_entropy(model.forward(Tensor(x)), y)
        tape.backward(loss)

    acts = [x]
    with T.no_grad():
        a = Tensor(x)
        for layer in model.layers:
            a = layer.forward(a)
            acts.append(a.data)

    per_param: dict[str, float] = {}
    failures: list[dict] = []
    worst = (-1.0, "", ())
    n = 0
    for li, layer in enumerate(model.layers):
        start = Tensor(acts[li])

        def value() -> float:
            with T.no_grad():
                return T.softmax_cross_entropy(model.forward_from(li, start), y).item()

        for name, p in layer.params().items():
            numeric = np.zeros_like(p.data)
            flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = value()
                flat[i] = old - h
                down = value()
                flat[i] = old
                nflat[i] = (up - down) / (2.0 * h)
            err = relative_error(p.grad, numeric, floor)
            for i in np.flatnonzero(err.reshape(-1) >= tol):
                old, base = flat[i], value()
                flat[i] = old + h
                up = value()
                flat[i] = old - h
                down = value()
                flat[i] = old + fine_h
                fine_up = value()
                flat[i] = old - fine_h
                fine_down = value()
                flat[i] = old
                fine = (fine_up - fine_down) / (2.0 * fine_h)
                failures.append({
                    "param": name, "index": int(i), "analytic": float(p.grad.reshape(-1)[i]),
                    "central": float(nflat[i]), "rel_err": float(err.reshape(-1)[i]),
                    "forward": (up - base) / h, "backward": (base - down) / h,
                    "fine_central": fine,
                    "fine_rel_err": float(relative_error(p.grad.reshape(-1)[i], fine, floor)),
                })
            n += err.size
            per_param[name] = float(err.max())
            if err.max() > worst[0]:
                worst = (float(err.max()), name, tuple(int(v) for v in np.unravel_index(err.argmax(), err.shape)))
    return GradCheckResult(n, worst[0], worst[1], worst[2], per_param, failures)
