"""Desk-scale MNIST experiments: standard vs Gabor vs regularized Gabor LeNet.

Each training run lives in its own directory under ``out_root`` and is
skipped when a finished run with an identical configuration is already there,
so the acceptance suite and ``scripts/reproduce_mnist.py`` share results.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attacks import RobustnessReport, evaluate_robustness
from .checkpoint import load_checkpoint
from .config import AttackConfig, FreeAdvConfig, RegConfig, TrainConfig
from .data import Dataset, load_mnist
from .models import Model, build_model
from .spectral import family_bound
from .training import accuracy, fit, free_adv_fit

log = logging.getLogger(__name__)

RUN_MARKER = "run-config.json"
TIMING = "timing.json"  # kept out of metrics.csv so reruns compare byte-for-byte


@dataclass
class DeskPlan:
    """Settings for the desk-scale reproduction. Defaults match the acceptance criteria."""

    data_dir: Path
    out_root: Path
    seed: int = 0
    epochs: int = 20
    milestones: tuple[int, ...] = (10, 15)
    reg: RegConfig = field(default_factory=lambda: RegConfig("tanh", 1e-3, 3.0))
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.1, iters=50, restarts=2, max_samples=1000))
    free_subset: int = 10_000
    free_replays: int = 4
    free_eps: float = 0.1
    free_epochs: int = 20
    free_attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.2, iters=50, restarts=2, max_samples=1000))
    free_arch: str = "lenet"

    def train_config(self, reg: RegConfig | None = None, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs if epochs is None else epochs, milestones=self.milestones,
                           seed=self.seed, reg=reg or RegConfig())


@dataclass
class RunResult:
    name: str
    model: Model
    out_dir: Path
    test_acc: float
    train_seconds: float = 0.0

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.csv"

    def first_layer_bound(self) -> float:
        layers = self.model.gabor_layers()
        if not layers:
            raise ValueError(f"{self.name} has no Gabor layer")
        return max(family_bound(f, layers[0].grid) for f in layers[0].families)


def _describe(arch: str, cfg: TrainConfig, free: FreeAdvConfig | None, n_train: int) -> dict:
    d = {"arch": arch, "train": asdict(cfg), "n_train": n_train}
    d["train"]["milestones"] = list(cfg.milestones)
    d["free"] = asdict(free) if free else None
    return d


def train_run(name: str, arch: str, cfg: TrainConfig, train: Dataset, test: Dataset, out_root,
              free: FreeAdvConfig | None = None, reuse: bool = True) -> RunResult:
    """Train (or reuse) one model; writes metrics.csv, best.ckpt and final.ckpt."""
    out = Path(out_root) / name
    desc = _describe(arch, cfg, free, len(train))
    marker = out / RUN_MARKER
    timing = out / TIMING
    if reuse and marker.exists() and (out / "final.ckpt").exists():
        if json.loads(marker.read_text(encoding="utf-8")) == desc:
            log.info("reusing finished run %s", out)
            model, _, _ = load_checkpoint(out / "final.ckpt")
            seconds = json.loads(timing.read_text(encoding="utf-8"))["train_seconds"]
            return RunResult(name, model, out, accuracy(model, test), seconds)
    marker.unlink(missing_ok=True)
    model = build_model(arch, cfg.seed)
    start = time.process_time()
    if free is not None:
        free_adv_fit(model, train, cfg, free, test=test, out_dir=out)
    else:
        fit(model, train, cfg, test=test, out_dir=out)
    seconds = time.process_time() - start
    timing.write_text(json.dumps({"train_seconds": seconds}) + "\n", encoding="utf-8")
    marker.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(name, model, out, accuracy(model, test), seconds)


def load_splits(data_dir) -> tuple[Dataset, Dataset]:
    return load_mnist(data_dir, "train"), load_mnist(data_dir, "test")


def standard_runs(plan: DeskPlan, train: Dataset, test: Dataset, out_root=None,
                  reuse: bool = True) -> dict[str, RunResult]:
    """S (LeNet), G (Gabor-LeNet) and G+r (Gabor-LeNet with the tanh penalty)."""
    root = Path(out_root or plan.out_root)
    return {
        "S": train_run("S", "lenet", plan.train_config(), train, test, root, reuse=reuse),
        "G": train_run("G", "lenet_gabor", plan.train_config(), train, test, root, reuse=reuse),
        "G+r": train_run("G+r", "lenet_gabor", plan.train_config(plan.reg), train, test, root, reuse=reuse),
    }


def free_adv_runs(plan: DeskPlan, train: Dataset, test: Dataset, out_root=None,
                  reuse: bool = True) -> dict[str, RunResult]:
    """A free adversarially trained model and its naturally trained twin on a training subset."""
    root = Path(out_root or plan.out_root)
    subset = train.head(plan.free_subset)
    cfg = plan.train_config(epochs=plan.free_epochs)
    free = FreeAdvConfig(replays=plan.free_replays, epsilon=plan.free_eps)
    return {
        "natural": train_run("twin-natural", plan.free_arch, cfg, subset, test, root, reuse=reuse),
        "free": train_run("twin-free", plan.free_arch, cfg, subset, test, root, free=free, reuse=reuse),
    }


def robustness(run: RunResult, test: Dataset, cfg: AttackConfig) -> RobustnessReport:
    report = evaluate_robustness(run.model, test, cfg)
    log.info("%s: %s", run.name, report.summary())
    return report
