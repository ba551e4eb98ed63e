"""Desk-scale MNIST comparison of LeNet, Gabor-LeNet and regularized Gabor-LeNet.

Trains S, G and G+r (plus the free adversarial twins unless --skip-free),
attacks each with PGD and writes ``summary.json`` and ``results.csv`` under
``--out``. Finished runs are reused, so the acceptance suite and this script
share work when they point at the same directory.

    python scripts/reproduce_mnist.py --data-dir data --out runs
"""
from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from gabornet.attacks import append_result, report_dict
from gabornet.data import default_data_dir
from gabornet.experiments import DeskPlan, free_adv_runs, load_splits, robustness, standard_runs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", type=Path, default=default_data_dir())
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--attack-samples", type=int, default=1000)
    ap.add_argument("--skip-free", action="store_true", help="skip the free adversarial twins")
    ap.add_argument("--no-reuse", action="store_true", help="retrain even when a finished run exists")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    plan = DeskPlan(data_dir=args.data_dir, out_root=args.out, seed=args.seed, epochs=args.epochs)
    plan.attack = replace(plan.attack, max_samples=args.attack_samples)
    plan.free_attack = replace(plan.free_attack, max_samples=args.attack_samples)
    train, test = load_splits(args.data_dir)
    reuse = not args.no_reuse

    summary = {}
    results = args.out / "results.csv"
    for name, run in standard_runs(plan, train, test, reuse=reuse).items():
        rep = robustness(run, test, plan.attack)
        append_result(results, name, rep)
        entry = {"test_acc": run.test_acc, "train_cpu_seconds": run.train_seconds, "pgd": report_dict(rep)}
        if run.model.gabor_layers():
            entry["first_layer_bound"] = run.first_layer_bound()
        summary[name] = entry
    if not args.skip_free:
        for name, run in free_adv_runs(plan, train, test, reuse=reuse).items():
            rep = robustness(run, test, plan.free_attack)
            append_result(results, f"twin-{name}", rep)
            summary[f"twin-{name}"] = {"test_acc": run.test_acc, "pgd": report_dict(rep)}

    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for name, entry in summary.items():
        bound = f"  bound {entry['first_layer_bound']:.4f}" if "first_layer_bound" in entry else ""
        print(f"{name:14s} clean {entry['test_acc']:6.2f}%  adversarial {entry['pgd']['adv_acc']:6.2f}%{bound}")


if __name__ == "__main__":
    main()
