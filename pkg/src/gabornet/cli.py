"""Command-line entry point: ``gabornet <subcommand> ...``.

Settings resolve in increasing priority: built-in defaults, ``--preset``,
the ``--config`` JSON file, then explicit flags. Every run writes the
resolved settings to ``resolved-config.json`` next to its outputs; passing
that file back through ``--config`` repeats the run.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import append_result, evaluate_robustness
from .checkpoint import load_checkpoint
from .config import AttackConfig, FreeAdvConfig, RegConfig, TrainConfig
from .data import DataError, Dataset, default_data_dir, fetch_mnist, load_mnist, synthetic_bars, write_csv
from .data import DEFAULT_BASE_URL
from .gabor import bank_values
from .models import Conv2d, GaborLayer, Linear, build_model
from .spectral import gabor_bound_vs_exact, gabor_layer_spectrum, multichannel_spectrum, SpectrumReport
from .spectral import spectrum_summary_csv
from .training import fit, free_adv_fit

log = logging.getLogger("gabornet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED = "resolved-config.json"
SYNTHETIC_TRAIN = 512
MODEL_TAGS = {"lenet": "lenet", "lenet-gabor": "lenet_gabor", "tiny": "tiny_cnn"}
PRESETS = {
    "paper-mnist": {
        "train": {"epochs": 90, "milestones": [30, 60]},
        "attack": {"iters": 200, "restarts": 10},
    },
}

# Per-command defaults. Keys double as the JSON config schema.
DEFAULTS = {
    "fetch-data": {"data_dir": None, "base_url": DEFAULT_BASE_URL},
    "train": {
        "model": "tiny", "data": "synthetic", "data_dir": None, "n_train": None, "n_test": 256,
        "epochs": 20, "milestones": [10, 15], "lr": 1e-2, "momentum": 0.9, "weight_decay": 5e-4,
        "batch_size": 128, "reg": "none", "beta": 1e-3, "mu": 3.0, "sigma_cap": 25.0,
        "free_adv": False, "replays": 8, "eps": 0.1, "seed": 0, "out": None,
    },
    "attack": {
        "checkpoint": None, "data": "mnist", "data_dir": None, "n_test": 256, "eps": 0.1,
        "step": None, "iters": 50, "restarts": 2, "max_samples": None, "batch_size": 250,
        "seed": 0, "out": "results.csv",
    },
    "analyze": {"checkpoint": [], "layer": None, "input_size": [28, 28], "out": "spectra.csv"},
    "export-filters": {"checkpoint": None, "layer": None, "out": None, "format": "csv"},
}
# Output locations are not part of a run's identity and stay out of resolved configs.
NOT_RESOLVED = {"out", "config", "preset", "verbose", "command"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with settings; flags override it")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="gabornet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch-data", help="download and verify MNIST")
    _add_common(p)
    p.add_argument("--data-dir", default=S, help="destination (default: $GABOR_DATA_DIR or ./data)")
    p.add_argument("--base-url", default=S)

    p = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    _add_common(p)
    p.add_argument("--model", choices=sorted(MODEL_TAGS), default=S)
    p.add_argument("--data", choices=["mnist", "synthetic"], default=S)
    p.add_argument("--data-dir", default=S)
    p.add_argument("--n-train", type=int, default=S,
                   help="synthetic: number of images (default 512); mnist: first N training images (default all)")
    p.add_argument("--n-test", type=int, default=S, help="synthetic test-set size")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--milestones", type=int, nargs="*", default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--momentum", type=float, default=S)
    p.add_argument("--weight-decay", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--reg", choices=["none", "sigma2", "tanh"], default=S)
    p.add_argument("--beta", type=float, default=S)
    p.add_argument("--mu", type=float, default=S)
    p.add_argument("--sigma-cap", type=float, default=S)
    p.add_argument("--free-adv", action="store_true", default=S)
    p.add_argument("--replays", type=int, default=S)
    p.add_argument("--eps", type=float, default=S, help="free adversarial training budget")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--preset", choices=sorted(PRESETS))

    p = sub.add_parser("attack", help="PGD robustness evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--data", choices=["mnist", "synthetic"], default=S)
    p.add_argument("--data-dir", default=S)
    p.add_argument("--n-test", type=int, default=S, help="synthetic test-set size")
    p.add_argument("--eps", type=float, default=S)
    p.add_argument("--step", type=float, default=S, help="step size (default eps/10)")
    p.add_argument("--iters", type=int, default=S)
    p.add_argument("--restarts", type=int, default=S)
    p.add_argument("--max-samples", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="results CSV (one row appended per run)")
    p.add_argument("--preset", choices=sorted(PRESETS))

    p = sub.add_parser("analyze", help="closed-form bounds and exact spectra of a layer")
    _add_common(p)
    p.add_argument("--checkpoint", nargs="+", default=S)
    p.add_argument("--layer", default=S, help="layer name (default: first layer)")
    p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"), default=S)
    p.add_argument("--out", default=S)

    p = sub.add_parser("export-filters", help="write first-layer filters as CSV or PGM images")
    _add_common(p)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--layer", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--format", choices=["csv", "pgm"], default=S)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, preset, config file and explicit flags (later wins)."""
    cmd = args.command
    settings = dict(DEFAULTS[cmd])
    preset = getattr(args, "preset", None)
    if preset:
        settings.update(PRESETS[preset].get(cmd, {}))
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise DataError(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config} is not valid JSON: {e}") from e
        if not isinstance(file_cfg, dict):
            raise UsageError(f"{args.config} must hold a JSON object")
        if file_cfg.pop("command", cmd) != cmd:
            raise UsageError(f"{args.config} was written for another subcommand")
        unknown = sorted(set(file_cfg) - set(settings))
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        settings.update(file_cfg)
    for key, value in vars(args).items():
        if key not in ("command", "config", "preset", "verbose"):
            settings[key] = value
    if "data_dir" in settings and settings["data_dir"] is None:
        settings["data_dir"] = str(default_data_dir())
    return settings


def write_resolved(settings: dict, command: str, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    body = {"command": command}
    body.update({k: v for k, v in settings.items() if k not in NOT_RESOLVED})
    (directory / RESOLVED).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) in (None, [])]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# ------------------------------------------------------------------ commands

def cmd_fetch(s: dict) -> int:
    paths = fetch_mnist(s["data_dir"], s["base_url"])
    for p in paths.values():
        print(p)
    return EXIT_OK


def _datasets(s: dict) -> tuple[Dataset, Dataset]:
    if s["data"] == "synthetic":
        return (synthetic_bars(s["n_train"] or SYNTHETIC_TRAIN, 4, s["seed"], split="train"),
                synthetic_bars(s["n_test"], 4, s["seed"] + 1, split="test"))
    train, test = load_mnist(s["data_dir"], "train"), load_mnist(s["data_dir"], "test")
    return train.head(s["n_train"]), test


def cmd_train(s: dict) -> int:
    _require(s, "out")
    if s["model"] not in MODEL_TAGS:
        raise UsageError(f"unknown model {s['model']!r}")
    try:
        cfg = TrainConfig(lr=s["lr"], momentum=s["momentum"], weight_decay=s["weight_decay"],
                          batch_size=s["batch_size"], epochs=s["epochs"], milestones=tuple(s["milestones"]),
                          seed=s["seed"], reg=RegConfig(s["reg"], s["beta"], s["mu"]),
                          sigma_cap=s["sigma_cap"])
        free = FreeAdvConfig(s["replays"], s["eps"]) if s["free_adv"] else None
    except ValueError as e:
        raise UsageError(str(e)) from e
    train, test = _datasets(s)
    out = Path(s["out"])
    write_resolved(s, "train", out)
    model = build_model(MODEL_TAGS[s["model"]], s["seed"])
    if free:
        trainlog = free_adv_fit(model, train, cfg, free, test=test, out_dir=out)
    else:
        trainlog = fit(model, train, cfg, test=test, out_dir=out)
    if trainlog.rows:
        last = trainlog.rows[-1]
        print(f"epoch {last[0]}: train_loss {last[2]:.4f} train_acc {last[3]:.2f}% test_acc {last[4]:.2f}%")
    print(f"wrote {out / 'metrics.csv'}, {out / 'best.ckpt'}, {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_attack(s: dict) -> int:
    _require(s, "checkpoint", "out")
    model, _, _ = load_checkpoint(s["checkpoint"])
    if s["data"] == "synthetic":
        test = synthetic_bars(s["n_test"], 4, s["seed"] + 1, split="test")
    else:
        test = load_mnist(s["data_dir"], "test")
    try:
        cfg = AttackConfig(s["eps"], s["step"], s["iters"], s["restarts"], s["seed"],
                           s["max_samples"], s["batch_size"])
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(s["out"])
    write_resolved(s, "attack", out.parent)
    report = evaluate_robustness(model, test, cfg)
    append_result(out, _label(Path(s["checkpoint"])), report)
    print(report.summary())
    return EXIT_OK


def _label(path: Path) -> str:
    return f"{path.parent.name}/{path.stem}" if path.parent.name else path.stem


def _layer(model, name):
    try:
        return model.layer(name or model.first_layer_name())
    except KeyError as e:
        raise UsageError(str(e.args[0])) from e


def cmd_analyze(s: dict) -> int:
    _require(s, "checkpoint", "out")
    H, W = (int(v) for v in s["input_size"])
    if H < 1 or W < 1:
        raise UsageError("--input-size must be positive")
    out = Path(s["out"])
    reports: list[SpectrumReport] = []
    bound_rows, value_rows = [], []
    for ckpt in s["checkpoint"]:
        path = Path(ckpt)
        model, _, _ = load_checkpoint(path)
        layer = _layer(model, s["layer"])
        tag = f"{_label(path)}:{layer.name}"
        if isinstance(layer, GaborLayer):
            rep = gabor_layer_spectrum(bank_values(layer.spec, layer.families), H, W, tag)
            for row in gabor_bound_vs_exact(layer.families, layer.grid, H, W):
                bound_rows.append([tag, row["family"], row["rotation"], row["theta"], row["sigma"],
                                   row["gamma"], row["bound"], row["scaled_bound"], row["exact"],
                                   int(row["axis_aligned"])])
        elif isinstance(layer, Conv2d):
            rep = multichannel_spectrum(layer.weight.data, H, W, tag)
        elif isinstance(layer, Linear):
            rep = SpectrumReport(np.linalg.svd(layer.weight.data, compute_uv=False), tag)
        else:
            raise UsageError(f"layer {layer.name!r} has no weights to analyse")
        reports.append(rep)
        value_rows.extend([tag, i, v] for i, v in enumerate(rep.values))
        print(f"{tag}: lipschitz {rep.lipschitz:.6f} median {rep.median:.6f} ({rep.values.size} values)")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(spectrum_summary_csv(reports), encoding="utf-8")
    stem = out.with_suffix("")
    write_csv(f"{stem}_values.csv", ["layer_id", "index", "value"], value_rows)
    if bound_rows:
        write_csv(f"{stem}_bounds.csv", ["layer_id", "family", "rotation", "theta", "sigma", "gamma",
                                         "bound", "scaled_bound", "exact", "axis_aligned"], bound_rows)
    write_resolved(s, "analyze", out.parent)
    return EXIT_OK


def write_pgm(path: Path, img: np.ndarray) -> None:
    """8-bit binary PGM, min-max normalised; constant images become mid-grey."""
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        pix = np.rint(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)
    else:
        pix = np.full(img.shape, 128, dtype=np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pix.tobytes())


def layer_filters(layer) -> tuple[np.ndarray, str]:
    """Filters as ``[a, b, k, k]`` plus the meaning of the two leading axes."""
    if isinstance(layer, GaborLayer):
        bank = bank_values(layer.spec, layer.families)[:, 0]
        r = layer.spec.r
        return bank.reshape(len(layer.families), r, *bank.shape[1:]), "family,rotation"
    if isinstance(layer, Conv2d):
        return layer.weight.data, "out_channel,in_channel"
    raise UsageError(f"layer {layer.name!r} is not convolutional")


def cmd_export(s: dict) -> int:
    _require(s, "checkpoint", "out")
    model, _, _ = load_checkpoint(s["checkpoint"])
    filters, axes = layer_filters(_layer(model, s["layer"]))
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    a_name, b_name = axes.split(",")
    if s["format"] == "csv":
        rows = [[a, b, i, j, filters[a, b, i, j]]
                for a in range(filters.shape[0]) for b in range(filters.shape[1])
                for i in range(filters.shape[2]) for j in range(filters.shape[3])]
        write_csv(out / "filters.csv", [a_name, b_name, "row", "col", "value"], rows)
    else:
        for a in range(filters.shape[0]):
            for b in range(filters.shape[1]):
                write_pgm(out / f"filter_{a:02d}_{b:02d}.pgm", filters[a, b])
    write_resolved(s, "export-filters", out)
    print(f"wrote {filters.shape[0] * filters.shape[1]} filters to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = resolve(args)
        if args.command == "fetch-data":
            return cmd_fetch(settings)
        if args.command == "train":
            return cmd_train(settings)
        if args.command == "attack":
            return cmd_attack(settings)
        if args.command == "analyze":
            return cmd_analyze(settings)
        return cmd_export(settings)
    except UsageError as e:
        print(f"gabornet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except T.NonFiniteError as e:
        print(f"gabornet {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"gabornet {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
