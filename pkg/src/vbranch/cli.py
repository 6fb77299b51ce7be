"""Command-line entry point: ``vbranch <command> [flags]``.

Every command takes its settings from an optional ``--config`` file of
``key = value`` lines, overridden by flags.  When the command writes to an
output directory the merged settings are echoed to ``config.resolved``
there before any work starts; feeding that file back through ``--config``
repeats the run.

Exit codes: 0 success, 1 validation failure (bad input data or config,
failed self-check), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path


from .errors import ConfigError, UnassignableError, VBranchError

log = logging.getLogger("vbranch")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "VBRANCH_THREADS"


def _dims(text: str) -> tuple:
    parts = str(text).lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"expected HxW, got {text!r}") from None
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise ValueError(f"expected HxW, got {text!r}")
    return dims


def _branches(text: str) -> list:
    """``1..8`` or ``1,2,4``."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = (int(p) for p in text.split(".."))
            out = list(range(lo, hi + 1))
        else:
            out = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ValueError(f"bad branch list {text!r}") from None
    if not out or min(out) < 1:
        raise ValueError(f"bad branch list {text!r}")
    return out


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _text(v):
    return str(v)


# Per command: (key, type, default, help).  A default of ``None`` marks a
# required key unless the command handles its absence.
COMMON = [
    ("seed", int, 0, "seed for every random stream"),
    ("threads", int, None, f"worker cap (falls back to ${THREADS_ENV}, then 1)"),
]

COMMANDS = {
    "partition": ("show the neuron partition for (d, b, delta)", [
        ("d", int, None, "layer width; omit to show the toy model's branched layers"),
        ("b", int, None, "number of branches"),
        ("delta", float, None, "sharing degree in [0, 1]"),
    ]),
    "heatmap": ("export keypoint heatmaps as CSV grids", [
        ("keypoints", _text, None, "keypoints .jsonl file"),
        ("region", _text, None, "neck, hip or ankle"),
        ("sigma", float, 1.5, "heatmap width sigma_h in grid cells"),
        ("dims", _dims, "8x4", "heatmap grid HxW"),
        ("image_dims", _dims, None, "image HxW when records carry none"),
        ("max_figures", int, 12, "samples shown in heatmaps.png"),
    ]),
    "orient": ("assign samples to front/side/back from keypoints", [
        ("keypoints", _text, None, "keypoints .jsonl file"),
    ]),
    "synth": ("render a synthetic multi-mode dataset", [
        ("ids", int, None, "number of identities"),
        ("per_id", int, None, "samples per identity"),
        ("modes", int, 3, "orientation modes"),
        ("noise", float, 0.05, "pixel and keypoint noise std"),
        ("image_dims", _dims, "32x16", "image HxW"),
        ("train_fraction", float, 0.5, "fraction of identities in the train split"),
        ("cameras", int, 2, "camera count"),
    ]),
    "train": ("train a model on a dataset directory", [
        ("data", _text, None, "dataset directory holding manifest.csv"),
        ("steps", int, None, "stop after this many steps instead of epochs * steps_per_epoch"),
    ]),
    "eval": ("rank the query split against the gallery", [
        ("checkpoint", _text, None, "checkpoint .vbck file"),
        ("manifest", _text, None, "manifest.csv of the dataset"),
        ("flip", _flag, False, "average embeddings with horizontal flips"),
        ("per_query", _flag, False, "also write per_query_ap.csv"),
    ]),
    "bench": ("time training and inference across branch counts", [
        ("branches", _branches, "1..8", "branch counts, e.g. 1..8 or 1,2,4"),
        ("reps", int, 5, "timing repetitions (median is reported)"),
        ("delta", float, 0.0, "sharing degree"),
        ("infer_samples", int, 1000, "samples per inference timing"),
    ]),
    "verify": ("run the gradient, oracle and invariant suites", []),
}


def _train_keys():
    from .trainer import TrainConfig

    conv = {"int": int, "float": float, "str": _text}
    defaults = TrainConfig()
    return [(f.name, conv[f.type], getattr(defaults, f.name), f"training setting {f.name}")
            for f in fields(TrainConfig) if f.name != "seed"]


def _keys(command: str) -> list:
    keys = list(COMMANDS[command][1])
    if command == "train":
        keys += _train_keys()
    return keys + COMMON


class _Parser(argparse.ArgumentParser):
    """Usage errors print the full help, not just the usage line."""

    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"\n{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vbranch", description="Virtual-branch ensembles for metric learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    parser.commands = {}
    for name, (help_text, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        parser.commands[name] = p
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--out", help="output directory (a file for orient)")
        for key, typ, default, help_ in _keys(name):
            flag = "--" + key.replace("_", "-")
            if typ is _flag:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                # values stay as text here and are converted once, after merging with the file
                p.add_argument(flag, dest=key, default=None, metavar=key.upper(), help=help_)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and flags, then convert types."""
    from .config import read_config

    file_values = read_config(args.config) if args.config else {}
    named = file_values.pop("command", command)
    if named != command:
        raise ConfigError(f"{args.config}: written for command {named!r}, not {command!r}")
    known = {k for k, *_ in _keys(command)} | {"out"}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise ConfigError(f"{args.config}: unknown key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for key, typ, default, _ in _keys(command) + [("out", _text, None, "")]:
        raw = getattr(args, key, None)
        if raw is None:
            raw = file_values.get(key, default)
        if raw is None:
            out[key] = None
            continue
        try:
            out[key] = typ(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    if out.get("threads") is None:
        env = os.environ.get(THREADS_ENV)
        try:
            out["threads"] = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"${THREADS_ENV} must be an integer, got {env!r}") from None
    if out["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return out


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return "x".join(str(i) for i in v)
    if isinstance(v, list):
        return ",".join(str(i) for i in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolved_text(command: str, values: dict) -> str:
    lines = [f"command = {command}"]
    lines += [f"{k} = {_format_value(v)}" for k, v in values.items() if v is not None and k != "threads"]
    return "\n".join(lines) + "\n"


def _require(values, *keys):
    missing = [k for k in keys if values.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(command, values, required=True) -> Path | None:
    if values.get("out") is None:
        if required:
            raise ConfigError("missing required setting: --out")
        return None
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(resolved_text(command, values))
    return out


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


# ------------------------------------------------------------------ commands

def cmd_partition(v) -> int:
    from .branching import BranchPlan, ModelConfig

    _require(v, "b", "delta")
    out = _out_dir("partition", v, required=False)
    layers = [("layer", v["d"])] if v["d"] is not None else ModelConfig().branched_layers()
    table = BranchPlan.build(layers, v["b"], v["delta"]).table()
    print(table)
    if out:
        (out / "partition.txt").write_text(table + "\n")
    return EXIT_OK


def cmd_heatmap(v) -> int:
    from .datapipe import read_keypoints
    from .objectives import REGIONS, region_heatmap
    from .plotting import plot_heatmaps

    _require(v, "keypoints", "region")
    if v["region"] not in REGIONS:
        raise ConfigError(f"region must be one of {REGIONS}, got {v['region']!r}")
    if len(v["dims"]) != 2:
        raise ConfigError("dims must be HxW")
    out = _out_dir("heatmap", v)
    records = read_keypoints(_existing(v["keypoints"], "keypoints file"))
    grids, titles, skipped = [], [], []
    for sid, kp in records.items():
        hw = v["image_dims"][:2] if v["image_dims"] else kp.image_size
        if hw is None:
            raise ConfigError(f"{sid}: no image size in the record; pass --image-dims")
        try:
            hm = region_heatmap(kp.present(), v["region"], hw, v["sigma"], v["dims"])
        except VBranchError as exc:
            log.warning("skipping %s: %s", sid, exc)
            skipped.append(sid)
            continue
        (out / f"{sid}_{v['region']}.csv").write_text(hm.to_csv())
        grids.append(hm.grid)
        titles.append(sid)
    if grids:
        plot_heatmaps(grids[: v["max_figures"]], titles[: v["max_figures"]], out / "heatmaps.png")
    print(f"wrote {len(grids)} heatmaps to {out} ({len(skipped)} skipped)")
    return EXIT_OK if grids else EXIT_INVALID


def cmd_orient(v) -> int:
    from .datapipe import assign_subset, orientation_angle, read_keypoints

    _require(v, "keypoints", "out")
    records = read_keypoints(_existing(v["keypoints"], "keypoints file"))
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    counts: dict = {}
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "theta", "subset"])
        for sid, kp in records.items():
            try:
                theta = orientation_angle(kp)
            except UnassignableError:
                w.writerow([sid, "", "unassignable"])
                counts["unassignable"] = counts.get("unassignable", 0) + 1
                continue
            subset = assign_subset(theta)
            counts[subset] = counts.get(subset, 0) + 1
            w.writerow([sid, f"{theta:.9f}", subset])
    print("  ".join(f"{k}={n}" for k, n in sorted(counts.items())))
    return EXIT_OK


def cmd_synth(v) -> int:
    from .datapipe import generate_synthetic
    from .trainer import stream

    _require(v, "ids", "per_id")
    out = _out_dir("synth", v)
    ds = generate_synthetic(v["ids"], v["per_id"], v["modes"], v["noise"], image_hw=v["image_dims"][:2],
                            rng=stream(v["seed"], "synth"), train_fraction=v["train_fraction"],
                            cameras=v["cameras"])
    ds.save(out)
    print(f"wrote {len(ds.manifest)} samples of {v['ids']} identities to {out}")
    return EXIT_OK


def cmd_train(v) -> int:
    from .datapipe import Dataset
    from .plotting import plot_history
    from .trainer import TrainConfig, new_model, train, write_history

    _require(v, "data")
    cfg = TrainConfig(**{f.name: v[f.name] for f in fields(TrainConfig)}).validate()
    if v["steps"] is not None and v["steps"] < 1:
        raise ConfigError("steps must be >= 1")
    out = _out_dir("train", v)
    data = Dataset.load(_existing(v["data"], "dataset directory"))
    h, w = data.image_hw()
    model = new_model(cfg, (h, w, 3))
    result = train(model, data, cfg, steps=v["steps"])
    result.checkpoint.save(out / "checkpoint.vbck")
    write_history(out / "loss_history.csv", result.history)
    plot_history(result.history, out / "loss.png")
    last = result.history[-1]
    print(f"{cfg.scheme}: {len(result.history)} steps, final triplet {last['triplet']:.4f} total {last['total']:.4f}")
    return EXIT_OK


def cmd_eval(v) -> int:
    from .datapipe import Dataset
    from .evaluator import evaluate
    from .plotting import plot_cmc
    from .trainer import Checkpoint, model_from_checkpoint

    _require(v, "checkpoint", "manifest")
    out = _out_dir("eval", v)
    manifest = _existing(v["manifest"], "manifest")
    model = model_from_checkpoint(Checkpoint.load(_existing(v["checkpoint"], "checkpoint")))
    data = Dataset.load(manifest.parent, manifest)
    report = evaluate(model, data, flip=v["flip"], threads=v["threads"])
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.txt").write_text(report.to_text())
    if v["per_query"]:
        (out / "per_query_ap.csv").write_text(report.per_query_csv())
    plot_cmc(report, out / "cmc.png")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_bench(v) -> int:
    from .branching import ModelConfig
    from .evaluator import bench_branches, bench_csv
    from .plotting import plot_bench

    if v["reps"] < 1 or v["infer_samples"] < 1:
        raise ConfigError("reps and infer_samples must be >= 1")
    out = _out_dir("bench", v)
    rows = bench_branches(ModelConfig(), v["branches"], v["reps"], v["delta"],
                          infer_samples=v["infer_samples"], seed=v["seed"])
    (out / "bench.csv").write_text(bench_csv(rows))
    plot_bench(rows, out / "bench.png")
    print(bench_csv(rows), end="")
    return EXIT_OK


def cmd_verify(v) -> int:
    from .verify import run_all

    out = _out_dir("verify", v, required=False)
    lines, ok_all = [], True
    for name, ok, detail, secs in run_all():
        ok_all &= ok
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name:<20} {secs:6.2f}s  {detail}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if out:
        (out / "verify.txt").write_text(text)
    return EXIT_OK if ok_all else EXIT_INVALID


HANDLERS = {
    "partition": cmd_partition, "heatmap": cmd_heatmap, "orient": cmd_orient, "synth": cmd_synth,
    "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # report against the subcommand so its own flags are listed
            parser.commands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(args.command, args)
        return HANDLERS[args.command](values)
    except (VBranchError, OSError) as exc:
        print(f"vbranch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
