"""
Command-line front end: ``advforge {train,attack,eval,surface}``.

Every command writes a JSON manifest next to its outputs holding the fully
resolved arguments, seeds, sha256 digests of inputs and outputs, the toolkit
version and the wall-clock duration. Passing that manifest back with
``--manifest`` (or to ``train --config``) reruns the command with the same
arguments; explicit flags still win.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .attacks import AttackSpec, attack_batches
from .data import (IdxError, Dataset, TRAIN_FILES, TEST_FILES, load_idx, load_mnist, read_csv,
                   subset, write_csv, write_idx)
from .defense import CONFIG_KEYS, ConfigError, TrainConfig, train
from .evaluation import (EvalMatrix, accuracy, loss_surface, transfer_matrix, whitebox_matrix)
from .modelio import ModelFormatError, load_model, save_model
from .nn import NumericError, ShapeError, check_finite, mnist_cnn

log = logging.getLogger("advforge")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

MANIFEST_VERSION = 1


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def _digests(paths):
    return {os.path.abspath(p): sha256_file(p) for p in paths}


def write_json_atomic(obj, path):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _data_dir(args):
    d = args.get("data_dir") or os.environ.get("ADVFORGE_DATA")
    if not d:
        raise UsageError("no data directory: pass --data-dir or set ADVFORGE_DATA")
    if not os.path.isdir(d):
        raise FileNotFoundError(f"data directory {d} does not exist")
    return os.path.abspath(d)


def _split_files(data_dir, split):
    names = TRAIN_FILES if split == "train" else TEST_FILES
    out = []
    for name in names:
        for cand in (name, name + ".gz"):
            p = os.path.join(data_dir, cand)
            if os.path.exists(p):
                out.append(p)
                break
        else:
            raise FileNotFoundError(f"{name} not found in {data_dir}")
    return out


def _load_split(args, split, n_key="subset"):
    data_dir = _data_dir(args)
    ds = load_mnist(data_dir, split)
    n = args.get(n_key)
    if n is not None:
        ds = subset(ds, int(n), int(args["subset_seed"]))
    return ds, data_dir, _split_files(data_dir, split)


def parse_attack(text, data_range=(0.0, 1.0)):
    """``family:eps[:steps[:seed]]``, e.g. ``fgsm:0.3`` or ``pgd:0.3:10:7``."""
    parts = text.split(":")
    if len(parts) < 2 or len(parts) > 4:
        raise UsageError(f"attack {text!r}: expected family:eps[:steps[:seed]]")
    try:
        family = parts[0].lower()
        eps = float(parts[1])
        steps = int(parts[2]) if len(parts) > 2 else 1
        seed = int(parts[3]) if len(parts) > 3 else 0
    except ValueError:
        raise UsageError(f"attack {text!r}: could not parse numbers") from None
    return AttackSpec(family, eps, steps, family == "pgd", seed, data_range)


def _model_name(path):
    base = os.path.basename(path)
    stem, ext = os.path.splitext(base)
    return stem if ext in (".advf", ".csv") else base


def _load_models(paths):
    models = {}
    for p in paths:
        name = _model_name(p)
        while name in models:
            name += "_"
        models[name] = load_model(p)
    return models


# --------------------------------------------------------------------------
# argument resolution: built-in defaults < manifest/config < explicit flags
# --------------------------------------------------------------------------

DEFAULTS = {
    "train": {"data_dir": None, "train_subset": None, "subset_seed": 0, "out": None, "log_every": 100,
              "mode": "natural", "alpha": None, "lambda": None, "eps1": None, "eps2": None,
              "adv_eps": None, "adv_steps": None, "smoothing_delta": 0.0, "batch_size": 128,
              "iterations": 2000, "seed": 0, "optimizer": {"name": "adam", "lr": 1e-4},
              "data_range": [0.0, 1.0]},
    "attack": {"data_dir": None, "model": None, "family": None, "eps": None, "steps": 1, "seed": 0,
               "split": "test", "subset": None, "subset_seed": 0, "out": None, "batch_size": 256},
    "eval": {"data_dir": None, "models": None, "attack": [], "clean_only": False, "transfer": None,
             "transfer_adv": None, "split": "test", "subset": None, "subset_seed": 0, "out_dir": None,
             "batch_size": 256},
    "surface": {"data_dir": None, "model": None, "direction_family": "ifgsm", "direction_eps": 0.3,
                "direction_steps": None, "seed": 0, "t_max": 0.4, "grid_steps": 17, "batch": 100,
                "split": "test", "subset_seed": 0, "out_dir": None},
}

# keys whose paths are resolved relative to the working directory
PATH_KEYS = ("data_dir", "out", "out_dir", "model", "transfer", "transfer_adv")


def _read_json(path):
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc})") from None


def _manifest_args(path, command):
    doc = _read_json(path)
    if not isinstance(doc, dict) or "config" not in doc or doc.get("command") != command:
        raise UsageError(f"{path} is not a {command} manifest")
    return dict(doc["config"])


def resolve(command, given):
    """Merge defaults, an optional manifest/config file and explicit flags."""
    args = json.loads(json.dumps(DEFAULTS[command]))
    if command == "train" and given.get("config"):
        doc = _read_json(given["config"])
        if isinstance(doc, dict) and doc.get("command") == "train" and "config" in doc:
            args.update(doc["config"])
        elif isinstance(doc, dict):
            unknown = sorted(set(doc) - set(CONFIG_KEYS))
            if unknown:
                raise ConfigError(unknown[0], "unknown configuration key")
            args.update(doc)
        else:
            raise UsageError(f"{given['config']}: expected a JSON object")
    if given.get("manifest"):
        args.update(_manifest_args(given["manifest"], command))
    for key, value in given.items():
        if key in ("config", "manifest", "threads", "verbose", "command"):
            continue
        if key == "lr":
            args["optimizer"] = dict(args["optimizer"], lr=value)
        elif key == "optimizer_name":
            opt = dict(args["optimizer"], name=value)
            if value == "sgd":
                opt = {"name": "sgd", "lr": opt["lr"]}
            args["optimizer"] = opt
        else:
            args[key] = value
    for key in PATH_KEYS:
        if isinstance(args.get(key), str):
            args[key] = os.path.abspath(args[key])
    if isinstance(args.get("models"), list):
        args["models"] = [os.path.abspath(p) for p in args["models"]]
    return args


def _manifest(command, args, seeds, inputs, outputs, started):
    return {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": args,
        "seeds": seeds,
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
        "toolkit_version": __version__,
        "duration_seconds": round(time.perf_counter() - started, 3),
    }


def _require(args, *keys):
    for key in keys:
        if args.get(key) in (None, [], ""):
            raise UsageError(f"--{key.replace('_', '-')} is required")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args):
    started = time.perf_counter()
    _require(args, "out")
    cfg = TrainConfig.from_dict({k: args[k] for k in CONFIG_KEYS})
    ds, data_dir, inputs = _load_split(args, "train", "train_subset")
    out = args["out"]
    report_path = out + ".report.csv"
    manifest_path = out + ".manifest.json"
    _ensure_parent(out)
    log.info("training %s for %d iterations on %d examples", cfg.mode, cfg.iterations, len(ds))
    report = train(ds, cfg, mnist_cnn(), log_every=int(args["log_every"]))
    save_model(report.model, out)
    report.to_csv(report_path)
    args = dict(args, **cfg.to_dict())
    manifest = _manifest("train", args, {"seed": cfg.seed, "subset_seed": args["subset_seed"]},
                         inputs, [out, report_path], started)
    manifest["model_config"] = report.model.config.to_dict()
    write_json_atomic(manifest, manifest_path)
    print(f"wrote {out}")
    return EXIT_OK


def _self_check(clean, adv, spec, what):
    dev = float(np.max(np.abs(adv - clean))) if len(clean) else 0.0
    lo, hi = spec.data_range
    if dev > spec.epsilon + 1e-12 or adv.min() < lo or adv.max() > hi:
        raise NumericError(f"self-check failed for {what}: max deviation {dev} with eps {spec.epsilon}")
    return dev


def cmd_attack(args):
    started = time.perf_counter()
    _require(args, "model", "family", "eps", "out")
    spec = AttackSpec(args["family"], float(args["eps"]), int(args["steps"]), args["family"] == "pgd",
                      int(args["seed"]))
    model = load_model(args["model"])
    ds, data_dir, inputs = _load_split(args, args["split"])
    adv = attack_batches(model, ds.images, ds.labels, spec, int(args["batch_size"]))
    check_finite("adversarial images", adv)
    prefix = args["out"]
    _ensure_parent(prefix)
    img_path, lab_path, csv_path = (prefix + "-images-idx3-ubyte", prefix + "-labels-idx1-ubyte",
                                    prefix + ".csv")
    adv_set = Dataset(adv, ds.labels, ds.data_range)
    write_idx(adv_set, img_path, lab_path, clean=ds.images, epsilon=spec.epsilon)
    write_csv(adv_set, csv_path)
    dev_idx = _self_check(ds.images, load_idx(img_path, lab_path).images, spec, img_path)
    dev_csv = _self_check(ds.images, read_csv(csv_path).images, spec, csv_path)
    manifest = _manifest("attack", args, {"attack_seed": spec.seed, "subset_seed": args["subset_seed"]},
                         inputs + [args["model"]], [img_path, lab_path, csv_path], started)
    manifest["attack"] = dict(spec.to_dict(), step_size=spec.step_size)
    manifest["self_check"] = {"max_abs_deviation_idx": dev_idx, "max_abs_deviation_csv": dev_csv,
                              "epsilon": spec.epsilon, "passed": True}
    write_json_atomic(manifest, prefix + ".manifest.json")
    print(f"wrote {len(adv)} adversarial examples to {prefix}.*; step size a = {spec.step_size:g}")
    return EXIT_OK


def _load_adv_file(path):
    if path.endswith(".csv"):
        return read_csv(path), [path]
    if "images-idx3" not in os.path.basename(path):
        raise UsageError(f"{path}: expected a .csv file or an *-images-idx3-ubyte file")
    labels = os.path.join(os.path.dirname(path), os.path.basename(path).replace("images-idx3", "labels-idx1"))
    return load_idx(path, labels), [path, labels]


def cmd_eval(args):
    started = time.perf_counter()
    _require(args, "models", "out_dir")
    if args["transfer"] and args["transfer_adv"]:
        raise UsageError("--transfer and --transfer-adv are mutually exclusive")
    specs = [] if args["clean_only"] else [parse_attack(a) for a in args["attack"]]
    if args["clean_only"] and args["attack"]:
        raise UsageError("--clean-only cannot be combined with --attack")
    if args["transfer"] and not specs:
        raise UsageError("--transfer needs at least one --attack")
    models = _load_models(args["models"])
    shapes = {tuple(m.config.input_shape) for m in models.values()}
    if len(shapes) > 1:
        raise ShapeError(f"models disagree on input shape: {sorted(shapes)}")
    out_dir = args["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    inputs = list(args["models"])
    outputs = []
    if args["transfer_adv"]:
        adv, files = _load_adv_file(args["transfer_adv"])
        inputs += files
        row = [accuracy(m, adv) for m in models.values()]
        mats = {"transfer": EvalMatrix([_model_name(args["transfer_adv"])], list(models), [row],
                                       {"adversarial_file": args["transfer_adv"], "n_examples": len(adv)})}
    else:
        ds, data_dir, files = _load_split(args, args["split"])
        inputs += files
        if args["transfer"]:
            sub = {_model_name(args["transfer"]): load_model(args["transfer"])}
            inputs.append(args["transfer"])
            mats = {f"transfer_{s.name}": transfer_matrix(sub, models, s, ds, int(args["batch_size"]))
                    for s in specs}
        else:
            mats = {"whitebox": whitebox_matrix(models, specs, ds, int(args["batch_size"]))}
    for name, mat in mats.items():
        path = os.path.join(out_dir, name + ".csv")
        mat.to_csv(path)
        outputs.append(path)
        print(f"{name}:\n{mat.to_text()}")
    seeds = {"subset_seed": args["subset_seed"], "attack_seeds": [s.seed for s in specs]}
    write_json_atomic(_manifest("eval", args, seeds, inputs, outputs, started),
                      os.path.join(out_dir, "eval.manifest.json"))
    return EXIT_OK


def cmd_surface(args):
    started = time.perf_counter()
    _require(args, "model", "out_dir")
    family = args["direction_family"]
    steps = args["direction_steps"]
    if steps is None:
        steps = args["direction_steps"] = 1 if family == "fgsm" else 10
    spec = AttackSpec(family, float(args["direction_eps"]), int(steps), family == "pgd", int(args["seed"]))
    if not args["t_max"] > 0 or int(args["grid_steps"]) < 2:
        raise UsageError("--t-max must be > 0 and --grid-steps >= 2")
    model = load_model(args["model"])
    args = dict(args, subset=int(args["batch"]))
    ds, data_dir, files = _load_split(args, args["split"])
    grid = loss_surface(model, ds.images, ds.labels, spec, float(args["t_max"]), int(args["grid_steps"]),
                        int(args["seed"]))
    check_finite("loss surface", grid.loss)
    out_dir = args["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    csv_path, meta_path = os.path.join(out_dir, "surface.csv"), os.path.join(out_dir, "surface.meta.json")
    grid.to_csv(csv_path)
    grid.write_meta(meta_path)
    write_json_atomic(_manifest("surface", args, {"orthogonalization_seed": args["seed"],
                                                  "subset_seed": args["subset_seed"]},
                                files + [args["model"]], [csv_path, meta_path], started),
                      os.path.join(out_dir, "surface.manifest.json"))
    print(f"wrote {csv_path}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "surface": cmd_surface}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--data-dir", dest="data_dir",
                        help="directory with the MNIST IDX files (default: $ADVFORGE_DATA)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="advforge", description="Train, attack and evaluate small image classifiers.",
        epilog="exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric failure")
    parser.add_argument("--version", action="version", version=f"advforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], argument_default=S,
                       help="train a model under one of the defense regimes")
    p.add_argument("--config", help="TrainConfig JSON file or a train manifest; flags override it")
    p.add_argument("--manifest", help="train manifest to replay (same as --config with a manifest)")
    p.add_argument("--out", help="output model path; <out>.report.csv and <out>.manifest.json are written next to it")
    p.add_argument("--mode", choices=("natural", "adv_fgsm", "adv_ifgsm", "e2sad"), help="defense regime")
    p.add_argument("--alpha", type=float, help="alpha: weight of the clean loss J(theta, x, y), in [0, 1]")
    p.add_argument("--lambda", dest="lambda", type=float,
                   help="lambda: weight of the dissimilarity term D (e2sad)")
    p.add_argument("--eps1", type=float, help="epsilon_1: step size of the first (FGSM) point (e2sad)")
    p.add_argument("--eps2", type=float, help="epsilon_2: step size of the second point (e2sad)")
    p.add_argument("--adv-eps", dest="adv_eps", type=float, help="epsilon for adv_fgsm / adv_ifgsm")
    p.add_argument("--adv-steps", dest="adv_steps", type=int, help="k: iterations for adv_ifgsm")
    p.add_argument("--delta", dest="smoothing_delta", type=float,
                   help="delta: label-smoothing mass moved off the true class (0 = hard labels)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="m: minibatch size (default 128)")
    p.add_argument("--iterations", type=int, help="number of minibatch updates (default 2000)")
    p.add_argument("--seed", type=int, help="seed for weight init and batch order (default 0)")
    p.add_argument("--optimizer", dest="optimizer_name", choices=("adam", "sgd"), help="optimizer (default adam)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--train-subset", dest="train_subset", type=int,
                   help="train on a stratified subset of this many examples")
    p.add_argument("--subset-seed", dest="subset_seed", type=int, help="seed of the subset draw (default 0)")
    p.add_argument("--log-every", dest="log_every", type=int, help="report interval in iterations (default 100)")

    p = sub.add_parser("attack", parents=[common], argument_default=S,
                       help="craft adversarial examples against a model")
    p.add_argument("--manifest", help="attack manifest to replay; flags override it")
    p.add_argument("--model", help="model file (.advf)")
    p.add_argument("--family", choices=("fgsm", "ifgsm", "pgd"), help="attack family")
    p.add_argument("--eps", type=float, help="epsilon: l-inf budget in [0, 1] pixel units")
    p.add_argument("--steps", type=int, help="k: iterations (ifgsm/pgd); step size a = eps / k")
    p.add_argument("--seed", type=int, help="random-start seed (pgd)")
    p.add_argument("--split", choices=("train", "test"), help="MNIST split to attack (default test)")
    p.add_argument("--subset", type=int, help="attack a stratified subset of this many examples")
    p.add_argument("--subset-seed", dest="subset_seed", type=int, help="seed of the subset draw")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="examples per gradient batch")
    p.add_argument("--out", help="output prefix: <out>-images-idx3-ubyte, <out>-labels-idx1-ubyte, <out>.csv")

    p = sub.add_parser("eval", parents=[common], argument_default=S,
                       help="accuracy matrices (white-box or substitute transfer)")
    p.add_argument("--manifest", help="eval manifest to replay; flags override it")
    p.add_argument("--models", nargs="+", help="model files; one matrix column each")
    p.add_argument("--attack", action="append",
                   help="attack row as family:eps[:steps[:seed]], e.g. ifgsm:0.3:10 (repeatable)")
    p.add_argument("--clean-only", dest="clean_only", action="store_true", help="only the clean-accuracy row")
    p.add_argument("--transfer", help="substitute model: craft attacks on it, evaluate the --models on them")
    p.add_argument("--transfer-adv", dest="transfer_adv",
                   help="pre-generated adversarial set (.csv or *-images-idx3-ubyte) to evaluate on")
    p.add_argument("--split", choices=("train", "test"), help="MNIST split (default test)")
    p.add_argument("--subset", type=int, help="evaluate on a stratified subset of this many examples")
    p.add_argument("--subset-seed", dest="subset_seed", type=int, help="seed of the subset draw")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="examples per gradient batch")
    p.add_argument("--out-dir", dest="out_dir", help="directory for the matrix CSVs and manifest")

    p = sub.add_parser("surface", parents=[common], argument_default=S,
                       help="2-D loss-surface grid along an attack direction")
    p.add_argument("--manifest", help="surface manifest to replay; flags override it")
    p.add_argument("--model", help="model file (.advf)")
    p.add_argument("--direction-family", dest="direction_family", choices=("fgsm", "ifgsm", "pgd"),
                   help="attack giving g1 = sign(x_adv - x) (default ifgsm)")
    p.add_argument("--direction-eps", dest="direction_eps", type=float, help="epsilon of that attack (default 0.3)")
    p.add_argument("--direction-steps", dest="direction_steps", type=int, help="k of that attack (default 10, or 1 for fgsm)")
    p.add_argument("--seed", type=int, help="seed of the orthogonal direction g2 (default 0)")
    p.add_argument("--t-max", dest="t_max", type=float, help="grid spans t1, t2 in [0, t_max] (default 0.4)")
    p.add_argument("--grid-steps", dest="grid_steps", type=int, help="points per axis (default 17)")
    p.add_argument("--batch", type=int, help="number of test examples summed per grid point (default 100)")
    p.add_argument("--split", choices=("train", "test"), help="MNIST split (default test)")
    p.add_argument("--subset-seed", dest="subset_seed", type=int, help="seed of the batch draw")
    p.add_argument("--out-dir", dest="out_dir", help="directory for surface.csv and surface.meta.json")
    return parser


def _run(command, given):
    args = resolve(command, given)
    threads = given.get("threads")
    if threads is not None and threads < 1:
        raise UsageError("--threads must be >= 1")
    with threadpool_limits(limits=threads):
        return COMMANDS[command](args)


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    given = vars(ns)
    command = given.pop("command")
    logging.basicConfig(level=logging.INFO if given.get("verbose") else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return _run(command, given)
    except (IdxError, ModelFormatError, FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"advforge {command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"advforge {command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, ShapeError, ValueError, TypeError) as exc:
        print(f"advforge {command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
