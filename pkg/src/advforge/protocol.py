"""
Desk-scale MNIST protocol: stratified 10k/2k train/test subsets, the MNIST
CNN, 2000 iterations at batch 128 for the natural, FGSM-adversarial and e2SAD
models, then white-box and substitute-transfer accuracy, a loss surface for
the natural model and a timing comparison against IFGSM adversarial training.

Trained models and evaluation results are cached on disk, keyed by the
protocol settings, the data digest and a digest of the package sources, so a
rerun with unchanged code reuses them.

    python -m advforge.protocol --data-dir DIR [--cache-dir DIR] [--out results.json]
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Dict

from .attacks import AttackSpec
from .data import load_mnist, subset
from .defense import TrainConfig, train
from .evaluation import blackbox_transfer, loss_surface, whitebox_matrix
from .modelio import load_model, save_model
from .nn import mnist_cnn

log = logging.getLogger(__name__)

DEFAULT_CACHE = os.path.join(os.path.expanduser("~"), ".cache", "advforge", "desk")


@dataclass(frozen=True)
class DeskProtocol:
    train_size: int = 10000
    test_size: int = 2000
    train_subset_seed: int = 0
    test_subset_seed: int = 1
    iterations: int = 2000
    batch_size: int = 128
    seed: int = 0
    lr: float = 1e-4
    alpha: float = 0.6
    lam: float = 0.1
    eps1: float = 0.3
    eps2: float = 0.1
    delta: float = 0.25
    adv_eps: float = 0.3
    eval_eps: float = 0.3
    eval_steps: int = 10
    transfer_steps: int = 30
    surface_batch: int = 100
    timing_iterations: int = 10
    timing_steps: int = 10

    def train_configs(self) -> Dict[str, TrainConfig]:
        common = dict(batch_size=self.batch_size, iterations=self.iterations, seed=self.seed,
                      optimizer={"name": "adam", "lr": self.lr})
        return {
            "natural": TrainConfig(mode="natural", **common),
            "adv_fgsm": TrainConfig(mode="adv_fgsm", alpha=self.alpha, adv_eps=self.adv_eps, **common),
            "e2sad": TrainConfig(mode="e2sad", alpha=self.alpha, lam=self.lam, eps1=self.eps1, eps2=self.eps2,
                                 smoothing_delta=self.delta, **common),
        }

    def timing_configs(self):
        common = dict(batch_size=self.batch_size, iterations=self.timing_iterations, seed=self.seed,
                      optimizer={"name": "adam", "lr": self.lr})
        return {
            "e2sad": TrainConfig(mode="e2sad", alpha=self.alpha, lam=self.lam, eps1=self.eps1, eps2=self.eps2,
                                 smoothing_delta=self.delta, **common),
            "adv_ifgsm": TrainConfig(mode="adv_ifgsm", alpha=self.alpha, adv_eps=self.adv_eps,
                                     adv_steps=self.timing_steps, **common),
        }

    def attacks(self):
        return [AttackSpec.fgsm(self.eval_eps), AttackSpec.ifgsm(self.eval_eps, self.eval_steps)]

    def transfer_attack(self):
        return AttackSpec.ifgsm(self.eval_eps, self.transfer_steps)

    def to_dict(self):
        return dataclasses.asdict(self)


TRAINING_SOURCES = ("nn.py", "attacks.py", "data.py", "defense.py", "modelio.py")
EVAL_SOURCES = TRAINING_SOURCES + ("evaluation.py", "protocol.py")


def source_digest(names=TRAINING_SOURCES):
    """sha256 over the given package source files."""
    here = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        with open(os.path.join(here, name), "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def _dataset_digest(ds):
    h = hashlib.sha256(ds.images.tobytes())
    h.update(ds.labels.tobytes())
    return h.hexdigest()


def _key(*parts):
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:24]


def load_data(data_dir, proto: DeskProtocol):
    train_set = subset(load_mnist(data_dir, "train"), proto.train_size, proto.train_subset_seed)
    test_set = subset(load_mnist(data_dir, "test"), proto.test_size, proto.test_subset_seed)
    return train_set, test_set


def train_cached(name, cfg, train_set, cache_dir, salt):
    """Train ``cfg`` or load a cached result; returns (model, info dict)."""
    key = _key(name, cfg.to_dict(), salt)
    model_path = os.path.join(cache_dir, f"{name}-{key}.advf")
    info_path = model_path + ".json"
    if os.path.exists(model_path) and os.path.exists(info_path):
        with open(info_path) as f:
            return load_model(model_path), json.load(f)
    log.info("training %s (%d iterations)", name, cfg.iterations)
    report = train(train_set, cfg, mnist_cnn())
    info = {"config": cfg.to_dict(), "wall_time": report.wall_time, "records": report.records}
    os.makedirs(cache_dir, exist_ok=True)
    save_model(report.model, model_path)
    tmp = info_path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(info, f, indent=1)
    os.replace(tmp, info_path)
    return report.model, info


def measure_cost(proto: DeskProtocol, train_set):
    """Wall-clock and input-gradient counts of e2SAD vs IFGSM training at equal iterations."""
    out = {}
    for name, cfg in proto.timing_configs().items():
        report = train(train_set, cfg, mnist_cnn(), count_gradients=True)
        out[name] = {"iterations": cfg.iterations, "wall_time": report.wall_time,
                     "input_grad_evals": report.input_grad_evals,
                     "input_grad_evals_per_batch": report.input_grad_evals / cfg.iterations}
    out["wall_ratio"] = out["e2sad"]["wall_time"] / out["adv_ifgsm"]["wall_time"]
    return out


def evaluate(models, proto: DeskProtocol, test_set):
    t0 = time.perf_counter()
    wb = whitebox_matrix(models, proto.attacks(), test_set)
    spec = proto.transfer_attack()
    transfer = {
        f"natural->{name}": blackbox_transfer(models["natural"], models[name], spec, test_set)
        for name in models
    }
    # diagonal: substitute == target must reproduce the white-box IFGSM cell
    ifgsm = proto.attacks()[1]
    diag = {name: {"transfer": blackbox_transfer(m, m, ifgsm, test_set), "whitebox": wb.cell(ifgsm.name, name)}
            for name, m in models.items()}
    batch = subset(test_set, proto.surface_batch, proto.test_subset_seed)
    surface = loss_surface(models["natural"], batch.images, batch.labels, ifgsm, seed=proto.seed)
    return {
        "whitebox": {"rows": wb.rows, "cols": wb.cols, "cells": wb.cells.tolist()},
        "transfer_attack": spec.to_dict(),
        "transfer": transfer,
        "diagonal": diag,
        "surface": {"t": surface.t1_values.tolist(), "loss": surface.loss.tolist(),
                    "meta": surface.direction_meta},
        "eval_time": time.perf_counter() - t0,
    }


def run(data_dir, cache_dir=DEFAULT_CACHE, proto: DeskProtocol = DeskProtocol(), measure=True):
    """Full protocol; cached pieces are reused. Returns a JSON-ready dict."""
    train_set, test_set = load_data(data_dir, proto)
    salt = {"source": source_digest(), "train": _dataset_digest(train_set)}
    models, infos = {}, {}
    for name, cfg in proto.train_configs().items():
        models[name], infos[name] = train_cached(name, cfg, train_set, cache_dir, salt)

    eval_path = os.path.join(cache_dir, f"eval-{_key(salt, source_digest(EVAL_SOURCES), _dataset_digest(test_set), proto.to_dict())}.json")
    if os.path.exists(eval_path):
        with open(eval_path) as f:
            results = json.load(f)
    else:
        results = evaluate(models, proto, test_set)
        os.makedirs(cache_dir, exist_ok=True)
        with open(eval_path + ".tmp", "w") as f:
            json.dump(results, f)
        os.replace(eval_path + ".tmp", eval_path)

    results["protocol"] = proto.to_dict()
    results["train_time"] = {name: info["wall_time"] for name, info in infos.items()}
    results["final_losses"] = {name: info["records"][-1] if info["records"] else None
                               for name, info in infos.items()}
    results["total_time"] = sum(results["train_time"].values()) + results["eval_time"]
    if measure:
        results["cost"] = measure_cost(proto, train_set)
        results["total_time"] += sum(v["wall_time"] for k, v in results["cost"].items() if k != "wall_ratio")
    results["models"] = models
    return results


def accuracy_table(results):
    wb = results["whitebox"]
    return {row: dict(zip(wb["cols"], cells)) for row, cells in zip(wb["rows"], wb["cells"])}


def main(argv=None):
    p = argparse.ArgumentParser(prog="python -m advforge.protocol", description="desk-scale MNIST protocol")
    p.add_argument("--data-dir", default=os.environ.get("ADVFORGE_DATA"), help="MNIST IDX directory")
    p.add_argument("--cache-dir", default=os.environ.get("ADVFORGE_DESK_CACHE", DEFAULT_CACHE),
                   help="where trained models and evaluation results are cached")
    p.add_argument("--out", help="write the results (without models) as JSON here")
    p.add_argument("--no-timing", action="store_true", help="skip the e2SAD vs IFGSM cost measurement")
    args = p.parse_args(argv)
    if not args.data_dir:
        p.error("--data-dir is required (or set ADVFORGE_DATA)")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    results = run(args.data_dir, args.cache_dir, measure=not args.no_timing)
    results.pop("models")
    table = accuracy_table(results)
    for row, cells in table.items():
        print(row, {k: round(v, 4) for k, v in cells.items()})
    print("transfer", {k: round(v, 4) for k, v in results["transfer"].items()})
    if "cost" in results:
        print("cost", json.dumps(results["cost"]))
    print(f"total time {results['total_time'] / 60:.1f} min")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(results, f, indent=1, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
