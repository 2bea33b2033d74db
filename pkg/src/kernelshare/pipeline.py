"""Compression phases as checkpointed steps, and the run report that ties them together."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import PipelineConfig
from .data import Dataset
from .decompose import decompose_layer, decompose_network
from .graph import Network
from .presets import build
from .prune import prune, sparsity_report
from .runtime import count_flops
from .serialization import load_model, save_model
from .shrink import propagate, shrink, write_width_csv
from .train import coefficient_sparsity, evaluate, finetune_masked, pretrain, retrain, write_epoch_csv

PHASES = ("decompose", "retrain", "prune", "shrink", "finetune")
REPORT_NAME = "run_report.json"


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase '{phase}' failed: {type(cause).__name__}: {cause}")
        self.phase = phase


def blob_sha1(path) -> str:
    """Content hash in the same form git uses for blobs."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def accuracy(net: Network, data: Dataset) -> float:
    return evaluate(net, data.x_test.astype(net.dtype, copy=False), data.y_test)


def ledger_totals(net: Network) -> dict:
    return count_flops(net).to_dict()["totals"]


class Run:
    """One output directory: checkpoints, logs and the consolidated report."""

    def __init__(self, out: Path, cfg: PipelineConfig, threads: int = 0):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.threads = threads
        self.report: Dict = {"config": cfg.echo(), "threads": threads, "phases": {}, "artifacts": []}
        self.timing: Dict[str, float] = {}
        self.stamps: Dict[str, dict] = {}

    def artifact(self, name: str) -> dict:
        entry = {"path": name, "sha1": blob_sha1(self.out / name)}
        self.report["artifacts"] = [a for a in self.report["artifacts"] if a["path"] != name] + [entry]
        return entry

    def save(self, net: Network, name: str) -> dict:
        save_model(net, self.out / name)
        return self.artifact(name)

    def timed(self, phase: str, fn: Callable, *args):
        start = datetime.now(timezone.utc).isoformat()
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            raise PhaseError(phase, exc) from exc
        self.timing[phase] = time.perf_counter() - t0
        self.stamps[phase] = {"start": start, "end": datetime.now(timezone.utc).isoformat()}
        return result

    def write_report(self, name: str = REPORT_NAME) -> Path:
        report = dict(self.report)
        if self.threads != 0:
            # wall-clock stamps would break byte-identical reports, so serial runs leave them out
            report["timestamps"] = self.stamps
        path = self.out / name
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (self.out / "timing.json").write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------
# phases; each returns (net', report block) and writes its checkpoint


def phase_pretrain(run: Run, data: Dataset) -> Tuple[Network, dict]:
    cfg = run.cfg
    net = build(cfg.preset, seed=cfg.seed, input_shape=data.input_shape, num_classes=data.num_classes) \
        if cfg.preset == "toy-cnn" else build(cfg.preset, seed=cfg.seed, num_classes=data.num_classes)
    net, logs = pretrain(net, data, cfg.train_config("pretrain"))
    write_epoch_csv(logs, run.out / "pretrain_log.csv")
    block = {
        "accuracy_after": accuracy(net, data),
        "epochs": len(logs),
        "log": run.artifact("pretrain_log.csv"),
        "model": run.save(net, "pretrain.bknet"),
        "flops": ledger_totals(net),
    }
    return net, block


def phase_decompose(run: Run, net: Network, data: Dataset) -> Tuple[Network, dict]:
    spec = run.cfg.decompose
    before = accuracy(net, data)
    d_map: Optional[Dict] = None
    if spec.d_per_layer:
        d_map = {key: spec.d for key, site in net.sites() if type(site).__name__ == "Conv"}
        d_map.update(spec.d_per_layer)
    out = decompose_network(net, d_map, default=spec.d, center=spec.center)
    errors = {}
    for key, layer in out.decomposed():
        original = net.site(key)
        _, _, err2 = decompose_layer(original.weight, layer.d - layer.n_fixed, center=spec.center)
        errors[key] = {"d": layer.d, "err2": err2,
                       "rel_err": float(np.sqrt(err2) / max(np.linalg.norm(original.weight), 1e-300))}
    block = {
        "accuracy_before": before,
        "accuracy_after": accuracy(out, data),
        "layers": errors,
        "model": run.save(out, "decompose.bknet"),
    }
    return out, block


def phase_retrain(run: Run, net: Network, data: Dataset) -> Tuple[Network, dict]:
    before = accuracy(net, data)
    out, logs = retrain(net, data, run.cfg.train_config("retrain"))
    write_epoch_csv(logs, run.out / "retrain_log.csv")
    block = {
        "accuracy_before": before,
        "accuracy_after": accuracy(out, data),
        "coeff_sparsity": coefficient_sparsity(out),
        "log": run.artifact("retrain_log.csv"),
        "model": run.save(out, "retrain.bknet"),
    }
    return out, block


def phase_prune(run: Run, net: Network, data: Dataset) -> Tuple[Network, dict]:
    before = accuracy(net, data)
    out, report = prune(net, s=run.cfg.prune.s, std_nonzero_only=run.cfg.prune.std_nonzero_only)
    block = {
        "accuracy_before": before,
        "accuracy_after": accuracy(out, data),
        "sparsity": report.to_dict(),
        "model": run.save(out, "prune.bknet"),
    }
    return out, block


def phase_shrink(run: Run, net: Network, data: Dataset) -> Tuple[Network, dict]:
    before = accuracy(net, data)
    zeroed, redundancy = propagate(net, fold_bias=run.cfg.shrink.fold_bias)
    out, rows = shrink(zeroed, redundancy)
    write_width_csv(rows, run.out / "widths.csv")
    removed_channels = sum(r.width_before - r.width_after for r in rows)
    removed_basis = sum(r.d_before - r.d_after for r in rows)
    block = {
        "accuracy_before": before,
        "accuracy_after": accuracy(out, data),
        "redundancy": redundancy.to_dict(),
        "channels_removed": removed_channels,
        "basis_removed": removed_basis,
        "sparsity": sparsity_report(out).to_dict(),
        "flops_before": ledger_totals(net),
        "flops_after": ledger_totals(out),
        "widths": run.artifact("widths.csv"),
        "model": run.save(out, "shrink.bknet"),
    }
    return out, block


def phase_finetune(run: Run, net: Network, data: Dataset) -> Tuple[Network, dict]:
    before = accuracy(net, data)
    out, logs = finetune_masked(net, data, run.cfg.train_config("finetune"))
    write_epoch_csv(logs, run.out / "finetune_log.csv")
    block = {
        "accuracy_before": before,
        "accuracy_after": accuracy(out, data),
        "sparsity": sparsity_report(out).to_dict(),
        "flops": count_flops(out).to_dict(),
        "log": run.artifact("finetune_log.csv"),
        "model": run.save(out, "finetune.bknet"),
    }
    return out, block


PHASE_FUNCS = {
    "decompose": phase_decompose,
    "retrain": phase_retrain,
    "prune": phase_prune,
    "shrink": phase_shrink,
    "finetune": phase_finetune,
}


def _owner(artifact: str) -> str:
    return "shrink" if artifact == "widths.csv" else artifact.split(".")[0].split("_")[0]


def compress(run: Run, model_path, data: Dataset, start: str = "decompose") -> Network:
    """Run the phases from ``start`` on; earlier phases are taken from ``run.out``.

    When resuming, the checkpoint of the phase before ``start`` and the
    existing report's blocks for finished phases are reused unchanged.
    """
    if start not in PHASES:
        raise ValueError(f"unknown phase {start!r}; expected one of {PHASES}")
    idx = PHASES.index(start)
    base = load_model(model_path)
    run.report["input_model"] = {"sha1": blob_sha1(model_path)}
    if idx == 0:
        run.report["baseline"] = {"accuracy": accuracy(base, data), "flops": ledger_totals(base)}
        net = base
    else:
        previous = json.loads((run.out / REPORT_NAME).read_text())
        if previous.get("input_model") != run.report["input_model"]:
            raise FileNotFoundError("existing run report was produced from a different input model")
        run.report["baseline"] = previous["baseline"]
        for phase in PHASES[:idx]:
            run.report["phases"][phase] = previous["phases"][phase]
        run.report["artifacts"] = [a for a in previous["artifacts"] if _owner(a["path"]) in PHASES[:idx]]
        net = load_model(run.out / f"{PHASES[idx - 1]}.bknet")
    for phase in PHASES[idx:]:
        net, block = run.timed(phase, PHASE_FUNCS[phase], run, net, data)
        run.report["phases"][phase] = block
        run.write_report()
    return net


# ---------------------------------------------------------------------------
# consolidated tables

TABLE_COLUMNS = ["Model", "Base Acc.", "Pruned Acc.", "ΔAcc", "Param.", "R_Param", "FLOPs", "R_FLOPs"]


def table_row(report: dict, name: str) -> dict:
    base = report["baseline"]
    final_phase = next(p for p in reversed(PHASES) if p in report["phases"])
    final = report["phases"][final_phase]
    flops = final.get("flops")
    totals = flops["totals"] if flops and "totals" in flops else (flops or final.get("flops_after"))
    base_acc, acc = base["accuracy"], final["accuracy_after"]
    p0, p1 = base["flops"]["params_total"], totals["params_total"]
    f0, f1 = base["flops"]["effective_macs"], totals["effective_macs"]
    return {
        "Model": name,
        "Base Acc.": f"{100 * base_acc:.2f}%",
        "Pruned Acc.": f"{100 * acc:.2f}%",
        "ΔAcc": f"{100 * (acc - base_acc):+.2f}%",
        "Param.": p1,
        "R_Param": f"{100 * (1 - p1 / p0):.2f}%",
        "FLOPs": f1,
        "R_FLOPs": f"{100 * (1 - f1 / f0):.2f}%",
    }
