"""Magnitude pruning of coefficient tensors with a per-layer standard-deviation threshold."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .graph import Network


@dataclass
class LayerSparsity:
    layer: str
    nnz: int
    total: int
    threshold: float = 0.0

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.total if self.total else 0.0


@dataclass
class SparsityReport:
    layers: List[LayerSparsity] = field(default_factory=list)

    @property
    def nnz(self) -> int:
        return sum(r.nnz for r in self.layers)

    @property
    def total(self) -> int:
        return sum(r.total for r in self.layers)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.total if self.total else 0.0

    @property
    def thresholds(self) -> Dict[str, float]:
        return {r.layer: r.threshold for r in self.layers}

    def to_dict(self) -> dict:
        rows = [
            {**asdict(r), "coefficients": f"{r.nnz}/{r.total}", "sparsity_pct": round(100 * r.sparsity, 2)}
            for r in self.layers
        ]
        return {
            "layers": rows,
            "total": {"nnz": self.nnz, "total": self.total, "coefficients": f"{self.nnz}/{self.total}",
                      "sparsity_pct": round(100 * self.sparsity, 2)},
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def compute_threshold(coeffs: np.ndarray, s: float, nonzero_only: bool = False) -> float:
    """``s`` times the population standard deviation of the coefficient entries."""
    if s < 0:
        raise ValueError("sensitivity must be >= 0")
    values = np.asarray(coeffs, dtype=np.float64).ravel()
    if nonzero_only:
        values = values[values != 0]
    if values.size == 0:
        raise ValueError("cannot threshold an empty tensor")
    return float(s * values.std())


def sparsity_report(net: Network) -> SparsityReport:
    return SparsityReport([
        LayerSparsity(key, int(np.count_nonzero(layer.coeffs)), layer.coeffs.size)
        for key, layer in net.decomposed()
    ])


def prune(net: Network, s: float = 1.0, thresholds: Optional[Dict[str, float]] = None,
          std_nonzero_only: bool = False):
    """Zero every coefficient with ``|a| < tau`` for its layer's threshold tau.

    Thresholds are ``s * std`` per layer unless given explicitly in
    ``thresholds`` (keyed by site, e.g. ``"L3"``). Entries equal to tau survive.
    Fixed (centering) coefficient slices are never pruned. Returns
    ``(net', SparsityReport)``; the report records the thresholds used.
    """
    net = net.copy()
    decomposed = net.decomposed()
    if not decomposed:
        raise ValueError("network has no decomposed layers to prune")
    rows = []
    for key, layer in decomposed:
        d = layer.d
        free = layer.coeffs[:, :, : d - layer.n_fixed]
        if thresholds is not None and key in thresholds:
            tau = float(thresholds[key])
        else:
            tau = compute_threshold(free, s, std_nonzero_only) if free.size else 0.0
        keep = np.ones(layer.coeffs.shape, dtype=bool)
        keep[:, :, : d - layer.n_fixed] = np.abs(free) >= tau
        layer.mask = layer.mask & keep
        coeffs = layer.coeffs.copy()
        coeffs[~layer.mask] = 0
        layer.coeffs = coeffs
        rows.append(LayerSparsity(key, int(np.count_nonzero(coeffs)), coeffs.size, tau))
    return net, SparsityReport(rows)
