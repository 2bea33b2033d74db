"""
Structural redundancy discovery and model shrinking.

Channels are tracked per tensor ("node"): the network input, the output of
every weighted site, and one sum node wherever skip edges add into a layer's
input. Pass-through layers (ReLU, BN, pooling) keep their input's node.

A channel of a node is redundant when nothing live produces it (for a sum
node: when *every* summand is redundant there) or nothing live consumes it.
Propagation alternates between deriving these sets from the nonzero pattern
of every weighted layer and zeroing the coefficients they imply, until a
pass changes nothing. Tensors joined by a residual addition must keep equal
widths, so a channel is physically removed only when it is redundant in all
of them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set

import numpy as np

from .graph import Network, infer_shapes, validate
from .layers import BatchNorm, Conv, DecomposedConv, Linear, ReLU

INPUT = "in"


@dataclass
class _Site:
    key: str
    layer: object
    in_node: str
    out_node: str
    spatial: int = 1  # Linear only: input columns per channel


@dataclass
class _Topology:
    order: List[str]
    kind: Dict[str, str]              # "input" | "site" | "sum"
    width: Dict[str, int]
    producers: Dict[str, List[str]]   # sum node -> summand nodes
    consumers: Dict[str, List[tuple]]  # node -> [("site", key) | ("sum", node)]
    sites: Dict[str, _Site]
    bn: Dict[str, List[int]]
    final: str
    chains: Dict[str, List[int]]      # site-output node -> pass-through layer indices that follow it


def _topology(net: Network) -> _Topology:
    inputs, outputs, _ = infer_shapes(net)
    order, kind, width = [INPUT], {INPUT: "input"}, {INPUT: net.input_shape[0]}
    producers, consumers, sites, bn, chains = {}, {INPUT: []}, {}, {}, {}
    incoming = {}
    for e, s in enumerate(net.skips):
        incoming.setdefault(s.dst, []).append((e, s))
    out_node = {}
    cur = INPUT

    def add_node(name, k, w):
        order.append(name)
        kind[name] = k
        width[name] = w
        consumers[name] = []

    for k, layer in enumerate(net.layers):
        if k in incoming:
            summands = [cur]
            for e, s in incoming[k]:
                src = out_node[s.src]
                if s.proj is not None:
                    key = f"S{e}"
                    add_node(key, "site", s.proj.out_channels)
                    sites[key] = _Site(key, s.proj, src, key)
                    consumers[src].append(("site", key))
                    summands.append(key)
                else:
                    summands.append(src)
            name = f"+{k}"
            add_node(name, "sum", inputs[k][0])
            producers[name] = summands
            for p in summands:
                consumers[p].append(("sum", name))
            cur = name
        if isinstance(layer, (Conv, DecomposedConv, Linear)):
            key = f"L{k}"
            spatial = int(np.prod(inputs[k][1:])) if isinstance(layer, Linear) and len(inputs[k]) == 3 else 1
            add_node(key, "site", outputs[k][0])
            sites[key] = _Site(key, layer, cur, key, spatial)
            consumers[cur].append(("site", key))
            cur = key
            chains[key] = []
        else:
            if isinstance(layer, BatchNorm):
                bn.setdefault(cur, []).append(k)
            if cur in chains and not any(c[0] == "sum" for c in consumers[cur]):
                chains[cur].append(k)
        out_node[k] = cur
    return _Topology(order, kind, width, producers, consumers, sites, bn, cur, chains)


# ---------------------------------------------------------------------------
# per-site connectivity


def _connections(site: _Site) -> np.ndarray:
    """Boolean (out, in) matrix: does output i read input channel j at all."""
    layer = site.layer
    if isinstance(layer, DecomposedConv):
        return np.any(layer.coeffs != 0, axis=2)
    if isinstance(layer, Conv):
        return np.any(layer.weight != 0, axis=(2, 3))
    w = layer.weight.reshape(layer.out_features, -1, site.spatial)
    return np.any(w != 0, axis=2)


def _counts(site: _Site):
    layer = site.layer
    if isinstance(layer, DecomposedConv):
        nz = layer.coeffs != 0
        return nz.sum(axis=(0, 2)), nz.sum(axis=(1, 2))
    if isinstance(layer, Conv):
        nz = layer.weight != 0
        return nz.sum(axis=(0, 2, 3)), nz.sum(axis=(1, 2, 3))
    nz = layer.weight.reshape(layer.out_features, -1, site.spatial) != 0
    return nz.sum(axis=(0, 2)), nz.sum(axis=(1, 2))


def _zero(site: _Site, rows, cols) -> None:
    layer = site.layer
    rows, cols = sorted(rows), sorted(cols)
    if isinstance(layer, DecomposedConv):
        for arr_name in ("coeffs",):
            arr = getattr(layer, arr_name).copy()
            arr[rows] = 0
            arr[:, cols] = 0
            setattr(layer, arr_name, arr)
        mask = layer.mask.copy()
        mask[rows] = False
        mask[:, cols] = False
        layer.mask = mask
    elif isinstance(layer, Conv):
        w = layer.weight.copy()
        w[rows] = 0
        w[:, cols] = 0
        layer.weight = w
    else:
        w = layer.weight.reshape(layer.out_features, -1, site.spatial).copy()
        w[rows] = 0
        w[:, cols] = 0
        layer.weight = w.reshape(layer.out_features, -1)


def redundancy_vectors(layer: DecomposedConv):
    """``(p_in, p_out, dead_basis)`` from the nonzero pattern of the coefficients."""
    nz = layer.coeffs != 0
    p_in = nz.sum(axis=(0, 2))
    p_out = nz.sum(axis=(1, 2))
    free = layer.d - layer.n_fixed
    dead_basis = [m for m in range(free) if not nz[:, :, m].any()]
    return p_in, p_out, dead_basis


# ---------------------------------------------------------------------------
# propagation


@dataclass
class LayerRedundancy:
    p_in: np.ndarray
    p_out: np.ndarray
    dead_basis: List[int] = field(default_factory=list)

    @property
    def P_in(self) -> Set[int]:
        return {int(i) for i in np.flatnonzero(self.p_in == 0)}

    @property
    def P_out(self) -> Set[int]:
        return {int(i) for i in np.flatnonzero(self.p_out == 0)}


@dataclass
class RedundancyReport:
    layers: Dict[str, LayerRedundancy] = field(default_factory=dict)
    iterations_to_fixpoint: int = 0
    removable: Dict[str, List[int]] = field(default_factory=dict)  # node -> channels to remove

    def to_dict(self) -> dict:
        return {
            "iterations_to_fixpoint": self.iterations_to_fixpoint,
            "layers": {
                k: {"P_in": sorted(v.P_in), "P_out": sorted(v.P_out), "dead_basis": v.dead_basis}
                for k, v in self.layers.items()
            },
            "removable": {k: v for k, v in self.removable.items() if v},
        }


def _dead_sets(topo: _Topology, p_sets):
    fwd, bwd, dead = {}, {}, {}
    for n in topo.order:
        k = topo.kind[n]
        if k == "input":
            fwd[n] = set()
        elif k == "site":
            fwd[n] = set(p_sets[n][1])
        else:
            fwd[n] = set.intersection(*(fwd[p] for p in topo.producers[n]))
    for n in reversed(topo.order):
        if n == topo.final:
            bwd[n] = set()
        else:
            acc = set(range(topo.width[n]))
            for kind, target in topo.consumers[n]:
                acc &= p_sets[target][0] if kind == "site" else dead[target]
            bwd[n] = acc
        dead[n] = fwd[n] | bwd[n]
    return dead


def _tied_groups(topo: _Topology) -> Dict[str, List[str]]:
    parent = {n: n for n in topo.order}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for n, prods in topo.producers.items():
        for p in prods:
            parent[find(p)] = find(n)
    groups = {}
    for n in topo.order:
        groups.setdefault(find(n), []).append(n)
    return groups


def propagate(net: Network, max_passes: Optional[int] = None, fold_bias: bool = False):
    """Iterate redundancy sets to a fixpoint, zeroing implied coefficients.

    Returns ``(net', RedundancyReport)``; ``net'`` is a copy with every
    connection touching a redundant channel set to zero. With ``fold_bias``
    the constant output of a channel that has lost all its inputs is added to
    the consumers' biases before their columns are zeroed.
    """
    net = net.copy()
    topo = _topology(net)
    guard = max_passes or (sum(topo.width.values()) + 2)
    folded = set()
    passes = 0
    while True:
        passes += 1
        if passes > guard:
            raise RuntimeError("redundancy propagation did not reach a fixpoint")
        p_sets = {}
        for key, site in topo.sites.items():
            conn = _connections(site)
            p_sets[key] = (
                {int(j) for j in np.flatnonzero(~conn.any(axis=0))},
                {int(i) for i in np.flatnonzero(~conn.any(axis=1))},
            )
        dead = _dead_sets(topo, p_sets)
        changed = False
        for key, site in topo.sites.items():
            rows = dead[site.out_node] - p_sets[key][1]
            cols = dead[site.in_node] - p_sets[key][0]
            conn = _connections(site)
            if (rows and conn[sorted(rows)].any()) or (cols and conn[:, sorted(cols)].any()):
                if fold_bias:
                    src = site.in_node
                    for c in sorted(cols & p_sets.get(src, (set(), set()))[1]):
                        if (src, c) not in folded and _foldable(topo, src):
                            _fold_bias(net, topo, src, c)
                            folded.add((src, c))
                _zero(site, rows, cols)
                changed = True
        if not changed:
            break

    report = RedundancyReport(iterations_to_fixpoint=passes)
    for key, site in topo.sites.items():
        p_in, p_out = _counts(site)
        dead_basis = redundancy_vectors(site.layer)[2] if isinstance(site.layer, DecomposedConv) else []
        report.layers[key] = LayerRedundancy(p_in, p_out, dead_basis)
    for members in _tied_groups(topo).values():
        if INPUT in members or topo.final in members:
            removable = set()
        else:
            removable = set.intersection(*(dead[n] for n in members))
            if len(removable) >= topo.width[members[0]]:
                removable.discard(0)  # keep one channel so the tensor stays non-empty
        for n in members:
            report.removable[n] = sorted(removable)
    return net, report


# ---------------------------------------------------------------------------
# shrinking

WIDTH_COLUMNS = ["layer", "width_before", "width_after", "d_before", "d_after", "nnz"]


@dataclass
class WidthRow:
    layer: str
    width_before: int
    width_after: int
    d_before: int
    d_after: int
    nnz: int


def write_width_csv(rows: List[WidthRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(WIDTH_COLUMNS)
        for r in rows:
            writer.writerow([r.layer, r.width_before, r.width_after, r.d_before, r.d_after, r.nnz])


def _passthrough_constant(net: Network, chain: List[int], c: int, value: float) -> float:
    for k in chain:
        layer = net.layers[k]
        if isinstance(layer, ReLU):
            value = max(value, 0.0)
        elif isinstance(layer, BatchNorm):
            value = float(layer.gamma[c] * (value - layer.running_mean[c])
                          / np.sqrt(layer.running_var[c] + layer.eps) + layer.beta[c])
    return value


def _foldable(topo: _Topology, node: str) -> bool:
    return topo.kind[node] == "site" and node in topo.chains and not any(
        k == "sum" for k, _ in topo.consumers[node])


def _fold_bias(net: Network, topo: _Topology, node: str, c: int) -> None:
    """Push the constant output of a dead-input channel into its consumers' biases."""
    producer = topo.sites[node].layer
    value = _passthrough_constant(net, topo.chains.get(node, []), c, float(producer.bias[c]))
    if value == 0.0:
        return
    for kind, target in topo.consumers[node]:
        if kind != "site":
            continue
        site = topo.sites[target]
        layer = site.layer
        if isinstance(layer, DecomposedConv):
            tap_sum = (layer.coeffs[:, c, :] @ layer.basis).sum(axis=1)
        elif isinstance(layer, Conv):
            tap_sum = layer.weight[:, c].sum(axis=(1, 2))
        else:
            tap_sum = layer.weight.reshape(layer.out_features, -1, site.spatial)[:, c].sum(axis=1)
        layer.bias = (layer.bias + value * tap_sum).astype(layer.bias.dtype)


def shrink(net: Network, report: RedundancyReport):
    """Physically remove redundant channels and dead basis kernels.

    ``net`` and ``report`` are the pair returned by :func:`propagate`.
    Returns ``(net', width_rows)``. Input channels of the network and the
    classifier outputs are never removed.
    """
    net = net.copy()
    topo = _topology(net)
    keep = {}
    for n in topo.order:
        gone = set(report.removable.get(n, []))
        keep[n] = [c for c in range(topo.width[n]) if c not in gone]

    rows = []
    for key, site in topo.sites.items():
        layer = site.layer
        out_keep, in_keep = keep[site.out_node], keep[site.in_node]
        w_before = layer.out_features if isinstance(layer, Linear) else layer.out_channels
        d_before = d_after = layer.d if isinstance(layer, DecomposedConv) else 0
        if isinstance(layer, DecomposedConv):
            coeffs = layer.coeffs[out_keep][:, in_keep]
            mask = layer.mask[out_keep][:, in_keep]
            dead = set(report.layers[key].dead_basis) if key in report.layers else set()
            basis_keep = [m for m in range(layer.d) if m not in dead] or [0]
            layer.coeffs = np.ascontiguousarray(coeffs[:, :, basis_keep])
            layer.mask = np.ascontiguousarray(mask[:, :, basis_keep])
            layer.basis = np.ascontiguousarray(layer.basis[basis_keep])
            d_after = layer.d
            nnz = int(np.count_nonzero(layer.coeffs))
        elif isinstance(layer, Conv):
            layer.weight = np.ascontiguousarray(layer.weight[out_keep][:, in_keep])
            nnz = int(np.count_nonzero(layer.weight))
        else:
            w = layer.weight.reshape(layer.out_features, -1, site.spatial)[out_keep][:, in_keep]
            layer.weight = np.ascontiguousarray(w.reshape(len(out_keep), -1))
            nnz = int(np.count_nonzero(layer.weight))
        layer.bias = layer.bias[out_keep].copy()
        rows.append(WidthRow(key, w_before, len(out_keep), d_before, d_after, nnz))

    for n, bn_layers in topo.bn.items():
        for k in bn_layers:
            bn = net.layers[k]
            for name in ("gamma", "beta", "running_mean", "running_var"):
                setattr(bn, name, getattr(bn, name)[keep[n]].copy())

    problems = validate(net)
    if problems:
        raise RuntimeError("shrunk network failed validation: " + "; ".join(map(str, problems)))
    return net, rows
