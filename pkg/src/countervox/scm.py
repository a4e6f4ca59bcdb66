"""Invertible causal mechanisms over scalar variables.

A :class:`CausalGraph` is a DAG of named variables. Roots (subject
metadata such as age, sex, diagnosis) carry no mechanism; every other
node is generated by a conditional location-scale :class:`Mechanism`

    v = mu(pa) + sigma(pa) * u,    u ~ N(0, 1)

with ``mu`` affine in the parents and ``sigma = softplus(affine) + floor``.
The map ``u <-> v`` is a bijection given the parents, so exogenous noise
is recovered exactly and counterfactual queries follow the three-step
recipe: recover noise from the observation, pin intervened nodes, and
re-propagate through the modified graph.

Fitting maximizes the per-node Gaussian log-likelihood of the recovered
noise by full-batch gradient descent with a backtracking line search,
which keeps results deterministic and the loss monotone.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "SIGMA_FLOOR",
    "CyclicGraphError",
    "IncompleteObservationError",
    "FitError",
    "Mechanism",
    "CausalGraph",
    "GraphSkeleton",
    "FitConfig",
    "FitResult",
    "topo_order",
    "abduct",
    "intervene",
    "predict",
    "counterfactual",
    "fit",
    "node_nll_and_grad",
    "graph_to_json",
    "graph_from_json",
    "save_graph",
    "load_graph",
    "load_skeleton",
]

SIGMA_FLOOR = 1e-6


class CyclicGraphError(ValueError):
    """The edge set admits no topological order."""

    def __init__(self, cycle: Sequence[str]):
        self.cycle = list(cycle)
        super().__init__("graph contains a cycle: " + " -> ".join(self.cycle))


class IncompleteObservationError(ValueError):
    """An observation is missing values required for abduction."""


class FitError(RuntimeError):
    """Mechanism fitting failed (empty data or non-finite loss)."""


def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_inv(y: float) -> float:
    # inverse of log(1 + e^z); y must be > 0
    y = max(float(y), 1e-8)
    return y + math.log(-math.expm1(-y)) if y < 30 else y


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class Mechanism:
    """Conditional location-scale transform ``v = mu(pa) + sigma(pa) * u``.

    ``loc_weights`` and ``scale_weights`` have one entry per parent, in
    the order given by ``parents``. The scale is
    ``softplus(scale_weights . pa + scale_intercept) + SIGMA_FLOOR`` and is
    therefore strictly positive for all finite parents.
    """

    parents: tuple[str, ...]
    loc_weights: tuple[float, ...]
    loc_intercept: float
    scale_weights: tuple[float, ...]
    scale_intercept: float

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(str(p) for p in self.parents))
        lw = tuple(float(w) for w in self.loc_weights)
        sw = tuple(float(w) for w in self.scale_weights)
        if len(lw) != len(self.parents) or len(sw) != len(self.parents):
            raise ValueError(
                f"weight arity {len(lw)}/{len(sw)} does not match {len(self.parents)} parents"
            )
        object.__setattr__(self, "loc_weights", lw)
        object.__setattr__(self, "scale_weights", sw)
        object.__setattr__(self, "loc_intercept", float(self.loc_intercept))
        object.__setattr__(self, "scale_intercept", float(self.scale_intercept))

    def _pa_array(self, pa) -> np.ndarray:
        pa = np.atleast_2d(np.asarray(pa, dtype=np.float64))
        if pa.shape[-1] != len(self.parents):
            raise ValueError(f"expected {len(self.parents)} parent values, got {pa.shape[-1]}")
        return pa

    def location(self, pa) -> np.ndarray:
        if not self.parents:
            return np.asarray(self.loc_intercept, dtype=np.float64)
        pa = self._pa_array(pa)
        return pa @ np.asarray(self.loc_weights) + self.loc_intercept

    def scale(self, pa) -> np.ndarray:
        if not self.parents:
            return np.asarray(_softplus(self.scale_intercept) + SIGMA_FLOOR)
        pa = self._pa_array(pa)
        z = pa @ np.asarray(self.scale_weights) + self.scale_intercept
        return _softplus(z) + SIGMA_FLOOR

    def forward(self, pa, u):
        """Evaluate ``v = mu(pa) + sigma(pa) * u`` (vectorized over rows)."""
        u = np.asarray(u, dtype=np.float64)
        if not np.all(np.isfinite(u)):
            raise ValueError("exogenous noise must be finite")
        out = np.asarray(self.location(pa) + self.scale(pa) * u)
        return float(out.ravel()[0]) if out.size == 1 else out

    def inverse(self, pa, v):
        """Recover ``u = (v - mu(pa)) / sigma(pa)``."""
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("observed value must be finite")
        out = np.asarray((v - self.location(pa)) / self.scale(pa))
        return float(out.ravel()[0]) if out.size == 1 else out


class _GraphBase:
    """Shared DAG bookkeeping for skeletons and mechanised graphs."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def _init_structure(self, nodes, edges) -> None:
        nodes = tuple(str(n) for n in nodes)
        if len(set(nodes)) != len(nodes):
            raise ValueError("duplicate node names")
        edges = tuple((str(a), str(b)) for a, b in edges)
        known = set(nodes)
        for a, b in edges:
            if a not in known or b not in known:
                raise ValueError(f"edge ({a}, {b}) references unknown node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        _topo(nodes, edges)  # raises CyclicGraphError on cycles

    def parent_map(self) -> dict[str, list[str]]:
        parents: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            parents[b].append(a)
        return parents

    def child_map(self) -> dict[str, list[str]]:
        children: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            children[a].append(b)
        return children

    @property
    def roots(self) -> tuple[str, ...]:
        parents = self.parent_map()
        return tuple(n for n in self.nodes if not parents[n])

    @property
    def non_roots(self) -> tuple[str, ...]:
        parents = self.parent_map()
        return tuple(n for n in self.nodes if parents[n])

    def role(self, name: str) -> str:
        return "metadata-root" if name in self.roots else "roi-volume-leaf"

    def descendants(self, names) -> set[str]:
        children = self.child_map()
        seen: set[str] = set()
        stack = list(names)
        while stack:
            for child in children[stack.pop()]:
                if child not in seen:
                    seen.add(child)
                    stack.append(child)
        return seen


@dataclass(frozen=True)
class GraphSkeleton(_GraphBase):
    """Graph structure only: which metadata point to which volumes."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        self._init_structure(self.nodes, self.edges)


@dataclass(frozen=True)
class CausalGraph(_GraphBase):
    """DAG of named variables with one mechanism per non-root node.

    ``pinned`` holds values of nodes converted to constant roots by an
    intervention; an unintervened graph has no pinned entries.
    """

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    mechanisms: Mapping[str, Mechanism] = field(default_factory=dict)
    pinned: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self._init_structure(self.nodes, self.edges)
        mechanisms = dict(self.mechanisms)
        pinned = {str(k): float(v) for k, v in self.pinned.items()}
        object.__setattr__(self, "mechanisms", mechanisms)
        object.__setattr__(self, "pinned", pinned)
        parent_map = self.parent_map()
        for name in self.nodes:
            parents = parent_map[name]
            if parents:
                mech = mechanisms.get(name)
                if mech is None:
                    raise ValueError(f"non-root node {name!r} has no mechanism")
                if set(mech.parents) != set(parents):
                    raise ValueError(
                        f"mechanism parents {mech.parents} differ from graph parents "
                        f"{tuple(parents)} for node {name!r}"
                    )
            elif name in mechanisms:
                raise ValueError(f"root node {name!r} must not carry a mechanism")

    @property
    def skeleton(self) -> GraphSkeleton:
        return GraphSkeleton(self.nodes, self.edges)


def _topo(nodes, edges) -> list[str]:
    parents = {n: set() for n in nodes}
    children: dict[str, list[str]] = {n: [] for n in nodes}
    for a, b in edges:
        parents[b].add(a)
        children[a].append(b)
    ready = [n for n in nodes if not parents[n]]
    heapq.heapify(ready)
    order = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in children[node]:
            parents[child].discard(node)
            if not parents[child]:
                heapq.heappush(ready, child)
    if len(order) < len(nodes):
        remaining = {n for n in nodes if n not in set(order)}
        raise CyclicGraphError(_find_cycle(remaining, children))
    return order


def topo_order(graph: _GraphBase) -> list[str]:
    """Topological order with deterministic name tie-breaking.

    Raises :class:`CyclicGraphError` listing one cycle if none exists.
    """
    return _topo(graph.nodes, graph.edges)


def _find_cycle(remaining: set[str], children: Mapping[str, list[str]]) -> list[str]:
    start = sorted(remaining)[0]
    path, seen = [start], {start}
    node = start
    while True:
        node = next(c for c in sorted(children[node]) if c in remaining)
        if node in seen:
            return path[path.index(node):] + [node]
        path.append(node)
        seen.add(node)


def _parent_values(mech: Mechanism, values: Mapping[str, float], node: str) -> list[float]:
    try:
        return [values[p] for p in mech.parents]
    except KeyError as exc:
        raise IncompleteObservationError(
            f"value for parent {exc.args[0]!r} of node {node!r} is missing"
        ) from exc


def abduct(graph: CausalGraph, obs: Mapping[str, float]) -> dict[str, float]:
    """Recover the exogenous noise of every non-root node from a full observation.

    The mechanisms are bijective given parents, so the posterior over the
    noise collapses to a point and recovery is exact.
    """
    missing = [n for n in graph.nodes if n not in obs]
    if missing:
        raise IncompleteObservationError(f"observation missing nodes {missing}")
    u: dict[str, float] = {}
    for node in graph.non_roots:
        mech = graph.mechanisms[node]
        u[node] = float(mech.inverse(_parent_values(mech, obs, node), obs[node]))
    return u


def intervene(graph: CausalGraph, interventions: Mapping[str, float]) -> CausalGraph:
    """Apply do-assignments, converting the targets into constant roots.

    The returned graph has the incoming edges and mechanisms of every
    intervened node removed and its value pinned; the input graph is
    untouched.
    """
    unknown = [n for n in interventions if n not in graph.nodes]
    if unknown:
        raise ValueError(f"cannot intervene on unknown nodes {unknown}")
    if not interventions:
        return graph
    targets = set(interventions)
    edges = tuple((a, b) for a, b in graph.edges if b not in targets)
    mechanisms = {n: m for n, m in graph.mechanisms.items() if n not in targets}
    pinned = dict(graph.pinned)
    pinned.update({n: float(v) for n, v in interventions.items()})
    return CausalGraph(graph.nodes, edges, mechanisms, pinned)


def predict(
    graph: CausalGraph,
    u: Mapping[str, float],
    root_values: Mapping[str, float],
) -> dict[str, float]:
    """Propagate exogenous noise through the mechanisms in topological order.

    ``root_values`` supplies the free roots; pinned nodes take their pinned
    values (a ``root_values`` entry for a pinned node is ignored).
    """
    values: dict[str, float] = {}
    for node in topo_order(graph):
        if node in graph.pinned:
            values[node] = graph.pinned[node]
        elif node in graph.mechanisms:
            if node not in u:
                raise ValueError(f"missing exogenous value for node {node!r}")
            mech = graph.mechanisms[node]
            values[node] = float(mech.forward(_parent_values(mech, values, node), u[node]))
        else:
            if node not in root_values:
                raise ValueError(f"missing root value for node {node!r}")
            values[node] = float(root_values[node])
    return values


def counterfactual(
    graph: CausalGraph,
    obs: Mapping[str, float],
    interventions: Mapping[str, float],
) -> dict[str, float]:
    """Answer "what would the observation be under do(...)".

    Nodes with no intervened ancestor keep their observed values verbatim
    (no recomputation round-off); only intervened nodes and their
    descendants are re-evaluated with the recovered noise.
    """
    u = abduct(graph, obs)
    if not interventions:
        return {n: float(obs[n]) for n in graph.nodes}
    modified = intervene(graph, interventions)
    affected = graph.descendants(interventions) | set(interventions)
    values: dict[str, float] = {}
    for node in topo_order(modified):
        if node not in affected:
            values[node] = float(obs[node])
        elif node in modified.pinned:
            values[node] = modified.pinned[node]
        else:
            mech = modified.mechanisms[node]
            values[node] = float(mech.forward(_parent_values(mech, values, node), u[node]))
    return values


# ---------------------------------------------------------------------------
# Fitting


@dataclass(frozen=True)
class FitConfig:
    """Full-batch fitting settings.

    ``max_iter`` is a ceiling; optimization stops early once the gradient
    norm drops below ``grad_tol`` or backtracking can no longer improve
    the loss. ``constant_scale`` freezes the scale weights at zero so the
    scale is a fitted constant and the location reduces to ordinary least
    squares.
    """

    max_iter: int = 50_000
    grad_tol: float = 1e-8
    initial_step: float = 1.0
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60
    constant_scale: bool = False


@dataclass(frozen=True)
class FitResult:
    graph: CausalGraph
    nll: float
    node_nll: dict[str, float]
    node_iters: dict[str, int]
    node_loss_history: dict[str, np.ndarray]


def node_nll_and_grad(
    theta: np.ndarray, pa: np.ndarray, v: np.ndarray, constant_scale: bool = False
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of one mechanism and its gradient.

    ``theta`` packs ``[loc_weights (P), loc_intercept, scale_weights (P),
    scale_intercept]``. The loss per sample is ``0.5*u^2 + log sigma`` with
    ``u = (v - mu)/sigma`` (the constant 0.5*log(2*pi) is dropped). With
    ``constant_scale`` the scale-weight gradient entries are zeroed.
    """
    n, p = pa.shape
    w = theta[:p]
    b = theta[p]
    c = theta[p + 1:2 * p + 1]
    c0 = theta[2 * p + 1]
    mu = pa @ w + b
    z = pa @ c + c0
    sigma = _softplus(z) + SIGMA_FLOOR
    u = (v - mu) / sigma
    loss = float(np.mean(0.5 * u * u + np.log(sigma)))
    # d loss / d mu = -u / sigma ; d loss / d sigma = (1 - u^2) / sigma
    g_mu = -u / sigma / n
    g_sigma = (1.0 - u * u) / sigma / n
    g_z = g_sigma * _sigmoid(z)
    grad = np.empty_like(theta)
    grad[:p] = pa.T @ g_mu
    grad[p] = g_mu.sum()
    grad[p + 1:2 * p + 1] = 0.0 if constant_scale else pa.T @ g_z
    grad[2 * p + 1] = g_z.sum()
    return loss, grad


def _fit_node(
    pa: np.ndarray, v: np.ndarray, config: FitConfig
) -> tuple[np.ndarray, float, int, np.ndarray]:
    """Minimize the node NLL by gradient descent with backtracking."""
    n, p = pa.shape
    # Standardized parent coordinates keep the problem well conditioned;
    # coefficients are mapped back to raw space by the caller. The descent
    # is warm-started at the least-squares location fit so the remaining
    # iterations mostly shape the scale.
    theta = np.zeros(2 * p + 2)
    design = np.column_stack([pa, np.ones(n)])
    beta = np.linalg.lstsq(design, v, rcond=None)[0]
    theta[:p] = beta[:p]
    theta[p] = beta[p]
    residual_std = float(np.sqrt(np.mean((v - design @ beta) ** 2)))
    theta[2 * p + 1] = _softplus_inv(max(residual_std, 1e-3))
    # An interpolating location fit pins the likelihood's location part;
    # descending it jointly with a collapsing scale is a stiff valley
    # (location curvature grows as 1/sigma^2), so freeze it and let the
    # scale walk to its floor alone.
    frozen_location = residual_std <= 1e-10 * max(float(np.std(v)), 1.0)

    def evaluate(th):
        ls, gr = node_nll_and_grad(th, pa, v, config.constant_scale)
        if frozen_location:
            gr = gr.copy()
            gr[: p + 1] = 0.0
        return ls, gr

    loss, grad = evaluate(theta)
    if not np.isfinite(loss):
        raise FitError("initial loss is not finite")
    history = [loss]
    iters = 0
    stall = 0
    # The trial step doubles after every accepted move so the line search
    # adapts to the loss curvature (raw-scale volumes make unit steps tiny).
    step = config.initial_step
    while iters < config.max_iter:
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < config.grad_tol:
            break
        accepted = False
        for _ in range(config.max_backtracks):
            cand = theta - step * grad
            cand_loss, cand_grad = evaluate(cand)
            if np.isfinite(cand_loss) and cand_loss <= loss - config.armijo_c * step * np.dot(grad, grad):
                improvement = loss - cand_loss
                theta, loss, grad = cand, cand_loss, cand_grad
                accepted = True
                break
            step *= config.backtrack
        iters += 1
        if not accepted:
            break  # step underflow: converged as far as float64 allows
        history.append(loss)
        # degenerate fits (sigma pinned at its floor) keep accepting
        # microscopic moves; stop once progress has flatlined
        stall = stall + 1 if improvement < 1e-12 * (1.0 + abs(loss)) else 0
        if stall >= 10:
            break
        step = min(step * 2.0, 1e12)
        if not np.isfinite(loss):
            raise FitError(f"loss became non-finite at iteration {iters}")
    return theta, loss, iters, np.asarray(history)


def fit(
    skeleton: GraphSkeleton | CausalGraph,
    data: Mapping[str, np.ndarray],
    config: FitConfig | None = None,
) -> FitResult:
    """Fit every non-root mechanism of a skeleton to cohort data.

    ``skeleton`` provides nodes and edges (a fitted graph may be passed;
    its mechanisms are ignored). ``data`` maps each node name to a 1-D
    array of per-subject values, all of one common length. Nodes are
    conditionally independent given their parents, so each mechanism is
    fitted on its own; fitted mechanisms list parents in name order.

    Cohorts too small to support per-parent scale weights (fewer than
    four samples per location parameter) are fitted with a constant
    scale; the heteroscedastic likelihood is unbounded in that regime.

    Returns the fitted graph and the total mean negative log-likelihood.
    Deterministic: full-batch gradients, no randomness.
    """
    config = config or FitConfig()
    order = topo_order(skeleton)
    lengths = {len(np.asarray(data[n])) for n in order if n in data}
    missing = [n for n in order if n not in data]
    if missing:
        raise FitError(f"data missing for nodes {missing}")
    if len(lengths) != 1 or 0 in lengths:
        raise FitError(f"node data must be nonempty arrays of one common length, got {lengths}")
    parent_map = skeleton.parent_map()
    mechanisms: dict[str, Mechanism] = {}
    node_nll: dict[str, float] = {}
    node_iters: dict[str, int] = {}
    node_history: dict[str, np.ndarray] = {}
    for node in order:
        parents = sorted(parent_map[node])
        if not parents:
            continue
        pa_raw = np.column_stack([np.asarray(data[p], dtype=np.float64) for p in parents])
        v = np.asarray(data[node], dtype=np.float64)
        mean = pa_raw.mean(axis=0)
        std = pa_raw.std(axis=0)
        std[std < 1e-12] = 1.0
        node_config = config
        if len(v) < 4 * (len(parents) + 1) and not config.constant_scale:
            node_config = replace(config, constant_scale=True)
        theta, loss, iters, history = _fit_node((pa_raw - mean) / std, v, node_config)
        p = len(parents)
        w_std, b_std = theta[:p], theta[p]
        c_std, c0_std = theta[p + 1:2 * p + 1], theta[2 * p + 1]
        w = w_std / std
        c = c_std / std
        mechanisms[node] = Mechanism(
            parents=tuple(parents),
            loc_weights=tuple(w),
            loc_intercept=float(b_std - np.dot(w, mean)),
            scale_weights=tuple(c),
            scale_intercept=float(c0_std - np.dot(c, mean)),
        )
        node_nll[node] = loss
        node_iters[node] = iters
        node_history[node] = history
    graph = CausalGraph(skeleton.nodes, skeleton.edges, mechanisms)
    return FitResult(graph, float(sum(node_nll.values())), node_nll, node_iters, node_history)


# ---------------------------------------------------------------------------
# Serialization


def graph_to_json(graph: CausalGraph) -> dict:
    return {
        "nodes": [{"name": n, "role": graph.role(n)} for n in graph.nodes],
        "edges": [[a, b] for a, b in graph.edges],
        "mechanisms": {
            name: {
                "parents": list(m.parents),
                "loc_weights": list(m.loc_weights),
                "loc_intercept": m.loc_intercept,
                "scale_weights": list(m.scale_weights),
                "scale_intercept": m.scale_intercept,
            }
            for name, m in sorted(graph.mechanisms.items())
        },
        "pinned": dict(graph.pinned),
    }


def graph_from_json(doc: Mapping) -> CausalGraph:
    nodes = tuple(entry["name"] if isinstance(entry, dict) else str(entry) for entry in doc["nodes"])
    edges = tuple((a, b) for a, b in doc.get("edges", []))
    mechanisms = {
        name: Mechanism(
            parents=tuple(m["parents"]),
            loc_weights=tuple(m["loc_weights"]),
            loc_intercept=m["loc_intercept"],
            scale_weights=tuple(m["scale_weights"]),
            scale_intercept=m["scale_intercept"],
        )
        for name, m in doc.get("mechanisms", {}).items()
    }
    return CausalGraph(nodes, edges, mechanisms, doc.get("pinned", {}))


def save_graph(graph: CausalGraph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_json(graph), indent=2) + "\n")


def load_graph(path) -> CausalGraph:
    return graph_from_json(json.loads(Path(path).read_text()))


def load_skeleton(path) -> GraphSkeleton:
    """Read a skeleton JSON: the graph format with mechanisms absent/ignored."""
    doc = json.loads(Path(path).read_text())
    nodes = tuple(e["name"] if isinstance(e, dict) else str(e) for e in doc["nodes"])
    edges = tuple((a, b) for a, b in doc.get("edges", []))
    return GraphSkeleton(nodes, edges)
