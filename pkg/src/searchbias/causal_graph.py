"""Causal diagrams, d-separation, the back-door criterion and exact adjustment.

Graphs are immutable. Nodes are plain strings; latent variables such as
consumer demand are ordinary nodes, and which of them are observed is a
concern of the data layer.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import DegenerateSupportError, IdentificationError, StructuralError

MAX_JOINT_CELLS = 10**6


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph over string nodes.

    ``edge_tags`` attaches free-form labels to edges (e.g. a dashed
    cannibalization arrow); ``notes`` records structure that is not part of
    the static graph, such as lagged feedback.
    """

    nodes: frozenset
    edges: frozenset
    edge_tags: Mapping = field(default_factory=dict, compare=False)
    notes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        nodes = frozenset(self.nodes)
        edge_list = [tuple(e) for e in self.edges]
        edges = frozenset(edge_list)
        if len(edges) != len(edge_list):
            raise StructuralError("duplicate edges")
        for parent, child in edges:
            if parent == child:
                raise StructuralError(f"self-loop on {parent!r}")
            for end in (parent, child):
                if end not in nodes:
                    raise StructuralError(f"edge endpoint {end!r} is not a declared node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_tags", MappingProxyType(dict(self.edge_tags)))
        object.__setattr__(self, "notes", tuple(self.notes))
        parents = {n: set() for n in nodes}
        children = {n: set() for n in nodes}
        for p, c in edges:
            parents[c].add(p)
            children[p].add(c)
        object.__setattr__(self, "_parents", {n: frozenset(v) for n, v in parents.items()})
        object.__setattr__(self, "_children", {n: frozenset(v) for n, v in children.items()})
        object.__setattr__(self, "_order", self._toposort())

    @classmethod
    def from_edges(cls, edges: Iterable, nodes: Iterable = (), **kwargs) -> "Dag":
        edges = [tuple(e) for e in edges]
        all_nodes = set(nodes)
        for p, c in edges:
            all_nodes.update((p, c))
        return cls(frozenset(all_nodes), edges, **kwargs)

    def _toposort(self):
        indeg = {n: len(self._parents[n]) for n in self.nodes}
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in sorted(self._children[n]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            stuck = sorted(n for n, d in indeg.items() if d > 0)
            raise StructuralError(f"graph has a cycle through {stuck}")
        return tuple(order)

    @property
    def topological_order(self) -> tuple:
        return self._order

    def parents(self, node) -> frozenset:
        self._check(node)
        return self._parents[node]

    def children(self, node) -> frozenset:
        self._check(node)
        return self._children[node]

    def descendants(self, node) -> frozenset:
        """Strict descendants of ``node``."""
        self._check(node)
        seen = set()
        stack = list(self._children[node])
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self._children[n])
        return frozenset(seen)

    def ancestors(self, nodes) -> frozenset:
        """``nodes`` together with all their ancestors."""
        seen = set()
        stack = list(nodes)
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self._parents[n])
        return frozenset(seen)

    def remove_edges(self, edges) -> "Dag":
        drop = {tuple(e) for e in edges}
        tags = {e: t for e, t in self.edge_tags.items() if e not in drop}
        return Dag(self.nodes, self.edges - drop, tags, self.notes)

    def add_edges(self, edges) -> "Dag":
        return Dag(self.nodes, self.edges | {tuple(e) for e in edges}, self.edge_tags, self.notes)

    def _check(self, node):
        if node not in self.nodes:
            raise IdentificationError(f"unknown node {node!r}")

    # serialization

    def to_edgelist(self) -> str:
        lines = [f"{p} -> {c}" for p, c in sorted(self.edges)]
        isolated = sorted(n for n in self.nodes if not self._parents[n] and not self._children[n])
        return "\n".join(lines + isolated) + "\n"

    @classmethod
    def from_edgelist(cls, text: str) -> "Dag":
        edges, nodes = [], set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "->" in line:
                parent, child = (s.strip() for s in line.split("->", 1))
                if not parent or not child:
                    raise StructuralError(f"line {lineno}: malformed edge {raw!r}")
                edges.append((parent, child))
            else:
                nodes.add(line)
        return cls.from_edges(edges, nodes)

    def to_json(self) -> str:
        payload = {
            "nodes": sorted(self.nodes),
            "edges": [list(e) for e in sorted(self.edges)],
        }
        if self.edge_tags:
            payload["edge_tags"] = [[p, c, t] for (p, c), t in sorted(self.edge_tags.items())]
        if self.notes:
            payload["notes"] = list(self.notes)
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Dag":
        data = json.loads(text)
        tags = {(p, c): t for p, c, t in data.get("edge_tags", [])}
        return cls(frozenset(data["nodes"]), [tuple(e) for e in data["edges"]], tags,
                   tuple(data.get("notes", ())))

    @classmethod
    def load(cls, path) -> "Dag":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        return cls.from_json(text) if path.suffix == ".json" else cls.from_edgelist(text)


def _check_query(dag: Dag, x, y, z):
    for n in (x, y, *z):
        dag._check(n)
    if x == y:
        raise IdentificationError("x and y must differ")
    if x in z or y in z:
        raise IdentificationError("x and y must not be in the conditioning set")


def is_d_separated(dag: Dag, x, y, z=()) -> bool:
    """Whether ``z`` d-separates ``x`` and ``y``.

    Reachability search over (node, direction) states: a trail may pass a
    non-collider that is not in ``z``, and a collider whose descendants
    (itself included) intersect ``z``.
    """
    z = frozenset(z)
    _check_query(dag, x, y, z)
    anc_z = dag.ancestors(z)
    # "up": arrived from a child (travelling against the edge);
    # "down": arrived from a parent.
    queue = deque([(x, "up")])
    visited = set()
    while queue:
        node, direction = queue.popleft()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node == y:
            return False
        if direction == "up":
            if node in z:
                continue
            for p in dag._parents[node]:
                queue.append((p, "up"))
            for c in dag._children[node]:
                queue.append((c, "down"))
        else:
            if node not in z:
                for c in dag._children[node]:
                    queue.append((c, "down"))
            if node in anc_z:
                for p in dag._parents[node]:
                    queue.append((p, "up"))
    return True


def satisfies_backdoor(dag: Dag, treatment, outcome, z=()) -> bool:
    """Back-door criterion for ``z`` relative to ``(treatment, outcome)``."""
    z = frozenset(z)
    _check_query(dag, treatment, outcome, z)
    if z & dag.descendants(treatment):
        return False
    cut = dag.remove_edges((treatment, c) for c in dag.children(treatment))
    return is_d_separated(cut, treatment, outcome, z)


@dataclass(frozen=True)
class DiscreteScm:
    """Discrete structural model: a DAG with one CPT per node.

    ``cpts[node]`` has shape ``(prod(parent cards), card)``; rows enumerate
    parent configurations in C order over ``sorted(dag.parents(node))``.
    """

    dag: Dag
    cardinalities: Mapping
    cpts: Mapping

    def __post_init__(self):
        cards = {n: int(self.cardinalities[n]) for n in self.dag.nodes}
        cpts = {}
        for n in self.dag.nodes:
            if cards[n] < 1:
                raise StructuralError(f"node {n!r} has no states")
            table = np.asarray(self.cpts[n], dtype=float)
            rows = int(np.prod([cards[p] for p in self.parent_order(n)], dtype=np.int64))
            if table.shape != (rows, cards[n]):
                raise StructuralError(
                    f"CPT for {n!r} has shape {table.shape}, expected {(rows, cards[n])}")
            if np.any(table < 0) or np.any(table > 1):
                raise StructuralError(f"CPT for {n!r} has entries outside [0, 1]")
            if np.any(np.abs(table.sum(axis=1) - 1) > 1e-12):
                raise StructuralError(f"CPT rows for {n!r} do not sum to 1")
            table.setflags(write=False)
            cpts[n] = table
        object.__setattr__(self, "cardinalities", MappingProxyType(cards))
        object.__setattr__(self, "cpts", MappingProxyType(cpts))

    def parent_order(self, node) -> tuple:
        return tuple(sorted(self.dag.parents(node)))

    @property
    def axes(self) -> tuple:
        return tuple(sorted(self.dag.nodes))

    def joint(self, intervention: Mapping | None = None) -> np.ndarray:
        """Joint distribution over ``axes``; intervened nodes get point masses.

        Intervening deletes the node's equation and fixes its value
        (truncated factorization).
        """
        intervention = dict(intervention or {})
        axes = self.axes
        shape = tuple(self.cardinalities[n] for n in axes)
        if np.prod(shape, dtype=np.int64) > MAX_JOINT_CELLS:
            raise StructuralError(f"joint state space {shape} exceeds {MAX_JOINT_CELLS} cells")
        pos = {n: i for i, n in enumerate(axes)}
        joint = np.ones(shape)
        for n in axes:
            card = self.cardinalities[n]
            if n in intervention:
                factor = np.zeros(card)
                factor[intervention[n]] = 1.0
                view = [1] * len(axes)
                view[pos[n]] = card
                joint = joint * factor.reshape(view)
                continue
            parents = self.parent_order(n)
            table = self.cpts[n].reshape([self.cardinalities[p] for p in parents] + [card])
            # parents are sorted and axes are sorted, so the table axes are
            # already in joint-axis order once n is slotted in.
            members = sorted(parents + (n,))
            table = np.moveaxis(table, -1, members.index(n))
            view = [1] * len(axes)
            for m in members:
                view[pos[m]] = self.cardinalities[m]
            joint = joint * table.reshape(view)
        return joint

    def marginal(self, nodes, intervention=None) -> np.ndarray:
        """Marginal over ``nodes`` (in the given order)."""
        joint = self.joint(intervention)
        axes = self.axes
        keep = [axes.index(n) for n in nodes]
        drop = tuple(i for i in range(len(axes)) if i not in keep)
        m = joint.sum(axis=drop)
        kept_sorted = sorted(keep)
        return np.transpose(m, [kept_sorted.index(k) for k in keep])

    def interventional(self, treatment, value, outcome) -> np.ndarray:
        """Pr(outcome | do(treatment = value)) by truncated factorization."""
        return self.marginal([outcome], {treatment: value})


def backdoor_adjust(scm: DiscreteScm, treatment, treatment_value, outcome, z=()) -> np.ndarray:
    """Sum over z of Pr(outcome | x, z) Pr(z), by exact enumeration."""
    z = tuple(sorted(z))
    if not satisfies_backdoor(scm.dag, treatment, outcome, z):
        raise IdentificationError(
            f"{set(z) or '{}'} does not satisfy the back-door criterion for "
            f"({treatment}, {outcome})")
    m = scm.marginal((treatment, outcome) + z)
    m_x = m[treatment_value]  # axes: outcome, *z
    result = np.zeros(scm.cardinalities[outcome])
    pz = m.sum(axis=(0, 1))
    pxz = m_x.sum(axis=0)
    for cell in itertools.product(*(range(scm.cardinalities[n]) for n in z)):
        if pz[cell] <= 0:
            continue
        if pxz[cell] <= 0:
            named = ", ".join(f"{n}={v}" for n, v in zip(z, cell))
            raise DegenerateSupportError(
                f"Pr({treatment}={treatment_value}, {named}) is zero")
        result += m_x[(slice(None),) + cell] / pxz[cell] * pz[cell]
    return result


def builtin_diagrams() -> dict:
    """The search-ad causal diagrams, keyed figure1 ... figure6."""
    figure1 = Dag.from_edges([
        ("Q", "P"), ("Q", "O"), ("A", "P"), ("O", "Y"), ("P", "Y"),
    ])
    figure2 = Dag.from_edges([
        ("consumer_demand", "V"),
        ("consumer_demand", "eps0"),
        ("V", "auction"),
        ("V", "X"),
        ("auction", "X"),
        ("V", "organic_search"),
        ("organic_search", "eps1"),
        ("X", "Y"),
        ("eps0", "Y"),
        ("eps1", "Y"),
    ])
    figure3 = Dag.from_edges([
        ("consumer_demand", "V"),
        ("consumer_demand", "eps0"),
        ("consumer_demand", "X2"),
        ("X2", "V"),
        ("X2", "eps2"),
        ("X2", "budget"),
        ("budget", "X1"),
        ("V", "auction"),
        ("V", "X1"),
        ("auction", "X1"),
        ("V", "organic_search"),
        ("organic_search", "eps1"),
        ("X1", "Y"),
        ("eps0", "Y"),
        ("eps1", "Y"),
        ("eps2", "Y"),
    ])
    figure4 = figure3.remove_edges([("budget", "X1")])
    figure6 = Dag.from_edges(
        [
            ("consumer_demand", "queries"),
            ("consumer_demand", "sales"),
            ("queries", "organic_rank"),
            ("queries", "ad_rank"),
            ("bids", "ad_rank"),
            ("budget", "ad_rank"),
            ("queries", "paid_clicks"),
            ("queries", "organic_clicks"),
            ("ad_rank", "paid_clicks"),
            ("organic_rank", "organic_clicks"),
            ("paid_clicks", "organic_clicks"),
            ("paid_clicks", "ad_spend"),
            ("bids", "ad_spend"),
            ("paid_clicks", "sales"),
            ("organic_clicks", "sales"),
        ],
        edge_tags={("paid_clicks", "organic_clicks"): "cannibalization (dashed)"},
        notes=("lagged edge paid_clicks -> ad_rank (predicted CTR) omitted from the static graph",),
    )
    return {
        "figure1": figure1,
        "figure2": figure2,
        "figure3": figure3,
        "figure4": figure4,
        "figure6": figure6,
    }
