import itertools
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest

from searchbias.causal_graph import Dag, DiscreteScm
from searchbias.dataset import MmmPanel

FIXTURES = Path(__file__).parent / "fixtures"

# hand-derived from the fixture counts with 0.5 thresholds and strict ">"
FIXTURE_SEGMENTS = {
    "acme shoes": "target",
    "rival sneakers": "competitor",
    "running shoes": "general",
    "shoe trivia": "irrelevant",
    "half acme": "general",
    "rival boots": "irrelevant",
}


_REPORT_LINES: list = []


def report(label: str, ok: bool, detail: str = "") -> None:
    """Record one PASS/FAIL line; all lines are printed in the terminal summary."""
    _REPORT_LINES.append(f"{label}: {'PASS' if ok else 'FAIL'}" + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _REPORT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def make_panel(n=60, seed=0, **overrides) -> MmmPanel:
    rng = np.random.default_rng(seed)
    d0 = date(2020, 1, 1)
    v = rng.uniform(50, 150, (3, n))
    x1 = rng.uniform(10, 100, n)
    y = 100 + 2 * x1 + v.sum(axis=0) + rng.normal(0, 5, n)
    kw = dict(dates=tuple(d0 + timedelta(days=i) for i in range(n)), y=y, x1=x1,
              v1=v[0], v2=v[1], v3=v[2])
    kw.update(overrides)
    return MmmPanel(**kw)


def random_dag(rng, n_nodes, p_edge=0.5) -> Dag:
    """Random DAG: edges only go forward in a random permutation."""
    names = [f"n{i}" for i in range(n_nodes)]
    order = list(rng.permutation(names))
    edges = [(order[i], order[j]) for i in range(n_nodes) for j in range(i + 1, n_nodes)
             if rng.random() < p_edge]
    return Dag.from_edges(edges, nodes=names)


def random_scm(rng, dag: Dag, max_card=3, alpha=1.0) -> DiscreteScm:
    cards = {n: int(rng.integers(2, max_card + 1)) for n in dag.nodes}
    cpts = {}
    for n in dag.nodes:
        rows = int(np.prod([cards[p] for p in sorted(dag.parents(n))], dtype=int))
        cpts[n] = rng.dirichlet(np.full(cards[n], alpha), size=rows)
    return DiscreteScm(dag, cards, cpts)


def truncated_factorization(scm: DiscreteScm, treatment, value, outcome) -> np.ndarray:
    """Independent oracle: Pr(outcome | do(treatment=value)) by looping over every
    joint state and multiplying CPT entries, skipping the treatment's own factor."""
    nodes = sorted(scm.dag.nodes)
    cards = [scm.cardinalities[n] for n in nodes]
    out = np.zeros(scm.cardinalities[outcome])
    for state in itertools.product(*(range(c) for c in cards)):
        s = dict(zip(nodes, state))
        if s[treatment] != value:
            continue
        p = 1.0
        for n in nodes:
            if n == treatment:
                continue
            parents = sorted(scm.dag.parents(n))
            row = 0
            for q in parents:
                row = row * scm.cardinalities[q] + s[q]
            p *= scm.cpts[n][row, s[n]]
        out[s[outcome]] += p
    return out


def all_paths_blocked(dag: Dag, x, y, z) -> bool:
    """Independent d-separation oracle by enumerating simple undirected paths."""
    z = set(z)
    adj = {n: set() for n in dag.nodes}
    for a, b in dag.edges:
        adj[a].add(b)
        adj[b].add(a)
    anc_or_self = {n: dag.descendants(n) | {n} for n in dag.nodes}

    def blocked(path):
        for i in range(1, len(path) - 1):
            a, m, b = path[i - 1], path[i], path[i + 1]
            collider = (a, m) in dag.edges and (b, m) in dag.edges
            if collider:
                if not (anc_or_self[m] & z):
                    return True
            elif m in z:
                return True
        return False

    def walk(path):
        last = path[-1]
        if last == y:
            yield list(path)
            return
        for nb in adj[last]:
            if nb not in path:
                path.append(nb)
                yield from walk(path)
                path.pop()

    return all(blocked(p) for p in walk([x]))


@pytest.fixture
def fixtures_dir():
    return FIXTURES
