"""Discrete pairwise MRF minimizer with Potts smoothness.

Energy of a labeling: sum of per-node unary costs plus lam per edge whose
endpoints disagree. Quality-style objectives (to be maximized) enter as
negated unaries. Minimization is alpha-expansion: starting from the greedy
per-node argmin, each pass tries every label of the union alphabet in
ascending order, solving the binary expansion move exactly as a min-cut
(s-t max-flow on the standard reparameterized graph); a move is kept only
when it strictly lowers the true energy, so the energy is monotonically
nonincreasing across passes. For Potts this carries the usual factor-2
optimality guarantee.

Nodes may have different candidate label lists; a node never leaves its
list. Ties prefer the lowest label id and expansion visits labels in
ascending order, which keeps results deterministic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

__all__ = ["MRFProblem", "SolveConfig", "NoCandidatesError", "solve",
           "solve_exhaustive", "energy_of", "dump_problem", "load_problem"]

# max-flow capacities are quantized to integers at this resolution; the
# solver works on int32 internally, so the largest capacity maps to 2^30
_CAP_SCALE_BITS = 30


class NoCandidatesError(ValueError):
    """Some node has an empty candidate list."""


@dataclass(frozen=True)
class MRFProblem:
    """Node-wise candidate labels with unary costs, plus Potts edges.

    candidates[i] and unaries[i] are aligned 1-D arrays for node i (stored
    sorted by label id); edges is an (E, 2) int array; lam the Potts
    disagreement penalty.
    """

    candidates: list
    unaries: list
    edges: np.ndarray
    lam: float

    def __post_init__(self):
        cands, unrs = [], []
        for i, (c, u) in enumerate(zip(self.candidates, self.unaries)):
            c = np.asarray(c, dtype=np.int64).reshape(-1)
            u = np.asarray(u, dtype=np.float64).reshape(-1)
            if len(c) == 0:
                raise NoCandidatesError(f"node {i} has no candidate labels")
            if len(c) != len(u):
                raise ValueError(f"node {i}: candidate/unary length mismatch")
            if not np.isfinite(u).all():
                raise ValueError(f"node {i}: unary costs must be finite")
            order = np.argsort(c)
            c, u = c[order], u[order]
            if np.any(np.diff(c) == 0):
                raise ValueError(f"node {i}: duplicate candidate labels")
            if c[0] < 0:
                raise ValueError(f"node {i}: labels must be nonnegative")
            cands.append(c)
            unrs.append(u)
        if len(self.candidates) != len(self.unaries):
            raise ValueError("candidates and unaries length mismatch")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges) and (edges.min() < 0 or edges.max() >= len(cands)):
            raise ValueError("edge references an invalid node")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        object.__setattr__(self, "candidates", cands)
        object.__setattr__(self, "unaries", unrs)
        object.__setattr__(self, "edges", edges)

    @property
    def n_nodes(self) -> int:
        return len(self.candidates)

    def unary(self, node: int, label: int) -> float:
        c = self.candidates[node]
        pos = np.searchsorted(c, label)
        if pos >= len(c) or c[pos] != label:
            raise KeyError(f"label {label} not allowed for node {node}")
        return float(self.unaries[node][pos])


class _FlatProblem:
    """Vectorized view: flat candidate/unary arrays plus a strictly
    increasing global key (node * stride + label) for O(log) lookups."""

    def __init__(self, problem: MRFProblem):
        self.problem = problem
        self.n = problem.n_nodes
        self.sizes = np.array([len(c) for c in problem.candidates], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.cand = np.concatenate(problem.candidates)
        self.cost = np.concatenate(problem.unaries)
        self.node_of = np.repeat(np.arange(self.n), self.sizes)
        self.stride = int(self.cand.max()) + 1
        self.key = self.node_of * self.stride + self.cand
        self.lam = problem.lam
        self.edges = problem.edges

    def cost_at(self, nodes, labels):
        """Unary costs of the given (node, label) pairs; raises KeyError on
        a label outside a node's candidates."""
        key = np.asarray(nodes, dtype=np.int64) * self.stride + labels
        pos = np.searchsorted(self.key, key)
        if np.any(pos >= len(self.key)) or np.any(self.key[pos] != key):
            raise KeyError("label not in a node's candidate list")
        return self.cost[pos]

    def energy(self, labels):
        e = float(self.cost_at(np.arange(self.n), labels).sum())
        if len(self.edges):
            li = labels[self.edges[:, 0]]
            lj = labels[self.edges[:, 1]]
            e += self.lam * int(np.count_nonzero(li != lj))
        return e

    def greedy(self):
        mins = np.minimum.reduceat(self.cost, self.offsets[:-1])
        is_min = self.cost == np.repeat(mins, self.sizes)
        idx = np.where(is_min, np.arange(len(self.cost)), len(self.cost))
        first = np.minimum.reduceat(idx, self.offsets[:-1])
        return self.cand[first]

    def nodes_with_label(self, label):
        sel = self.cand == label
        return self.node_of[sel], self.cost[sel]


@dataclass(frozen=True)
class SolveConfig:
    max_sweeps: int = 20


def energy_of(problem: MRFProblem, labels: np.ndarray) -> float:
    """Exact energy of a labeling."""
    return _FlatProblem(problem).energy(np.asarray(labels, dtype=np.int64))


def _expansion_move(flat: _FlatProblem, labels, alpha, alpha_nodes, alpha_costs):
    """Optimal binary move letting eligible nodes switch to alpha; returns
    the proposed labeling."""
    eligible = alpha_nodes[labels[alpha_nodes] != alpha]
    if len(eligible) == 0:
        return labels
    p = len(eligible)
    pos = np.full(flat.n, -1, dtype=np.int64)
    pos[eligible] = np.arange(p)
    source, sink = p, p + 1

    th0 = flat.cost_at(eligible, labels[eligible]).copy()
    th1 = alpha_costs[labels[alpha_nodes] != alpha].copy()

    lam = flat.lam
    ea, eb = flat.edges[:, 0], flat.edges[:, 1]
    ia, ib = pos[ea], pos[eb]
    la, lb = labels[ea], labels[eb]

    both = (ia >= 0) & (ib >= 0)
    if both.any():
        A = lam * (la[both] != lb[both])
        B = lam * (la[both] != alpha)
        C = lam * (lb[both] != alpha)
        # E(ya,yb) = A + (C-A) ya - C yb + (B+C-A)[ya=0][yb=1]  (D = 0)
        ca = C - A
        np.add.at(th1, ia[both][ca >= 0], ca[ca >= 0])
        np.add.at(th0, ia[both][ca < 0], -ca[ca < 0])
        np.add.at(th0, ib[both], C)  # -C*yb == C*(1-yb) - C; constant dropped
        w = B + C - A
        wpos = w > 0
        erow, ecol, ecap = ia[both][wpos], ib[both][wpos], w[wpos]
    else:
        erow = ecol = np.empty(0, dtype=np.int64)
        ecap = np.empty(0)

    only_a = (ia >= 0) & (ib < 0)
    if only_a.any():
        np.add.at(th0, ia[only_a], lam * (la[only_a] != lb[only_a]))
        np.add.at(th1, ia[only_a], lam * (lb[only_a] != alpha))
    only_b = (ib >= 0) & (ia < 0)
    if only_b.any():
        np.add.at(th0, ib[only_b], lam * (la[only_b] != lb[only_b]))
        np.add.at(th1, ib[only_b], lam * (la[only_b] != alpha))

    base = np.minimum(th0, th1)
    to_sink = th0 - base  # cut when the node keeps its label (source side)
    to_src = th1 - base   # cut when the node switches (sink side)

    rows = np.concatenate([erow,
                           np.full(p, source, dtype=np.int64),
                           np.arange(p)])
    cols = np.concatenate([ecol, np.arange(p),
                           np.full(p, sink, dtype=np.int64)])
    caps = np.concatenate([ecap, to_src, to_sink])
    keep = caps > 0
    rows, cols, caps = rows[keep], cols[keep], caps[keep]
    if len(caps) == 0:
        return labels

    scale = float(2 ** _CAP_SCALE_BITS) / max(float(caps.max()), 1e-300)
    icaps = np.round(caps * scale).astype(np.int32)
    graph = coo_matrix((icaps, (rows, cols)), shape=(p + 2, p + 2)).tocsr()
    graph.sum_duplicates()
    flow = maximum_flow(graph, source, sink).flow
    residual = graph - flow
    reach = breadth_first_order(residual > 0, source, directed=True,
                                return_predecessors=False)
    on_source = np.zeros(p + 2, dtype=bool)
    on_source[reach] = True

    out = labels.copy()
    out[eligible[~on_source[:p]]] = alpha
    return out


def solve(problem: MRFProblem, cfg: SolveConfig = SolveConfig()):
    """Alpha-expansion minimization; returns (labels, energy).

    The returned energy is exactly the energy of the returned labeling and
    never exceeds the greedy initialization's.
    """
    flat = _FlatProblem(problem)
    labels = flat.greedy()
    best = flat.energy(labels)
    if problem.lam == 0 or len(problem.edges) == 0:
        return labels, best

    alphabet = np.unique(flat.cand)
    per_alpha = {int(a): flat.nodes_with_label(int(a)) for a in alphabet}
    for _ in range(cfg.max_sweeps):
        improved = False
        for alpha in alphabet:
            nodes, costs = per_alpha[int(alpha)]
            proposal = _expansion_move(flat, labels, int(alpha), nodes, costs)
            if proposal is labels:
                continue
            e = flat.energy(proposal)
            if e < best:
                labels, best = proposal, e
                improved = True
        if not improved:
            break
    return labels, best


def solve_exhaustive(problem: MRFProblem, max_nodes: int = 12):
    """Exact minimum by enumeration (the oracle for small problems)."""
    if problem.n_nodes > max_nodes:
        raise ValueError(f"exhaustive mode limited to {max_nodes} nodes")
    flat = _FlatProblem(problem)
    best_labels, best_e = None, np.inf
    for combo in itertools.product(*[c.tolist() for c in problem.candidates]):
        e = flat.energy(np.asarray(combo, dtype=np.int64))
        if best_labels is None or e < best_e:
            best_labels, best_e = np.asarray(combo, dtype=np.int64), e
    return best_labels, best_e


# ---------------------------------------------------------------------------
# Problem dump/load (text format for reproducing solver issues):
#   line 1: "mrf <n_nodes> <n_edges> <lam>"
#   per node: "node <i> <k> <label_1> <cost_1> ... <label_k> <cost_k>"
#   per edge: "edge <i> <j>"


def dump_problem(problem: MRFProblem, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"mrf {problem.n_nodes} {len(problem.edges)} {float(problem.lam)!r}\n")
        for i, (c, u) in enumerate(zip(problem.candidates, problem.unaries)):
            pairs = " ".join(f"{int(l)} {float(v)!r}" for l, v in zip(c, u))
            fh.write(f"node {i} {len(c)} {pairs}\n")
        for a, b in problem.edges:
            fh.write(f"edge {a} {b}\n")


def load_problem(path) -> MRFProblem:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "mrf":
            raise ValueError("not an MRF problem file")
        n_nodes, _, lam = int(head[1]), int(head[2]), float(head[3])
        candidates = [None] * n_nodes
        unaries = [None] * n_nodes
        edges = []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "node":
                i, k = int(parts[1]), int(parts[2])
                vals = parts[3:3 + 2 * k]
                candidates[i] = [int(v) for v in vals[0::2]]
                unaries[i] = [float(v) for v in vals[1::2]]
            elif parts[0] == "edge":
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
    if any(c is None for c in candidates):
        raise ValueError("missing node records")
    return MRFProblem(candidates, unaries,
                      np.asarray(edges, dtype=np.int64).reshape(-1, 2), lam)
