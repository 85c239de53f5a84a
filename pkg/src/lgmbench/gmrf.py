"""Gaussian Markov random field structure: graphs, precision matrices,
the intrinsic CAR prior, constrained sampling, and propriety checking.

The intrinsic conditional autoregressive (ICAR) density implemented here
is, up to an additive constant,

    log p(mu | tau) = (n - k) * log(tau) - (tau / 2) * sum_{i~j} (mu_i - mu_j)^2

where the sum runs over undirected edges, n is the node count and k the
number of connected components.  The exponent ``n - k`` on the precision
is the package default; ``half_exponent=True`` switches to the
``(n - k) / 2`` convention.  The quadratic form is always accumulated
edgewise in a fixed edge order so repeated evaluations are bit-exact.

Sum-to-zero constraints are imposed by conditioning by kriging: draw an
unconstrained Gaussian vector from a null-space-regularized precision,
then subtract ``Sigma A' (A Sigma A')^{-1} (A x)`` where ``A`` has one
all-ones indicator row per connected component.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Constraint",
    "AdjacencyGraph",
    "SparseSymMatrix",
    "IcarSpec",
    "ProprietyResult",
    "SingularConstraintError",
    "graph_laplacian",
    "connected_components",
    "component_labels",
    "icar_log_density",
    "icar_quadratic_form",
    "sample_icar_kriging",
    "propriety_check",
    "lattice_graph",
    "path_graph",
    "cycle_graph",
    "read_edge_list",
    "write_edge_list",
]

#: Relative eigenvalue tolerance below which a direction counts as null.
PROPRIETY_EIG_TOL = 1e-10

#: Relative jitter added along null-space directions before factorizing
#: an intrinsic precision matrix.
NULL_SPACE_JITTER = 1e-8


class Constraint(enum.Enum):
    """How (or whether) an intrinsic field is identified."""

    NONE = "none"
    SUM_TO_ZERO_KRIGING = "sum_to_zero_kriging"
    SUM_TO_ZERO_CENTERING = "sum_to_zero_centering"


class SingularConstraintError(ValueError):
    """Raised when the kriging system A Sigma A' is singular."""


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected simple graph on nodes 0..n_nodes-1.

    Edges are stored as (i, j) pairs with i < j, sorted, with no
    duplicates and no self loops.  Validation happens at construction so
    downstream code can rely on the canonical form.
    """

    n_nodes: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("graph needs at least one node")
        canon = []
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self loop at node {i}")
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n_nodes}")
            canon.append((min(i, j), max(i, j)))
        if len(set(canon)) != len(canon):
            raise ValueError("duplicate edge")
        object.__setattr__(self, "edges", tuple(sorted(canon)))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge endpoints as two int arrays (empty-safe)."""
        if not self.edges:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        e = np.asarray(self.edges, dtype=np.int64)
        return e[:, 0], e[:, 1]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        a, b = self.edge_arrays()
        np.add.at(deg, a, 1)
        np.add.at(deg, b, 1)
        return deg

    def neighbor_lists(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs


@dataclass(frozen=True)
class SparseSymMatrix:
    """Symmetric matrix stored as its upper triangle in COO form.

    Entries are sorted by (row, col) with row <= col and explicit zeros
    dropped, so two structurally equal matrices compare equal entrywise.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows/cols/vals must have matching shapes")
        if rows.size and (rows.min() < 0 or cols.max() >= self.n):
            raise ValueError("index out of range")
        if np.any(rows > cols):
            raise ValueError("entries must lie in the upper triangle")
        keep = vals != 0.0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            same = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if np.any(same):
                raise ValueError("duplicate entry")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)

    @classmethod
    def from_dense(cls, a: np.ndarray, tol: float = 0.0) -> "SparseSymMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        if not np.allclose(a, a.T, rtol=0.0, atol=max(tol, 1e-12 * max(1.0, np.abs(a).max()))):
            raise ValueError("matrix is not symmetric")
        iu = np.triu_indices(a.shape[0])
        v = a[iu]
        keep = v != 0.0
        return cls(a.shape[0], iu[0][keep], iu[1][keep], v[keep])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.rows, self.cols] = self.vals
        off = self.rows != self.cols
        out[self.cols[off], self.rows[off]] = self.vals[off]
        return out

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n)
        on = self.rows == self.cols
        d[self.rows[on]] = self.vals[on]
        return d

    @property
    def nnz_upper(self) -> int:
        return int(self.vals.size)


@dataclass(frozen=True)
class IcarSpec:
    """An intrinsic CAR field: graph, precision scale, and constraint."""

    graph: AdjacencyGraph
    tau: float
    constraint: Constraint = Constraint.NONE
    half_exponent: bool = False
    n_components: int = field(init=False)

    def __post_init__(self):
        if not (self.tau > 0.0 and np.isfinite(self.tau)):
            raise ValueError("tau must be positive and finite")
        object.__setattr__(self, "n_components", connected_components(self.graph))


@dataclass(frozen=True)
class ProprietyResult:
    """Outcome of a positive-definiteness check on a feasible subspace."""

    proper: bool
    deficiency: int
    min_eigenvalue: float
    max_eigenvalue: float

    def __str__(self) -> str:
        if self.proper:
            return "Proper"
        return f"RankDeficient({self.deficiency})"


def graph_laplacian(graph: AdjacencyGraph) -> SparseSymMatrix:
    """Graph Laplacian Q = D - A as a sparse symmetric matrix."""
    deg = graph.degrees()
    a, b = graph.edge_arrays()
    on = deg > 0
    rows = np.concatenate([np.flatnonzero(on), a])
    cols = np.concatenate([np.flatnonzero(on), b])
    vals = np.concatenate([deg[on].astype(np.float64), -np.ones(a.size)])
    return SparseSymMatrix(graph.n_nodes, rows, cols, vals)


def component_labels(graph: AdjacencyGraph) -> np.ndarray:
    """Connected component index per node via union-find.

    Labels are renumbered in order of first appearance by node index, so
    node 0 is always in component 0.
    """
    parent = np.arange(graph.n_nodes)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:  # path compression
            parent[x], x = root, parent[x]
        return root

    for i, j in graph.edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    roots = np.array([find(i) for i in range(graph.n_nodes)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def connected_components(graph: AdjacencyGraph) -> int:
    """Number of connected components, k >= 1."""
    return int(component_labels(graph).max()) + 1


def icar_quadratic_form(mu: np.ndarray, graph: AdjacencyGraph) -> float:
    """Edgewise quadratic form sum_{i~j} (mu_i - mu_j)^2.

    Accumulated in the canonical edge order so the result is bit-exact
    across calls with the same inputs.
    """
    mu = np.asarray(mu, dtype=np.float64)
    a, b = graph.edge_arrays()
    d = mu[a] - mu[b]
    return float(np.add.reduce(d * d))


def icar_log_density(mu: np.ndarray, spec: IcarSpec) -> float:
    """Unnormalized ICAR log density at mu.

    ``(n - k) log tau - (tau / 2) * quadratic_form`` by default; with
    ``half_exponent`` the leading coefficient becomes ``(n - k) / 2``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (spec.graph.n_nodes,):
        raise ValueError("mu has wrong length for graph")
    n_minus_k = spec.graph.n_nodes - spec.n_components
    coef = 0.5 * n_minus_k if spec.half_exponent else float(n_minus_k)
    return coef * np.log(spec.tau) - 0.5 * spec.tau * icar_quadratic_form(mu, spec.graph)


def _regularized_precision(spec: IcarSpec) -> tuple[np.ndarray, np.ndarray]:
    """Dense tau*Q plus null-space jitter, and the constraint rows A.

    The Laplacian's null space is spanned by the per-component indicator
    vectors; adding ``jitter * v v' / |c|`` along each leaves the range
    space untouched while making the matrix positive definite.
    """
    q = graph_laplacian(spec.graph).to_dense() * spec.tau
    labels = component_labels(spec.graph)
    k = labels.max() + 1
    a_rows = np.zeros((k, spec.graph.n_nodes))
    for c in range(k):
        a_rows[c, labels == c] = 1.0
    jitter = NULL_SPACE_JITTER * np.mean(np.diag(q)) if spec.graph.n_edges else NULL_SPACE_JITTER
    for c in range(k):
        v = a_rows[c]
        q += (jitter / v.sum()) * np.outer(v, v)
    return q, a_rows


def sample_icar_kriging(
    spec: IcarSpec,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Draw from the ICAR prior under per-component sum-to-zero constraints.

    Unconstrained draws use the null-space-regularized precision; the
    kriging correction ``x - Sigma A' (A Sigma A')^{-1} A x`` then
    conditions each component's sum to zero exactly.  Returns shape
    ``(n,)`` for ``size=None`` else ``(size, n)``.
    """
    if spec.constraint is not Constraint.SUM_TO_ZERO_KRIGING:
        raise ValueError("sampling requires the sum-to-zero kriging constraint")
    q_reg, a_rows = _regularized_precision(spec)
    try:
        chol = np.linalg.cholesky(q_reg)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - regularization prevents this
        raise SingularConstraintError("regularized precision not positive definite") from exc

    n = spec.graph.n_nodes
    m = size if size is not None else 1
    z = rng.standard_normal((m, n))
    # x' L = z  =>  x = z L^{-1}, giving cov (L L')^{-1} = Q_reg^{-1}
    x = np.linalg.solve(chol.T, z.T).T

    sigma_at = np.linalg.solve(q_reg, a_rows.T)  # Sigma A', shape (n, k)
    gram = a_rows @ sigma_at  # A Sigma A'
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularConstraintError("constraint system A Sigma A' is singular")
    corr = np.linalg.solve(gram, a_rows @ x.T)  # (k, m)
    x = x - (sigma_at @ corr).T
    return x[0] if size is None else x


def propriety_check(
    precision: SparseSymMatrix | np.ndarray,
    constraints: np.ndarray | None = None,
    tol: float = PROPRIETY_EIG_TOL,
) -> ProprietyResult:
    """Check positive definiteness on the constraint-feasible subspace.

    ``constraints`` is a (c, n) matrix of linear restrictions Ax = 0;
    the precision is projected onto null(A) via an orthonormal basis and
    its eigenvalues are compared against ``tol`` times the largest.
    Reports the number of non-positive directions as the deficiency.
    """
    dense = precision.to_dense() if isinstance(precision, SparseSymMatrix) else np.asarray(precision, dtype=np.float64)
    n = dense.shape[0]
    if constraints is not None and np.asarray(constraints).size:
        a = np.atleast_2d(np.asarray(constraints, dtype=np.float64))
        if a.shape[1] != n:
            raise ValueError("constraint row length mismatch")
        # Orthonormal basis of null(A) from the full SVD.
        _, sv, vt = np.linalg.svd(a)
        rank = int(np.sum(sv > max(a.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)))
        basis = vt[rank:].T
        if basis.shape[1] == 0:
            return ProprietyResult(True, 0, np.inf, np.inf)
        dense = basis.T @ dense @ basis
    eig = np.linalg.eigvalsh(dense)
    largest = float(eig[-1])
    if largest <= 0.0:
        return ProprietyResult(False, eig.size, float(eig[0]), largest)
    deficiency = int(np.sum(eig <= tol * largest))
    return ProprietyResult(deficiency == 0, deficiency, float(eig[0]), largest)


# ---------------------------------------------------------------------------
# Graph construction helpers and edge-list file format


def lattice_graph(n_rows: int, n_cols: int) -> AdjacencyGraph:
    """Rook-neighbour rectangular lattice with row-major node numbering."""
    if n_rows < 1 or n_cols < 1:
        raise ValueError("lattice dimensions must be >= 1")
    edges = []
    for r in range(n_rows):
        for c in range(n_cols):
            i = r * n_cols + c
            if c + 1 < n_cols:
                edges.append((i, i + 1))
            if r + 1 < n_rows:
                edges.append((i, i + n_cols))
    return AdjacencyGraph(n_rows * n_cols, tuple(edges))


def path_graph(n: int) -> AdjacencyGraph:
    return AdjacencyGraph(n, tuple((i, i + 1) for i in range(n - 1)))


def cycle_graph(n: int) -> AdjacencyGraph:
    if n < 3:
        raise ValueError("cycle needs at least 3 nodes")
    edges = tuple((i, i + 1) for i in range(n - 1)) + ((0, n - 1),)
    return AdjacencyGraph(n, edges)


def read_edge_list(path, n_nodes: int | None = None) -> AdjacencyGraph:
    """Read a graph from a text file with one '0-indexed i j' pair per line.

    Blank lines and lines starting with '#' are skipped.  When
    ``n_nodes`` is omitted the node count is inferred as max index + 1.
    """
    edges = []
    max_idx = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'i j', got {text!r}")
            i, j = int(parts[0]), int(parts[1])
            edges.append((i, j))
            max_idx = max(max_idx, i, j)
    n = n_nodes if n_nodes is not None else max_idx + 1
    if n < 1:
        raise ValueError("empty edge list and no n_nodes given")
    return AdjacencyGraph(n, tuple(edges))


def write_edge_list(graph: AdjacencyGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in graph.edges:
            fh.write(f"{i} {j}\n")
