"""Camera clustering: iterative graph division and expansion.

Division recursively bisects the camera graph with a spectral normalized cut
until every piece respects the size cap. Expansion then walks the discarded
edges in descending weight and duplicates boundary cameras into neighboring
clusters until each cluster's completeness ratio reaches the threshold. The
two phases alternate because expansion can push a cluster back over the size
cap.

The fully exclusive clusters before expansion are the "independent" clusters
(leaves of the division tree, used later for triangulation and partitioned
bundle adjustment); the overlapping clusters after expansion are the
"interdependent" clusters fed to local incremental SfM.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh

from .errors import ConfigurationError, NumericalError
from .scene import CameraGraph
from .utils import stable_seed

logger = logging.getLogger(__name__)

DENSE_EIG_LIMIT = 64
EIG_TOL = 1e-8
EIG_MAX_ITER = 500
BALANCE_FLOOR = 0.2
OBJECTIVE_TIE_TOL = 1e-12


@dataclass(frozen=True)
class ClusterConfig:
    max_cluster_size: int = 100
    completeness_ratio: float = 0.7
    seed: int = 0
    max_outer_iterations: int = 16

    def __post_init__(self):
        if self.max_cluster_size < 2:
            raise ConfigurationError("max_cluster_size must be >= 2")
        if not (0.0 <= self.completeness_ratio < 1.0):
            raise ConfigurationError("completeness_ratio must be in [0, 1)")
        if self.max_outer_iterations < 1:
            raise ConfigurationError("max_outer_iterations must be >= 1")


@dataclass
class Cluster:
    id: int
    cameras: tuple
    edges: list = field(default_factory=list)

    def __post_init__(self):
        self.cameras = tuple(sorted(self.cameras))

    @property
    def size(self) -> int:
        return len(self.cameras)


@dataclass
class ClusterTreeNode:
    cameras: tuple  # cameras covered by this node (home sets, no duplicates)
    left: "ClusterTreeNode | None" = None
    right: "ClusterTreeNode | None" = None
    cut_edges: list = field(default_factory=list)  # edges separated at this split
    leaf_id: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None and self.right is None


@dataclass
class ClusterTree:
    root: ClusterTreeNode

    def leaves(self) -> list[ClusterTreeNode]:
        out = []

        def walk(node):
            if node.is_leaf:
                out.append(node)
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def depth(self) -> int:
        def d(node):
            if node.is_leaf:
                return 0
            return 1 + max(d(node.left), d(node.right))

        return d(self.root)

    def assign_leaf_ids(self) -> None:
        for k, leaf in enumerate(self.leaves()):
            leaf.leaf_id = k

    def assign_cut_edges(self, graph: CameraGraph) -> None:
        """Attach every cross-leaf graph edge to the node where its endpoints
        separate (deepest node containing both)."""
        leaf_of = {}
        for k, leaf in enumerate(self.leaves()):
            for c in leaf.cameras:
                leaf_of[c] = k

        def clear(node):
            node.cut_edges = []
            if not node.is_leaf:
                clear(node.left)
                clear(node.right)

        clear(self.root)
        leaf_sets = {}

        def leaf_range(node):
            if node.is_leaf:
                leaf_sets[id(node)] = {node.leaf_id if node.leaf_id is not None else -1}
            else:
                leaf_range(node.left)
                leaf_range(node.right)
                leaf_sets[id(node)] = leaf_sets[id(node.left)] | leaf_sets[id(node.right)]

        self.assign_leaf_ids()
        leaf_range(self.root)
        for (i, j), edge in graph.edges.items():
            li, lj = leaf_of.get(i), leaf_of.get(j)
            if li is None or lj is None or li == lj:
                continue
            node = self.root
            while True:
                if li in leaf_sets[id(node.left)] and lj in leaf_sets[id(node.left)]:
                    node = node.left
                elif li in leaf_sets[id(node.right)] and lj in leaf_sets[id(node.right)]:
                    node = node.right
                else:
                    node.cut_edges.append((i, j))
                    break


@dataclass
class ClusterSet:
    independent: list[Cluster]
    interdependent: list[Cluster]
    tree: ClusterTree
    discarded_edges: list  # (i, j, weight) not covered by any interdependent cluster
    achieved_ratios: list[float]
    exhausted: bool
    dropped_cameras: list = field(default_factory=list)

    def clusters_of_camera(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for cl in self.interdependent:
            for c in cl.cameras:
                out.setdefault(c, []).append(cl.id)
        return out

    def independent_cluster_of(self) -> dict[int, int]:
        out = {}
        for cl in self.independent:
            for c in cl.cameras:
                out[c] = cl.id
        return out


class ClusteringError(NumericalError):
    """Outer division/expansion loop failed to settle; carries the last state."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


# ---------------------------------------------------------------------------
# Normalized-cut bisection
# ---------------------------------------------------------------------------

def _fiedler_vector(W: csr_matrix) -> np.ndarray:
    """Sweep vector for the normalized cut: D^-1/2 times the second
    eigenvector of the normalized adjacency."""
    n = W.shape[0]
    deg = np.asarray(W.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(np.maximum(deg, 1e-300))
    Wn = csr_matrix(W.multiply(dinv[:, None]).multiply(dinv[None, :]))
    if n <= DENSE_EIG_LIMIT:
        vals, vecs = np.linalg.eigh(Wn.toarray())
        u2 = vecs[:, -2]
    else:
        # deterministic non-trivial start vector
        v0 = np.linspace(1.0, 2.0, n)
        v0 /= np.linalg.norm(v0)
        try:
            vals, vecs = eigsh(Wn, k=2, which="LA", v0=v0, tol=EIG_TOL, maxiter=EIG_MAX_ITER)
            u2 = vecs[:, np.argsort(vals)[0]]
        except (ArpackError, ArpackNoConvergence):
            vals, vecs = np.linalg.eigh(Wn.toarray())
            u2 = vecs[:, -2]
    y = dinv * u2
    # deterministic sign: first entry of meaningful magnitude is positive
    for v in y:
        if abs(v) > 1e-12:
            if v < 0:
                y = -y
            break
    return y


def _split_components(nodes: np.ndarray, labels: np.ndarray) -> tuple[tuple, tuple]:
    """Zero-cut split of a disconnected subgraph: pack whole components into
    two sides, balancing sizes greedily (largest first)."""
    comp_ids, counts = np.unique(labels, return_counts=True)
    order = sorted(range(len(comp_ids)), key=lambda k: (-counts[k], comp_ids[k]))
    side_a, side_b = [], []
    size_a = size_b = 0
    for k in order:
        members = nodes[labels == comp_ids[k]]
        if size_a <= size_b:
            side_a.extend(members.tolist())
            size_a += len(members)
        else:
            side_b.extend(members.tolist())
            size_b += len(members)
    a, b = sorted(side_a), sorted(side_b)
    if min(a) > min(b):
        a, b = b, a
    return tuple(a), tuple(b)


def bisect_normalized_cut(graph: CameraGraph, cameras=None) -> tuple[tuple, tuple]:
    """Bipartition a (sub)graph minimizing the normalized-cut objective
    cut(A,B) * (1/vol(A) + 1/vol(B)) over a Fiedler-vector sweep.

    Disconnected inputs split along component boundaries. Among tying sweep
    candidates the more balanced split wins, then the lexicographically
    smallest camera set. The side containing the smallest camera id is
    returned first.
    """
    nodes = np.array(sorted(cameras) if cameras is not None else range(graph.num_cameras))
    n = len(nodes)
    if n < 2:
        raise ConfigurationError("bisection needs at least 2 cameras")
    W = graph.adjacency()[np.ix_(nodes, nodes)].tocsr()
    n_comp, labels = connected_components(W, directed=False)
    if n_comp > 1:
        return _split_components(nodes, labels)

    y = _fiedler_vector(W)
    order = np.lexsort((nodes, y))
    deg = np.asarray(W.sum(axis=1)).ravel()
    vol_total = float(deg.sum())

    min_side = max(1, int(np.ceil(BALANCE_FLOOR * n)))
    lo, hi = min_side, n - min_side
    if lo > hi:
        lo, hi = 1, n - 1

    in_a = np.zeros(n, dtype=bool)
    cut = 0.0
    vol_a = 0.0
    best = None  # (objective, -min_side_size, lex_key, m)
    Wd = W.tocsr()
    for m in range(1, n):
        v = order[m - 1]
        row = Wd.getrow(v)
        w_to_a = float(row.data[in_a[row.indices]].sum())
        cut += deg[v] - 2.0 * w_to_a
        vol_a += deg[v]
        in_a[v] = True
        if not (lo <= m <= hi):
            continue
        vol_b = vol_total - vol_a
        obj = cut * (1.0 / max(vol_a, 1e-300) + 1.0 / max(vol_b, 1e-300))
        side_a = tuple(sorted(nodes[order[:m]].tolist()))
        side_b = tuple(sorted(nodes[order[m:]].tolist()))
        lex = side_a if side_a[0] < side_b[0] else side_b
        cand = (obj, -min(m, n - m), lex)
        if best is None or _candidate_better(cand, best):
            best = cand
            best_sides = (side_a, side_b)
    side_a, side_b = best_sides
    if side_a[0] > side_b[0]:
        side_a, side_b = side_b, side_a
    return side_a, side_b


def _candidate_better(cand, best) -> bool:
    if cand[0] < best[0] - OBJECTIVE_TIE_TOL:
        return True
    if cand[0] > best[0] + OBJECTIVE_TIE_TOL:
        return False
    if cand[1] != best[1]:
        return cand[1] < best[1]
    return cand[2] < best[2]


# ---------------------------------------------------------------------------
# Graph division
# ---------------------------------------------------------------------------

def divide(
    graph: CameraGraph, max_cluster_size: int, cameras=None
) -> tuple[list[Cluster], ClusterTree, list]:
    """Recursively bisect until every leaf has at most max_cluster_size
    cameras. Returns (leaf clusters, division tree, discarded edges with
    weights)."""
    if max_cluster_size < 2:
        raise ConfigurationError("max_cluster_size must be >= 2")
    cams = tuple(sorted(cameras) if cameras is not None else range(graph.num_cameras))

    def build(node_cams: tuple) -> ClusterTreeNode:
        if len(node_cams) <= max_cluster_size:
            return ClusterTreeNode(cameras=node_cams)
        a, b = bisect_normalized_cut(graph, node_cams)
        return ClusterTreeNode(cameras=node_cams, left=build(a), right=build(b))

    tree = ClusterTree(root=build(cams))
    tree.assign_leaf_ids()
    tree.assign_cut_edges(graph)
    leaves = [
        Cluster(id=k, cameras=leaf.cameras, edges=graph.induced_edges(leaf.cameras))
        for k, leaf in enumerate(tree.leaves())
    ]
    leaf_of = {}
    for leaf in leaves:
        for c in leaf.cameras:
            leaf_of[c] = leaf.id
    inside = set(cams)
    discarded = [
        (i, j, edge.weight)
        for (i, j), edge in sorted(graph.edges.items())
        if i in inside and j in inside and leaf_of[i] != leaf_of[j]
    ]
    return leaves, tree, discarded


# ---------------------------------------------------------------------------
# Completeness ratio and graph expansion
# ---------------------------------------------------------------------------

def completeness_ratio(cluster: Cluster, clusters: list[Cluster]) -> float:
    """Sum of camera overlaps with every other cluster, divided by size."""
    mine = set(cluster.cameras)
    total = 0
    for other in clusters:
        if other is cluster or other.id == cluster.id:
            continue
        total += len(mine.intersection(other.cameras))
    return total / len(cluster.cameras)


class _Membership:
    """Incremental completeness bookkeeping over a family of camera sets."""

    def __init__(self, families: list[set]):
        self.families = families
        self.holders: dict[int, set[int]] = {}
        for k, fam in enumerate(families):
            for c in fam:
                self.holders.setdefault(c, set()).add(k)
        self.overlap = [sum(len(self.holders[c]) - 1 for c in fam) for fam in families]

    def ratio(self, k: int) -> float:
        return self.overlap[k] / len(self.families[k])

    def add(self, k: int, camera: int) -> None:
        holders = self.holders.setdefault(camera, set())
        for other in holders:
            self.overlap[other] += 1
        self.overlap[k] += len(holders)
        holders.add(k)
        self.families[k].add(camera)


def _contained(edge_i, edge_j, families: list[set]) -> bool:
    return any(edge_i in fam and edge_j in fam for fam in families)


def _expand_in_place(
    home_of: dict,
    families: list[set],
    discarded: list,
    completeness_threshold: float,
    seed: int,
) -> None:
    """Shared expansion loop; mutates the family sets until no discarded edge
    can add another camera.

    Edges are visited by descending weight (ties by ascending camera pair),
    repeatedly, so a needy cluster keeps absorbing boundary cameras until it
    meets the threshold or its boundary is used up. The receiving side is a
    seeded per-edge coin flip when both homes are below the threshold, which
    keeps the outcome independent of pass structure and worker scheduling.
    """
    members = _Membership(families)
    order = sorted(discarded, key=lambda e: (-e[2], e[0], e[1]))
    while True:
        changed = False
        for (i, j, _w) in order:
            if i not in home_of or j not in home_of:
                continue
            ki, kj = home_of[i], home_of[j]
            if ki == kj:
                continue
            candidates = [k for k in (ki, kj) if members.ratio(k) < completeness_threshold]
            if not candidates:
                continue
            if len(candidates) == 2 and stable_seed(seed, i, j) % 2 == 1:
                candidates = candidates[::-1]
            # the coin decides precedence; a no-op pick (vertex already
            # present) falls through to the other needy side so the loop
            # truly stops only when nothing can be added
            for pick in candidates:
                foreign = j if pick == ki else i
                if foreign not in families[pick]:
                    members.add(pick, foreign)
                    changed = True
                    break
        if not changed:
            break


def expand(
    leaves: list[Cluster],
    discarded: list,
    completeness_threshold: float,
    seed: int,
) -> list[Cluster]:
    """Grow disjoint leaf clusters by re-attaching discarded edges.

    Exhausting the discarded edges before every cluster reaches the
    threshold is reported by the caller, not fatal.
    """
    home_of = {}
    for k, leaf in enumerate(leaves):
        for c in leaf.cameras:
            home_of[c] = k
    families = [set(leaf.cameras) for leaf in leaves]
    _expand_in_place(home_of, families, discarded, completeness_threshold, seed)
    return [
        Cluster(id=leaf.id, cameras=tuple(sorted(families[k])))
        for k, leaf in enumerate(leaves)
    ]


# ---------------------------------------------------------------------------
# Full clustering loop
# ---------------------------------------------------------------------------

def _recursive_parts(graph: CameraGraph, cams: tuple, limit: int):
    """Nested binary split structure of cams down to the size limit."""
    if len(cams) <= limit:
        return tuple(sorted(cams))
    a, b = bisect_normalized_cut(graph, cams)
    return (_recursive_parts(graph, a, limit), _recursive_parts(graph, b, limit))


def _leaf_of_ints(t) -> bool:
    """Distinguish leaf camera tuples from (left, right) internal nodes."""
    return all(isinstance(x, (int, np.integer)) for x in t)


def cluster_cameras(graph: CameraGraph, config: ClusterConfig) -> ClusterSet:
    """Iterate graph division and expansion until every interdependent
    cluster satisfies the size cap and (unless the discarded edges run out)
    the completeness threshold."""
    adj = graph.adjacency()
    n_comp, labels = connected_components(adj, directed=False)
    comp_sizes = np.bincount(labels, minlength=n_comp)
    dropped = sorted(int(c) for c in range(graph.num_cameras) if comp_sizes[labels[c]] < 2)
    kept = tuple(c for c in range(graph.num_cameras) if c not in set(dropped))
    if dropped:
        logger.warning("dropping %d isolated camera(s): %s", len(dropped), dropped[:10])
    if len(kept) < 2:
        raise ConfigurationError("camera graph has no component with >= 2 cameras")

    leaves, tree, _ = divide(graph, config.max_cluster_size, kept)
    # working state: per leaf, (home set, full set)
    homes = [set(leaf.cameras) for leaf in leaves]
    fulls = [set(leaf.cameras) for leaf in leaves]

    settled = False
    for _outer in range(config.max_outer_iterations):
        # --- expansion over the cross-home (division-discarded) edges
        home_of = {}
        for k, home in enumerate(homes):
            for c in home:
                home_of[c] = k
        cross = [
            (i, j, edge.weight)
            for (i, j), edge in sorted(graph.edges.items())
            if i in home_of and j in home_of and home_of[i] != home_of[j]
        ]
        _expand_in_place(home_of, fulls, cross, config.completeness_ratio, config.seed)

        # --- size check; re-divide oversize clusters (duplicates ride along)
        oversize = [k for k in range(len(fulls)) if len(fulls[k]) > config.max_cluster_size]
        if not oversize:
            settled = True
            break
        new_homes, new_fulls = [], []
        replacements: dict[frozenset, ClusterTreeNode] = {}
        for k in range(len(fulls)):
            if k not in oversize:
                new_homes.append(homes[k])
                new_fulls.append(fulls[k])
                continue
            struct = _recursive_parts(graph, tuple(sorted(fulls[k])), config.max_cluster_size)
            subtree = _build_home_subtree(struct, homes[k])
            if subtree is None:
                # all home cameras vanished (cannot happen: homes are subsets)
                raise ClusteringError("re-division lost a cluster's home cameras")
            replacements[frozenset(homes[k])] = subtree
            for part in _flat_parts(struct):
                home_part = set(part) & homes[k]
                if not home_part:
                    continue  # duplicate-only fragment: drop it from this family
                new_homes.append(home_part)
                new_fulls.append(set(part))
        homes, fulls = new_homes, new_fulls
        _replace_leaves(tree, replacements)

    if not settled:
        last = _assemble(graph, tree, homes, fulls, config, dropped)
        raise ClusteringError(
            f"clustering did not settle within {config.max_outer_iterations} iterations",
            last_state=last,
        )
    return _assemble(graph, tree, homes, fulls, config, dropped)


def _flat_parts(struct) -> list[tuple]:
    if _leaf_of_ints(struct):
        return [struct]
    return _flat_parts(struct[0]) + _flat_parts(struct[1])


def _build_home_subtree(struct, home: set) -> ClusterTreeNode | None:
    if _leaf_of_ints(struct):
        cams = tuple(sorted(set(struct) & home))
        return ClusterTreeNode(cameras=cams) if cams else None
    left = _build_home_subtree(struct[0], home)
    right = _build_home_subtree(struct[1], home)
    if left is not None and right is not None:
        return ClusterTreeNode(
            cameras=tuple(sorted(left.cameras + right.cameras)), left=left, right=right
        )
    return left if left is not None else right


def _replace_leaves(tree: ClusterTree, replacements: dict) -> None:
    def walk(node):
        if node.is_leaf:
            return replacements.get(frozenset(node.cameras), node)
        node.left = walk(node.left)
        node.right = walk(node.right)
        return node

    tree.root = walk(tree.root)


def _assemble(graph, tree, homes, fulls, config, dropped) -> ClusterSet:
    tree.assign_leaf_ids()
    tree.assign_cut_edges(graph)
    leaf_nodes = tree.leaves()
    by_home = {frozenset(h): set(f) for h, f in zip(homes, fulls)}
    independent, interdependent = [], []
    for k, leaf in enumerate(leaf_nodes):
        home = frozenset(leaf.cameras)
        full = by_home.get(home)
        if full is None:
            raise ClusteringError("tree leaves out of sync with working clusters")
        independent.append(
            Cluster(id=k, cameras=leaf.cameras, edges=graph.induced_edges(leaf.cameras))
        )
        interdependent.append(
            Cluster(id=k, cameras=tuple(sorted(full)), edges=graph.induced_edges(full))
        )
    kept = {c for h in homes for c in h}
    uncovered = [
        (i, j, edge.weight)
        for (i, j), edge in sorted(graph.edges.items())
        if i in kept and j in kept and not _contained(i, j, fulls)
    ]
    ratios = [completeness_ratio(cl, interdependent) for cl in interdependent]
    exhausted = any(r < config.completeness_ratio for r in ratios)
    return ClusterSet(
        independent=independent,
        interdependent=interdependent,
        tree=tree,
        discarded_edges=uncovered,
        achieved_ratios=ratios,
        exhausted=exhausted,
        dropped_cameras=dropped,
    )
