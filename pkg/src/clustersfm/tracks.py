"""Track generation: union-find over feature correspondences, performed
hierarchically over the cluster tree so each merge step only touches the
matches scoped to that tree node.

A track is the connected component of the correspondence relation. A
component containing two features of one camera is inconsistent; it is
discarded whole rather than split. To keep the hierarchical result exactly
equal to a flat union-find over all matches, inconsistent components are not
dropped at intermediate nodes but carried with a poisoned flag; anything a
later cross match attaches to a poisoned component becomes poisoned too, and
poisoned components are dropped at the root.
"""

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterTree
from .errors import DataError
from .scene import MatchEdge

MIN_TRACK_LENGTH = 2
_FEATURE_SHIFT = 32


def _key(camera: int, feature: int) -> int:
    return (camera << _FEATURE_SHIFT) | feature


def _unkey(key: int) -> tuple[int, int]:
    return key >> _FEATURE_SHIFT, key & ((1 << _FEATURE_SHIFT) - 1)


@dataclass(frozen=True, eq=False)
class Track:
    """One 3D point's observations: (camera, feature, pixel) per element,
    sorted by camera id, at most one element per camera."""

    id: int
    cameras: np.ndarray  # (n,) sorted camera ids
    features: np.ndarray  # (n,)
    xy: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return len(self.cameras)

    def canonical(self) -> tuple:
        return tuple(
            (int(c), int(f), float(x), float(y))
            for c, f, (x, y) in zip(self.cameras, self.features, self.xy)
        )


class UnionFind:
    """Array-backed union-find with path compression and union by rank."""

    def __init__(self, size: int):
        self.parent = np.arange(size, dtype=np.int64)
        self.rank = np.zeros(size, dtype=np.int8)

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return int(root)

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


@dataclass
class _NodeTracks:
    """Intermediate track sets flowing up the tree: per component, element
    keys plus pixel positions, with a poisoned flag for inconsistency."""

    components: list[list[int]]  # feature keys
    xy: dict[int, tuple[float, float]]
    poisoned: list[bool]


def _components_from_matches(matches: list[MatchEdge], allowed=None) -> _NodeTracks:
    keys: list[int] = []
    index: dict[int, int] = {}
    pairs: list[tuple[int, int]] = []
    xy: dict[int, tuple[float, float]] = {}

    def intern(k: int) -> int:
        pos = index.get(k)
        if pos is None:
            pos = len(keys)
            index[k] = pos
            keys.append(k)
        return pos

    for edge in matches:
        if allowed is not None and (edge.i not in allowed or edge.j not in allowed):
            raise DataError(f"match edge ({edge.i}, {edge.j}) outside its tree node")
        for fi, (xi, yi), fj, (xj, yj) in zip(edge.feat_i, edge.xy_i, edge.feat_j, edge.xy_j):
            ka, kb = _key(edge.i, int(fi)), _key(edge.j, int(fj))
            xy.setdefault(ka, (float(xi), float(yi)))
            xy.setdefault(kb, (float(xj), float(yj)))
            pairs.append((intern(ka), intern(kb)))
    uf = UnionFind(len(keys))
    for a, b in pairs:
        uf.union(a, b)
    groups: dict[int, list[int]] = {}
    for pos, key in enumerate(keys):
        groups.setdefault(uf.find(pos), []).append(key)
    components = [sorted(groups[root]) for root in sorted(groups)]
    components.sort()
    poisoned = [_inconsistent(comp) for comp in components]
    return _NodeTracks(components=components, xy=xy, poisoned=poisoned)


def _inconsistent(component: list[int]) -> bool:
    cams = [k >> _FEATURE_SHIFT for k in component]
    return len(cams) != len(set(cams))


def _merge_node_tracks(
    left: _NodeTracks, right: _NodeTracks, cross: list[MatchEdge]
) -> _NodeTracks:
    """Union left and right track sets through the cross matches.

    Features seen only in a cross match enter as fresh singletons. Poison
    propagates to every component a poisoned component touches.
    """
    components = left.components + right.components
    poisoned = left.poisoned + right.poisoned
    xy = dict(left.xy)
    xy.update(right.xy)

    owner: dict[int, int] = {}
    for idx, comp in enumerate(components):
        for k in comp:
            owner[k] = idx

    links: list[tuple[int, int]] = []
    for edge in cross:
        for fi, (xi, yi), fj, (xj, yj) in zip(edge.feat_i, edge.xy_i, edge.feat_j, edge.xy_j):
            ka, kb = _key(edge.i, int(fi)), _key(edge.j, int(fj))
            xy.setdefault(ka, (float(xi), float(yi)))
            xy.setdefault(kb, (float(xj), float(yj)))
            for k in (ka, kb):
                if k not in owner:
                    owner[k] = len(components)
                    components.append([k])
                    poisoned.append(False)
            links.append((owner[ka], owner[kb]))

    uf = UnionFind(len(components))
    for a, b in links:
        uf.union(a, b)
    merged: dict[int, list[int]] = {}
    merged_poison: dict[int, bool] = {}
    for idx, comp in enumerate(components):
        root = uf.find(idx)
        merged.setdefault(root, []).extend(comp)
        merged_poison[root] = merged_poison.get(root, False) or poisoned[idx]
    out_components, out_poison = [], []
    order = sorted(merged, key=lambda r: min(merged[r]))
    for root in order:
        comp = sorted(merged[root])
        out_components.append(comp)
        out_poison.append(merged_poison[root] or _inconsistent(comp))
    return _NodeTracks(components=out_components, xy=xy, poisoned=out_poison)


def _emit(node: _NodeTracks, drop_short: bool = True) -> list[Track]:
    tracks = []
    for comp, bad in zip(node.components, node.poisoned):
        if bad:
            continue
        if drop_short and len(comp) < MIN_TRACK_LENGTH:
            continue
        cams = np.array([k >> _FEATURE_SHIFT for k in comp], dtype=np.int64)
        feats = np.array([k & ((1 << _FEATURE_SHIFT) - 1) for k in comp], dtype=np.int64)
        xy = np.array([node.xy[k] for k in comp], dtype=float).reshape(-1, 2)
        tracks.append(Track(id=len(tracks), cameras=cams, features=feats, xy=xy))
    return tracks


def generate_tracks_leaf(cameras, matches: list[MatchEdge]) -> list[Track]:
    """Tracks of one leaf-pair sub-problem: connected components of the
    matches restricted to the given cameras, inconsistent components
    discarded whole."""
    node = _components_from_matches(matches, allowed=set(cameras))
    return _emit(node)


def _tracks_to_node(tracks: list[Track]) -> _NodeTracks:
    components, xy = [], {}
    for t in tracks:
        comp = []
        for c, f, (x, y) in zip(t.cameras, t.features, t.xy):
            k = _key(int(c), int(f))
            comp.append(k)
            xy[k] = (float(x), float(y))
        components.append(sorted(comp))
    components.sort()
    return _NodeTracks(components=components, xy=xy, poisoned=[False] * len(components))


def merge_tracks(left: list[Track], right: list[Track], cross: list[MatchEdge]) -> list[Track]:
    """Merge two sibling nodes' track lists through their cross matches."""
    node = _merge_node_tracks(_tracks_to_node(left), _tracks_to_node(right), cross)
    return _emit(node)


def generate_tracks(
    tree: ClusterTree, matches: list[MatchEdge], stage_dir=None
) -> list[Track]:
    """Globally consistent tracks via bottom-up merging over the cluster tree.

    Leaf nodes consume the matches interior to their camera set; each
    internal node consumes the cut edges recorded at its split, so every
    match is processed exactly once and the result equals a flat union-find
    over all matches. With stage_dir set, each node's intermediate tracks
    are written to a JSON file named by the node's tree path (out-of-core
    staging hook).
    """
    in_tree = set(tree.root.cameras)
    leaf_matches: dict[int, list[MatchEdge]] = {}
    leaf_of = {}
    tree.assign_leaf_ids()
    for leaf in tree.leaves():
        for c in leaf.cameras:
            leaf_of[c] = leaf.leaf_id
    cut_index: dict[tuple[int, int], MatchEdge] = {}
    for edge in matches:
        if edge.i not in in_tree or edge.j not in in_tree:
            raise DataError(f"match edge ({edge.i}, {edge.j}) references a camera outside the tree")
        li, lj = leaf_of[edge.i], leaf_of[edge.j]
        if li == lj:
            leaf_matches.setdefault(li, []).append(edge)
        else:
            cut_index[(edge.i, edge.j)] = edge

    consumed = set()

    def walk(node, path: str) -> _NodeTracks:
        if node.is_leaf:
            result = _components_from_matches(
                leaf_matches.get(node.leaf_id, []), allowed=set(node.cameras)
            )
        else:
            left = walk(node.left, path + "L")
            right = walk(node.right, path + "R")
            cross = []
            for pair in sorted(node.cut_edges):
                if pair in cut_index:
                    cross.append(cut_index[pair])
                    consumed.add(pair)
            result = _merge_node_tracks(left, right, cross)
        if stage_dir is not None:
            _stage_node(stage_dir, path, result)
        return result

    root = walk(tree.root, "root")
    missing = set(cut_index) - consumed
    if missing:
        raise DataError(f"{len(missing)} cross-leaf match edges not scoped by the tree")
    return _emit(root)


def _stage_node(stage_dir, path: str, node: _NodeTracks) -> None:
    import json
    from pathlib import Path

    payload = [
        {
            "poisoned": bad,
            "elements": [
                [k >> _FEATURE_SHIFT, k & ((1 << _FEATURE_SHIFT) - 1), *node.xy[k]]
                for k in comp
            ],
        }
        for comp, bad in zip(node.components, node.poisoned)
    ]
    out = Path(stage_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{path}.json").write_text(json.dumps(payload))
