"""From raw network outputs to labelled detections.

The label-ordering step builds a layered DAG with one row per active level
(superior first) and picks the maximum-weight T->B path; see
:func:`build_graph` and :func:`solve_longest_path`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import NUM_LEVELS, BBox3, BoxSizes, Centroid3, VertebraLevel, bbox_from_sizes
from .encode import decode_centroid

MIN_BOX_SIZE = 0.5


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class Candidate:
    level: int
    coord: tuple  # downsampled voxel (x, y, z)
    logit: float
    score: float
    weight: float = 0.0

    @property
    def xyz(self) -> np.ndarray:
        return np.asarray(self.coord, dtype=float)


@dataclass
class Detection:
    level: VertebraLevel
    centroid: Centroid3
    box: BBox3
    score: float
    ds_coord: tuple

    def to_dict(self) -> dict:
        return {
            "level": self.level.name,
            "centroid": [self.centroid.x, self.centroid.y, self.centroid.z],
            "box": self.box.as_array().tolist(),
            "score": self.score,
            "ds_coord": list(self.ds_coord),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        level = VertebraLevel[d["level"]]
        return cls(level, Centroid3(level, *d["centroid"]), BBox3(*d["box"]), float(d["score"]),
                   tuple(d["ds_coord"]))


@dataclass
class DecodeConfig:
    k: int = 5
    min_sep: float = 3.0
    edge_min_dist: float = 3.0
    threshold: float = 0.5
    postprocess: bool = True
    use_class_logits: bool = True


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def local_maxima(channel: np.ndarray) -> np.ndarray:
    """Voxels equal to their 3x3x3 max that also exceed at least one neighbour."""
    mx = ndimage.maximum_filter(channel, size=3, mode="nearest")
    mn = ndimage.minimum_filter(channel, size=3, mode="nearest")
    return (channel == mx) & (channel > mn)


def extract_candidates(heat_logits: np.ndarray, k: int = 5, levels: Sequence[int] | None = None) -> dict:
    """Top-``k`` local maxima per channel, ordered by score then coordinate."""
    if k < 1:
        raise ValueError("k must be >= 1")
    heat_logits = np.asarray(heat_logits)
    levels = range(heat_logits.shape[0]) if levels is None else levels
    out = {}
    for lv in levels:
        ch = heat_logits[lv]
        coords = np.argwhere(local_maxima(ch))
        logits = ch[tuple(coords.T)].astype(np.float64)
        order = sorted(range(len(coords)), key=lambda i: (-logits[i], tuple(coords[i])))[:k]
        out[int(lv)] = [
            Candidate(int(lv), tuple(int(v) for v in coords[i]), float(logits[i]), float(_sigmoid(logits[i])))
            for i in order
        ]
    return out


def filter_candidates(cands: Sequence[Candidate], min_sep: float = 3.0) -> list[Candidate]:
    """Greedy suppression: keep the best, drop anything within ``min_sep`` of a kept one."""
    if min_sep <= 0:
        raise ValueError("min_sep must be positive")
    kept: list[Candidate] = []
    for c in sorted(cands, key=lambda c: (-c.score, c.coord)):
        if all(np.linalg.norm(c.xyz - k.xyz) > min_sep for k in kept):
            kept.append(c)
    return kept


def node_weight(heat_logit: float, class_logit: float | None = None) -> float:
    if class_logit is None:
        return float(heat_logit)
    return 0.5 * (float(heat_logit) + float(class_logit))


@dataclass
class CandidateGraph:
    """Layered DAG. Node ids are ``(row, j)``; ``"T"``/``"B"`` are the virtual ends."""

    rows: list  # [(level, [Candidate, ...]), ...] in increasing level order
    edges: set = field(default_factory=set)

    def successors(self, node):
        return [b for a, b in self.edges if a == node]

    def weight(self, node) -> float:
        if node in ("T", "B"):
            return 0.0
        r, j = node
        return self.rows[r][1][j].weight

    def candidate(self, node) -> Candidate:
        r, j = node
        return self.rows[r][1][j]

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"id": f"{r}:{j}", "level": VertebraLevel(lv).name, "coord": list(c.coord), "weight": c.weight}
                for r, (lv, cands) in enumerate(self.rows) for j, c in enumerate(cands)
            ],
            "edges": sorted([_node_key(a), _node_key(b)] for a, b in self.edges),
        }

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


def _node_key(node) -> str:
    return node if isinstance(node, str) else f"{node[0]}:{node[1]}"


def edge_allowed(upper: Candidate, lower: Candidate, min_dist: float = 3.0) -> bool:
    # superior = larger axial (Z) index
    return upper.coord[2] > lower.coord[2] and float(np.linalg.norm(upper.xyz - lower.xyz)) > min_dist


def build_graph(per_level: dict, active_levels: Sequence[int], min_dist: float = 3.0) -> CandidateGraph:
    rows = [(int(lv), list(per_level.get(int(lv), []))) for lv in sorted(active_levels)]
    rows = [r for r in rows if r[1]]
    g = CandidateGraph(rows)
    if not rows:
        g.edges.add(("T", "B"))
        return g
    for j in range(len(rows[0][1])):
        g.edges.add(("T", (0, j)))
    for j in range(len(rows[-1][1])):
        g.edges.add(((len(rows) - 1, j), "B"))
    for r in range(len(rows) - 1):
        for i, up in enumerate(rows[r][1]):
            for j, lo in enumerate(rows[r + 1][1]):
                if edge_allowed(up, lo, min_dist):
                    g.edges.add(((r, i), (r + 1, j)))
    return g


def _longest(graph: CandidateGraph, start, end, reverse: bool):
    """DP over the layered order; returns (weight, path from ``start`` to ``end``)."""
    adj: dict = {}
    for a, b in graph.edges:
        if reverse:
            a, b = b, a
        adj.setdefault(a, []).append(b)
    layers = [[start]] + [[(r, j) for j in range(len(c))] for r, (_, c) in enumerate(graph.rows)] + [[end]]
    if reverse:
        layers = [[start]] + layers[1:-1][::-1] + [[end]]
    best = {start: (0.0, None)}
    for layer in layers[:-1]:
        for u in layer:
            if u not in best:
                continue
            for v in sorted(adj.get(u, []), key=_node_key):
                w = best[u][0] + graph.weight(v)
                if v not in best or w > best[v][0]:
                    best[v] = (w, u)
    if end not in best:
        raise NoPathError("no path connects the top and bottom of the candidate graph")
    path, node = [], end
    while node is not None:
        path.append(node)
        node = best[node][1]
    return best[end][0], path[::-1]


def longest_path(graph: CandidateGraph, direction: str = "down") -> tuple[float, list]:
    """Best path weight and its nodes (listed top to bottom), solved from T (``down``) or from B (``up``)."""
    if direction == "down":
        return _longest(graph, "T", "B", reverse=False)
    if direction == "up":
        w, p = _longest(graph, "B", "T", reverse=True)
        return w, p[::-1]
    raise ValueError(f"direction must be 'down' or 'up', not {direction!r}")


def solve_longest_path(graph: CandidateGraph) -> tuple[float, dict]:
    """Maximum-weight path, solved T->B and B->T; ties go to T->B.

    Returns ``(weight, {level: Candidate})``.
    """
    w_down, p_down = longest_path(graph, "down")
    w_up, p_up = longest_path(graph, "up")
    weight, path = (w_down, p_down) if w_down >= w_up else (w_up, p_up)
    chosen = {}
    for node in path:
        if node in ("T", "B"):
            continue
        c = graph.candidate(node)
        chosen[c.level] = c
    return weight, chosen


def active_levels(heat_logits: np.ndarray, class_logits: np.ndarray | None, threshold: float = 0.5) -> list[int]:
    """Levels whose classification (or, without one, heatmap-max) probability exceeds ``threshold``."""
    if class_logits is not None:
        probs = _sigmoid(class_logits)
    else:
        probs = _sigmoid(np.asarray(heat_logits).reshape(heat_logits.shape[0], -1).max(axis=1))
    return [int(i) for i in np.flatnonzero(probs > threshold)]


def select_centroids(heat_logits: np.ndarray, class_logits: np.ndarray | None, cfg: DecodeConfig,
                     return_graph: bool = False):
    """Chosen downsampled candidate per active level, with or without label-ordering."""
    heat_logits = np.asarray(heat_logits)
    cl = np.asarray(class_logits) if (class_logits is not None and cfg.use_class_logits) else None
    levels = active_levels(heat_logits, cl, cfg.threshold)
    argmax = {}
    for lv in levels:
        flat = int(np.argmax(heat_logits[lv]))
        coord = tuple(int(v) for v in np.unravel_index(flat, heat_logits.shape[1:]))
        logit = float(heat_logits[lv][coord])
        argmax[lv] = Candidate(lv, coord, logit, float(_sigmoid(logit)), node_weight(logit, None if cl is None else cl[lv]))
    graph = None
    chosen = argmax
    if cfg.postprocess and levels:
        raw = extract_candidates(heat_logits, cfg.k, levels)
        per_level = {}
        for lv, cands in raw.items():
            kept = filter_candidates(cands, cfg.min_sep)
            per_level[lv] = [
                Candidate(c.level, c.coord, c.logit, c.score, node_weight(c.logit, None if cl is None else cl[lv]))
                for c in kept
            ]
        graph = build_graph(per_level, levels, cfg.edge_min_dist)
        try:
            _, chosen = solve_longest_path(graph)
        except NoPathError:
            chosen = argmax
        # levels with no local maximum at all keep their argmax
        for lv in levels:
            chosen.setdefault(lv, argmax[lv])
    chosen = {lv: chosen[lv] for lv in sorted(chosen)}
    return (chosen, graph) if return_graph else chosen


def detections_from_choice(chosen: dict, offsets: np.ndarray, sizes: np.ndarray, n: int,
                           class_logits: np.ndarray | None = None) -> list[Detection]:
    dets = []
    for lv, c in chosen.items():
        off = np.clip(np.asarray(offsets)[(slice(None),) + c.coord], 0.0, 1.0 - 1e-6)
        xyz = decode_centroid(c.coord, off, n)
        cen = Centroid3(VertebraLevel(lv), *xyz)
        s = np.maximum(np.asarray(sizes)[(slice(None),) + c.coord].astype(float), MIN_BOX_SIZE)
        box = bbox_from_sizes(cen, BoxSizes(*s))
        score = c.score if class_logits is None else 0.5 * (c.score + float(_sigmoid(class_logits[lv])))
        dets.append(Detection(VertebraLevel(lv), cen, box, float(score), c.coord))
    return dets


def decode_detections(heat_logits, offsets, sizes, class_logits=None, n: int = 2,
                      cfg: DecodeConfig | None = None, return_graph: bool = False):
    """Final detections from dense outputs (numpy arrays, no batch axis)."""
    cfg = cfg or DecodeConfig()
    chosen, graph = select_centroids(heat_logits, class_logits, cfg, return_graph=True)
    cl = None if class_logits is None or not cfg.use_class_logits else np.asarray(class_logits)
    dets = detections_from_choice(chosen, offsets, sizes, n, cl)
    return (dets, graph) if return_graph else dets


def save_outputs(path, heat_logits, offsets, sizes, class_logits=None, n: int = 2) -> None:
    arrays = {"heatmap_logits": heat_logits, "offsets": offsets, "bbox_sizes": sizes, "n": np.array(n)}
    if class_logits is not None:
        arrays["class_logits"] = class_logits
    np.savez_compressed(path, **arrays)


class MalformedOutputsError(ValueError):
    pass


def load_outputs(path) -> dict:
    try:
        with np.load(path) as z:
            d = {k: z[k] for k in z.files}
    except Exception as e:  # zip/pickle/format errors all mean the same thing here
        raise MalformedOutputsError(f"cannot read network outputs from {path}: {e}") from e
    need = {"heatmap_logits": 4, "offsets": 4, "bbox_sizes": 4}
    for k, nd in need.items():
        if k not in d or d[k].ndim != nd:
            raise MalformedOutputsError(f"{path}: missing or malformed {k!r}")
    h = d["heatmap_logits"]
    if h.shape[0] != NUM_LEVELS or d["offsets"].shape != (3,) + h.shape[1:] or d["bbox_sizes"].shape != (6,) + h.shape[1:]:
        raise MalformedOutputsError(f"{path}: inconsistent tensor shapes")
    if "class_logits" in d and d["class_logits"].shape != (NUM_LEVELS,):
        raise MalformedOutputsError(f"{path}: class_logits must have {NUM_LEVELS} entries")
    return d
