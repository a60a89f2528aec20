"""Object/affordance knowledge graph, thresholded propagation, context vectors.

Graph text format, one record per line (``#`` starts a comment)::

    object tomato
    affordance cuttable
    has-affordance tomato cuttable     # object -- affordance
    tool-for cuttable knife            # affordance -- object (the tool)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag

NODE_KINDS = ("object", "affordance")
RELATIONS = {"has-affordance": ("object", "affordance"), "tool-for": ("affordance", "object")}


class GraphFormatError(ValueError):
    pass


class UnknownObjectError(LookupError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    name: str


@dataclass
class KnowledgeGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)  # (relation, id_a, id_b) in file order

    def __post_init__(self):
        self._by_name = {n.name: n.id for n in self.nodes}
        self._adj = [set() for _ in self.nodes]
        for _, a, b in self.edges:
            self._adj[a].add(b)
            self._adj[b].add(a)

    @classmethod
    def build(cls, node_specs, edge_specs):
        """``node_specs``: (kind, name) pairs; ``edge_specs``: (relation, name, name)."""
        lines = [f"{k} {n}" for k, n in node_specs] + [f"{r} {a} {b}" for r, a, b in edge_specs]
        return parse_graph("\n".join(lines))

    def __len__(self):
        return len(self.nodes)

    def id_of(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownObjectError(f"unknown graph node {name!r}") from None

    def neighbors(self, node_id):
        return self._adj[node_id]

    def objects(self):
        return [n for n in self.nodes if n.kind == "object"]

    def to_text(self):
        lines = [f"{n.kind} {n.name}" for n in self.nodes]
        lines += [f"{r} {self.nodes[a].name} {self.nodes[b].name}" for r, a, b in self.edges]
        return "\n".join(lines) + "\n"


def parse_graph(text, source="<string>"):
    nodes, edges = [], []
    names = {}
    seen_edges = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        where = f"{source}:{lineno}"
        if parts[0] in NODE_KINDS:
            if len(parts) != 2:
                raise GraphFormatError(f"{where}: expected '<kind> <name>', got {line!r}")
            name = parts[1]
            if name in names:
                raise GraphFormatError(f"{where}: duplicate node name {name!r}")
            names[name] = len(nodes)
            nodes.append(Node(len(nodes), parts[0], name))
        elif parts[0] in RELATIONS:
            if len(parts) != 3:
                raise GraphFormatError(f"{where}: expected '<relation> <name> <name>', got {line!r}")
            rel, a, b = parts
            for nm in (a, b):
                if nm not in names:
                    raise GraphFormatError(f"{where}: edge references undeclared node {nm!r}")
            ia, ib = names[a], names[b]
            if ia == ib:
                raise GraphFormatError(f"{where}: self-loop on {a!r}")
            want = RELATIONS[rel]
            kinds = (nodes[ia].kind, nodes[ib].kind)
            if sorted(kinds) != sorted(want):
                raise GraphFormatError(
                    f"{where}: {rel} must join one {want[0]} and one {want[1]}, got {kinds[0]} {a!r} and {kinds[1]} {b!r}")
            key = (min(ia, ib), max(ia, ib))
            if key in seen_edges:
                raise GraphFormatError(f"{where}: duplicate edge {a!r}--{b!r}")
            seen_edges.add(key)
            edges.append((rel, ia, ib))
        else:
            raise GraphFormatError(f"{where}: unknown record type {parts[0]!r}")
    return KnowledgeGraph(nodes, edges)


def load_graph(path):
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read(), source=str(path))


def detect_objects(graph, scene):
    """Ground-truth object detector: visible object names -> node-id set."""
    ids = set()
    for name in scene:
        nid = graph.id_of(name)
        if graph.nodes[nid].kind != "object":
            raise UnknownObjectError(f"{name!r} is not an object node")
        ids.add(nid)
    return frozenset(ids)


def propagate_depths(graph, initial, score_fn, gamma, steps):
    """Like :func:`propagate` but maps each active node to the round it joined (0 = initial)."""
    depth = {n: 0 for n in initial}
    visited = set(initial)
    for k in range(1, steps + 1):
        candidates = set()
        for nid in depth:
            candidates.update(graph.neighbors(nid))
        candidates -= visited
        if not candidates:
            break
        order = sorted(candidates)
        scores = np.asarray(score_fn(order), dtype=np.float64)
        visited.update(order)
        for c, s in zip(order, scores):
            if s > gamma:
                depth[c] = k
    return depth


def propagate(graph, initial, score_fn, gamma, steps):
    """Expand ``initial`` for ``steps`` rounds through nodes scoring strictly above ``gamma``.

    ``score_fn`` maps a sorted list of node ids to an array of importances.
    Each round proposes the not-yet-evaluated neighbours of the active set;
    a rejected node is never proposed again.
    """
    return frozenset(propagate_depths(graph, initial, score_fn, gamma, steps))


def order_by_importance(node_ids, scores, limit):
    """Descending importance, ties by ascending id, cut to ``limit``."""
    pairs = sorted(zip(node_ids, scores), key=lambda p: (-p[1], p[0]))
    return [nid for nid, _ in pairs[:limit]]


@dataclass
class ContextSet:
    vectors: np.ndarray  # (n_max, d_ctx); rows >= count are zero
    count: int
    node_ids: list
    depths: list
    frame_index: int = 0


class ConceptNet:
    """Learnable node embeddings plus the importance and context networks.

    Importance reads ``x = [node embedding, visual summary]`` and is
    ``sigmoid(w2 . tanh(W1 x + b1) + b2)``.  A context row reads ``x`` plus a
    one-hot of the propagation round the node joined in (0 = detected) and
    is ``importance * tanh(V2 tanh(V1 [x, depth] + c1) + c2)``, so the
    importance network also receives gradient from the anticipation loss.
    """

    def __init__(self, n_nodes, feat_dim, d_kg=32, d_ctx=32, hidden=32, n_depth=4, rng=None,
                 dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        fan = d_kg + feat_dim
        self.feat_dim, self.d_kg, self.d_ctx, self.n_depth = feat_dim, d_kg, d_ctx, n_depth
        p = {}
        p["kg.embed"] = rng.normal(0.0, 1.0, size=(n_nodes, d_kg)).astype(dtype)
        p["kg.imp.w1"] = ag.uniform_init(rng, (fan, hidden), fan, dtype)
        p["kg.imp.b1"] = np.zeros(hidden, dtype=dtype)
        p["kg.imp.w2"] = ag.uniform_init(rng, (hidden, 1), hidden, dtype)
        p["kg.imp.b2"] = np.zeros(1, dtype=dtype)
        p["kg.ctx.w1"] = ag.uniform_init(rng, (fan + n_depth, hidden), fan + n_depth, dtype)
        p["kg.ctx.b1"] = np.zeros(hidden, dtype=dtype)
        p["kg.ctx.w2"] = ag.uniform_init(rng, (hidden, d_ctx), hidden, dtype)
        p["kg.ctx.b2"] = np.zeros(d_ctx, dtype=dtype)
        self.params = {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def _inputs(self, node_idx, visual):
        """node_idx int (..., n), visual (..., F) -> Tensor (..., n, D_kg + F)."""
        emb = ag.embedding(self.params["kg.embed"], node_idx)
        vis = np.broadcast_to(np.asarray(visual, dtype=emb.dtype)[..., None, :],
                              node_idx.shape + (self.feat_dim,))
        return ag.concat([emb, ag.Tensor(np.ascontiguousarray(vis))], axis=-1)

    def importance_tensor(self, node_idx, visual):
        p = self.params
        h = ag.tanh(ag.affine(self._inputs(node_idx, visual), p["kg.imp.w1"], p["kg.imp.b1"]))
        z = ag.affine(h, p["kg.imp.w2"], p["kg.imp.b2"])
        return ag.sigmoid(ag.reshape(z, node_idx.shape))

    def importance_many(self, node_ids, visual):
        with ag.no_grad():
            return self.importance_tensor(np.asarray(node_ids, dtype=np.int64), visual).data.copy()

    def importance(self, node_id, visual):
        return float(self.importance_many([node_id], visual)[0])

    def context_tensor(self, node_idx, depth, mask, visual):
        """Gated context rows (B, n, D_ctx); rows where ``mask`` is 0 come out exactly zero."""
        p = self.params
        onehot = np.eye(self.n_depth, dtype=self.params["kg.embed"].dtype)[np.minimum(depth, self.n_depth - 1)]
        x = ag.concat([self._inputs(node_idx, visual), ag.Tensor(onehot)], axis=-1)
        h = ag.tanh(ag.affine(x, p["kg.ctx.w1"], p["kg.ctx.b1"]))
        ctx = ag.tanh(ag.affine(h, p["kg.ctx.w2"], p["kg.ctx.b2"]))
        gate = ag.mul(self.importance_tensor(node_idx, visual), np.asarray(mask, dtype=ctx.dtype))
        shape = node_idx.shape + (1,)
        return ag.mul(ctx, ag.concat([ag.reshape(gate, shape)] * self.d_ctx, axis=-1))


def select_active(graph, net, scenes, visual, gamma, steps, n_max, frame_visuals=None):
    """Detect, propagate and rank one observation window.

    With ``frame_visuals`` given, propagation runs once per frame (that
    frame's scene and features) and the active sets are merged keeping each
    node's earliest round; otherwise the window's union scene and mean
    visual drive a single propagation.  Returns ``(ids, depths)`` in
    descending-importance order, at most ``n_max`` long.
    """
    def scorer(vis):
        return lambda ids: net.importance_many(ids, vis)

    if frame_visuals is None:
        initial = detect_objects(graph, set().union(*scenes) if scenes else ())
        depth = propagate_depths(graph, initial, scorer(visual), gamma, steps)
    else:
        depth = {}
        for scene, vis in zip(scenes, frame_visuals):
            for nid, d in propagate_depths(graph, detect_objects(graph, scene), scorer(vis), gamma, steps).items():
                depth[nid] = min(d, depth.get(nid, d))
    active = sorted(depth)
    if not active:
        return [], []
    order = order_by_importance(active, net.importance_many(active, visual), n_max)
    return order, [depth[n] for n in order]


def context_vectors(graph, net, active, visual, n_max, frame_index=0, depths=None):
    """Context rows for ``active`` ranked by importance, zero-padded to ``n_max``.

    ``depths`` maps node id to its propagation round (default: all 0).
    """
    depths = depths or {}
    active = sorted(active)
    order = order_by_importance(active, net.importance_many(active, visual), n_max) if active else []
    idx = np.zeros((1, n_max), dtype=np.int64)
    dep = np.zeros((1, n_max), dtype=np.int64)
    mask = np.zeros((1, n_max))
    idx[0, :len(order)] = order
    dep[0, :len(order)] = [depths.get(n, 0) for n in order]
    mask[0, :len(order)] = 1.0
    with ag.no_grad():
        vec = net.context_tensor(idx, dep, mask, np.asarray(visual)[None]).data[0]
    return ContextSet(vec, len(order), order, dep[0, :len(order)].tolist(), frame_index)
