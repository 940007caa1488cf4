"""Model graphs: a DAG of layer nodes with shape inference, execution,
transfer-learning surgery and the NWTS weight file format."""
from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import layers as L
from .layers import GradBundle, LayerParams
from .tensor import DTYPE, ShapeError, conv_out_extent

KINDS = ("conv", "fc", "relu", "maxpool", "lrn", "batchnorm", "dropout", "concat",
         "residual-add", "global-avg-pool", "softmax-output", "identity")
PARAM_KINDS = ("conv", "fc", "batchnorm")

INPUT = "<input>"

NWTS_MAGIC = b"NWTS"
NWTS_VERSION = 1


class GraphError(ValueError):
    """Structural problem with a model graph."""


class WeightFileError(ValueError):
    """Unreadable or incompatible NWTS weight file."""


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: List[str] = field(default_factory=list)
    geometry: Dict[str, float] = field(default_factory=dict)
    params: Optional[LayerParams] = None
    trainable: bool = True

    def param_count(self) -> int:
        if self.params is None:
            return 0
        return int(self.params.weights.size + self.params.bias.size)

    def tensors(self) -> Dict[str, np.ndarray]:
        if self.params is None:
            return {}
        out = {"weight": self.params.weights, "bias": self.params.bias}
        if self.params.running_mean is not None:
            out["running_mean"] = self.params.running_mean
            out["running_var"] = self.params.running_var
        return out


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def node_output_shape(node: LayerNode, in_shapes: List[Tuple[int, ...]]) -> Tuple[int, ...]:
    """Per-sample output shape of ``node`` given its inputs' per-sample shapes."""
    g = node.geometry
    k = node.kind
    if k in ("concat", "residual-add"):
        if not in_shapes:
            raise GraphError(f"{node.id}: {k} needs inputs")
    elif len(in_shapes) != 1:
        raise GraphError(f"{node.id}: {k} takes exactly one input, got {len(in_shapes)}")
    s = in_shapes[0]

    def spatial(kind):
        if len(s) != 3:
            raise ShapeError(f"{node.id}: {kind} needs a CxHxW input, got {s}")

    if k == "conv":
        spatial(k)
        cout, cin, kh, kw = node.params.weights.shape
        if s[0] != cin:
            raise ShapeError(f"{node.id}: expects {cin} input channels, got shape {s}")
        return (cout, conv_out_extent(s[1], kh, g["stride"], g["pad"]),
                conv_out_extent(s[2], kw, g["stride"], g["pad"]))
    if k == "maxpool":
        spatial(k)
        return (s[0], conv_out_extent(s[1], g["kernel"], g["stride"], g["pad"]),
                conv_out_extent(s[2], g["kernel"], g["stride"], g["pad"]))
    if k == "fc":
        din = int(np.prod(s))
        dout, wdin = node.params.weights.shape
        if din != wdin:
            raise ShapeError(f"{node.id}: expects {wdin} input features, got shape {s} ({din})")
        return (dout,)
    if k == "global-avg-pool":
        spatial(k)
        return (s[0],)
    if k == "concat":
        for other in in_shapes[1:]:
            if len(other) != 3 or other[1:] != s[1:]:
                raise ShapeError(f"{node.id}: concat inputs disagree: {s} vs {other}")
        return (sum(o[0] for o in in_shapes),) + tuple(s[1:])
    if k == "residual-add":
        for other in in_shapes[1:]:
            if other != s:
                raise ShapeError(f"{node.id}: residual-add inputs disagree: {s} vs {other}")
        return s
    if k == "batchnorm":
        c = node.params.weights.shape[0]
        if s[0] != c:
            raise ShapeError(f"{node.id}: expects {c} channels, got shape {s}")
        return s
    if k == "lrn":
        spatial(k)
        return s
    if k in ("relu", "dropout", "identity", "softmax-output"):
        return s
    raise GraphError(f"{node.id}: unknown kind {k!r}")


class ModelGraph:
    """Directed acyclic graph of :class:`LayerNode` objects.

    Nodes without inputs read the graph input. Exactly one node (the output
    head) has no successors. Surgery methods mutate the graph in place and
    return it, so large backbones are never copied.
    """

    def __init__(self, input_shape, class_count: int, meta=None):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.class_count = int(class_count)
        self.nodes: Dict[str, LayerNode] = {}
        self.meta = dict(meta or {})
        self._order: Optional[List[str]] = None

    def add(self, node: LayerNode) -> LayerNode:
        if node.kind not in KINDS:
            raise GraphError(f"unknown layer kind {node.kind!r}")
        if node.id in self.nodes or node.id == INPUT:
            raise GraphError(f"duplicate node id {node.id!r}")
        for src in node.inputs:
            if src not in self.nodes:
                raise GraphError(f"{node.id}: unknown input {src!r}")
        self.nodes[node.id] = node
        self._order = None
        return node

    def successors(self) -> Dict[str, List[str]]:
        succ = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                succ[src].append(node.id)
        return succ

    def order(self) -> List[str]:
        """Topological order (Kahn's algorithm, ties broken by insertion order)."""
        if self._order is None:
            indeg = {nid: len(n.inputs) for nid, n in self.nodes.items()}
            succ = self.successors()
            ready = [nid for nid, d in indeg.items() if d == 0]
            order = []
            while ready:
                nid = ready.pop(0)
                order.append(nid)
                for s in succ[nid]:
                    indeg[s] -= 1
                    if indeg[s] == 0:
                        ready.append(s)
            if len(order) != len(self.nodes):
                raise GraphError("graph contains a cycle")
            self._order = order
        return self._order

    @property
    def output_id(self) -> str:
        sinks = [nid for nid, s in self.successors().items() if not s]
        if len(sinks) != 1:
            raise GraphError(f"graph must have exactly one output node, found {sinks}")
        return sinks[0]

    def head_id(self) -> str:
        out = self.output_id
        node = self.nodes[out]
        if node.kind == "softmax-output":
            out = node.inputs[0]
        if self.nodes[out].kind != "fc":
            raise GraphError(f"head node {out!r} is {self.nodes[out].kind}, expected fc")
        return out

    def ancestors(self, node_id: str) -> set:
        seen, stack = set(), [node_id]
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self.nodes[nid].inputs)
        return seen

    def param_nodes(self) -> List[LayerNode]:
        return [self.nodes[nid] for nid in self.order() if self.nodes[nid].params is not None]

    def trainable_ids(self) -> set:
        return {n.id for n in self.param_nodes() if n.trainable}

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(n.param_count() for n in self.param_nodes()
                   if n.trainable or not trainable_only)


# -- shape inference and census -----------------------------------------

def infer_shapes(g: ModelGraph) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for nid in g.order():
        node = g.nodes[nid]
        ins = [shapes[s] for s in node.inputs] or [g.input_shape]
        shapes[nid] = node_output_shape(node, ins)
    out = shapes[g.output_id]
    if out != (g.class_count,):
        raise ShapeError(f"output node {g.output_id!r} yields {out}, expected ({g.class_count},)")
    return shapes


@dataclass
class Census:
    counts: Dict[str, int]
    parameters: int
    shapes: List[Tuple[str, Tuple[int, ...]]]
    notes: List[str] = field(default_factory=list)

    @property
    def conv(self) -> int:
        return self.counts.get("conv", 0)

    @property
    def fc(self) -> int:
        return self.counts.get("fc", 0)


def census(g: ModelGraph) -> Census:
    shapes = infer_shapes(g)
    counts = Counter(g.nodes[nid].kind for nid in g.order())
    params = 0
    for n in g.param_nodes():
        if n.kind == "conv":
            cout, cin, kh, kw = n.params.weights.shape
            params += cout * (cin * kh * kw + 1)
        elif n.kind == "fc":
            dout, din = n.params.weights.shape
            params += dout * (din + 1)
        elif n.kind == "batchnorm":
            params += 2 * n.params.weights.shape[0]
    return Census(dict(counts), params, [(nid, shapes[nid]) for nid in g.order()],
                  list(g.meta.get("census_notes", [])))


def summary(g: ModelGraph) -> dict:
    """JSON-ready description: ids, kinds, shapes, trainable flags, parameter counts."""
    c = census(g)
    shapes = dict(c.shapes)
    return {
        "architecture": g.meta.get("arch"),
        "input_shape": list(g.input_shape),
        "class_count": g.class_count,
        "counts": c.counts,
        "parameters": c.parameters,
        "trainable_parameters": g.parameter_count(trainable_only=True),
        "notes": c.notes,
        "nodes": [{"id": nid, "kind": g.nodes[nid].kind, "inputs": g.nodes[nid].inputs,
                   "shape": list(shapes[nid]), "trainable": g.nodes[nid].trainable,
                   "params": g.nodes[nid].param_count()} for nid in g.order()],
    }


def summary_json(g: ModelGraph) -> str:
    return json.dumps(summary(g), indent=2)


# -- execution -----------------------------------------------------------

@dataclass
class ForwardCache:
    mode: str
    layer: Dict[str, object]
    shapes: Dict[str, Tuple[int, ...]]


def _forward_node(node: LayerNode, xs, train: bool, rng_key):
    k, g = node.kind, node.geometry
    x = xs[0]
    if k == "conv":
        return L.conv2d(x, node.params, g["stride"], g["pad"])
    if k == "fc":
        return L.fully_connected(x, node.params)
    if k == "relu":
        return L.relu(x), x
    if k == "maxpool":
        return L.maxpool(x, g["kernel"], g["stride"], g["pad"])
    if k == "lrn":
        return L.local_response_norm(x)
    if k == "batchnorm":
        return L.batch_norm(x, node.params, train)
    if k == "dropout":
        return L.dropout(x, g.get("p", 0.5), train, seed=rng_key)
    if k == "concat":
        return L.concat_channels(xs)
    if k == "residual-add":
        y = xs[0]
        for other in xs[1:]:
            y = L.residual_add(y, other)
        return y, len(xs)
    if k == "global-avg-pool":
        return L.global_avg_pool(x)
    if k == "softmax-output":
        y = L.softmax(x.reshape(x.shape[0], -1))
        return y, y
    if k == "identity":
        return x, None
    raise GraphError(f"{node.id}: unknown kind {k!r}")


def _needed(g: ModelGraph, targets, given) -> set:
    # nodes that must run to produce ``targets`` when ``given`` outputs are supplied
    need, stack = set(), list(targets)
    while stack:
        nid = stack.pop()
        if nid in need or nid in given:
            continue
        need.add(nid)
        stack.extend(g.nodes[nid].inputs)
    return need


def forward(g: ModelGraph, batch, mode: str = "eval", rng_key=(0,),
            record_shapes: bool = False, given=None, outputs=None):
    """Run the graph on an N x C x H x W batch.

    Returns ``(logits, cache)``. The cache holds layer caches only in train
    mode; in eval mode it is None unless ``record_shapes`` is set, in which
    case it carries the executed per-sample output shapes.

    ``given`` maps node ids to precomputed activations; those nodes and
    anything only they depend on are skipped (``batch`` may then be None).
    ``outputs`` requests a dict of those nodes' activations instead of the
    graph output.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    given = dict(given or {})
    targets = list(outputs) if outputs is not None else [g.output_id]
    run = _needed(g, targets, given)
    reads_input = any(not g.nodes[nid].inputs for nid in run)
    if reads_input or batch is not None:
        batch = np.asarray(batch, dtype=DTYPE)
        if batch.ndim != len(g.input_shape) + 1 or batch.shape[1:] != g.input_shape:
            raise ShapeError(f"batch shape {batch.shape} does not match input shape {g.input_shape}")
    train = mode == "train"
    keep = set(targets)
    remaining = {nid: 0 for nid in g.nodes}
    for nid in run:
        for s in g.nodes[nid].inputs:
            remaining[s] += 1
    acts: Dict[str, np.ndarray] = dict(given)
    cache = ForwardCache(mode, {}, {nid: tuple(a.shape[1:]) for nid, a in given.items()})
    for i, nid in enumerate(g.order()):
        if nid not in run:
            continue
        node = g.nodes[nid]
        xs = [acts[s] for s in node.inputs] or [batch]
        key = tuple(np.atleast_1d(rng_key)) + (i,)
        y, layer_cache = _forward_node(node, xs, train, key)
        acts[nid] = y
        if train:
            cache.layer[nid] = layer_cache
        if train or record_shapes:
            cache.shapes[nid] = tuple(y.shape[1:])
        if not train:
            for s in node.inputs:
                remaining[s] -= 1
                if remaining[s] == 0 and s not in keep:
                    del acts[s]
    if outputs is not None:
        out = {nid: acts[nid] for nid in targets}
    else:
        out = acts[g.output_id]
    return out, (cache if (train or record_shapes) else None)


def static_frontier(g: ModelGraph) -> List[str]:
    """Nodes whose train-mode output depends only on the input sample.

    A node is static when it has no trainable parameters, is not stochastic or
    batch-dependent in train mode (dropout, batchnorm) and all its inputs are
    static. Returns the static nodes that feed a non-static one; their
    activations can be computed once per sample and reused every epoch.
    """
    static = set()
    for nid in g.order():
        node = g.nodes[nid]
        if (node.kind not in ("dropout", "batchnorm")
                and not (node.params is not None and node.trainable)
                and all(s in static for s in node.inputs)):
            static.add(nid)
    if g.output_id in static:
        return []
    succ = g.successors()
    return [nid for nid in g.order()
            if nid in static and any(s not in static for s in succ[nid])]


def _backward_node(node: LayerNode, layer_cache, d_out, need_input, need_params):
    k = node.kind
    if k == "conv":
        return L.conv2d_backward(layer_cache, d_out, need_input, need_params)
    if k == "fc":
        return L.fully_connected_backward(layer_cache, d_out, need_input, need_params)
    if k == "batchnorm":
        return L.batch_norm_backward(layer_cache, d_out, need_input, need_params)
    if k == "relu":
        return GradBundle(L.relu_backward(layer_cache, d_out))
    if k == "maxpool":
        return GradBundle(L.maxpool_backward(layer_cache, d_out))
    if k == "lrn":
        return GradBundle(L.local_response_norm_backward(layer_cache, d_out))
    if k == "dropout":
        return GradBundle(L.dropout_backward(layer_cache, d_out))
    if k == "concat":
        return GradBundle(L.concat_channels_backward(layer_cache, d_out))
    if k == "residual-add":
        return GradBundle([d_out] * layer_cache)
    if k == "global-avg-pool":
        return GradBundle(L.global_avg_pool_backward(layer_cache, d_out))
    if k == "softmax-output":
        p = layer_cache
        return GradBundle(p * (d_out - (d_out * p).sum(axis=1, keepdims=True)))
    if k == "identity":
        return GradBundle(d_out)
    raise GraphError(f"{node.id}: unknown kind {k!r}")


def backward(g: ModelGraph, cache: ForwardCache, d_logits, input_grad: bool = True):
    """Reverse-mode pass. Returns ``{node_id: GradBundle}``.

    Fan-out gradients are summed. Frozen nodes propagate ``d_input`` but carry
    no parameter gradients. With ``input_grad=False`` nodes whose upstream has
    nothing trainable are skipped entirely; the gradient with respect to the
    graph input is reported under ``INPUT`` when requested.
    """
    if cache is None or cache.mode != "train" or not cache.layer:
        raise GraphError("backward needs a cache from a train-mode forward pass")
    order = g.order()
    upstream_trainable: Dict[str, bool] = {}
    for nid in order:
        node = g.nodes[nid]
        upstream_trainable[nid] = any(
            (g.nodes[s].params is not None and g.nodes[s].trainable) or upstream_trainable[s]
            for s in node.inputs)
    out_id = g.output_id
    pending: Dict[str, np.ndarray] = {out_id: np.asarray(d_logits, dtype=DTYPE)}
    expected = (pending[out_id].shape[0],) + cache.shapes[out_id]
    if pending[out_id].shape != expected:
        raise ShapeError(f"d_logits shape {pending[out_id].shape}, expected {expected}")
    grads: Dict[str, GradBundle] = {}
    d_input_total = None
    for nid in reversed(order):
        if nid not in pending:
            continue
        node = g.nodes[nid]
        d_out = pending.pop(nid)
        need_params = node.params is not None and node.trainable
        need_input = input_grad or upstream_trainable[nid]
        if not (need_params or need_input):
            continue
        if nid not in cache.layer:
            raise GraphError(f"{nid}: no forward cache (activation was supplied precomputed)")
        bundle = _backward_node(node, cache.layer[nid], d_out, need_input, need_params)
        grads[nid] = bundle
        if not need_input:
            continue
        parts = bundle.d_input if isinstance(bundle.d_input, list) else [bundle.d_input]
        if not node.inputs:
            d_input_total = parts[0] if d_input_total is None else d_input_total + parts[0]
        for src, part in zip(node.inputs, parts):
            part = part.reshape((part.shape[0],) + cache.shapes[src])
            pending[src] = part if src not in pending else pending[src] + part
    if input_grad:
        grads[INPUT] = GradBundle(d_input_total)
    return grads


# -- transfer-learning surgery -------------------------------------------

def replace_head(g: ModelGraph, new_class_count: int, seed: int = 0) -> ModelGraph:
    """Swap the final fully-connected node for a fresh He-uniform one in place."""
    if new_class_count < 1:
        raise GraphError(f"class count must be positive, got {new_class_count}")
    hid = g.head_id()
    old = g.nodes[hid]
    din = old.params.weights.shape[1]
    rng = np.random.default_rng([seed, new_class_count])
    w = he_uniform(rng, (new_class_count, din), din)
    g.nodes[hid] = LayerNode(hid, "fc", list(old.inputs), dict(old.geometry, units=new_class_count),
                             LayerParams(w, np.zeros(new_class_count)), trainable=True)
    g.class_count = new_class_count
    infer_shapes(g)
    return g


def freeze_through(g: ModelGraph, node_id: str) -> ModelGraph:
    """Mark ``node_id`` and all its ancestors non-trainable, in place."""
    if node_id not in g.nodes:
        raise GraphError(f"unknown node id {node_id!r}")
    for nid in g.ancestors(node_id):
        g.nodes[nid].trainable = False
    return g


def unfreeze_all(g: ModelGraph) -> ModelGraph:
    for node in g.nodes.values():
        node.trainable = True
    return g


# -- NWTS weight files ---------------------------------------------------

def named_tensors(g: ModelGraph) -> Dict[str, np.ndarray]:
    out = {}
    for node in g.param_nodes():
        for suffix, t in node.tensors().items():
            out[f"{node.id}.{suffix}"] = t
    return out


def save_weights(g: ModelGraph, path) -> None:
    tensors = named_tensors(g)
    with open(path, "wb") as f:
        f.write(NWTS_MAGIC + struct.pack("<BI", NWTS_VERSION, len(tensors)))
        for name, t in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def read_weights(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NWTS_MAGIC:
        raise WeightFileError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<BI", take(5))
    if version != NWTS_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(DTYPE).reshape(shape)
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_weights(g: ModelGraph, path, strict: bool = True) -> ModelGraph:
    """Copy tensors from an NWTS file into ``g`` (matched by name and shape).

    With ``strict=False`` tensors absent from the file are left untouched,
    which lets a backbone be loaded under a differently sized head.
    """
    stored = read_weights(path)
    current = named_tensors(g)
    problems = []
    for name, t in current.items():
        if name not in stored:
            if strict:
                problems.append(f"{name}: missing from file")
        elif stored[name].shape != t.shape:
            problems.append(f"{name}: file has shape {stored[name].shape}, graph expects {t.shape}")
    if strict:
        problems += [f"{name}: not present in graph" for name in stored if name not in current]
    if problems:
        raise WeightFileError(f"{path}: incompatible with graph: " + "; ".join(problems))
    for name, t in current.items():
        if name in stored:
            t[...] = stored[name]
    return g
