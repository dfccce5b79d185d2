"""Rebuild and execute a compiled network from its graph descriptor.

The descriptor is a JSON DAG of input/parameter/kernel nodes; every kernel
node names the binary function symbol it was lowered to.  Given a mapping
from symbols to kernel types (supplied directly or produced by database
matching), execution proceeds worklist-style: repeatedly run the
lowest-numbered kernel node whose predecessors are all computed, using the
built-in reference tensor kernels, and finally return the output node's
tensor together with an architecture summary in execution order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from kernid.blobio import dumps_header, read_header, read_blob, write_blob_file
from kernid.errors import DataError

_F32 = np.float32

SUPPORTED_KERNELS = (
    "conv2d",
    "dense",
    "bias_add",
    "relu",
    "add",
    "max_pool2d",
    "flatten",
    "softmax",
    "conv2d_relu",
    "dense_relu",
)


class NodeKind:
    INPUT = "input"
    PARAM = "param"
    KERNEL = "kernel"


@dataclass
class GraphNode:
    node_id: int
    kind: str
    inputs: list[int] = field(default_factory=list)
    symbol: str | None = None  # kernel nodes: binary function symbol
    name: str | None = None  # input/param nodes: tensor name
    attrs: dict = field(default_factory=dict)


@dataclass
class GraphDescriptor:
    nodes: list[GraphNode]
    output_id: int
    input_shapes: dict[str, list[int]] = field(default_factory=dict)

    def node(self, node_id: int) -> GraphNode:
        return self._by_id[node_id]

    def __post_init__(self) -> None:
        self._by_id = {n.node_id: n for n in self.nodes}

    def kernel_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.kind == NodeKind.KERNEL]


def _check_dag(nodes: list[GraphNode]) -> None:
    """Cycle detection via iterative DFS; reports the closing back edge."""
    state: dict[int, int] = {}  # 0 visiting, 1 done
    adjacency = {n.node_id: list(n.inputs) for n in nodes}
    for root in adjacency:
        if state.get(root) == 1:
            continue
        stack: list[tuple[int, int]] = [(root, 0)]
        state[root] = 0
        while stack:
            node, edge_pos = stack[-1]
            if edge_pos < len(adjacency[node]):
                stack[-1] = (node, edge_pos + 1)
                nxt = adjacency[node][edge_pos]
                if state.get(nxt) == 0:
                    raise DataError(f"graph contains a cycle: edge {node} -> {nxt} closes it")
                if nxt not in state:
                    state[nxt] = 0
                    stack.append((nxt, 0))
            else:
                state[node] = 1
                stack.pop()


def validate_graph(graph: GraphDescriptor) -> None:
    ids = [n.node_id for n in graph.nodes]
    if len(ids) != len(set(ids)):
        raise DataError("graph has duplicate node ids")
    id_set = set(ids)
    if graph.output_id not in id_set:
        raise DataError(f"output_id {graph.output_id} does not name a node")
    for n in graph.nodes:
        for ref in n.inputs:
            if ref not in id_set:
                raise DataError(f"node {n.node_id} references missing node {ref}")
        if n.kind in (NodeKind.INPUT, NodeKind.PARAM) and n.inputs:
            raise DataError(f"{n.kind} node {n.node_id} must not have inputs")
        if n.kind == NodeKind.KERNEL and not n.inputs:
            raise DataError(f"kernel node {n.node_id} needs at least one input")
        if n.kind == NodeKind.KERNEL and not n.symbol:
            raise DataError(f"kernel node {n.node_id} lacks a binary symbol")
        if n.kind == NodeKind.PARAM and not n.name:
            raise DataError(f"param node {n.node_id} lacks a tensor name")
        if n.kind not in (NodeKind.INPUT, NodeKind.PARAM, NodeKind.KERNEL):
            raise DataError(f"node {n.node_id} has unknown kind {n.kind!r}")
    _check_dag(graph.nodes)


def parse_graph(path: str) -> GraphDescriptor:
    """Load and validate a graph descriptor JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot open graph {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON: {exc}") from exc
    try:
        nodes = [
            GraphNode(
                node_id=int(n["id"]),
                kind=str(n["kind"]),
                inputs=[int(i) for i in n.get("inputs", [])],
                symbol=n.get("symbol"),
                name=n.get("name"),
                attrs=dict(n.get("attrs", {})),
            )
            for n in obj["nodes"]
        ]
        graph = GraphDescriptor(
            nodes=nodes,
            output_id=int(obj["output_id"]),
            input_shapes={k: [int(d) for d in v] for k, v in obj.get("input_shapes", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed graph descriptor: {exc}") from exc
    validate_graph(graph)
    return graph


def _as_pair(value, name: str) -> tuple[int, int]:
    if isinstance(value, (int, float)):
        return int(value), int(value)
    if len(value) == 1:
        return int(value[0]), int(value[0])
    if len(value) == 2:
        return int(value[0]), int(value[1])
    raise DataError(f"attribute {name!r} must be a scalar or pair, got {value!r}")


def _conv2d(x: np.ndarray, w: np.ndarray, attrs: dict) -> np.ndarray:
    if x.ndim != 4 or w.ndim != 4:
        raise DataError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DataError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    sh, sw = _as_pair(attrs.get("strides", 1), "strides")
    ph, pw = _as_pair(attrs.get("padding", 0), "padding")
    n, c, h, width = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_h = (h + 2 * ph - kh) // sh + 1
    out_w = (width + 2 * pw - kw) // sw + 1
    if out_h <= 0 or out_w <= 0:
        raise DataError(f"conv2d produces empty output for input {x.shape}, kernel {w.shape}")
    w64 = w.astype(np.float64)
    acc = np.zeros((n, o, out_h, out_w))
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i : i + out_h * sh : sh, j : j + out_w * sw : sw]
            acc += np.einsum("nchw,oc->nohw", window, w64[:, :, i, j])
    return acc.astype(_F32)


def _dense(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2:
        raise DataError(f"dense expects 2-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DataError(f"dense shape mismatch: input {x.shape} vs weight {w.shape}")
    acc = x.astype(np.float64) @ w.astype(np.float64).T
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise DataError(f"dense bias shape {bias.shape} does not match units {w.shape[0]}")
        acc = acc + bias.astype(np.float64)
    return acc.astype(_F32)


def _bias_add(x: np.ndarray, bias: np.ndarray, attrs: dict) -> np.ndarray:
    axis = int(attrs.get("axis", 1))
    if bias.ndim != 1:
        raise DataError(f"bias_add expects a 1-d bias, got {bias.shape}")
    axis = axis % x.ndim
    if x.shape[axis] != bias.shape[0]:
        raise DataError(f"bias_add axis {axis} of {x.shape} does not match bias {bias.shape}")
    shape = [1] * x.ndim
    shape[axis] = bias.shape[0]
    return (x.astype(np.float64) + bias.astype(np.float64).reshape(shape)).astype(_F32)


def _max_pool2d(x: np.ndarray, attrs: dict) -> np.ndarray:
    if x.ndim != 4:
        raise DataError(f"max_pool2d expects NCHW input, got {x.shape}")
    kh, kw = _as_pair(attrs.get("pool_size", 2), "pool_size")
    sh, sw = _as_pair(attrs.get("strides", attrs.get("pool_size", 2)), "strides")
    ph, pw = _as_pair(attrs.get("padding", 0), "padding")
    n, c, h, width = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    out_h = (h + 2 * ph - kh) // sh + 1
    out_w = (width + 2 * pw - kw) // sw + 1
    if out_h <= 0 or out_w <= 0:
        raise DataError(f"max_pool2d produces empty output for input {x.shape}")
    out = np.full((n, c, out_h, out_w), -np.inf, dtype=_F32)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i : i + out_h * sh : sh, j : j + out_w * sw : sw]
            np.maximum(out, window, out=out)
    return out


def _softmax(x: np.ndarray, attrs: dict) -> np.ndarray:
    axis = int(attrs.get("axis", -1))
    x64 = x.astype(np.float64)
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=axis, keepdims=True)).astype(_F32)


def run_kernel(kernel_type: str, inputs: list[np.ndarray], attrs: dict | None = None) -> np.ndarray:
    """Execute one kernel on float32 tensors (accumulation in float64)."""
    attrs = attrs or {}

    def need(count: int, allow_extra: bool = False) -> None:
        if len(inputs) != count and not (allow_extra and len(inputs) > count):
            raise DataError(
                f"kernel {kernel_type!r} expects {count} input(s), got {len(inputs)}"
            )

    if kernel_type in ("conv2d", "conv2d_relu"):
        need(2)
        out = _conv2d(inputs[0], inputs[1], attrs)
    elif kernel_type in ("dense", "dense_relu"):
        if len(inputs) not in (2, 3):
            raise DataError(f"kernel {kernel_type!r} expects 2 or 3 inputs, got {len(inputs)}")
        out = _dense(inputs[0], inputs[1], inputs[2] if len(inputs) == 3 else None)
    elif kernel_type == "bias_add":
        need(2)
        out = _bias_add(inputs[0], inputs[1], attrs)
    elif kernel_type == "relu":
        need(1)
        out = np.maximum(inputs[0], np.float32(0.0))
    elif kernel_type == "add":
        need(2)
        a, b = inputs
        try:
            out = (a.astype(np.float64) + b.astype(np.float64)).astype(_F32)
        except ValueError as exc:
            raise DataError(f"add shape mismatch: {a.shape} vs {b.shape}") from exc
    elif kernel_type == "max_pool2d":
        need(1)
        out = _max_pool2d(inputs[0], attrs)
    elif kernel_type == "flatten":
        need(1)
        x = inputs[0]
        out = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    elif kernel_type == "softmax":
        need(1)
        out = _softmax(inputs[0], attrs)
    else:
        raise DataError(
            f"unsupported kernel type {kernel_type!r}; supported: {', '.join(SUPPORTED_KERNELS)}"
        )
    if kernel_type in ("conv2d_relu", "dense_relu"):
        out = np.maximum(out, np.float32(0.0))
    if not np.isfinite(out).all():
        raise DataError(f"kernel {kernel_type!r} produced non-finite values")
    return out.astype(_F32)


@dataclass
class SummaryRow:
    node_id: int
    kernel_type: str
    input_shapes: list[list[int]]
    output_shape: list[int]


@dataclass
class ArchitectureSummary:
    rows: list[SummaryRow]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "layers": [
                {
                    "node_id": r.node_id,
                    "kernel_type": r.kernel_type,
                    "input_shapes": r.input_shapes,
                    "output_shape": r.output_shape,
                }
                for r in self.rows
            ],
        }


def reconstruct_run(
    graph: GraphDescriptor,
    params: dict[str, np.ndarray],
    labels: dict[str, str],
    input_tensor: np.ndarray,
    selection: str = "min",
) -> tuple[np.ndarray, ArchitectureSummary]:
    """Worklist execution of all kernel nodes in dependency order.

    `selection` picks among runnable nodes ("min"/"max" node id); any
    admissible order yields the same tensors on a DAG.
    """
    validate_graph(graph)
    input_nodes = [n for n in graph.nodes if n.kind == NodeKind.INPUT]
    if len(input_nodes) != 1:
        raise DataError(f"expected exactly one input node, found {len(input_nodes)}")
    input_node = input_nodes[0]
    declared = graph.input_shapes.get(input_node.name or "")
    if declared is not None and list(input_tensor.shape) != declared:
        raise DataError(
            f"input tensor shape {list(input_tensor.shape)} does not match declared {declared}"
        )

    computed: dict[int, np.ndarray] = {input_node.node_id: input_tensor.astype(_F32)}
    for n in graph.nodes:
        if n.kind == NodeKind.PARAM:
            if n.name not in params:
                raise DataError(f"parameter {n.name!r} (node {n.node_id}) missing from store")
            computed[n.node_id] = params[n.name].astype(_F32)

    pending = {n.node_id for n in graph.kernel_nodes()}
    pick = min if selection == "min" else max
    rows: list[SummaryRow] = []
    while pending:
        runnable = [
            nid
            for nid in pending
            if all(ref in computed for ref in graph.node(nid).inputs)
        ]
        if not runnable:
            raise DataError("no runnable kernel node although work remains (graph inconsistent)")
        nid = pick(runnable)
        node = graph.node(nid)
        if node.symbol not in labels:
            raise DataError(f"no kernel-type label for symbol {node.symbol!r} (node {nid})")
        kernel_type = labels[node.symbol]
        inputs = [computed[ref] for ref in node.inputs]
        out = run_kernel(kernel_type, inputs, node.attrs)
        computed[nid] = out
        rows.append(
            SummaryRow(
                node_id=nid,
                kernel_type=kernel_type,
                input_shapes=[list(t.shape) for t in inputs],
                output_shape=list(out.shape),
            )
        )
        pending.discard(nid)
    if graph.output_id not in computed:
        raise DataError(f"output node {graph.output_id} was never computed")
    return computed[graph.output_id], ArchitectureSummary(rows=rows)


@dataclass
class AccuracyLossReport:
    mismatches: int
    n_inputs: int
    max_abs_deviation: float
    within_tolerance: bool

    @property
    def loss(self) -> float:
        return self.mismatches / self.n_inputs if self.n_inputs else 0.0

    def to_json(self) -> dict:
        return {
            "version": 1,
            "accuracy_loss": self.loss,
            "mismatches": self.mismatches,
            "n_inputs": self.n_inputs,
            "max_abs_deviation": self.max_abs_deviation,
            "within_tolerance": self.within_tolerance,
        }


def accuracy_loss(
    graph: GraphDescriptor,
    params: dict[str, np.ndarray],
    labels: dict[str, str],
    reference_pairs: list[tuple[np.ndarray, np.ndarray]],
    tolerance: float = 1e-5,
) -> AccuracyLossReport:
    """Argmax disagreement rate against recorded reference outputs."""
    if not reference_pairs:
        raise DataError("accuracy_loss needs at least one reference input/output pair")
    mismatches = 0
    max_dev = 0.0
    for inp, ref in reference_pairs:
        out, _ = reconstruct_run(graph, params, labels, inp)
        if out.shape != ref.shape:
            raise DataError(f"output shape {out.shape} does not match reference {ref.shape}")
        if int(np.argmax(out)) != int(np.argmax(ref)):
            mismatches += 1
        max_dev = max(max_dev, float(np.abs(out.astype(np.float64) - ref.astype(np.float64)).max()))
    return AccuracyLossReport(
        mismatches=mismatches,
        n_inputs=len(reference_pairs),
        max_abs_deviation=max_dev,
        within_tolerance=max_dev <= tolerance,
    )


def save_params(params: dict[str, np.ndarray], path: str) -> None:
    """Parameter store: header with names/shapes/byte offsets, one float32 blob."""
    names = sorted(params)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr)
    header = {"kind": "param_store", "version": 1, "params": entries}
    write_blob_file(path, header, blobs)


def load_params(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = read_header(fh, path)
        if header.get("kind") != "param_store":
            raise DataError(f"{path}: not a parameter store file")
        base = fh.tell()
        out: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            fh.seek(base + int(entry["offset"]))
            out[entry["name"]] = read_blob(fh, entry["shape"], path)
    return out


def save_tensor(tensor: np.ndarray, path: str) -> None:
    header = {"kind": "tensor", "version": 1, "shape": list(tensor.shape)}
    write_blob_file(path, header, [tensor])


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = read_header(fh, path)
        if header.get("kind") != "tensor":
            raise DataError(f"{path}: not a tensor file")
        return read_blob(fh, header["shape"], path)
