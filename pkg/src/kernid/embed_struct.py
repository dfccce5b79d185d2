"""Structure embedding of control-flow graphs.

Every node of a CFG is relabeled Weisfeiler-Lehman style: the base label is
the sorted multiset of the block's opcodes, and each refinement round hashes
the node's own label with the sorted label multisets of its successors and
predecessors (direction matters in a CFG).  All labels at all depths act as
subgraph tokens; a per-graph vector is trained to score its own tokens above
noise tokens, skipgram-with-negative-sampling style.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kernid.asm_lang import parse_instruction
from kernid.blobio import read_header, read_blob, write_blob_file
from kernid.errors import DataError, NumericError
from kernid.hashutil import fnv1a64, seed_for
from kernid.sgns import NoiseTable, linear_lr, step_gradients

_F32 = np.float32


@dataclass
class WlConfig:
    iterations: int = 2
    dim: int = 100
    epochs: int = 40
    lr_start: float = 0.025
    lr_end: float = 0.0001
    negatives: int = 5
    seed: int = 1
    infer_epochs: int = 40

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise DataError("WL iteration count cannot be negative")
        if self.dim < 1:
            raise DataError("embedding dim must be >= 1")
        if self.negatives < 1:
            raise DataError("need at least one negative sample")
        if self.epochs < 0 or self.infer_epochs < 0:
            raise DataError("epoch counts cannot be negative")

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "dim": self.dim,
            "epochs": self.epochs,
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "negatives": self.negatives,
            "seed": self.seed,
            "infer_epochs": self.infer_epochs,
        }


@dataclass(frozen=True)
class WlToken:
    """One subgraph label: stable 64-bit hash plus its refinement depth."""

    key: int
    depth: int


@dataclass
class StructModel:
    config: WlConfig
    wl_vocab: dict[WlToken, int]
    wl_counts: np.ndarray  # occurrence count per vocab index
    out_subgraphs: np.ndarray  # (W, dim) float32
    graph_vectors: dict[str, np.ndarray]  # function_id -> (dim,) float32
    loss_history: list[float] = field(default_factory=list)

    def out_matrix_checksum(self) -> int:
        return fnv1a64(self.out_subgraphs.tobytes())


@dataclass
class StructInference:
    """Inferred graph vector; flagged when no subgraph token was known."""

    vector: np.ndarray
    no_known_tokens: bool = False


def wl_tokens(fn, iterations: int) -> list[WlToken]:
    """All WL labels of all blocks at depths 0..iterations.

    Base labels hash the sorted opcode multiset of a block; refined labels
    hash (own label, sorted successor labels, sorted predecessor labels).
    Output order is (depth, block_id), giving exactly
    (iterations+1) * #blocks tokens.
    """
    blocks = sorted(fn.blocks, key=lambda b: b.block_id)
    ids = [b.block_id for b in blocks]
    id_set = set(ids)
    for src, dst in fn.edges:
        if src not in id_set or dst not in id_set:
            raise DataError(
                f"function {fn.function_id!r} has dangling edge ({src}, {dst})"
            )
    succs: dict[int, list[int]] = {i: [] for i in ids}
    preds: dict[int, list[int]] = {i: [] for i in ids}
    for src, dst in fn.edges:
        succs[src].append(dst)
        preds[dst].append(src)

    labels: dict[int, int] = {}
    for block in blocks:
        opcodes = sorted(parse_instruction(line).opcode.text for line in block.instructions)
        labels[block.block_id] = fnv1a64("0|" + ",".join(opcodes))

    tokens = [WlToken(labels[i], 0) for i in ids]
    for depth in range(1, iterations + 1):
        refined: dict[int, int] = {}
        for i in ids:
            succ_part = ",".join(f"{l:016x}" for l in sorted(labels[j] for j in succs[i]))
            pred_part = ",".join(f"{l:016x}" for l in sorted(labels[j] for j in preds[i]))
            canon = f"{depth}|{labels[i]:016x}|s:{succ_part}|p:{pred_part}"
            refined[i] = fnv1a64(canon)
        labels = refined
        tokens.extend(WlToken(labels[i], depth) for i in ids)
    return tokens


def _encode_graph(vocab: dict[WlToken, int], tokens: list[WlToken]) -> np.ndarray:
    """Token indices of one graph; tokens absent from the vocabulary are dropped."""
    idx = [vocab[t] for t in tokens if t in vocab]
    return np.array(idx, dtype=np.int64)


def init_struct_model(
    cfg: WlConfig, wl_vocab: dict[WlToken, int], wl_counts: np.ndarray, function_ids: list[str]
) -> StructModel:
    rng = np.random.default_rng(cfg.seed)
    bound = 0.5 / cfg.dim
    out = np.zeros((len(wl_vocab), cfg.dim), dtype=_F32)
    graph_vectors = {
        fid: rng.uniform(-bound, bound, cfg.dim).astype(_F32) for fid in function_ids
    }
    return StructModel(
        config=cfg,
        wl_vocab=wl_vocab,
        wl_counts=wl_counts,
        out_subgraphs=out,
        graph_vectors=graph_vectors,
    )


def train_struct(train, cfg: WlConfig) -> StructModel:
    """Build the WL vocabulary over the corpus and train graph vectors."""
    if not train.functions:
        raise DataError("cannot train a structure model on an empty corpus")
    token_lists = [wl_tokens(fn, cfg.iterations) for fn in train.functions]

    counts: dict[WlToken, int] = {}
    for tokens in token_lists:
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
    ordered = sorted(counts, key=lambda t: (-counts[t], t.depth, t.key))
    wl_vocab = {t: i for i, t in enumerate(ordered)}
    wl_counts = np.array([counts[t] for t in ordered], dtype=np.float64)

    model = init_struct_model(
        cfg, wl_vocab, wl_counts, [fn.function_id for fn in train.functions]
    )
    if cfg.epochs == 0:
        return model
    encoded = [_encode_graph(wl_vocab, tokens) for tokens in token_lists]
    noise = NoiseTable(wl_counts)
    rng = np.random.default_rng(cfg.seed)
    positions = sum(len(e) for e in encoded)
    total_updates = cfg.epochs * positions
    step = 0
    vectors = [model.graph_vectors[fn.function_id] for fn in train.functions]

    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        for enc, gvec in zip(encoded, vectors):
            for t in enc:
                hidden = gvec.astype(np.float64)
                alpha = linear_lr(step, total_updates, cfg.lr_start, cfg.lr_end)
                idx = np.empty(cfg.negatives + 1, dtype=np.int64)
                idx[0] = t
                idx[1:] = noise.sample(rng, cfg.negatives, int(t))
                rows = model.out_subgraphs[idx].astype(np.float64)
                loss, grad_rows, grad_hidden = step_gradients(hidden, rows)
                epoch_loss += loss
                np.add.at(model.out_subgraphs, idx, (-alpha * grad_rows).astype(_F32))
                gvec -= (alpha * grad_hidden).astype(_F32)
                step += 1
        model.loss_history.append(epoch_loss / positions)

    if not np.isfinite(model.out_subgraphs).all():
        raise NumericError("structure model output table contains NaN/Inf")
    for fid, vec in model.graph_vectors.items():
        if not np.isfinite(vec).all():
            raise NumericError(f"graph vector for {fid!r} contains NaN/Inf")
    return model


def infer_struct_vector(model: StructModel, fn) -> StructInference:
    """Fit a fresh graph vector with frozen subgraph table.

    Tokens never seen in training are dropped; when nothing remains the
    seeded initialization comes back flagged.
    """
    cfg = model.config
    rng = np.random.default_rng(seed_for(fn.function_id, cfg.seed))
    gvec = rng.uniform(-0.5 / cfg.dim, 0.5 / cfg.dim, cfg.dim).astype(_F32)
    enc = _encode_graph(model.wl_vocab, wl_tokens(fn, cfg.iterations))
    if len(enc) == 0:
        return StructInference(vector=gvec, no_known_tokens=True)
    if cfg.infer_epochs == 0:
        return StructInference(vector=gvec)
    noise = NoiseTable(model.wl_counts)
    total_updates = cfg.infer_epochs * len(enc)
    step = 0
    for _ in range(cfg.infer_epochs):
        for t in enc:
            hidden = gvec.astype(np.float64)
            alpha = linear_lr(step, total_updates, cfg.lr_start, cfg.lr_end)
            idx = np.empty(cfg.negatives + 1, dtype=np.int64)
            idx[0] = t
            idx[1:] = noise.sample(rng, cfg.negatives, int(t))
            rows = model.out_subgraphs[idx].astype(np.float64)
            _, _, grad_hidden = step_gradients(hidden, rows)
            gvec -= (alpha * grad_hidden).astype(_F32)
            step += 1
    return StructInference(vector=gvec)


def save_struct_model(model: StructModel, path: str) -> None:
    ordered = sorted(model.wl_vocab.items(), key=lambda kv: kv[1])
    function_ids = list(model.graph_vectors.keys())
    graph_matrix = (
        np.stack([model.graph_vectors[fid] for fid in function_ids])
        if function_ids
        else np.zeros((0, model.config.dim), dtype=_F32)
    )
    header = {
        "kind": "struct_model",
        "version": 1,
        "config": model.config.to_json(),
        "wl_vocab": [
            [f"{t.key:016x}", t.depth, int(model.wl_counts[i])] for t, i in ordered
        ],
        "function_ids": function_ids,
        "shapes": [list(model.out_subgraphs.shape), list(graph_matrix.shape)],
    }
    write_blob_file(path, header, [model.out_subgraphs, graph_matrix])


def load_struct_model(path: str) -> StructModel:
    with open(path, "rb") as fh:
        header = read_header(fh, path)
        if header.get("kind") != "struct_model":
            raise DataError(f"{path}: not a structure model file")
        cfg = WlConfig(**header["config"])
        wl_vocab: dict[WlToken, int] = {}
        counts = []
        for i, (key_hex, depth, count) in enumerate(header["wl_vocab"]):
            wl_vocab[WlToken(int(key_hex, 16), int(depth))] = i
            counts.append(count)
        shapes = header["shapes"]
        out = read_blob(fh, shapes[0], path)
        graph_matrix = read_blob(fh, shapes[1], path)
    graph_vectors = {fid: graph_matrix[i] for i, fid in enumerate(header["function_ids"])}
    return StructModel(
        config=cfg,
        wl_vocab=wl_vocab,
        wl_counts=np.array(counts, dtype=np.float64),
        out_subgraphs=out,
        graph_vectors=graph_vectors,
    )
