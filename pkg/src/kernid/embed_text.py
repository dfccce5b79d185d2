"""Text embedding of assembly functions.

Each instruction is represented as the concatenation of its opcode
embedding and the mean of its operand embeddings.  A per-function document
vector is trained jointly with the token tables: for every instruction
position, the document vector plus the surrounding context instructions
predict the center instruction's tokens via negative sampling, doc2vec
style.  Inference re-fits a fresh document vector against frozen token
tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kernid.asm_lang import (
    NO_OPERAND_KEY,
    ParsedInstruction,
    Vocabulary,
    parse_instruction,
)
from kernid.blobio import read_header, read_blob, write_blob_file
from kernid.errors import DataError, NumericError
from kernid.hashutil import seed_for
from kernid.sgns import NoiseTable, linear_lr, step_gradients

_F32 = np.float32


@dataclass
class TextModelConfig:
    dim: int = 100
    context: int = 5
    epochs: int = 10
    lr_start: float = 0.025
    lr_end: float = 0.0001
    negatives: int = 5
    seed: int = 1
    infer_epochs: int = 40

    def __post_init__(self) -> None:
        if self.dim < 2 or self.dim % 2 != 0:
            raise DataError("embedding dim must be an even integer >= 2")
        if self.context < 1:
            raise DataError("context window must be >= 1")
        if self.negatives < 1:
            raise DataError("need at least one negative sample")
        if self.epochs < 0 or self.infer_epochs < 0:
            raise DataError("epoch counts cannot be negative")

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "context": self.context,
            "epochs": self.epochs,
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "negatives": self.negatives,
            "seed": self.seed,
            "infer_epochs": self.infer_epochs,
        }


@dataclass
class _EncodedFunction:
    """Vocabulary-encoded instruction stream of one function."""

    ops: np.ndarray  # (n,) opcode indices
    args: list[np.ndarray]  # per instruction: operand indices (NO_OPERAND if none)
    arg_factors: list[np.ndarray]  # per instruction: 1/m repeated m times
    targets: list[np.ndarray]  # per instruction: opcode + real operand indices


@dataclass
class TextModel:
    vocab: Vocabulary
    config: TextModelConfig
    in_opcode: np.ndarray  # (V, dim/2) float32
    in_operand: np.ndarray  # (V, dim/2) float32
    out_tokens: np.ndarray  # (V, dim) float32
    doc_vectors: dict[str, np.ndarray]  # function_id -> (dim,) float32
    loss_history: list[float] = field(default_factory=list)

    def token_matrix_checksum(self) -> int:
        from kernid.hashutil import fnv1a64

        return fnv1a64(
            self.in_opcode.tobytes()
            + self.in_operand.tobytes()
            + self.out_tokens.tobytes()
        )


def encode_instruction(vocab: Vocabulary, ins: ParsedInstruction) -> tuple[int, np.ndarray, np.ndarray]:
    """Map one parsed instruction onto (opcode idx, input operand idxs, target idxs)."""
    op = vocab.lookup(ins.opcode.key)
    if ins.operands:
        arg = np.array([vocab.lookup(t.key) for t in ins.operands], dtype=np.int64)
        targets = np.concatenate(([op], arg))
    else:
        arg = np.array([vocab.no_operand_index], dtype=np.int64)
        targets = np.array([op], dtype=np.int64)
    return op, arg, targets


def _encode_function(vocab: Vocabulary, fn) -> _EncodedFunction:
    ops: list[int] = []
    args: list[np.ndarray] = []
    factors: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    for line in fn.instruction_lines():
        op, arg, tgt = encode_instruction(vocab, parse_instruction(line))
        ops.append(op)
        args.append(arg)
        factors.append(np.full(len(arg), 1.0 / len(arg)))
        targets.append(tgt)
    return _EncodedFunction(
        ops=np.array(ops, dtype=np.int64), args=args, arg_factors=factors, targets=targets
    )


def _noise_table(vocab: Vocabulary) -> NoiseTable:
    counts = np.zeros(len(vocab), dtype=np.float64)
    for key, idx in vocab.entries.items():
        counts[idx] = vocab.counts.get(key, 0)
    return NoiseTable(counts)


def instruction_vector(model: TextModel, ins: ParsedInstruction) -> np.ndarray:
    """Opcode embedding concatenated with the mean of the operand embeddings."""
    op, arg, _ = encode_instruction(model.vocab, ins)
    first = model.in_opcode[op]
    second = model.in_operand[arg].mean(axis=0, dtype=np.float64).astype(_F32)
    return np.concatenate([first, second])


def init_text_model(vocab: Vocabulary, cfg: TextModelConfig, function_ids: list[str]) -> TextModel:
    """Seeded initialization: uniform(-0.5/dim, 0.5/dim) inputs, zero outputs."""
    rng = np.random.default_rng(cfg.seed)
    v, dim = len(vocab), cfg.dim
    bound = 0.5 / dim
    half = dim // 2
    in_opcode = rng.uniform(-bound, bound, (v, half)).astype(_F32)
    in_operand = rng.uniform(-bound, bound, (v, half)).astype(_F32)
    out_tokens = np.zeros((v, dim), dtype=_F32)
    doc_vectors = {
        fid: rng.uniform(-bound, bound, dim).astype(_F32) for fid in function_ids
    }
    return TextModel(
        vocab=vocab,
        config=cfg,
        in_opcode=in_opcode,
        in_operand=in_operand,
        out_tokens=out_tokens,
        doc_vectors=doc_vectors,
    )


def _hidden_and_context(model, enc, i, doc64):
    """Mean of doc vector and the 2C surrounding instruction vectors."""
    cfg = model.config
    n = len(enc.ops)
    lo, hi = max(0, i - cfg.context), min(n, i + cfg.context + 1)
    ctx = [j for j in range(lo, hi) if j != i]
    if not ctx:
        return doc64.copy(), ctx, None, None, 1.0
    op_sum = model.in_opcode[enc.ops[ctx]].sum(axis=0, dtype=np.float64)
    flat = np.concatenate([enc.args[j] for j in ctx])
    factors = np.concatenate([enc.arg_factors[j] for j in ctx])
    arg_sum = factors @ model.in_operand[flat]
    scale = 1.0 / (1 + len(ctx))
    hidden = (doc64 + np.concatenate([op_sum, arg_sum])) * scale
    return hidden, ctx, flat, factors, scale


def _center_step(model, noise, rng, enc, i, hidden, alpha, negatives):
    """Negative-sampling updates of out_tokens for one center instruction.

    Returns (loss, error signal w.r.t. the hidden vector, already scaled by
    -alpha).  The caller backpropagates that signal into the doc vector and,
    during training, the context token tables.
    """
    neu1e = np.zeros(model.config.dim)
    loss = 0.0
    idx_parts = []
    delta_parts = []
    for t in enc.targets[i]:
        idx = np.empty(negatives + 1, dtype=np.int64)
        idx[0] = t
        idx[1:] = noise.sample(rng, negatives, int(t))
        rows = model.out_tokens[idx].astype(np.float64)
        step_loss, grad_rows, grad_hidden = step_gradients(hidden, rows)
        loss += step_loss
        neu1e -= alpha * grad_hidden
        idx_parts.append(idx)
        delta_parts.append(-alpha * grad_rows)
    return loss, neu1e, np.concatenate(idx_parts), np.concatenate(delta_parts)


def train_text(train, vocab: Vocabulary, cfg: TextModelConfig) -> TextModel:
    """Train token tables and per-function doc vectors over the corpus."""
    if not train.functions:
        raise DataError("cannot train a text model on an empty corpus")
    encoded = [_encode_function(vocab, fn) for fn in train.functions]
    model = init_text_model(vocab, cfg, [fn.function_id for fn in train.functions])
    if cfg.epochs == 0:
        return model
    noise = _noise_table(vocab)
    rng = np.random.default_rng(cfg.seed)
    half = cfg.dim // 2

    positions = sum(len(e.ops) for e in encoded)
    if positions == 0:
        raise DataError("training corpus contains no instructions")
    total_updates = cfg.epochs * positions
    step = 0
    docs = [model.doc_vectors[fn.function_id] for fn in train.functions]

    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        for enc, doc in zip(encoded, docs):
            doc64 = doc.astype(np.float64)
            for i in range(len(enc.ops)):
                hidden, ctx, flat, factors, _ = _hidden_and_context(model, enc, i, doc64)
                alpha = linear_lr(step, total_updates, cfg.lr_start, cfg.lr_end)
                loss, neu1e, idx, delta = _center_step(
                    model, noise, rng, enc, i, hidden, alpha, cfg.negatives
                )
                epoch_loss += loss
                np.add.at(model.out_tokens, idx, delta.astype(_F32))
                # doc2vec convention: when the forward pass averages, the raw
                # error signal flows to the doc vector and every context
                # component without rescaling.
                doc += neu1e.astype(_F32)
                doc64 = doc.astype(np.float64)
                if ctx:
                    np.add.at(model.in_opcode, enc.ops[ctx], neu1e[:half].astype(_F32))
                    arg_delta = factors[:, None] * neu1e[None, half:]
                    np.add.at(model.in_operand, flat, arg_delta.astype(_F32))
                step += 1
        model.loss_history.append(epoch_loss / positions)

    for name, table in (
        ("in_opcode", model.in_opcode),
        ("in_operand", model.in_operand),
        ("out_tokens", model.out_tokens),
    ):
        if not np.isfinite(table).all():
            raise NumericError(f"text model table {name} contains NaN/Inf")
    for fid, vec in model.doc_vectors.items():
        if not np.isfinite(vec).all():
            raise NumericError(f"doc vector for {fid!r} contains NaN/Inf")
    return model


def infer_text_vector(model: TextModel, fn) -> np.ndarray:
    """Fit a fresh doc vector for an unseen function with frozen token tables."""
    cfg = model.config
    enc = _encode_function(model.vocab, fn)
    n = len(enc.ops)
    if n == 0:
        raise DataError(f"function {fn.function_id!r} has no instructions to embed")
    rng = np.random.default_rng(seed_for(fn.function_id, cfg.seed))
    doc = rng.uniform(-0.5 / cfg.dim, 0.5 / cfg.dim, cfg.dim).astype(_F32)
    if cfg.infer_epochs == 0:
        return doc
    noise = _noise_table(model.vocab)
    total_updates = cfg.infer_epochs * n
    step = 0
    for _ in range(cfg.infer_epochs):
        doc64 = doc.astype(np.float64)
        for i in range(n):
            hidden, _, _, _, _ = _hidden_and_context(model, enc, i, doc64)
            alpha = linear_lr(step, total_updates, cfg.lr_start, cfg.lr_end)
            _, neu1e, _, _ = _center_step(
                model, noise, rng, enc, i, hidden, alpha, cfg.negatives
            )
            doc += neu1e.astype(_F32)
            doc64 = doc.astype(np.float64)
            step += 1
    return doc


def save_text_model(model: TextModel, path: str) -> None:
    vocab = model.vocab
    entries = sorted(vocab.entries.items(), key=lambda kv: kv[1])
    function_ids = list(model.doc_vectors.keys())
    doc_matrix = (
        np.stack([model.doc_vectors[fid] for fid in function_ids])
        if function_ids
        else np.zeros((0, model.config.dim), dtype=_F32)
    )
    header = {
        "kind": "text_model",
        "version": 1,
        "config": model.config.to_json(),
        "vocab": {
            "entries": [k for k, _ in entries],
            "counts": vocab.counts,
            "min_count": vocab.min_count,
        },
        "vocab_hash": vocab.content_hash(),
        "function_ids": function_ids,
        "shapes": [
            list(model.in_opcode.shape),
            list(model.in_operand.shape),
            list(model.out_tokens.shape),
            list(doc_matrix.shape),
        ],
    }
    write_blob_file(
        path, header, [model.in_opcode, model.in_operand, model.out_tokens, doc_matrix]
    )


def load_text_model(path: str) -> TextModel:
    with open(path, "rb") as fh:
        header = read_header(fh, path)
        if header.get("kind") != "text_model":
            raise DataError(f"{path}: not a text model file")
        cfg = TextModelConfig(**header["config"])
        vocab_obj = header["vocab"]
        entries = {k: i for i, k in enumerate(vocab_obj["entries"])}
        vocab = Vocabulary(
            entries=entries,
            counts={k: int(v) for k, v in vocab_obj["counts"].items()},
            min_count=int(vocab_obj["min_count"]),
        )
        if vocab.content_hash() != header["vocab_hash"]:
            raise DataError(f"{path}: vocabulary hash mismatch")
        shapes = header["shapes"]
        in_opcode = read_blob(fh, shapes[0], path)
        in_operand = read_blob(fh, shapes[1], path)
        out_tokens = read_blob(fh, shapes[2], path)
        doc_matrix = read_blob(fh, shapes[3], path)
    doc_vectors = {
        fid: doc_matrix[i] for i, fid in enumerate(header["function_ids"])
    }
    return TextModel(
        vocab=vocab,
        config=cfg,
        in_opcode=in_opcode,
        in_operand=in_operand,
        out_tokens=out_tokens,
        doc_vectors=doc_vectors,
    )
