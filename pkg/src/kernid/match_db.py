"""Vector fusion, the labeled embedding database, nearest-neighbor matching
and precision/recall/F1 evaluation.

A function's database vector is the per-half L2-normalized concatenation of
its text and structure vectors; single-component modes keep one normalized
half and power the ablation study.  Matching is an exact cosine argmax over
the database (no approximate index), ties broken by insertion order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from kernid.blobio import dumps_header, read_header, read_blob
from kernid.embed_struct import StructModel, infer_struct_vector
from kernid.embed_text import TextModel, infer_text_vector
from kernid.errors import DataError

ZERO_NORM_EPS = 1e-12
_F32 = np.float32


class DbMode(Enum):
    FUSED = "fused"
    TEXT_ONLY = "text_only"
    STRUCT_ONLY = "struct_only"


@dataclass
class FusedVector:
    """Database/query vector; halves are unit-norm unless degenerate (zero)."""

    values: np.ndarray
    degenerate: bool = False


def _unit(vec: np.ndarray) -> tuple[np.ndarray, bool]:
    vec = np.asarray(vec, dtype=_F32)
    norm = float(np.linalg.norm(vec.astype(np.float64)))
    if norm < ZERO_NORM_EPS:
        return np.zeros_like(vec), True
    return (vec.astype(np.float64) / norm).astype(_F32), False


def fuse(text_vec: np.ndarray, struct_vec: np.ndarray) -> FusedVector:
    """Concatenate the L2-normalized text and structure vectors."""
    if len(text_vec) != len(struct_vec):
        raise DataError(
            f"fuse: width mismatch, text {len(text_vec)} vs structure {len(struct_vec)}"
        )
    t, t_zero = _unit(text_vec)
    s, s_zero = _unit(struct_vec)
    return FusedVector(values=np.concatenate([t, s]), degenerate=t_zero or s_zero)


def single_mode_vector(vec: np.ndarray) -> FusedVector:
    """Normalized single-component vector for TEXT_ONLY / STRUCT_ONLY modes."""
    v, zero = _unit(vec)
    return FusedVector(values=v, degenerate=zero)


@dataclass
class DbEntry:
    function_id: str
    kernel_type: str
    vector: np.ndarray


@dataclass
class EmbeddingDb:
    entries: list[DbEntry]
    mode: DbMode

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def width(self) -> int:
        return int(self.entries[0].vector.shape[0]) if self.entries else 0

    def matrix(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries])


@dataclass
class MatchResult:
    kernel_type: str
    similarity: float
    neighbor_id: str
    degenerate: bool = False

    def to_json(self) -> dict:
        return {
            "kernel_type": self.kernel_type,
            "similarity": self.similarity,
            "neighbor_id": self.neighbor_id,
            "degenerate": self.degenerate,
            "version": 1,
        }


def function_vector(
    fn,
    tm: TextModel | None,
    sm: StructModel | None,
    mode: DbMode,
    use_stored: bool = True,
) -> FusedVector:
    """Embedding of one function under the given mode.

    Functions the models were trained on reuse their stored vectors (they
    are the database's own coordinates); anything else is inferred fresh.
    """
    text_vec = None
    struct_vec = None
    if mode in (DbMode.FUSED, DbMode.TEXT_ONLY):
        if tm is None:
            raise DataError(f"mode {mode.value} requires a text model")
        if use_stored and fn.function_id in tm.doc_vectors:
            text_vec = tm.doc_vectors[fn.function_id]
        else:
            text_vec = infer_text_vector(tm, fn)
    if mode in (DbMode.FUSED, DbMode.STRUCT_ONLY):
        if sm is None:
            raise DataError(f"mode {mode.value} requires a structure model")
        if use_stored and fn.function_id in sm.graph_vectors:
            struct_vec = sm.graph_vectors[fn.function_id]
        else:
            struct_vec = infer_struct_vector(sm, fn).vector
    if mode is DbMode.FUSED:
        return fuse(text_vec, struct_vec)
    return single_mode_vector(text_vec if mode is DbMode.TEXT_ONLY else struct_vec)


def build_db(
    train, tm: TextModel | None, sm: StructModel | None, mode: DbMode = DbMode.FUSED
) -> EmbeddingDb:
    """One entry per training function from the models' stored vectors."""
    entries: list[DbEntry] = []
    for fn in train.functions:
        if fn.label is None:
            raise DataError(
                f"function {fn.function_id!r} is unlabeled; database entries need labels"
            )
        if mode in (DbMode.FUSED, DbMode.TEXT_ONLY):
            if tm is None or fn.function_id not in tm.doc_vectors:
                raise DataError(
                    f"no stored text vector for {fn.function_id!r}; "
                    "the database corpus must match the trained model"
                )
        if mode in (DbMode.FUSED, DbMode.STRUCT_ONLY):
            if sm is None or fn.function_id not in sm.graph_vectors:
                raise DataError(
                    f"no stored structure vector for {fn.function_id!r}; "
                    "the database corpus must match the trained model"
                )
        vec = function_vector(fn, tm, sm, mode, use_stored=True)
        entries.append(DbEntry(fn.function_id, fn.label, vec.values))
    return EmbeddingDb(entries=entries, mode=mode)


def match(db: EmbeddingDb, query: FusedVector | np.ndarray) -> MatchResult:
    """Label of the argmax-cosine database entry; exact linear scan."""
    if not db.entries:
        raise DataError("cannot match against an empty database")
    q = query.values if isinstance(query, FusedVector) else np.asarray(query)
    if q.shape[0] != db.width:
        raise DataError(f"query width {q.shape[0]} does not match database width {db.width}")
    q64 = q.astype(np.float64)
    qnorm = np.linalg.norm(q64)
    if qnorm < ZERO_NORM_EPS:
        first = db.entries[0]
        return MatchResult(first.kernel_type, 0.0, first.function_id, degenerate=True)
    m = db.matrix().astype(np.float64)
    norms = np.linalg.norm(m, axis=1)
    norms[norms < ZERO_NORM_EPS] = 1.0  # degenerate entries score 0
    sims = (m @ q64) / (norms * qnorm)
    best = int(np.argmax(sims))  # first maximum wins ties
    entry = db.entries[best]
    return MatchResult(entry.kernel_type, float(sims[best]), entry.function_id)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    true_positives: int = 0

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "true_positives": self.true_positives,
        }


@dataclass
class EvalReport:
    """Per-class and aggregate precision/recall/F1 of database matching."""

    per_class: dict[str, ClassMetrics]
    weighted: tuple[float, float, float]
    macro: tuple[float, float, float]
    test_functions: int
    correct: int
    mode: DbMode = DbMode.FUSED
    split_checksum: str = ""

    @property
    def weighted_f1(self) -> float:
        return self.weighted[2]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "mode": self.mode.value,
            "split_checksum": self.split_checksum,
            "per_class": {k: m.to_json() for k, m in sorted(self.per_class.items())},
            "weighted": {
                "precision": self.weighted[0],
                "recall": self.weighted[1],
                "f1": self.weighted[2],
            },
            "macro": {
                "precision": self.macro[0],
                "recall": self.macro[1],
                "f1": self.macro[2],
            },
            "test_functions": self.test_functions,
            "correct": self.correct,
            "accuracy": self.correct / self.test_functions if self.test_functions else 0.0,
        }


def compute_metrics(pairs: list[tuple[str, str]]) -> EvalReport:
    """P/R/F1 from (true label, predicted label) pairs.

    Classes are the union of true and predicted labels; the weighted
    aggregate weights by true-label support, macro is the plain mean.
    """
    if not pairs:
        raise DataError("cannot evaluate an empty test set")
    classes = sorted({t for t, _ in pairs} | {p for _, p in pairs})
    per_class: dict[str, ClassMetrics] = {}
    for cls in classes:
        tp = sum(1 for t, p in pairs if t == cls and p == cls)
        fp = sum(1 for t, p in pairs if t != cls and p == cls)
        fn = sum(1 for t, p in pairs if t == cls and p != cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[cls] = ClassMetrics(precision, recall, f1, support=tp + fn, true_positives=tp)

    total_support = sum(m.support for m in per_class.values())
    weighted = tuple(
        sum(getattr(m, name) * m.support for m in per_class.values()) / total_support
        for name in ("precision", "recall", "f1")
    )
    macro = tuple(
        sum(getattr(m, name) for m in per_class.values()) / len(per_class)
        for name in ("precision", "recall", "f1")
    )
    correct = sum(1 for t, p in pairs if t == p)
    return EvalReport(
        per_class=per_class,
        weighted=weighted,
        macro=macro,
        test_functions=len(pairs),
        correct=correct,
    )


def evaluate(
    db: EmbeddingDb,
    test,
    tm: TextModel | None,
    sm: StructModel | None,
    mode: DbMode | None = None,
) -> EvalReport:
    """Match every labeled test function against the database and score it."""
    mode = db.mode if mode is None else mode
    if mode is not db.mode:
        raise DataError(f"evaluation mode {mode.value} does not match database mode {db.mode.value}")
    pairs: list[tuple[str, str]] = []
    for fn in test.functions:
        if fn.label is None:
            raise DataError(f"test function {fn.function_id!r} lacks a ground-truth label")
        query = function_vector(fn, tm, sm, mode, use_stored=True)
        result = match(db, query)
        pairs.append((fn.label, result.kernel_type))
    report = compute_metrics(pairs)
    report.mode = mode
    return report


def save_db(db: EmbeddingDb, path: str) -> None:
    matrix = db.matrix() if db.entries else np.zeros((0, 0), dtype=_F32)
    header = {
        "kind": "embedding_db",
        "version": 1,
        "mode": db.mode.value,
        "width": db.width,
        "count": len(db.entries),
    }
    with open(path, "wb") as fh:
        fh.write(dumps_header(header))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
        for entry in db.entries:
            line = json.dumps(
                {"function_id": entry.function_id, "kernel_type": entry.kernel_type},
                sort_keys=True,
            )
            fh.write((line + "\n").encode("utf-8"))


def load_db(path: str) -> EmbeddingDb:
    with open(path, "rb") as fh:
        header = read_header(fh, path)
        if header.get("kind") != "embedding_db":
            raise DataError(f"{path}: not an embedding database file")
        mode = DbMode(header["mode"])
        count, width = int(header["count"]), int(header["width"])
        matrix = read_blob(fh, (count, width), path)
        entries: list[DbEntry] = []
        for i in range(count):
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: entry table truncated at row {i}")
            obj = json.loads(line.decode("utf-8"))
            entries.append(DbEntry(obj["function_id"], obj["kernel_type"], matrix[i]))
    return EmbeddingDb(entries=entries, mode=mode)
