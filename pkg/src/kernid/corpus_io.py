"""Corpus of disassembled functions: JSONL schema, validation, splitting,
and a synthetic generator for desk-scale experiments.

File format is JSONL with a header line declaring the closed kernel-type
set::

    {"kernel_types": ["conv2d", ...], "version": 1}
    {"function_id": "f0", "symbol": "...", "platform": "x86", "opt_level": 0,
     "label": "conv2d", "blocks": [{"block_id": 0, "instructions": ["..."]}],
     "edges": [[0, 1]]}
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

import numpy as np

from kernid.errors import DataError

CORPUS_VERSION = 1

# Kernel-type names handed out to generated classes, in order.
SYNTH_CLASS_NAMES = [
    "conv2d",
    "dense",
    "max_pool2d",
    "relu",
    "softmax",
    "add",
    "bias_add",
    "flatten",
]

_GP_REGISTERS = ["rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r13", "r14", "r15"]
_XMM_REGISTERS = ["xmm0", "xmm1", "xmm2", "xmm3", "xmm4", "xmm5", "xmm6", "xmm7"]
_SMALL_IMMEDIATES = [1, 2, 4, 8, 16, 32]


@dataclass
class BasicBlock:
    """One basic block: an id unique within its function plus instruction text."""

    block_id: int
    instructions: list[str]
    stub: bool = False  # entry/exit stubs may legally be empty


@dataclass
class AsmFunction:
    function_id: str
    symbol: str
    platform: str
    opt_level: int
    label: str | None
    blocks: list[BasicBlock]
    edges: list[tuple[int, int]]

    def block_ids(self) -> set[int]:
        return {b.block_id for b in self.blocks}

    def instruction_lines(self) -> list[str]:
        """All instruction lines in block-id order (the text stream)."""
        out: list[str] = []
        for block in sorted(self.blocks, key=lambda b: b.block_id):
            out.extend(block.instructions)
        return out


@dataclass
class Corpus:
    functions: list[AsmFunction]
    kernel_types: list[str]
    split_seed: int = 0
    train_fraction: float = 0.8

    def __len__(self) -> int:
        return len(self.functions)

    def labeled(self) -> list[AsmFunction]:
        return [f for f in self.functions if f.label is not None]


@dataclass
class SynthSpec:
    """Parameters for the synthetic corpus generator."""

    classes: int
    per_class: int
    platforms: list[str] = field(default_factory=lambda: ["x86"])
    noise_rate: float = 0.0
    seed: int = 0


def _validate_function(fn: AsmFunction, where: str) -> None:
    if not fn.function_id:
        raise DataError(f"{where}: empty function_id")
    if not fn.blocks:
        raise DataError(f"{where}: function {fn.function_id!r} has no blocks")
    if not 0 <= fn.opt_level <= 4:
        raise DataError(
            f"{where}: function {fn.function_id!r} opt_level {fn.opt_level} outside [0, 4]"
        )
    seen_ids: set[int] = set()
    for block in fn.blocks:
        if block.block_id < 0:
            raise DataError(
                f"{where}: function {fn.function_id!r} has negative block_id {block.block_id}"
            )
        if block.block_id in seen_ids:
            raise DataError(
                f"{where}: function {fn.function_id!r} duplicates block_id {block.block_id}"
            )
        seen_ids.add(block.block_id)
        if not block.instructions and not block.stub:
            raise DataError(
                f"{where}: function {fn.function_id!r} block {block.block_id} is empty "
                "and not flagged as a stub"
            )
        for ins in block.instructions:
            if not isinstance(ins, str) or not ins.strip():
                raise DataError(
                    f"{where}: function {fn.function_id!r} block {block.block_id} "
                    "contains an empty instruction"
                )
    for src, dst in fn.edges:
        if src not in seen_ids or dst not in seen_ids:
            raise DataError(
                f"{where}: function {fn.function_id!r} has dangling edge ({src}, {dst})"
            )


def validate_corpus(corpus: Corpus) -> None:
    """Check all corpus invariants; raises DataError on the first violation."""
    known = set(corpus.kernel_types)
    seen: set[str] = set()
    for i, fn in enumerate(corpus.functions):
        where = f"function #{i}"
        _validate_function(fn, where)
        if fn.function_id in seen:
            raise DataError(f"duplicate function_id {fn.function_id!r}")
        seen.add(fn.function_id)
        if fn.label is not None and fn.label not in known:
            raise DataError(
                f"function {fn.function_id!r} has label {fn.label!r} "
                "not declared in the corpus header"
            )


def _function_from_json(obj: dict, where: str) -> AsmFunction:
    try:
        blocks = [
            BasicBlock(
                block_id=int(b["block_id"]),
                instructions=list(b["instructions"]),
                stub=bool(b.get("stub", False)),
            )
            for b in obj["blocks"]
        ]
        edges = [(int(src), int(dst)) for src, dst in obj["edges"]]
        return AsmFunction(
            function_id=str(obj["function_id"]),
            symbol=str(obj["symbol"]),
            platform=str(obj["platform"]),
            opt_level=int(obj["opt_level"]),
            label=None if obj.get("label") is None else str(obj["label"]),
            blocks=blocks,
            edges=edges,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: malformed function object: {exc}") from exc


def _function_to_json(fn: AsmFunction) -> dict:
    blocks = []
    for b in fn.blocks:
        entry: dict = {"block_id": b.block_id, "instructions": b.instructions}
        if b.stub:
            entry["stub"] = True
        blocks.append(entry)
    return {
        "function_id": fn.function_id,
        "symbol": fn.symbol,
        "platform": fn.platform,
        "opt_level": fn.opt_level,
        "label": fn.label,
        "blocks": blocks,
        "edges": [list(e) for e in fn.edges],
    }


def parse_function_line(line: str, where: str = "<line>") -> AsmFunction:
    """Parse a single body line of the JSONL schema (used by `match`)."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{where}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object")
    fn = _function_from_json(obj, where)
    _validate_function(fn, where)
    return fn


def load_corpus(path: str) -> Corpus:
    """Load and validate a JSONL corpus; errors report 1-based line numbers."""
    functions: list[AsmFunction] = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open corpus {path}: {exc}") from exc
    with fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise DataError(f"{path}:1: missing corpus header line")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:1: malformed header: {exc}") from exc
        if not isinstance(header, dict) or "kernel_types" not in header:
            raise DataError(f"{path}:1: header must declare 'kernel_types'")
        kernel_types = [str(k) for k in header["kernel_types"]]
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: malformed line: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{where}: expected a JSON object")
            functions.append(_function_from_json(obj, where))
    corpus = Corpus(functions=functions, kernel_types=kernel_types)
    validate_corpus(corpus)
    return corpus


def save_corpus(corpus: Corpus, path: str) -> None:
    """Write the JSONL corpus with LF line endings; inverse of load_corpus."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = {"kernel_types": corpus.kernel_types, "version": CORPUS_VERSION}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for fn in corpus.functions:
            fh.write(json.dumps(_function_to_json(fn), sort_keys=True) + "\n")


def split_checksum(train: Corpus, test: Corpus) -> str:
    """Stable fingerprint of a train/test partition (order-insensitive)."""
    from kernid.hashutil import fnv1a64

    desc = "train:" + ",".join(sorted(f.function_id for f in train.functions))
    desc += "|test:" + ",".join(sorted(f.function_id for f in test.functions))
    return f"{fnv1a64(desc):016x}"


def split_corpus(corpus: Corpus, stratified: bool = True) -> tuple[Corpus, Corpus]:
    """Deterministic train/test split.

    |train| is exactly round(train_fraction * N).  With stratification every
    label owning >= 2 members lands on both sides when the size budget allows
    it; singleton labels go to the training side so the database covers them.
    """
    n = len(corpus.functions)
    if n == 0:
        raise DataError("cannot split an empty corpus")
    if stratified and not corpus.labeled():
        raise DataError("stratified split requested but no function is labeled")

    target_train = int(np.floor(corpus.train_fraction * n + 0.5))
    rng = np.random.default_rng(corpus.split_seed)

    if stratified:
        groups: dict[str, list[int]] = {}
        for idx, fn in enumerate(corpus.functions):
            groups.setdefault("\x00unlabeled" if fn.label is None else fn.label, []).append(idx)
        keys = sorted(groups)
    else:
        groups = {"\x00all": list(range(n))}
        keys = ["\x00all"]

    # Largest-remainder allocation of the train budget across groups.
    ideals = {k: corpus.train_fraction * len(groups[k]) for k in keys}
    counts = {k: int(np.floor(ideals[k])) for k in keys}
    leftover = target_train - sum(counts.values())  # never negative for floors
    by_remainder = sorted(keys, key=lambda k: (-(ideals[k] - counts[k]), k))
    for k in by_remainder:
        if leftover == 0:
            break
        if counts[k] < len(groups[k]):
            counts[k] += 1
            leftover -= 1

    if stratified:
        # Both-sides guarantee for labels with >= 2 members; singletons train.
        def clamp(k: str) -> tuple[int, int]:
            size = len(groups[k])
            if k == "\x00unlabeled":
                return 0, size
            if size >= 2:
                return 1, size - 1
            return 1, 1

        for k in keys:
            lo, hi = clamp(k)
            counts[k] = min(max(counts[k], lo), hi)
        drift = sum(counts.values()) - target_train
        # Re-balance while respecting the clamps; give up group by group if
        # the budget is infeasible (the "when possible" escape hatch).
        for k in by_remainder:
            if drift == 0:
                break
            lo, hi = clamp(k)
            if drift > 0 and counts[k] > lo:
                take = min(drift, counts[k] - lo)
                counts[k] -= take
                drift -= take
            elif drift < 0 and counts[k] < hi:
                give = min(-drift, hi - counts[k])
                counts[k] += give
                drift += give
        if drift != 0:
            for k in by_remainder:
                if drift == 0:
                    break
                if drift > 0:
                    move = min(drift, counts[k])
                    counts[k] -= move
                    drift -= move
                else:
                    move = min(-drift, len(groups[k]) - counts[k])
                    counts[k] += move
                    drift += move

    train_idx: list[int] = []
    test_idx: list[int] = []
    for k in keys:
        members = np.array(groups[k], dtype=np.int64)
        rng.shuffle(members)
        train_idx.extend(members[: counts[k]].tolist())
        test_idx.extend(members[counts[k] :].tolist())
    train_idx.sort()
    test_idx.sort()

    def subset(indices: list[int]) -> Corpus:
        return replace(corpus, functions=[corpus.functions[i] for i in indices])

    return subset(train_idx), subset(test_idx)


def _loop_nest_template(depth: int, body: list[str]) -> tuple[list[BasicBlock], list[tuple[int, int]]]:
    """Template CFG: a `depth`-deep counted loop nest around `body`.

    Block ids: 0 entry; head_i = 2i-1, latch_i = 2i for i in 1..depth;
    body = 2*depth+1; exit = 2*depth+2.  Edge count is 3*depth+2, so
    distinct depths yield distinct class-level edge counts.
    """
    trip_counts = [64, 32, 16, 8, 4, 2]
    blocks = [BasicBlock(0, ["push rbp", "mov rbp, rsp", "sub rsp, 0x40", "xor r8, r8"])]
    edges: list[tuple[int, int]] = [(0, 1)]
    for i in range(1, depth + 1):
        counter = f"r{7 + min(i, 5)}"
        trip = trip_counts[(i - 1) % len(trip_counts)]
        head = BasicBlock(2 * i - 1, [f"cmp {counter}, {trip}", "jge 0x1f40"])
        latch = BasicBlock(2 * i, [f"add {counter}, 1", "jmp 0x1f40"])
        blocks.extend([head, latch])
        edges.append((2 * i, 2 * i - 1))  # back edge latch_i -> head_i
        if i < depth:
            edges.append((2 * i - 1, 2 * i + 1))  # head_i -> head_{i+1}
            edges.append((2 * i + 1, 2 * i))  # head_{i+1} exits into latch_i
    body_id = 2 * depth + 1
    exit_id = 2 * depth + 2
    blocks.append(BasicBlock(body_id, list(body)))
    blocks.append(BasicBlock(exit_id, ["add rsp, 0x40", "pop rbp", "ret"]))
    edges.append((2 * depth - 1, body_id))  # innermost head -> body
    edges.append((body_id, 2 * depth))  # body -> innermost latch
    edges.append((1, exit_id))  # outermost head exits the function
    blocks.sort(key=lambda b: b.block_id)
    edges.sort()
    return blocks, edges


_CLASS_BODIES = {
    "conv2d": [
        "movss xmm0, [rsi+16]",
        "mulss xmm0, [rdx+0x1f40]",
        "addss xmm1, xmm0",
        "movss [rdi+8], xmm1",
    ],
    "dense": [
        "mov rax, [rsi+32]",
        "imul rax, [rdx+0x2400]",
        "add rbx, rax",
        "mov [rdi+16], rbx",
    ],
    "max_pool2d": [
        "movss xmm0, [rsi+4]",
        "maxss xmm1, xmm0",
        "movss [rdi+4], xmm1",
    ],
    "relu": [
        "movss xmm0, [rsi+8]",
        "xorps xmm1, xmm1",
        "maxss xmm0, xmm1",
        "movss [rdi+8], xmm0",
    ],
    "softmax": [
        "movss xmm0, [rsi+4]",
        "subss xmm0, xmm2",
        "call 0x4012a0",
        "addss xmm3, xmm0",
        "movss [rdi+4], xmm0",
    ],
    "add": [
        "movss xmm0, [rsi+8]",
        "addss xmm0, [rdx+8]",
        "movss [rdi+8], xmm0",
    ],
    "bias_add": [
        "movss xmm0, [rsi+2]",
        "addss xmm0, [rdx+0x1888]",
        "movss [rdi+2], xmm0",
    ],
    "flatten": [
        "mov rax, [rsi+1]",
        "mov [rdi+1], rax",
        "add rsi, 8",
    ],
}

_PAD_VARIANTS = [["nop"], ["nop", "nop"], ["pause"]]

_IMMEDIATE_RE = re.compile(r"0x[0-9a-f]+|\b\d+\b")


def _class_template(class_idx: int) -> tuple[str, list[BasicBlock], list[tuple[int, int]]]:
    if class_idx < len(SYNTH_CLASS_NAMES):
        name = SYNTH_CLASS_NAMES[class_idx]
        body = _CLASS_BODIES[name]
    else:
        name = f"kernel_{class_idx}"
        base = _CLASS_BODIES[SYNTH_CLASS_NAMES[class_idx % len(SYNTH_CLASS_NAMES)]]
        body = base + [f"lea rax, [rip+{0x1000 + class_idx}]"]
    blocks, edges = _loop_nest_template(class_idx + 1, body)
    return name, blocks, edges


def _mutate_instruction(line: str, rng: np.random.Generator) -> str:
    """Register rename or immediate perturbation; keeps the opcode intact."""
    immediates = list(_IMMEDIATE_RE.finditer(line))
    mutate_immediate = immediates and rng.random() < 0.5
    if mutate_immediate:
        pick = immediates[int(rng.integers(len(immediates)))]
        if rng.random() < 0.5:
            new_value = f"0x{int(rng.integers(1000, 65536)):x}"  # blurs to "large"
        else:
            new_value = str(_SMALL_IMMEDIATES[int(rng.integers(len(_SMALL_IMMEDIATES)))])
        return line[: pick.start()] + new_value + line[pick.end() :]

    pool = _XMM_REGISTERS if "xmm" in line else _GP_REGISTERS
    present = [r for r in pool if r in line]
    if not present:
        return line
    old = present[int(rng.integers(len(present)))]
    new = pool[int(rng.integers(len(pool)))]
    return line.replace(old, new, 1)


def gen_synthetic_corpus(spec: SynthSpec) -> Corpus:
    """Emit K classes x M functions with class-distinct templates.

    Each class uses a loop nest of distinct depth, so class-level CFG shapes
    (and edge counts) never collide.  Noise mutates the given fraction of
    instructions per function and occasionally pads the CFG with a filler
    block, leaving the kernel-type signal intact but imperfect.
    """
    if spec.classes < 2:
        raise DataError("synthetic corpus needs at least 2 classes")
    if spec.per_class < 2:
        raise DataError("synthetic corpus needs at least 2 functions per class")
    if not spec.platforms:
        raise DataError("synthetic corpus needs at least one platform tag")

    functions: list[AsmFunction] = []
    labels: list[str] = []
    for k in range(spec.classes):
        name, blocks, edges = _class_template(k)
        labels.append(name)
        for m in range(spec.per_class):
            rng = np.random.default_rng([spec.seed, k, m])
            fn_blocks = [
                BasicBlock(b.block_id, list(b.instructions), b.stub) for b in blocks
            ]
            fn_edges = list(edges)
            if spec.noise_rate > 0:
                for block in fn_blocks:
                    block.instructions = [
                        _mutate_instruction(line, rng)
                        if rng.random() < spec.noise_rate
                        else line
                        for line in block.instructions
                    ]
                n_pads = int(rng.random() < spec.noise_rate) + int(
                    rng.random() < spec.noise_rate / 2
                )
                exit_id = max(b.block_id for b in fn_blocks)
                for p in range(n_pads):
                    pad_id = exit_id + 1 + p
                    variant = _PAD_VARIANTS[int(rng.integers(len(_PAD_VARIANTS)))]
                    fn_blocks.append(BasicBlock(pad_id, list(variant)))
                    fn_edges.append((0, pad_id))
                    fn_edges.append((pad_id, exit_id))
            idx = k * spec.per_class + m
            functions.append(
                AsmFunction(
                    function_id=f"fn_{k:03d}_{m:04d}",
                    symbol=f"{name}_kernel_{m}",
                    platform=spec.platforms[idx % len(spec.platforms)],
                    opt_level=idx % 5,
                    label=name,
                    blocks=fn_blocks,
                    edges=fn_edges,
                )
            )
    corpus = Corpus(functions=functions, kernel_types=sorted(set(labels)), split_seed=spec.seed)
    validate_corpus(corpus)
    return corpus
