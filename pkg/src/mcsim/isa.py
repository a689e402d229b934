"""Micro-operation instruction set for scripted programs.

Programs are sequences of fixed-width instructions stored in simulated RAM
and fetched through address translation, so a page-table change in the
middle of a sequence can derail control flow. Each instruction occupies
four 32-bit words: a tagged opcode word followed by three operand words.
A word decodes as an instruction only if it carries the opcode tag, which
is how the machine tells real code apart from data it accidentally jumped
into.
"""

from __future__ import annotations

from dataclasses import dataclass

WORD = 4
INSTR_WORDS = 4
INSTR_BYTES = INSTR_WORDS * WORD

# High byte marking a word as an encoded opcode.
OPCODE_TAG = 0x5C000000
TAG_MASK = 0xFF000000

# name -> (opcode number, operand count)
OPS: dict[str, tuple[int, int]] = {
    "nop": (0x00, 0),
    "halt": (0x01, 0),
    "read": (0x02, 2),      # read rd, addr
    "fetch": (0x03, 2),     # fetch rd, addr        (instruction-class read)
    "writei": (0x04, 2),    # writei addr, imm
    "writer": (0x05, 2),    # writer addr, rs
    "swap": (0x06, 3),      # swap rd, addr, imm    (atomic exchange)
    "addi": (0x07, 2),      # addi rd, imm
    "branch": (0x08, 1),    # branch addr
    "beqz": (0x09, 2),      # beqz rs, addr
    "bnez": (0x0A, 2),      # bnez rs, addr
    "ipi": (0x0B, 2),       # ipi to_proc, vector
    "setptb": (0x0C, 1),    # setptb table_id
    "setmask": (0x0D, 1),   # setmask 0|1
    "wfi": (0x0E, 0),
    "count": (0x0F, 1),     # count counter_id
    "trap": (0x10, 1),      # trap code             (emits a trace event)
    "rfe": (0x11, 0),       # return from interrupt handler
    "ctxsave": (0x12, 1),   # ctxsave addr          (latched context -> RAM)
    "ctxptb": (0x13, 1),    # ctxptb addr           (page-table base from context block)
    "ctxload": (0x14, 1),   # ctxload addr          (registers from context block)
    "ctxjmp": (0x15, 1),    # ctxjmp addr           (pc + status from context block)
    "bmuset": (0x16, 3),    # bmuset packed, base, length
    "bmuctrl": (0x17, 1),   # bmuctrl proc_mask
    "setcoh": (0x18, 1),    # setcoh 0|1
    "irqdist": (0x19, 1),   # irqdist 0|1
}

_BY_CODE = {code: (name, nargs) for name, (code, nargs) in OPS.items()}


def pack_bmuset(target: int, slot: int, denied_mask: int) -> int:
    """Pack bmuset control fields into one operand word."""
    return (target << 16) | (slot << 8) | (denied_mask & 0xFF)


def unpack_bmuset(packed: int) -> tuple[int, int, int]:
    return (packed >> 16) & 0xFF, (packed >> 8) & 0xFF, packed & 0xFF


@dataclass(frozen=True)
class Instr:
    op: str
    a: int = 0
    b: int = 0
    c: int = 0

    def encode(self) -> tuple[int, int, int, int]:
        code, _ = OPS[self.op]
        return (OPCODE_TAG | code,
                self.a & 0xFFFFFFFF, self.b & 0xFFFFFFFF, self.c & 0xFFFFFFFF)


def decode(w0: int, w1: int, w2: int, w3: int) -> Instr | None:
    """Decode four words into an instruction, or None if w0 is not code."""
    if (w0 & TAG_MASK) != OPCODE_TAG:
        return None
    entry = _BY_CODE.get(w0 & 0xFF)
    if entry is None:
        return None
    return Instr(entry[0], w1, w2, w3)


@dataclass
class Program:
    """An assembled program: encoded words plus resolved label addresses."""

    name: str
    base_vaddr: int
    instrs: list[Instr]
    labels: dict[str, int]

    @property
    def words(self) -> list[int]:
        out: list[int] = []
        for ins in self.instrs:
            out.extend(ins.encode())
        return out

    @property
    def size(self) -> int:
        return len(self.instrs) * INSTR_BYTES

    def label(self, name: str) -> int:
        return self.labels[name]


def _parse_arg(tok: str, labels: dict[str, int], symbols: dict[str, int]) -> int:
    if tok.startswith("r") and tok[1:].isdigit():
        return int(tok[1:])
    try:
        return int(tok, 0)
    except ValueError:
        pass
    if tok in labels:
        return labels[tok]
    if tok in symbols:
        return symbols[tok]
    raise ValueError(f"unresolved symbol {tok!r}")


def assemble(lines: list[str], base_vaddr: int, name: str = "program",
             symbols: dict[str, int] | None = None) -> Program:
    """Assemble text lines into a Program placed at base_vaddr.

    Lines are `op arg ...` with `#` comments; a line `foo:` defines a label.
    Arguments are integers (0x ok), register names r0..r7, label names, or
    keys of the symbols map. bmuset takes the unpacked five-argument form
    `bmuset target slot denied base length`.
    """
    symbols = symbols or {}
    if base_vaddr % INSTR_BYTES:
        raise ValueError("program base must be instruction aligned")

    # First pass: strip comments, collect labels at instruction granularity.
    stripped: list[list[str]] = []
    labels: dict[str, int] = {}
    for raw in lines:
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if text.endswith(":"):
            labels[text[:-1].strip()] = base_vaddr + len(stripped) * INSTR_BYTES
            continue
        stripped.append(text.split())

    instrs: list[Instr] = []
    for toks in stripped:
        op, args = toks[0].lower(), toks[1:]
        if op == "write":
            op = "writei"
        if op == "bmuset" and len(args) == 5:
            t, s, d, base, length = (_parse_arg(a, labels, symbols) for a in args)
            instrs.append(Instr("bmuset", pack_bmuset(t, s, d), base, length))
            continue
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        nargs = OPS[op][1]
        if len(args) != nargs:
            raise ValueError(f"{op} takes {nargs} args, got {len(args)}")
        vals = [_parse_arg(a, labels, symbols) for a in args]
        vals += [0] * (3 - len(vals))
        instrs.append(Instr(op, *vals))

    return Program(name, base_vaddr, instrs, labels)
