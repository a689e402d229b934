"""Deterministic simulated multi-core hardware.

A Machine owns every piece of simulated state: processors with register
files, RAM segments, page tables, an inter-processor interrupt controller,
and the bus access path that consults the firewall matrix on every access
from a non-controller processor. All concurrency is simulated: exactly one
processor executes one micro-operation per step, chosen round-robin among
runnable processors, so identical configurations and scenarios replay into
identical traces.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, NamedTuple

from . import isa
from .errors import BusError, ConfigError, EmptySetError, MachineFault, PageFault, \
    SlotError, UnexpectedFlow

WORD_MASK = 0xFFFFFFFF
MASK_BIT = 1 << 7       # interrupt-disable bit inside the current status word

# Context block layout, in words, as stored in RAM by ctxsave and consumed
# by ctxptb/ctxload/ctxjmp. Mirrors DomainContext field order.
CTX_GENERAL = 0          # 8 words
CTX_BANKED5 = 8          # 2 banks x 5 words
CTX_BANKED2 = 18         # 6 banks x 2 words
CTX_STATUS_CUR = 30
CTX_STATUS_SAV = 31
CTX_PTB = 32
CTX_COHERENCE = 33
CTX_PC = 34
CTX_WORDS = 35
CTX_BYTES = CTX_WORDS * 4


class AccessKind(IntEnum):
    READ = 0
    WRITE = 1
    FETCH = 2
    SWAP = 3


class RunState(Enum):
    RUNNING = "running"
    WAITING = "waiting_for_interrupt"
    HALTED = "halted"


@dataclass
class MachineConfig:
    processor_count: int = 3
    ram_size: int = 16 * 1024 * 1024
    page_size: int = 4096
    slaves: list[tuple[str, tuple[int, int]]] = field(default_factory=list)
    rng_seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.processor_count <= 4:
            raise ConfigError(
                f"processor_count must be 2..4 (4-bit bus id tag), got {self.processor_count}")
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise ConfigError(f"page_size must be a power of two, got {self.page_size}")
        if self.ram_size <= 0 or self.ram_size % self.page_size:
            raise ConfigError("ram_size must be a positive multiple of page_size")
        ranges = []
        for name, (base, length) in self.slaves:
            if length <= 0:
                raise ConfigError(f"slave {name!r} has empty range")
            ranges.append((base, base + length, name))
        ranges.sort()
        for (s0, e0, n0), (s1, e1, n1) in zip(ranges, ranges[1:]):
            if s1 < e0:
                raise ConfigError(f"slave ranges {n0!r} and {n1!r} overlap")


@dataclass(frozen=True)
class DomainContext:
    """The register snapshot sufficient to restore an OS onto a processor."""

    general: tuple[int, ...]                 # 8 words
    banked5: tuple[tuple[int, ...], ...]     # 2 banks x 5 words
    banked2: tuple[tuple[int, ...], ...]     # 6 banks x 2 words
    status_current: int
    status_saved: int
    ptb: int
    coherence: int
    pc: int

    @property
    def interrupt_mask(self) -> bool:
        return bool(self.status_current & MASK_BIT)

    @property
    def system_regs(self) -> dict[str, int]:
        return {"ptb": self.ptb, "coherence": self.coherence}

    def to_words(self) -> list[int]:
        words = list(self.general)
        for bank in self.banked5:
            words.extend(bank)
        for bank in self.banked2:
            words.extend(bank)
        words.extend([self.status_current, self.status_saved,
                      self.ptb, self.coherence, self.pc])
        return words

    @classmethod
    def from_words(cls, words: list[int]) -> "DomainContext":
        if len(words) != CTX_WORDS:
            raise ValueError(f"context block needs {CTX_WORDS} words")
        return cls(
            general=tuple(words[CTX_GENERAL:CTX_GENERAL + 8]),
            banked5=tuple(tuple(words[CTX_BANKED5 + i * 5:CTX_BANKED5 + (i + 1) * 5])
                          for i in range(2)),
            banked2=tuple(tuple(words[CTX_BANKED2 + i * 2:CTX_BANKED2 + (i + 1) * 2])
                          for i in range(6)),
            status_current=words[CTX_STATUS_CUR],
            status_saved=words[CTX_STATUS_SAV],
            ptb=words[CTX_PTB],
            coherence=words[CTX_COHERENCE],
            pc=words[CTX_PC],
        )


def zero_context(pc: int = 0, ptb: int = 0, coherence: int = 0,
                 status: int = 0) -> DomainContext:
    return DomainContext(
        general=(0,) * 8,
        banked5=((0,) * 5, (0,) * 5),
        banked2=tuple((0, 0) for _ in range(6)),
        status_current=status,
        status_saved=0,
        ptb=ptb,
        coherence=coherence,
        pc=pc,
    )


@dataclass(frozen=True)
class BusAccess:
    initiator: int
    kind: AccessKind
    phys_addr: int
    width: int
    id_tag: int

    @staticmethod
    def tag_for(initiator: int, kind: AccessKind) -> int:
        return ((initiator & 0x3) << 2) | int(kind)


class PageTable:
    """Flat list of page-aligned (virtual base, physical base, length) mappings."""

    def __init__(self, page_size: int = 4096):
        self.page_size = page_size
        self.mappings: list[tuple[int, int, int]] = []

    def map(self, vbase: int, pbase: int, length: int) -> None:
        ps = self.page_size
        if vbase % ps or pbase % ps or length % ps or length <= 0:
            raise ConfigError("mapping must be page aligned with positive length")
        for v0, _, ln in self.mappings:
            if vbase < v0 + ln and v0 < vbase + length:
                raise ConfigError(
                    f"virtual range 0x{vbase:08x}+0x{length:x} overlaps existing mapping")
        self.mappings.append((vbase, pbase, length))

    def unmap(self, vbase: int) -> None:
        self.mappings = [m for m in self.mappings if m[0] != vbase]

    def translate(self, vaddr: int) -> int | None:
        for vbase, pbase, length in self.mappings:
            if vbase <= vaddr < vbase + length:
                return pbase + (vaddr - vbase)
        return None

    def lookup_virtual(self, vaddr: int) -> tuple[int, int, int] | None:
        for m in self.mappings:
            if m[0] <= vaddr < m[0] + m[2]:
                return m
        return None


class ProcessorState:
    __slots__ = ("id", "general", "banked5", "banked2", "status_current",
                 "status_saved", "system_regs", "pc", "run_state", "driver",
                 "latched", "accepts_irqs", "crashed")

    def __init__(self, pid: int):
        self.id = pid
        self.driver = None          # host actor consulted before RAM fetch
        self.latched: DomainContext | None = None
        self.accepts_irqs = True    # external interrupt distribution flag
        self.reset()

    def reset(self) -> None:
        self.general = [0] * 8
        self.banked5 = [[0] * 5, [0] * 5]
        self.banked2 = [[0, 0] for _ in range(6)]
        self.status_current = 0
        self.status_saved = 0
        self.system_regs = {"ptb": 0, "coherence": 0}
        self.pc = 0
        self.run_state = RunState.HALTED
        self.latched = None
        self.crashed = False

    @property
    def interrupt_mask(self) -> bool:
        return bool(self.status_current & MASK_BIT)

    def set_mask(self, value: bool) -> None:
        if value:
            self.status_current |= MASK_BIT
        else:
            self.status_current &= ~MASK_BIT & WORD_MASK


@dataclass(frozen=True)
class FaultRecord:
    step: int
    proc: int
    kind: str
    addr: int


class StepReport(NamedTuple):
    step: int
    proc: int | None
    op: str
    fault: FaultRecord | None


class RunResult(NamedTuple):
    steps: int
    hit: bool
    last: StepReport | None


class _IpiGuard:
    """Sliding-window rate limit on interrupts targeting guarded processors.

    Posts beyond the limit are deferred in FIFO order, never dropped. A
    deferred post is admitted once the window has room and its vector is no
    longer pending on the target, so every post becomes a distinct delivery.
    """

    def __init__(self, guarded: set[int], limit: int, window: int):
        if limit <= 0:
            raise ConfigError("ipi rate limit must be positive")
        self.guarded = set(guarded)
        self.limit = limit
        self.window = window
        self.admitted: dict[int, deque[int]] = {p: deque() for p in guarded}
        self.deferred: dict[int, deque[tuple[int, int]]] = {p: deque() for p in guarded}

    def admit(self, machine: "Machine", to: int, frm: int, vector: int) -> bool:
        if to not in self.guarded:
            return True
        if self._room(machine, to) and vector not in machine.pending[to]:
            self.admitted[to].append(machine.step_no)
            return True
        self.deferred[to].append((frm, vector))
        return False

    def drain(self, machine: "Machine") -> None:
        for p in self.guarded:
            q = self.deferred[p]
            while q:
                frm, vector = q[0]
                if not self._room(machine, p) or vector in machine.pending[p]:
                    break
                q.popleft()
                self.admitted[p].append(machine.step_no)
                machine._pend(frm, p, vector)

    def _room(self, machine: "Machine", p: int) -> bool:
        window_start = machine.step_no - self.window
        rec = self.admitted[p]
        while rec and rec[0] <= window_start:
            rec.popleft()
        return len(rec) < self.limit


class Machine:
    """The simulated platform: processors, RAM, page tables, IPIs, bus."""

    def __init__(self, config: MachineConfig):
        config.validate()
        self.config = config
        self.procs = [ProcessorState(i) for i in range(config.processor_count)]
        self.segments: list[tuple[int, bytearray]] = [(0, bytearray(config.ram_size))]
        for name, (base, length) in config.slaves:
            if base >= config.ram_size:
                self.segments.append((base, bytearray(length)))
            elif base + length > config.ram_size:
                raise ConfigError(f"slave {name!r} straddles the RAM boundary")
        self.segments.sort(key=lambda s: s[0])
        self.tables: dict[int, PageTable] = {}
        self.matrix = None                      # firewall; None = unchecked
        self.pending: list[set[int]] = [set() for _ in self.procs]
        self.handlers: list[dict[int, tuple]] = [{} for _ in self.procs]
        self.step_no = 0
        self._last = config.processor_count - 1
        self.trace_enabled = False
        self.trace: list[tuple] = []
        self.events: list[tuple] = []
        self.faults: list[FaultRecord] = []
        self.counters: dict[int, int] = {}
        self.count_hooks: dict[int, Callable[["Machine", int], None]] = {}
        self.on_latch: Callable[["Machine", int, DomainContext], None] | None = None
        self.ipi_guard: _IpiGuard | None = None
        self.rng = random.Random(config.rng_seed)
        self._last_access: tuple[int, int, str] | None = None

    # --- memory ------------------------------------------------------------

    def _segment(self, paddr: int, nbytes: int) -> tuple[bytearray, int] | None:
        for base, buf in self.segments:
            if base <= paddr and paddr + nbytes <= base + len(buf):
                return buf, paddr - base
        return None

    def read_phys(self, paddr: int, nbytes: int = 4) -> int:
        seg = self._segment(paddr, nbytes)
        if seg is None:
            raise BusError(paddr, "unbacked address")
        buf, off = seg
        return int.from_bytes(buf[off:off + nbytes], "little")

    def write_phys(self, paddr: int, value: int, nbytes: int = 4) -> None:
        seg = self._segment(paddr, nbytes)
        if seg is None:
            raise BusError(paddr, "unbacked address")
        buf, off = seg
        buf[off:off + nbytes] = (value & ((1 << (8 * nbytes)) - 1)).to_bytes(nbytes, "little")

    def load_words(self, paddr: int, words: list[int]) -> None:
        """Host loader: place words in physical memory without bus checks."""
        for i, w in enumerate(words):
            self.write_phys(paddr + 4 * i, w)

    def load_bytes(self, paddr: int, data: bytes) -> None:
        seg = self._segment(paddr, len(data))
        if seg is None:
            raise BusError(paddr, "unbacked address")
        buf, off = seg
        buf[off:off + len(data)] = data

    def read_bytes_phys(self, paddr: int, nbytes: int) -> bytes:
        seg = self._segment(paddr, nbytes)
        if seg is None:
            raise BusError(paddr, "unbacked address")
        buf, off = seg
        return bytes(buf[off:off + nbytes])

    # --- page tables ---------------------------------------------------------

    def add_table(self, table: PageTable, table_id: int | None = None) -> int:
        tid = table_id if table_id is not None else (max(self.tables, default=0) + 1)
        self.tables[tid] = table
        return tid

    def translate(self, pid: int, vaddr: int) -> int | None:
        table = self.tables.get(self.procs[pid].system_regs["ptb"])
        if table is None:
            return None
        return table.translate(vaddr)

    # --- bus access ----------------------------------------------------------

    def access(self, pid: int, vaddr: int, kind: AccessKind,
               value: int | None = None, width: int = 4) -> int | None:
        """Translate vaddr, submit the access to the firewall, touch memory.

        Raises PageFault when unmapped, BusError when blocked or unbacked.
        Swap returns the old word and stores the new one in a single step.
        """
        paddr = self.translate(pid, vaddr)
        if paddr is None:
            raise PageFault(vaddr)
        self._last_access = (vaddr, paddr, kind.name.lower())
        ba = BusAccess(pid, kind, paddr, width, BusAccess.tag_for(pid, kind))
        if self.matrix is not None and not self.matrix.check(ba):
            raise BusError(paddr, f"blocked for cpu{pid}")
        if kind is AccessKind.WRITE:
            self.write_phys(paddr, value or 0, width)
            return None
        if kind is AccessKind.SWAP:
            old = self.read_phys(paddr, width)
            self.write_phys(paddr, value or 0, width)
            return old
        return self.read_phys(paddr, width)

    def atomic_swap(self, pid: int, vaddr: int, new: int) -> int:
        """Exchange the word at vaddr with new as one indivisible operation."""
        return self.access(pid, vaddr, AccessKind.SWAP, new)  # type: ignore[return-value]

    # --- interrupts ------------------------------------------------------------

    def set_ipi_handler(self, pid: int, vector: int, vaddr: int) -> None:
        self.handlers[pid][vector] = ("code", vaddr)

    def set_host_handler(self, pid: int, vector: int,
                         fn: Callable[["Machine", int, int], None]) -> None:
        self.handlers[pid][vector] = ("host", fn)

    def post_ipi(self, frm: int, to: int, vector: int) -> None:
        self.events.append(("ipi_post", self.step_no, frm, to, vector))
        if self.ipi_guard is not None and not self.ipi_guard.admit(self, to, frm, vector):
            return
        self._pend(frm, to, vector)

    def _pend(self, frm: int, to: int, vector: int) -> None:
        self.pending[to].add(vector)

    def guard_ipis(self, guarded: set[int], limit: int, window: int = 100) -> None:
        self.ipi_guard = _IpiGuard(guarded, limit, window)

    def _deliverable(self, pid: int) -> bool:
        return bool(self.pending[pid]) and not self.procs[pid].interrupt_mask

    # --- context save/restore ---------------------------------------------------

    def snapshot_context(self, pid: int) -> DomainContext:
        st = self.procs[pid]
        return DomainContext(
            general=tuple(st.general),
            banked5=tuple(tuple(b) for b in st.banked5),
            banked2=tuple(tuple(b) for b in st.banked2),
            status_current=st.status_current,
            status_saved=st.status_saved,
            ptb=st.system_regs["ptb"],
            coherence=st.system_regs["coherence"],
            pc=st.pc,
        )

    def restore_context(self, pid: int, ctx: DomainContext) -> None:
        st = self.procs[pid]
        st.general = list(ctx.general)
        st.banked5 = [list(b) for b in ctx.banked5]
        st.banked2 = [list(b) for b in ctx.banked2]
        st.status_current = ctx.status_current
        st.status_saved = ctx.status_saved
        st.system_regs["ptb"] = ctx.ptb
        st.system_regs["coherence"] = ctx.coherence
        st.pc = ctx.pc

    def reset_processor(self, pid: int) -> None:
        self.procs[pid].reset()
        self.pending[pid].clear()

    # --- step loop ----------------------------------------------------------------

    def _pick(self) -> int | None:
        n = len(self.procs)
        for i in range(1, n + 1):
            p = (self._last + i) % n
            st = self.procs[p]
            if st.run_state is RunState.HALTED:
                continue
            if self._deliverable(p) or st.run_state is RunState.RUNNING:
                return p
        return None

    def step(self) -> StepReport:
        """Execute exactly one micro-operation on one processor."""
        if self.ipi_guard is not None:
            self.ipi_guard.drain(self)
        p = self._pick()
        if p is None:
            report = StepReport(self.step_no, None, "idle", None)
            self.step_no += 1
            return report
        self._last_access = None
        st = self.procs[p]
        op = None
        fault_rec = None
        try:
            if self._deliverable(p):
                op = self._deliver(p)
            elif st.driver is not None:
                op = st.driver.step(self, p)
            if op is None:
                ins = self._fetch_instr(p)
                self._exec(p, ins)
                op = ins.op
        except MachineFault as exc:
            fault_rec = FaultRecord(self.step_no, p, exc.kind, exc.addr)
            self.faults.append(fault_rec)
            self.events.append(("fault", self.step_no, p, exc.kind, exc.addr))
            st.run_state = RunState.HALTED
            st.crashed = True
            op = "fault"
        if self.trace_enabled:
            va, pa, kind = self._last_access or ("", "", "")
            self.trace.append((self.step_no, p, op, va, pa, kind,
                               fault_rec.kind if fault_rec else "ok"))
        report = StepReport(self.step_no, p, op, fault_rec)
        self._last = p
        self.step_no += 1
        return report

    def _deliver(self, pid: int) -> str:
        st = self.procs[pid]
        vector = min(self.pending[pid])
        self.pending[pid].discard(vector)
        self.events.append(("ipi_deliver", self.step_no, pid, vector))
        handler = self.handlers[pid].get(vector)
        if handler is None:
            st.run_state = RunState.RUNNING
            return "ipi_wake"
        kind, target = handler
        if kind == "host":
            st.run_state = RunState.RUNNING
            target(self, pid, vector)
            return "ipi_host"
        latched = self.snapshot_context(pid)
        st.latched = latched
        if self.on_latch is not None:
            self.on_latch(self, pid, latched)
        st.set_mask(True)
        st.pc = target
        st.run_state = RunState.RUNNING
        return "ipi_enter"

    def _fetch_instr(self, pid: int) -> isa.Instr:
        st = self.procs[pid]
        vaddr = st.pc
        paddr = self.translate(pid, vaddr)
        if paddr is None:
            raise UnexpectedFlow(vaddr, "fetch unmapped")
        self._last_access = (vaddr, paddr, "fetch")
        ba = BusAccess(pid, AccessKind.FETCH, paddr, isa.INSTR_BYTES,
                       BusAccess.tag_for(pid, AccessKind.FETCH))
        if self.matrix is not None and not self.matrix.check(ba):
            raise BusError(paddr, f"fetch blocked for cpu{pid}")
        w = [self.read_phys(paddr + 4 * i) for i in range(isa.INSTR_WORDS)]
        ins = isa.decode(*w)
        if ins is None:
            raise UnexpectedFlow(vaddr, "not an instruction")
        return ins

    # --- instruction semantics ------------------------------------------------------

    def _ctx_word(self, pid: int, block_vaddr: int, index: int) -> int:
        return self.access(pid, block_vaddr + 4 * index, AccessKind.READ)  # type: ignore

    def _exec(self, pid: int, ins: isa.Instr) -> None:
        st = self.procs[pid]
        st.pc += isa.INSTR_BYTES
        op, a, b, c = ins.op, ins.a, ins.b, ins.c
        if op == "nop":
            return
        if op == "halt":
            st.run_state = RunState.HALTED
            return
        if op == "read":
            st.general[a] = self.access(pid, b, AccessKind.READ)
            return
        if op == "fetch":
            st.general[a] = self.access(pid, b, AccessKind.FETCH)
            return
        if op == "writei":
            self.access(pid, a, AccessKind.WRITE, b)
            return
        if op == "writer":
            self.access(pid, a, AccessKind.WRITE, st.general[b])
            return
        if op == "swap":
            st.general[a] = self.access(pid, b, AccessKind.SWAP, c)
            return
        if op == "addi":
            st.general[a] = (st.general[a] + b) & WORD_MASK
            return
        if op == "branch":
            st.pc = a
            return
        if op == "beqz":
            if st.general[a] == 0:
                st.pc = b
            return
        if op == "bnez":
            if st.general[a] != 0:
                st.pc = b
            return
        if op == "ipi":
            self.post_ipi(pid, a, b)
            return
        if op == "setptb":
            st.system_regs["ptb"] = a
            return
        if op == "setmask":
            st.set_mask(bool(a & 1))
            return
        if op == "wfi":
            st.run_state = RunState.WAITING
            return
        if op == "count":
            self.counters[a] = self.counters.get(a, 0) + 1
            hook = self.count_hooks.get(a)
            if hook is not None:
                hook(self, pid)
            return
        if op == "trap":
            self.events.append(("trap", self.step_no, pid, a))
            return
        if op == "rfe":
            if st.latched is None:
                raise UnexpectedFlow(st.pc - isa.INSTR_BYTES, "rfe without latched context")
            ctx = st.latched
            st.latched = None
            self.restore_context(pid, ctx)
            return
        if op == "ctxsave":
            if st.latched is None:
                raise UnexpectedFlow(st.pc - isa.INSTR_BYTES, "ctxsave without latched context")
            for i, w in enumerate(st.latched.to_words()):
                self.access(pid, a + 4 * i, AccessKind.WRITE, w)
            return
        if op == "ctxptb":
            st.system_regs["ptb"] = self._ctx_word(pid, a, CTX_PTB)
            return
        if op == "ctxload":
            words = [self._ctx_word(pid, a, i) for i in range(CTX_WORDS)]
            st.general = words[CTX_GENERAL:CTX_GENERAL + 8]
            st.banked5 = [words[CTX_BANKED5 + i * 5:CTX_BANKED5 + (i + 1) * 5]
                          for i in range(2)]
            st.banked2 = [words[CTX_BANKED2 + i * 2:CTX_BANKED2 + (i + 1) * 2]
                          for i in range(6)]
            st.status_saved = words[CTX_STATUS_SAV]
            st.system_regs["coherence"] = words[CTX_COHERENCE]
            return
        if op == "ctxjmp":
            status = self._ctx_word(pid, a, CTX_STATUS_CUR)
            pc = self._ctx_word(pid, a, CTX_PC)
            st.status_current = status
            st.pc = pc
            st.latched = None
            return
        if op == "bmuset":
            self._exec_bmuset(pid, a, b, c)
            return
        if op == "bmuctrl":
            if self.matrix is None:
                return
            new_set = {i for i in range(len(self.procs)) if a & (1 << i)}
            try:
                self.matrix.set_controllers(pid, new_set)
            except EmptySetError:
                raise BusError(0, "empty controller set")
            return
        if op == "setcoh":
            st.system_regs["coherence"] = a & 1
            return
        if op == "irqdist":
            st.accepts_irqs = bool(a & 1)
            return
        raise UnexpectedFlow(st.pc - isa.INSTR_BYTES, f"unimplemented op {op}")

    def _exec_bmuset(self, pid: int, packed: int, base: int, length: int) -> None:
        if self.matrix is None:
            return
        from .bmu import RangeEntry, denied_from_mask
        target, slot, denied_mask = isa.unpack_bmuset(packed)
        entry = None
        if denied_mask:
            entry = RangeEntry((base, length), denied_from_mask(denied_mask))
        try:
            self.matrix.set_entry(pid, target, slot, entry)
        except SlotError:
            raise BusError(0, "bad entry slot")

    # --- run helpers ------------------------------------------------------------------

    def run(self, steps: int) -> None:
        for _ in range(steps):
            self.step()

    def run_until(self, predicate: Callable[["Machine", StepReport], bool],
                  max_steps: int) -> RunResult:
        last = None
        for n in range(max_steps):
            last = self.step()
            if predicate(self, last):
                return RunResult(n + 1, True, last)
        return RunResult(max_steps, False, last)

    def emit(self, *record) -> None:
        """Append a structured module-level event to the shared event log."""
        self.events.append(record)


def build(config: MachineConfig) -> Machine:
    """Build a machine: processors halted with zeroed registers, RAM zeroed."""
    return Machine(config)
