"""Secure dynamic partitioning: lending SMP processors to open domains.

A processor leaves the base domain through an explicit hot-remove sequence
(work migration, interrupt rerouting, coherence exit, context save), runs
an open domain, and later merges back by restoring the saved base context.
The saved program counter is rewritten to the hot-add entry point so the
merged processor resumes as if it had just received a wake-up interrupt.
The switching code itself lives in a common physical region mapped at one
shared virtual address in every page table, so control flow survives the
page-table-base change in the middle of the sequence.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import (LastProcessor, MappingError, NotLentOut, ProtocolError,
                     UnknownDomain)
from .machine import (CTX_BYTES, AccessKind, DomainContext, Machine, PageTable,
                      RunState)
from .bmu import RangeEntry
from .virt import (MAILBOX_STRIDE, VEC_SWITCH, IvcBuffers, MasterVmm,
                   SwitchRequest, slave_handler_program)


@dataclass(frozen=True)
class SwitchCodeLayout:
    """Physical homes of the shared switching code and its data window."""

    common_text: tuple[int, int] = (0x0E001000, 4096)
    common_data: tuple[int, int] = (0x0F000000, 4096)
    shared_vaddr: int = 0x0FFB0000

    @property
    def text_vbase(self) -> int:
        return self.shared_vaddr

    @property
    def data_vbase(self) -> int:
        return self.shared_vaddr + self.common_text[1]

    @property
    def window(self) -> tuple[int, int]:
        return (self.shared_vaddr, self.common_text[1] + self.common_data[1])

    def data_phys(self, vaddr: int) -> int:
        return self.common_data[0] + (vaddr - self.data_vbase)


@dataclass
class SwitchCode:
    """Result of installing the switch code: entry points and data map."""

    layout: SwitchCodeLayout
    ivc: IvcBuffers
    switch_entries: list[int]
    restore_entries: list[int]
    buffer_vaddrs: list[int]        # base-domain context buffer per processor
    token_vaddr: int


def install_switch_code(machine: Machine, layout: SwitchCodeLayout,
                        tables: dict[int, PageTable]) -> SwitchCode:
    """Map the shared window into every table and place the handler code.

    Every page table ends up translating the shared virtual window to the
    identical common physical regions. Raises MappingError when a table
    already maps the window elsewhere, or when a common region collides
    with memory some OS already owns.
    """
    text_phys, text_len = layout.common_text
    data_phys, data_len = layout.common_data
    if layout.shared_vaddr % machine.config.page_size:
        raise MappingError("shared window must be page aligned")
    for tid, table in tables.items():
        for vbase, pbase, length in table.mappings:
            for cbase, clen in (layout.common_text, layout.common_data):
                if pbase < cbase + clen and cbase < pbase + length \
                        and vbase not in (layout.text_vbase, layout.data_vbase):
                    raise MappingError(
                        f"table {tid}: common region 0x{cbase:08x} collides with "
                        f"OS footprint at 0x{pbase:08x}")
        for vbase, pbase, length in ((layout.text_vbase, text_phys, text_len),
                                     (layout.data_vbase, data_phys, data_len)):
            existing = table.lookup_virtual(vbase)
            if existing is None:
                table.map(vbase, pbase, length)
            elif existing[0] != vbase or existing[1] != pbase:
                raise MappingError(
                    f"table {tid} already maps 0x{vbase:08x} elsewhere")

    nprocs = len(machine.procs)
    ivc = IvcBuffers(layout.data_vbase, nprocs)
    switch_entries: list[int] = []
    restore_entries: list[int] = []
    offset = 0
    for p in range(nprocs):
        prog = slave_handler_program(ivc.mailboxes[p], layout.text_vbase + offset, p)
        machine.load_words(text_phys + offset, prog.words)
        switch_entries.append(prog.label("switch_entry"))
        restore_entries.append(prog.label("restore_entry"))
        machine.set_ipi_handler(p, VEC_SWITCH, prog.label("switch_entry"))
        offset += prog.size
        if offset > text_len:
            raise MappingError("switch code overflows the common text region")

    buf_base = layout.data_vbase + ivc.total_size()
    buffer_vaddrs = [buf_base + p * (CTX_BYTES + 4) for p in range(nprocs)]
    token_vaddr = buf_base + nprocs * (CTX_BYTES + 4)
    if token_vaddr + 4 > layout.data_vbase + data_len:
        raise MappingError("mailboxes and context buffers overflow the data region")
    return SwitchCode(layout, ivc, switch_entries, restore_entries,
                      buffer_vaddrs, token_vaddr)


class _SeparateDriver:
    """Hot-remove phases executed by the separating processor itself."""

    PHASES = ("migrate", "reroute_irq", "coherence_off", "save_context", "await_next")

    def __init__(self, dyn: "DynPart", proc: int, target: str):
        self.dyn = dyn
        self.proc = proc
        self.target = target
        self.idx = 0
        self.start_step = dyn.machine.step_no

    def step(self, machine: Machine, pid: int) -> str:
        dyn = self.dyn
        phase = self.PHASES[self.idx]
        if phase == "migrate":
            machine.procs[pid].set_mask(True)
            dyn._migrate_work(pid)
        elif phase == "reroute_irq":
            machine.procs[pid].accepts_irqs = False
        elif phase == "coherence_off":
            machine.procs[pid].system_regs["coherence"] = 0
        elif phase == "save_context":
            snap = machine.snapshot_context(pid)
            rewritten = DomainContext(
                general=snap.general, banked5=snap.banked5, banked2=snap.banked2,
                status_current=snap.status_current & ~0x80, status_saved=snap.status_saved,
                ptb=snap.ptb, coherence=snap.coherence,
                pc=dyn.hotadd_labels[pid])
            for i, w in enumerate(rewritten.to_words()):
                machine.access(pid, dyn.switch_code.buffer_vaddrs[pid] + 4 * i,
                               AccessKind.WRITE, w)
            dyn.buffer_populated[pid] = True
            dyn._submit_separate_restore(self)
        elif phase == "await_next":
            box = dyn.switch_code.ivc.mailboxes[pid]
            flag = machine.access(pid, box.flag, AccessKind.READ)
            if not flag:
                return "hotremove_await_next"
            machine.procs[pid].driver = None
            machine.procs[pid].pc = dyn.switch_code.restore_entries[pid]
            dyn._emit_phase("separate", pid, self.target, "enter_restore", self.start_step)
            return "hotremove_enter_restore"
        dyn._emit_phase("separate", pid, self.target, phase, self.start_step)
        self.idx += 1
        return f"hotremove_{phase}"


class DynPart:
    """Context manager for processor lending; extends the master VMM."""

    def __init__(self, machine: Machine, master: MasterVmm, switch_code: SwitchCode,
                 members: set[int], base_regions: list[tuple[int, int]],
                 hotadd_labels: dict[int, int], counters: dict[str, int] | None = None):
        self.machine = machine
        self.master = master
        self.switch_code = switch_code
        self.members = set(members)
        self.base_regions = list(base_regions)
        self.hotadd_labels = dict(hotadd_labels)
        self.counters = dict(counters or {})
        self.lent: dict[int, str] = {}
        self.buffer_populated: dict[int, bool] = {}
        self.work_queues: dict[int, deque] = {p: deque() for p in members}
        self.token: int | None = None
        master.switch_window = switch_code.layout.window

    # --- bookkeeping ------------------------------------------------------------

    @property
    def base_domain(self) -> str:
        return self.master.policy.base_domain

    def allocated(self) -> dict[str, int]:
        """Processor count per domain at a quiescent point."""
        out: dict[str, int] = {self.base_domain: len(self.members)}
        for proc, domain in self.lent.items():
            running = self.master.running_on.get(proc, domain)
            out[running] = out.get(running, 0) + 1
        return out

    def _emit_phase(self, kind: str, proc: int, domain: str | None,
                    phase: str, start_step: int) -> None:
        self.machine.emit("transition", kind, proc, domain, phase,
                          self.machine.step_no - start_step)

    def _migrate_work(self, proc: int) -> None:
        queue = self.work_queues.get(proc)
        if not queue:
            return
        others = sorted(p for p in self.members if p != proc)
        i = 0
        while queue:
            unit = queue.popleft()
            self.work_queues.setdefault(others[i % len(others)], deque()).append(unit)
            i += 1

    def load_work(self, proc: int, units: int) -> None:
        self.work_queues.setdefault(proc, deque()).extend(range(units))

    def _update_manager(self) -> None:
        new = min(self.members)
        old = self.master.manager_proc
        if new == old:
            return
        if self.machine.procs[old].driver is self.master:
            self.machine.procs[old].driver = None
        self.machine.procs[new].driver = self.master
        self.master.manager_proc = new

    def _acquire_token(self, proc: int) -> None:
        if self.token is not None:
            raise ProtocolError(f"transition already in flight on cpu{self.token}")
        self.token = proc

    def _release_token(self) -> None:
        self.token = None

    def pre_base_entries(self, proc: int) -> list[RangeEntry]:
        """Least privilege for a processor returning to the base domain.

        Until hot-add completes and the processor rejoins the controllers it
        may read and fetch base memory but not write it.
        """
        entries = [RangeEntry((base, length), frozenset({AccessKind.WRITE}))
                   for base, length in self.base_regions]
        return entries + list(self.master.standing_entries(proc))

    # --- state transition (1): separate ------------------------------------------

    def separate(self, proc: int, target: str) -> None:
        """Hot-remove proc from the base domain and lend it to target."""
        if proc not in self.members:
            raise ProtocolError(f"cpu{proc} is not a base member")
        if len(self.members) < 2:
            raise LastProcessor("the base domain keeps at least one processor")
        if target not in self.master.store:
            raise UnknownDomain(target)
        self._acquire_token(proc)
        try:
            if proc == self.master.manager_proc:
                self.members.discard(proc)
                self._update_manager()
                self.members.add(proc)
            self.master.open_procs.add(proc)
            driver = _SeparateDriver(self, proc, target)
            self._sep_req: SwitchRequest | None = None
            self.machine.procs[proc].driver = driver
            budget = self.master.timeout * 2 + 500
            self.machine.run_until(
                lambda m, r: self._sep_req is not None and self._sep_req.done, budget)
            req = self._sep_req
            if req is None or not req.done:
                raise ProtocolError(f"separate of cpu{proc} never completed")
            if req.error is not None:
                raise req.error
            self.members.discard(proc)
            self.lent[proc] = target
            self._emit_phase("separate", proc, target, "complete",
                             driver.start_step)
        finally:
            self._release_token()

    def _submit_separate_restore(self, driver: _SeparateDriver) -> None:
        req = SwitchRequest(proc=driver.proc, target=driver.target)
        req.tasks = self.master.restore_tasks(req, drop_controller=True)
        self._sep_req = req
        self.master.submit(req)

    # --- state transition (2): switch between open domains -------------------------

    def switch_open(self, proc: int, target: str) -> DomainContext:
        """Switch a lent processor between open domains."""
        if proc not in self.lent:
            raise NotLentOut(f"cpu{proc} is not lent out")
        if target == self.base_domain:
            raise UnknownDomain("use merge to return to the base domain")
        ctx = self.master.switch_domain(target, proc)
        self.lent[proc] = target
        return ctx

    # --- state transition (3): merge ------------------------------------------------

    def merge(self, proc: int) -> None:
        """Return a lent processor to the base domain via the saved context."""
        if proc not in self.lent:
            raise NotLentOut(f"cpu{proc} was never separated")
        if not self.buffer_populated.get(proc):
            raise ProtocolError(f"no saved base context for cpu{proc}")
        self._acquire_token(proc)
        start = self.machine.step_no
        try:
            req = SwitchRequest(proc=proc, target=None,
                                finish_after_read_prev=False)
            req.entries_fn = lambda: self.pre_base_entries(proc)
            stash: dict = {}
            req.next_ctx_fn = lambda: stash["ctx"]
            tasks = deque()
            tasks.append(self._task_read_buffer(proc, stash))
            tasks.append(self.master._task_write_next(req))
            tasks.extend(self.master._tasks_reconfig(req))
            tasks.append(self.master._task_post_ipi(req))
            tasks.append(self.master._task_poll_ack(req))
            tasks.append(self.master._task_read_prev(req))
            tasks.append(self._task_poll_hotadd(proc, start))
            tasks.append(self.master._task_add_controller(req))
            tasks.append(self._task_finish_merge(proc, start))
            req.tasks = tasks
            self.master.submit(req)
            self.master.pump(req)
        finally:
            self._release_token()

    def _task_read_buffer(self, proc: int, stash: dict):
        vaddr = self.switch_code.buffer_vaddrs[proc]
        def run(req: SwitchRequest):
            m = self.machine
            words = [m.access(self.master.manager_proc, vaddr + 4 * i, AccessKind.READ)
                     for i in range(CTX_BYTES // 4)]
            stash["ctx"] = DomainContext.from_words(words)
            self._emit_phase("merge", proc, self.lent.get(proc), "read_base_context",
                             req.started_step)
            return "merge_read_buffer", True
        return run

    def _task_poll_hotadd(self, proc: int, start: int):
        def run(req: SwitchRequest):
            m = self.machine
            box = self.switch_code.ivc.mailboxes[proc]
            done = m.access(self.master.manager_proc, box.hotadd_done, AccessKind.READ)
            if not done:
                if m.procs[proc].crashed:
                    self.master._fail(req, ProtocolError(
                        f"cpu{proc} faulted during hot-add"))
                    return "merge_poll_hotadd", True
                if m.step_no > req.deadline:
                    self.master._fail(req, ProtocolError(
                        f"cpu{proc} never completed hot-add"))
                    return "merge_poll_hotadd", True
                return "merge_poll_hotadd", False
            m.access(self.master.manager_proc, box.hotadd_done, AccessKind.WRITE, 0)
            self._emit_phase("merge", proc, None, "hotadd_done", start)
            return "merge_poll_hotadd", True
        return run

    def _task_finish_merge(self, proc: int, start: int):
        def run(req: SwitchRequest):
            self.members.add(proc)
            domain = self.lent.pop(proc, None)
            self.buffer_populated[proc] = False
            self.master.running_on.pop(proc, None)
            self.master.open_procs.discard(proc)
            self._update_manager()
            self._emit_phase("merge", proc, domain, "complete", start)
            req.done = True
            return "merge_finish", True
        return run

    # --- throughput ---------------------------------------------------------------

    def throughput_probe(self, window: int) -> dict[str, int]:
        """Work units completed per domain over a run of `window` steps."""
        before = {d: self.machine.counters.get(c, 0) for d, c in self.counters.items()}
        if window > 0:
            self.machine.run(window)
        return {d: self.machine.counters.get(c, 0) - before[d]
                for d, c in self.counters.items()}
