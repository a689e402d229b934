"""Asymmetric virtualization: master/slave context switching over mailboxes.

The master side runs on a base-domain processor and owns every domain
context; the slave side is a short interrupt handler resident in the
shared switch-code window that only saves and restores contexts. The two
communicate through per-processor "next"/"previous" context mailboxes in
shared RAM plus a context-switch IPI, and the firewall matrix is rewritten
for the target domain before the switch interrupt is posted.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import isa
from .errors import (NoProcessorAvailable, NotOpenProcessor, ProtocolError,
                     SwitchTimeout, UnknownDomain)
from .machine import CTX_BYTES, AccessKind, DomainContext, Machine, RunState
from .bmu import AccessMatrix, DomainPolicy, RangeEntry

# IPI vectors used by the platform.
VEC_SWITCH = 1      # master -> slave context switch request
VEC_WAKE = 2        # IPC wake-up doorbell for the helper process
VEC_IDC = 3         # inter-domain data ready

TRAP_SPURIOUS_SWITCH = 0xE1

DEFAULT_SWITCH_TIMEOUT = 10_000


# --- context store -----------------------------------------------------------

@dataclass
class DomainRecord:
    id: str
    context: DomainContext
    policy_domain: str
    running_on: int | None = None   # processor id, or None when dormant

    @property
    def state(self) -> str:
        return "dormant" if self.running_on is None else f"running({self.running_on})"


class _Node:
    __slots__ = ("record", "prev", "next")

    def __init__(self, record: DomainRecord):
        self.record = record
        self.prev: _Node | None = None
        self.next: _Node | None = None


class ContextStore:
    """Domain records on a doubly-linked list with a hash index by id."""

    def __init__(self):
        self._head: _Node | None = None
        self._tail: _Node | None = None
        self._index: dict[str, _Node] = {}

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, domain: str) -> bool:
        return domain in self._index

    def set(self, domain: str, ctx: DomainContext, policy_domain: str | None = None) -> None:
        node = self._index.get(domain)
        if node is not None:
            node.record.context = ctx
            if policy_domain is not None:
                node.record.policy_domain = policy_domain
            return
        record = DomainRecord(domain, ctx, policy_domain or domain)
        node = _Node(record)
        if self._tail is None:
            self._head = self._tail = node
        else:
            node.prev = self._tail
            self._tail.next = node
            self._tail = node
        self._index[domain] = node

    def get(self, domain: str) -> DomainRecord:
        node = self._index.get(domain)
        if node is None:
            raise UnknownDomain(domain)
        return node.record

    def remove(self, domain: str) -> None:
        node = self._index.pop(domain, None)
        if node is None:
            raise UnknownDomain(domain)
        if node.prev is not None:
            node.prev.next = node.next
        else:
            self._head = node.next
        if node.next is not None:
            node.next.prev = node.prev
        else:
            self._tail = node.prev

    def domains(self) -> list[str]:
        out = []
        node = self._head
        while node is not None:
            out.append(node.record.id)
            node = node.next
        return out

    def check_integrity(self) -> bool:
        """List membership and the hash index must always agree."""
        seen = []
        node = self._head
        prev = None
        while node is not None:
            if node.prev is not prev:
                return False
            seen.append(node.record.id)
            prev, node = node, node.next
        return (sorted(seen) == sorted(self._index)
                and len(seen) == len(self._index)
                and self._tail is prev)


# --- mailbox layout -----------------------------------------------------------

@dataclass(frozen=True)
class ProcMailbox:
    """Virtual addresses of one processor's handshake mailbox."""

    flag: int
    ack: int
    hotadd_done: int
    next: int
    prev: int
    slice_base: int
    slice_len: int


MAILBOX_STRIDE = 320    # flag + ack + hotadd + pad + two context blocks, padded


class IvcBuffers:
    """Per-processor previous/next context mailboxes in the shared window.

    The mailbox block sits in the common data window, so it is mapped at
    the same virtual address under every domain's page table; the slice for
    processor k is writable only by the base domain and processor k itself,
    enforced by standing firewall entries.
    """

    def __init__(self, data_vbase: int, nprocs: int):
        self.data_vbase = data_vbase
        self.mailboxes: list[ProcMailbox] = []
        for k in range(nprocs):
            base = data_vbase + k * MAILBOX_STRIDE
            self.mailboxes.append(ProcMailbox(
                flag=base,
                ack=base + 4,
                hotadd_done=base + 8,
                next=base + 16,
                prev=base + 16 + CTX_BYTES,
                slice_base=base,
                slice_len=MAILBOX_STRIDE,
            ))

    def total_size(self) -> int:
        return len(self.mailboxes) * MAILBOX_STRIDE


def slave_handler_program(mailbox: ProcMailbox, base_vaddr: int,
                          proc: int) -> isa.Program:
    """Assemble one processor's slave-side switch handler.

    The handler only snapshots and restores contexts and flips the
    interrupt mask; it never interprets guest operations. Entry points:
    `switch_entry` for the context-switch IPI, `restore_entry` for
    transitions that enter with the outgoing context already saved.
    """
    lines = [
        "switch_entry:",
        f"read r0 {mailbox.flag}",
        "bnez r0 do_switch",
        f"trap {TRAP_SPURIOUS_SWITCH}",
        "rfe",
        "do_switch:",
        f"ctxsave {mailbox.prev}",
        f"writei {mailbox.ack} 1",
        "restore_entry:",
        f"writei {mailbox.flag} 0",
        f"ctxptb {mailbox.next}",
        f"ctxload {mailbox.next}",
        f"ctxjmp {mailbox.next}",
    ]
    return isa.assemble(lines, base_vaddr, name=f"slave_vmm_cpu{proc}")


# Opcodes a slave handler may contain (context moves, mailbox word traffic,
# mask handling); checked by the no-emulation property test.
SLAVE_ALLOWED_OPS = frozenset({
    "read", "writei", "bnez", "beqz", "trap", "rfe",
    "ctxsave", "ctxptb", "ctxload", "ctxjmp", "setmask", "branch",
})


# --- switch requests -----------------------------------------------------------

@dataclass
class SwitchRequest:
    """One in-flight master operation against a single open processor."""

    proc: int
    target: str | None                       # None: restoring the base domain
    kind: str = "switch"
    next_ctx_fn: Callable[[], DomainContext] | None = None
    entries_fn: Callable[[], list[RangeEntry]] | None = None
    finish_after_read_prev: bool = True
    displaced: str | None = None
    result: DomainContext | None = None
    error: Exception | None = None
    done: bool = False
    started_step: int = 0
    deadline: int = 0
    matrix_snapshot: dict | None = None
    tasks: deque = field(default_factory=deque)
    on_done: Callable[["MasterVmm", "SwitchRequest"], None] | None = None


@dataclass
class DeliveryReport:
    path: str                   # direct | via_master
    dst_proc: int
    switched: bool


class MasterVmm:
    """Domain scheduler and context owner, billed to the manager processor.

    Acts as the manager processor's host driver: each activation performs
    exactly one machine-visible action (a mailbox write, a matrix update, an
    IPI post, an acknowledgment poll, a context read-back). When nothing is
    in flight it falls through so the processor keeps running its resident
    program. Requests compile to micro-task queues; concurrent requests for
    distinct processors interleave, requests for one processor queue FIFO.
    """

    def __init__(self, machine: Machine, matrix: AccessMatrix, policy: DomainPolicy,
                 ivc: IvcBuffers, manager_proc: int = 0,
                 timeout: int = DEFAULT_SWITCH_TIMEOUT):
        self.machine = machine
        self.matrix = matrix
        self.policy = policy
        self.ivc = ivc
        self.manager_proc = manager_proc
        self.timeout = timeout
        self.store = ContextStore()
        self.open_procs: set[int] = set()
        self.running_on: dict[int, str] = {}
        self.queue: deque[SwitchRequest] = deque()
        self.active: dict[int, SwitchRequest] = {}
        self.standing_entries: Callable[[int], list[RangeEntry]] = lambda proc: []
        self.switch_window: tuple[int, int] | None = None   # (vbase, length) of switch code
        self.driver_mailboxes: dict[str, list[bytes]] = {}
        self.pinned_procs: set[int] = set()

    # --- public API -------------------------------------------------------------

    def set_context(self, domain: str, ctx: DomainContext,
                    policy_domain: str | None = None) -> None:
        """Insert or replace a domain context; new domains start dormant."""
        self.store.set(domain, ctx, policy_domain)

    def request_switch(self, target: str, proc: int) -> SwitchRequest:
        if target not in self.store:
            raise UnknownDomain(target)
        if proc not in self.open_procs:
            raise NotOpenProcessor(f"cpu{proc} is not an open-domain processor")
        req = SwitchRequest(proc=proc, target=target)
        req.tasks = self._switch_tasks(req)
        self.queue.append(req)
        return req

    def submit(self, req: SwitchRequest) -> SwitchRequest:
        self.queue.append(req)
        return req

    def pump(self, req: SwitchRequest, budget: int | None = None) -> None:
        budget = budget if budget is not None else (self.timeout * 2 + 500)
        self.machine.run_until(lambda m, r: req.done, budget)
        if req.error is not None:
            raise req.error
        if not req.done:
            raise SwitchTimeout(f"request on cpu{req.proc} never completed")

    def switch_domain(self, target: str, proc: int) -> DomainContext:
        """Run the full handshake; returns the displaced domain's context."""
        if target not in self.store:
            raise UnknownDomain(target)
        if proc not in self.open_procs:
            raise NotOpenProcessor(f"cpu{proc} is not an open-domain processor")
        if self.running_on.get(proc) == target:
            return self.machine.snapshot_context(proc)
        req = self.request_switch(target, proc)
        self.pump(req)
        return req.result  # type: ignore[return-value]

    def activate_initial(self, domain: str, proc: int) -> None:
        """Place a dormant domain directly onto an idle processor (setup only)."""
        record = self.store.get(domain)
        self.reconfigure_proc(proc, record.policy_domain)
        self.machine.restore_context(proc, record.context)
        self.machine.procs[proc].run_state = RunState.RUNNING
        record.running_on = proc
        self.running_on[proc] = domain

    def idc_send(self, src: str, dst: str, payload: bytes) -> DeliveryReport:
        """Move bytes between domains, activating the target if dormant."""
        if not payload:
            raise ValueError("empty payload")
        src_rec = self.store.get(src)
        if src_rec.running_on is None:
            raise ValueError(f"source domain {src!r} is not running")
        dst_rec = self.store.get(dst)
        if dst_rec.running_on is not None:
            self.driver_mailboxes.setdefault(dst, []).append(bytes(payload))
            self.machine.post_ipi(self.manager_proc, dst_rec.running_on, VEC_IDC)
            self.machine.emit("idc", self.machine.step_no, src, dst, len(payload), "direct")
            return DeliveryReport("direct", dst_rec.running_on, False)
        candidates = [p for p in sorted(self.open_procs)
                      if p not in self.pinned_procs and self.running_on.get(p) != src]
        if not candidates:
            raise NoProcessorAvailable(f"no open processor free for {dst!r}")
        proc = candidates[0]
        self.switch_domain(dst, proc)
        self.driver_mailboxes.setdefault(dst, []).append(bytes(payload))
        self.machine.post_ipi(self.manager_proc, proc, VEC_IDC)
        self.machine.emit("idc", self.machine.step_no, src, dst, len(payload), "via_master")
        return DeliveryReport("via_master", proc, True)

    def guard_ipi_rate(self, limit: int, window: int = 100) -> None:
        """Rate-limit interrupts targeting base-domain processors."""
        self.machine.guard_ipis(set(self.matrix.controllers), limit, window)

    # --- firewall helpers ---------------------------------------------------------

    def entries_for(self, proc: int, policy_domain: str) -> list[RangeEntry]:
        return list(self.policy.deny_entries(policy_domain)) + list(self.standing_entries(proc))

    def reconfigure_proc(self, proc: int, policy_domain: str) -> None:
        self.matrix.set_entries(self.manager_proc, proc, self.entries_for(proc, policy_domain))

    # --- driver side ------------------------------------------------------------

    def step(self, machine: Machine, pid: int) -> str | None:
        self._admit_queued()
        for proc in sorted(self.active):
            req = self.active[proc]
            if not req.tasks:
                continue
            op, advance = req.tasks[0](req)
            if advance and req.tasks:
                req.tasks.popleft()
            if req.done and req.proc in self.active:
                del self.active[req.proc]
            return op
        return None

    def _admit_queued(self) -> None:
        rest = deque()
        while self.queue:
            req = self.queue.popleft()
            if req.proc in self.active:
                rest.append(req)
            else:
                req.started_step = self.machine.step_no
                self.active[req.proc] = req
        self.queue = rest

    # --- task builders ------------------------------------------------------------

    def _write_ctx(self, vaddr: int, ctx: DomainContext) -> None:
        for i, w in enumerate(ctx.to_words()):
            self.machine.access(self.manager_proc, vaddr + 4 * i, AccessKind.WRITE, w)

    def _read_ctx(self, vaddr: int) -> DomainContext:
        words = [self.machine.access(self.manager_proc, vaddr + 4 * i, AccessKind.READ)
                 for i in range(CTX_BYTES // 4)]
        return DomainContext.from_words(words)   # type: ignore[arg-type]

    def _switch_tasks(self, req: SwitchRequest) -> deque:
        """write(next) < reconfig < IPI < ack < restore < read(previous)."""
        tasks = deque()
        tasks.append(self._task_write_next(req))
        tasks.extend(self._tasks_reconfig(req))
        tasks.append(self._task_post_ipi(req))
        tasks.append(self._task_poll_ack(req))
        tasks.append(self._task_read_prev(req))
        return tasks

    def restore_tasks(self, req: SwitchRequest, drop_controller: bool = False) -> deque:
        """Restore-only path: firewall first, then payload; no save/ack leg."""
        tasks = deque()
        tasks.extend(self._tasks_reconfig(req))
        if drop_controller:
            tasks.append(self._task_drop_controller(req))
        tasks.append(self._task_write_next(req))
        tasks.append(self._task_poll_restored(req))
        return tasks

    def _next_ctx(self, req: SwitchRequest) -> DomainContext:
        if req.next_ctx_fn is not None:
            return req.next_ctx_fn()
        return self.store.get(req.target).context     # type: ignore[arg-type]

    def _policy_domain(self, req: SwitchRequest) -> str:
        if req.target is not None and req.target in self.store:
            return self.store.get(req.target).policy_domain
        return self.policy.base_domain

    def _task_write_next(self, req: SwitchRequest):
        def run(r: SwitchRequest):
            box = self.ivc.mailboxes[r.proc]
            if r.matrix_snapshot is None:
                r.matrix_snapshot = self.matrix.snapshot()
            self._write_ctx(box.next, self._next_ctx(r))
            self.machine.access(self.manager_proc, box.flag, AccessKind.WRITE, 1)
            self.machine.emit("ivc_write_next", self.machine.step_no, r.proc, r.target)
            return "vmm_write_next", True
        return run

    def _tasks_reconfig(self, req: SwitchRequest):
        def make(slot: int):
            def run(r: SwitchRequest):
                if r.matrix_snapshot is None:
                    r.matrix_snapshot = self.matrix.snapshot()
                if r.entries_fn is not None:
                    entries = r.entries_fn()
                else:
                    entries = self.entries_for(r.proc, self._policy_domain(r))
                entry = entries[slot] if slot < len(entries) else None
                self.matrix.set_entry(self.manager_proc, r.proc, slot, entry)
                return "vmm_reconfig", True
            return run
        return [make(s) for s in range(self.matrix.entries_per_processor)]

    def _task_drop_controller(self, req: SwitchRequest):
        def run(r: SwitchRequest):
            new_set = set(self.matrix.controllers) - {r.proc}
            self.matrix.set_controllers(self.manager_proc, new_set)
            return "vmm_drop_controller", True
        return run

    def _task_add_controller(self, req: SwitchRequest):
        def run(r: SwitchRequest):
            new_set = set(self.matrix.controllers) | {r.proc}
            self.matrix.set_controllers(self.manager_proc, new_set)
            return "vmm_add_controller", True
        return run

    def _task_post_ipi(self, req: SwitchRequest):
        def run(r: SwitchRequest):
            self.machine.post_ipi(self.manager_proc, r.proc, VEC_SWITCH)
            self.machine.emit("ivc_ipi", self.machine.step_no, r.proc)
            r.deadline = self.machine.step_no + self.timeout
            return "vmm_post_ipi", True
        return run

    def _task_poll_ack(self, req: SwitchRequest):
        def run(r: SwitchRequest):
            if self.machine.procs[r.proc].crashed:
                self._fail(r, ProtocolError(f"cpu{r.proc} faulted during switch"),
                           restore_matrix=True)
                return "vmm_poll_ack", True
            box = self.ivc.mailboxes[r.proc]
            ack = self.machine.access(self.manager_proc, box.ack, AccessKind.READ)
            if ack:
                return "vmm_poll_ack", True
            if self.machine.step_no > r.deadline:
                self._fail(r, SwitchTimeout(
                    f"cpu{r.proc} never acknowledged switch to {r.target}"))
            return "vmm_poll_ack", False
        return run

    def _task_read_prev(self, req: SwitchRequest):
        def run(r: SwitchRequest):
            box = self.ivc.mailboxes[r.proc]
            ctx = self._read_ctx(box.prev)
            self.machine.access(self.manager_proc, box.ack, AccessKind.WRITE, 0)
            self.machine.emit("ivc_read_prev", self.machine.step_no, r.proc,
                              self.running_on.get(r.proc))
            if self.machine.procs[r.proc].crashed:
                # Displaced context was saved intact, but the target never ran.
                self._store_displaced(r, ctx)
                self._fail(r, ProtocolError(f"cpu{r.proc} lost control during restore"))
                return "vmm_read_prev", True
            self._store_displaced(r, ctx)
            if r.finish_after_read_prev:
                self._complete(r)
            return "vmm_read_prev", True
        return run

    def _task_poll_restored(self, req: SwitchRequest):
        def run(r: SwitchRequest):
            if r.deadline == 0:
                r.deadline = self.machine.step_no + self.timeout
            st = self.machine.procs[r.proc]
            if st.crashed:
                self._fail(r, ProtocolError(f"cpu{r.proc} lost control during restore"))
                return "vmm_poll_restore", True
            box = self.ivc.mailboxes[r.proc]
            flag = self.machine.access(self.manager_proc, box.flag, AccessKind.READ)
            outside = True
            if self.switch_window is not None:
                wbase, wlen = self.switch_window
                outside = not (wbase <= st.pc < wbase + wlen)
            if flag == 0 and st.run_state is RunState.RUNNING and outside:
                self._complete(r)
                return "vmm_poll_restore", True
            if self.machine.step_no > r.deadline:
                self._fail(r, SwitchTimeout(f"cpu{r.proc} never entered {r.target}"))
            return "vmm_poll_restore", False
        return run

    # --- completion ---------------------------------------------------------------

    def _store_displaced(self, req: SwitchRequest, ctx: DomainContext) -> None:
        displaced = self.running_on.get(req.proc)
        req.result = ctx
        req.displaced = displaced
        if displaced is not None and displaced in self.store:
            rec = self.store.get(displaced)
            rec.context = ctx
            rec.running_on = None

    def _complete(self, req: SwitchRequest) -> None:
        if req.target is not None:
            rec = self.store.get(req.target)
            rec.running_on = req.proc
            self.running_on[req.proc] = req.target
        else:
            self.running_on.pop(req.proc, None)
        req.done = True
        self.machine.emit("switch", req.proc, req.displaced, req.target,
                          self.machine.step_no - req.started_step)
        if req.on_done is not None:
            req.on_done(self, req)

    def _fail(self, req: SwitchRequest, error: Exception,
              restore_matrix: bool = False) -> None:
        if req.matrix_snapshot is not None and (restore_matrix
                                                or isinstance(error, SwitchTimeout)):
            self.matrix.restore(req.matrix_snapshot)
        req.error = error
        req.done = True
        req.tasks.clear()
        self.machine.emit("switch_failed", self.machine.step_no, req.proc,
                          req.target, type(error).__name__)
