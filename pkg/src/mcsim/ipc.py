"""System V style user-level IPC over shared RAM.

The library keeps every object in one shared region: a swap-based lock
word, per-processor control-message list heads, and a buddy-allocated
arena holding semaphores, message queues, shared-memory segments, and the
control-message nodes themselves. Cross-processor wake-ups append a
control message carrying the sleeping process id and ring the target's
wake-up helper process with an IPI only when the list was empty, so
interrupts never pile up.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import NotAttached, OutOfMemory, UnknownId, UnknownKey
from .machine import AccessKind, Machine
from .procs import LocalSched, Process
from .virt import VEC_WAKE

MIN_BLOCK = 32
DEFAULT_REGION_SIZE = 1 << 20
DEFAULT_MSGQ_CAPACITY = 64 * 1024


class BuddyAllocator:
    """Power-of-two allocator with recursive buddy coalescing."""

    def __init__(self, size: int, min_block: int = MIN_BLOCK):
        if size <= 0 or size & (size - 1):
            raise ValueError("arena size must be a power of two")
        if min_block & (min_block - 1):
            raise ValueError("min_block must be a power of two")
        self.size = size
        self.min_block = min_block
        self._min_order = min_block.bit_length() - 1
        self._max_order = size.bit_length() - 1
        self.free_lists: dict[int, list[int]] = {o: [] for o in
                                                 range(self._min_order, self._max_order + 1)}
        self.free_lists[self._max_order].append(0)
        self.allocations: dict[int, int] = {}   # offset -> order

    def _order_for(self, size: int) -> int:
        size = max(size, self.min_block)
        return max((size - 1).bit_length(), self._min_order)

    def alloc(self, size: int) -> int:
        """Return the offset of a block of power-of-two size >= size."""
        if size <= 0:
            raise ValueError("allocation size must be positive")
        order = self._order_for(size)
        if order > self._max_order:
            raise OutOfMemory(f"request {size} exceeds arena {self.size}")
        cur = order
        while cur <= self._max_order and not self.free_lists[cur]:
            cur += 1
        if cur > self._max_order:
            raise OutOfMemory(f"no free block for {size} bytes")
        while cur > order:
            block = self.free_lists[cur].pop(0)
            cur -= 1
            self.free_lists[cur].append(block)
            self.free_lists[cur].append(block + (1 << cur))
        block = self.free_lists[order].pop(0)
        self.allocations[block] = order
        return block

    def free(self, offset: int) -> None:
        order = self.allocations.pop(offset, None)
        if order is None:
            raise ValueError(f"offset {offset} is not allocated")
        while order < self._max_order:
            buddy = offset ^ (1 << order)
            if buddy in self.free_lists[order]:
                self.free_lists[order].remove(buddy)
                offset = min(offset, buddy)
                order += 1
            else:
                break
        self.free_lists[order].append(offset)

    def block_size(self, offset: int) -> int:
        return 1 << self.allocations[offset]

    def live_blocks(self) -> list[tuple[int, int]]:
        return sorted((off, 1 << order) for off, order in self.allocations.items())

    def is_pristine(self) -> bool:
        """True when everything was freed and coalesced back to one block."""
        if self.allocations:
            return False
        for order, blocks in self.free_lists.items():
            if order == self._max_order:
                if blocks != [0]:
                    return False
            elif blocks:
                return False
        return True


class IpcRegion:
    """Shared-RAM layout: lock word, control list heads, buddy arena.

    The region must be identity mapped (virtual == physical) in every
    participating page table so that one offset names the same storage to
    all processors.
    """

    def __init__(self, machine: Machine, base: int, size: int = DEFAULT_REGION_SIZE,
                 min_block: int = MIN_BLOCK):
        page = machine.config.page_size
        self.machine = machine
        self.base = base
        self.size = size
        self.lock_vaddr = base
        self.nprocs = len(machine.procs)
        self.arena_base = base + page
        arena_limit = size - page
        self.arena_size = 1 << (arena_limit.bit_length() - 1)
        self.buddy = BuddyAllocator(self.arena_size, min_block)
        self.holder: tuple[int, int] | None = None

    def ctrl_head_vaddr(self, proc: int) -> int:
        return self.base + 4 + 4 * proc

    def offset_vaddr(self, region_offset: int) -> int:
        return self.base + region_offset

    def arena_offset_to_region(self, arena_offset: int) -> int:
        return (self.arena_base - self.base) + arena_offset

    # Direct lock helpers for host-level tests; simulated processes spin
    # through their verb state machines instead.
    def try_lock(self, proc: int) -> bool:
        old = self.machine.atomic_swap(proc, self.lock_vaddr, 1)
        if old == 0:
            self.holder = (proc, -1)
            return True
        return False

    def unlock(self, proc: int) -> None:
        if self.holder is None or self.holder[0] != proc:
            self.machine.emit("ipc_protocol_violation", self.machine.step_no,
                              proc, "unlock_without_lock")
        self.holder = None
        self.machine.access(proc, self.lock_vaddr, AccessKind.WRITE, 0)


@dataclass
class Semaphore:
    key: str
    offset: int
    count: int = 0
    waiters: deque = field(default_factory=deque)   # (proc, pid) FIFO


@dataclass
class MessageQueue:
    key: str
    offset: int
    capacity: int = DEFAULT_MSGQ_CAPACITY
    messages: deque = field(default_factory=deque)  # (type, bytes)
    bytes_used: int = 0
    recv_waiters: deque = field(default_factory=deque)
    send_waiters: deque = field(default_factory=deque)  # (proc, pid, type, bytes)


@dataclass
class ShmSegment:
    key: str
    offset: int
    size: int


class IpcEngine:
    """Object semantics executed under the region lock.

    Bodies run inside a simulated process's locked step and return
    ('done', value), ('blocked', None), or ('error', name). Wakes of local
    processes go straight to the scheduler; remote wakes append a control
    message and ring the wake-up doorbell only when the list was empty.
    """

    def __init__(self, machine: Machine, region: IpcRegion,
                 scheds: dict[int, LocalSched]):
        self.machine = machine
        self.region = region
        self.scheds = scheds
        self.objects: dict[str, object] = {}        # key -> object
        self.by_id: dict[int, object] = {}          # offset -> object
        self.shm_windows: dict[int, int] = {p: 0x20000000 for p in scheds}
        for sched in scheds.values():
            sched.ipc = self
            machine.set_host_handler(sched.proc, VEC_WAKE, self._wake_doorbell)

    # --- registration ------------------------------------------------------------

    def _register(self, key: str, obj) -> None:
        self.objects[key] = obj
        self.by_id[obj.offset] = obj

    def _lookup(self, key_or_id):
        if isinstance(key_or_id, int):
            obj = self.by_id.get(key_or_id)
            if obj is None:
                raise UnknownId(str(key_or_id))
            return obj
        obj = self.objects.get(key_or_id)
        if obj is None:
            raise UnknownKey(key_or_id)
        return obj

    # --- verb bodies ---------------------------------------------------------------

    def body(self, p: Process, verb: tuple):
        name = verb[0]
        try:
            if name == "semget":
                key = verb[1]
                if key not in self.objects:
                    self._register(key, Semaphore(key, self.region.buddy.alloc(MIN_BLOCK)))
                return ("done", self.objects[key].offset)
            if name == "semop":
                return self._semop(p, verb[1], verb[2])
            if name == "msgget":
                key = verb[1]
                if key not in self.objects:
                    cap = verb[2] if len(verb) > 2 else DEFAULT_MSGQ_CAPACITY
                    self._register(key, MessageQueue(key, self.region.buddy.alloc(MIN_BLOCK),
                                                     capacity=cap))
                return ("done", self.objects[key].offset)
            if name == "msgsnd":
                typ = verb[3] if len(verb) > 3 else 0
                nowait = len(verb) > 4 and bool(verb[4])
                return self._msgsnd(p, verb[1], bytes(verb[2]), typ, nowait)
            if name == "msgrcv":
                return self._msgrcv(p, verb[1])
            if name == "shmget":
                return self._shmget(verb[1], verb[2])
            if name == "shmat":
                return self._shmat(p, verb[1])
            if name == "shmdt":
                return self._shmdt(p, verb[1])
        except (UnknownId, UnknownKey, OutOfMemory, NotAttached) as exc:
            return ("error", type(exc).__name__)
        raise ValueError(f"unknown ipc verb {name!r}")

    def _semop(self, p: Process, key, delta: int):
        sem: Semaphore = self._lookup(key)
        if delta > 0:
            if sem.waiters:
                wproc, wpid = sem.waiters.popleft()
                self._wake(p, wproc, wpid, result="ok")
            else:
                sem.count += 1
            return ("done", sem.count)
        if sem.count > 0:
            sem.count -= 1
            return ("done", sem.count)
        sem.waiters.append((p.proc, p.pid))
        return ("blocked", None)

    def _msgsnd(self, p: Process, key, payload: bytes, typ: int, nowait: bool):
        q: MessageQueue = self._lookup(key)
        if q.recv_waiters:
            wproc, wpid = q.recv_waiters.popleft()
            self._wake(p, wproc, wpid, result=(typ, payload))
            return ("done", len(payload))
        if q.bytes_used + len(payload) <= q.capacity:
            q.messages.append((typ, payload))
            q.bytes_used += len(payload)
            return ("done", len(payload))
        if nowait:
            return ("error", "QueueFull")
        q.send_waiters.append((p.proc, p.pid, typ, payload))
        return ("blocked", None)

    def _msgrcv(self, p: Process, key):
        q: MessageQueue = self._lookup(key)
        if q.messages:
            typ, payload = q.messages.popleft()
            q.bytes_used -= len(payload)
            while q.send_waiters and \
                    q.bytes_used + len(q.send_waiters[0][3]) <= q.capacity:
                sproc, spid, styp, sdata = q.send_waiters.popleft()
                q.messages.append((styp, sdata))
                q.bytes_used += len(sdata)
                self._wake(p, sproc, spid, result=len(sdata))
            return ("done", (typ, payload))
        q.recv_waiters.append((p.proc, p.pid))
        return ("blocked", None)

    def _shmget(self, key, size: int):
        if key not in self.objects:
            page = self.machine.config.page_size
            offset = self.region.buddy.alloc(max(size, page))
            self._register(key, ShmSegment(key, offset, size))
        return ("done", self.objects[key].offset)

    def _shmat(self, p: Process, key):
        seg: ShmSegment = self._lookup(key)
        page = self.machine.config.page_size
        span = -(-seg.size // page) * page
        table = self.machine.tables[self.machine.procs[p.proc].system_regs["ptb"]]
        vaddr = self.shm_windows[p.proc]
        self.shm_windows[p.proc] = vaddr + span
        phys = self.region.arena_base + seg.offset
        table.map(vaddr, phys, span)
        p.attachments[key] = vaddr
        return ("done", vaddr)

    def _shmdt(self, p: Process, key):
        vaddr = p.attachments.pop(key, None)
        if vaddr is None:
            raise NotAttached(str(key))
        table = self.machine.tables[self.machine.procs[p.proc].system_regs["ptb"]]
        table.unmap(vaddr)
        return ("done", None)

    # --- wake paths ---------------------------------------------------------------

    def _wake(self, caller: Process, wproc: int, wpid: int, result) -> None:
        target = self._find_process(wproc, wpid)
        target.wake_result = result
        if wproc == caller.proc:
            self.scheds[wproc].wake(target)
            self.machine.emit("ipc_wake_local", self.machine.step_no, wproc, wpid)
        else:
            self.post_wakeup(caller.proc, wproc, wpid)

    def post_wakeup(self, caller_proc: int, target_proc: int, pid: int) -> None:
        """Append a control message; ring the doorbell only if the list was empty.

        Caller must hold the region lock.
        """
        m = self.machine
        region = self.region
        node_arena = region.buddy.alloc(8)
        node_off = region.arena_offset_to_region(node_arena)
        node_vaddr = region.base + node_off
        m.access(caller_proc, node_vaddr, AccessKind.WRITE, pid)
        m.access(caller_proc, node_vaddr + 4, AccessKind.WRITE, 0)
        head_vaddr = region.ctrl_head_vaddr(target_proc)
        head = m.access(caller_proc, head_vaddr, AccessKind.READ)
        if head == 0:
            m.access(caller_proc, head_vaddr, AccessKind.WRITE, node_off)
            m.post_ipi(caller_proc, target_proc, VEC_WAKE)
            m.emit("ctrl_msg", m.step_no, target_proc, pid, "head_with_ipi")
        else:
            cur = head
            while True:
                nxt = m.access(caller_proc, region.base + cur + 4, AccessKind.READ)
                if nxt == 0:
                    break
                cur = nxt
            m.access(caller_proc, region.base + cur + 4, AccessKind.WRITE, node_off)
            m.emit("ctrl_msg", m.step_no, target_proc, pid, "linked_no_ipi")

    def free_ctrl_node(self, region_offset: int) -> None:
        self.region.buddy.free(region_offset - (self.region.arena_base - self.region.base))

    def wake_local(self, proc: int, pid: int) -> None:
        target = self._find_process(proc, pid)
        self.scheds[proc].wake(target)

    def _find_process(self, proc: int, pid: int) -> Process:
        for p in self.scheds[proc].processes:
            if p.pid == pid:
                return p
        raise UnknownId(f"pid {pid} on cpu{proc}")

    def _wake_doorbell(self, machine: Machine, pid: int, vector: int) -> None:
        sched = self.scheds[pid]
        if sched.mu_process is not None:
            sched.wake(sched.mu_process)
