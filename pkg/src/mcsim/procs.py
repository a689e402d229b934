"""Simulated processes and the per-processor local scheduler.

Each processor participating in the IPC scenarios hosts a small round-robin
scheduler (the OS analog) whose processes execute scripted verb sequences:
compute bursts, System V style IPC calls, socket traffic. Library calls run
inside the simulated processes: lock spins, shared-RAM mutation, and wake
interrupts are all machine steps attributed to the hosting processor.

Blocked processes are parked here and woken either directly (same
processor) or through the wake-up helper process driven by an IPI.
"""

from __future__ import annotations

from typing import Any

from .machine import AccessKind, Machine, RunState


class Process:
    __slots__ = ("pid", "proc", "name", "program", "ip", "state", "phase",
                 "stash", "results", "attachments", "wake_result", "credit",
                 "completed", "kind", "inbox")

    def __init__(self, pid: int, proc: int, program: list[tuple], name: str = "",
                 kind: str = "user"):
        self.pid = pid
        self.proc = proc
        self.name = name or f"p{pid}"
        self.program = list(program)
        self.ip = 0
        self.state = "ready"            # ready | blocked | sleeping | done
        self.phase: Any = None          # current verb's state-machine position
        self.stash: Any = None
        self.results: list[tuple] = []
        self.attachments: dict = {}
        self.wake_result: Any = None
        self.credit: int | None = None  # None: ungated; else verbs allowed to start
        self.completed = 0
        self.kind = kind
        self.inbox: list = []

    def current_verb(self) -> tuple | None:
        if self.ip < len(self.program):
            return self.program[self.ip]
        return None

    def finish_verb(self, result: Any) -> None:
        verb = self.program[self.ip]
        self.results.append((verb[0], result))
        self.ip += 1
        self.phase = None
        self.stash = None
        self.completed += 1
        if self.ip >= len(self.program):
            self.state = "done"


class LocalSched:
    """Round-robin scheduler for the simulated processes of one processor."""

    def __init__(self, machine: Machine, proc: int):
        self.machine = machine
        self.proc = proc
        self.processes: list[Process] = []
        self._rr = 0
        self.ipc = None                 # IpcEngine, set by the platform builder
        self.uds = None                 # UdsLayer, set by the platform builder
        self.mu_process: Process | None = None

    def spawn(self, pid: int, program: list[tuple], name: str = "",
              kind: str = "user") -> Process:
        p = Process(pid, self.proc, program, name, kind)
        self.processes.append(p)
        if kind == "mu_ipc":
            self.mu_process = p
        return p

    def wake(self, p: Process) -> None:
        if p.state in ("blocked", "sleeping"):
            p.state = "ready"
        self.machine.procs[self.proc].run_state = RunState.RUNNING

    def grant(self, p: Process, verbs: int = 1) -> None:
        """Allow a gated process to start this many more verbs."""
        if p.credit is None:
            p.credit = 0
        p.credit += verbs
        self.machine.procs[self.proc].run_state = RunState.RUNNING

    def _runnable(self, p: Process) -> bool:
        if p.state != "ready":
            return False
        if p.ip >= len(p.program):
            p.state = "done"
            return False
        if p.phase is not None:
            return True
        return p.credit is None or p.credit > 0

    # --- driver interface -------------------------------------------------------

    def step(self, machine: Machine, pid: int) -> str:
        n = len(self.processes)
        for i in range(n):
            idx = (self._rr + i) % n
            p = self.processes[idx]
            if self._runnable(p):
                self._rr = (idx + 1) % n
                return self._advance(p)
        machine.procs[self.proc].run_state = RunState.WAITING
        return "os_idle"

    # --- verb state machines ------------------------------------------------------

    _LOCKED_VERBS = frozenset({"semget", "semop", "msgget", "msgsnd", "msgrcv",
                               "shmget", "shmat", "shmdt"})

    def _advance(self, p: Process) -> str:
        verb = p.program[p.ip]
        name = verb[0]
        if p.phase is None:
            if p.credit is not None:
                p.credit -= 1
            p.phase = "start"
        if name == "burn":
            return self._step_burn(p, verb)
        if name in self._LOCKED_VERBS:
            return self._step_ipc(p, verb)
        if name in ("shm_write", "shm_read"):
            return self._step_shm_touch(p, verb)
        if name == "mu_loop":
            return self._step_mu_loop(p)
        if name.startswith("uds_"):
            return self.uds.advance(self, p, verb)
        raise ValueError(f"unknown process verb {name!r}")

    def _step_burn(self, p: Process, verb: tuple) -> str:
        if p.phase == "start":
            p.phase = verb[1]
        p.phase -= 1
        if p.phase <= 0:
            p.finish_verb(None)
        return "burn"

    def _step_ipc(self, p: Process, verb: tuple) -> str:
        engine = self.ipc
        if p.phase == "start":
            p.phase = "lock"
        if p.phase == "lock":
            old = self.machine.atomic_swap(self.proc, engine.region.lock_vaddr, 1)
            if old == 0:
                engine.region.holder = (self.proc, p.pid)
                p.phase = "body"
            return "ipc_lock"
        if p.phase == "body":
            outcome = engine.body(p, verb)
            if outcome[0] == "blocked":
                # Enqueued as a waiter: release the lock and park in one step.
                engine.region.holder = None
                self.machine.access(self.proc, engine.region.lock_vaddr,
                                    AccessKind.WRITE, 0)
                p.state = "blocked"
                p.phase = "resume"
                return "ipc_block"
            p.stash = outcome[1]
            p.phase = "unlock"
            return "ipc_body"
        if p.phase == "unlock":
            engine.region.holder = None
            self.machine.access(self.proc, engine.region.lock_vaddr, AccessKind.WRITE, 0)
            p.finish_verb(p.stash)
            return "ipc_unlock"
        if p.phase == "resume":
            # Woken: the waker already applied the operation's effect.
            p.finish_verb(p.wake_result)
            p.wake_result = None
            return "ipc_resume"
        raise AssertionError(f"bad ipc phase {p.phase}")

    def _step_shm_touch(self, p: Process, verb: tuple) -> str:
        name, key, off = verb[0], verb[1], verb[2]
        vaddr = p.attachments.get(key)
        if vaddr is None:
            p.finish_verb(("error", "NotAttached"))
            return "shm_touch"
        if name == "shm_write":
            self.machine.access(self.proc, vaddr + off, AccessKind.WRITE, verb[3])
            p.finish_verb(None)
        else:
            word = self.machine.access(self.proc, vaddr + off, AccessKind.READ)
            p.finish_verb(word)
        return "shm_touch"

    def _step_mu_loop(self, p: Process) -> str:
        engine = self.ipc
        head_vaddr = engine.region.ctrl_head_vaddr(self.proc)
        if p.phase in ("start", "check"):
            head = self.machine.access(self.proc, head_vaddr, AccessKind.READ)
            if head == 0:
                p.state = "sleeping"
                p.phase = "check"
                return "mu_sleep"
            p.phase = "detach"
            return "mu_check"
        if p.phase == "detach":
            old = self.machine.atomic_swap(self.proc, head_vaddr, 0)
            if old == 0:
                p.phase = "check"
                return "mu_detach"
            p.stash = old
            p.phase = "drain"
            return "mu_detach"
        if p.phase == "drain":
            offset = p.stash
            node_vaddr = engine.region.base + offset
            pid = self.machine.access(self.proc, node_vaddr, AccessKind.READ)
            nxt = self.machine.access(self.proc, node_vaddr + 4, AccessKind.READ)
            engine.free_ctrl_node(offset)
            engine.wake_local(self.proc, pid)
            p.stash = nxt
            if nxt == 0:
                p.phase = "check"
            return "mu_wake"
        raise AssertionError(f"bad mu phase {p.phase}")
