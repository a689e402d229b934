"""Cross-processor Unix domain socket extension.

Socket paths form one namespace across all processors. Binding a path
broadcasts to the socket helper process on every other processor, each of
which stands up a proxy endpoint with a communication worker; the local
bind completes only after every peer acknowledged, so a remote client
never sends into a missing proxy. Remote datagrams hop client -> local
proxy worker -> a System V message queue -> the owner-side receiver ->
the server's socket, preserving per-sender order; local datagrams go
straight to the socket. Closing drains in-flight fragments, destroys the
workers and the forwarding queue, then releases the path.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .errors import AlreadyBound, NotBound, NotOwner
from .machine import Machine
from .procs import LocalSched, Process


def queue_key(path: str) -> str:
    return f"__uds__:{path}"


@dataclass
class ProxyEndpoint:
    path: str
    owner_proc: int
    worker: Process


@dataclass
class Binding:
    path: str
    owner_proc: int
    owner_pid: int
    sid: int
    deliveries: deque = field(default_factory=deque)    # (sender_pid, bytes)
    recv_waiters: deque = field(default_factory=deque)  # Process
    proxies: dict[int, ProxyEndpoint] = field(default_factory=dict)
    receiver: Process | None = None
    bind_acks: int = 0
    close_acks: int = 0
    state: str = "binding"          # binding | live | closing


class UdsLayer:
    """Socket namespace, proxy bookkeeping, and the socket verb machines."""

    def __init__(self, machine: Machine, scheds: dict[int, LocalSched],
                 alloc_pid: Callable[[], int]):
        self.machine = machine
        self.scheds = scheds
        self.alloc_pid = alloc_pid
        self.bindings: dict[str, Binding] = {}
        self.controllers: dict[int, Process] = {}
        self.pid_proc: dict[int, int] = {}
        self.next_sid = 1
        for proc, sched in scheds.items():
            sched.uds = self
            ctrl = sched.spawn(alloc_pid(), [("uds_ctrl",)], name=f"uds_ctrl{proc}",
                               kind="uds_ctrl")
            self.controllers[proc] = ctrl
            self.pid_proc[ctrl.pid] = proc

    def register_process(self, p: Process) -> None:
        self.pid_proc[p.pid] = p.proc

    # --- verb dispatch ------------------------------------------------------------

    def advance(self, sched: LocalSched, p: Process, verb: tuple) -> str:
        name = verb[0]
        if name == "uds_bind":
            return self._step_bind(sched, p, verb[1])
        if name == "uds_send":
            return self._step_send(sched, p, verb)
        if name == "uds_recv":
            return self._step_recv(sched, p, verb[1])
        if name == "uds_close":
            return self._step_close(sched, p, verb[1])
        if name == "uds_ctrl":
            return self._step_controller(sched, p)
        if name == "uds_deliver":
            return self._step_deliver(sched, p, verb[1])
        raise ValueError(f"unknown socket verb {name!r}")

    # --- bind ----------------------------------------------------------------------

    def _step_bind(self, sched: LocalSched, p: Process, path: str) -> str:
        if p.phase == "start":
            if path in self.bindings:
                p.finish_verb(("error", "AlreadyBound"))
                return "uds_bind"
            binding = Binding(path, p.proc, p.pid, self.next_sid)
            self.next_sid += 1
            self.bindings[path] = binding
            p.phase = "notify"
            return "uds_bind"
        if p.phase == "notify":
            for proc, ctrl in self.controllers.items():
                if proc != p.proc:
                    ctrl.inbox.append(("bind", path))
                    self.scheds[proc].wake(ctrl)
            p.phase = "wait_acks"
            return "uds_bind_notify"
        binding = self.bindings[path]
        peers = len(self.controllers) - 1
        if binding.bind_acks >= peers:
            self._spawn_receiver(binding)
            binding.state = "live"
            self.machine.emit("uds_bound", self.machine.step_no, path, p.proc)
            p.finish_verb(binding.sid)
        return "uds_bind_wait"

    def _spawn_receiver(self, binding: Binding) -> None:
        if len(self.controllers) <= 1:
            return
        sched = self.scheds[binding.owner_proc]
        qk = queue_key(binding.path)
        program = [("msgget", qk), ("msgrcv", qk), ("uds_deliver", binding.path)]
        recv = sched.spawn(self.alloc_pid(), program,
                           name=f"uds_recv:{binding.path}", kind="uds_worker")
        self.pid_proc[recv.pid] = binding.owner_proc
        binding.receiver = recv

    # --- data transfer ----------------------------------------------------------------

    def _step_send(self, sched: LocalSched, p: Process, verb: tuple) -> str:
        path, payload = verb[1], verb[2]
        frag_size = verb[3] if len(verb) > 3 else len(payload)
        if p.phase == "start":
            binding = self.bindings.get(path)
            if binding is None or binding.state != "live":
                p.finish_verb(("error", "NotBound"))
                return "uds_send"
            if not payload:
                p.finish_verb(("error", "EmptyPayload"))
                return "uds_send"
            frags = [bytes(payload[i:i + frag_size])
                     for i in range(0, len(payload), frag_size)]
            p.stash = (binding, frags, 0)
            p.phase = "frags"
            return "uds_send"
        binding, frags, i = p.stash
        frag = frags[i]
        if binding.owner_proc == p.proc:
            self._deliver(binding, p.pid, frag, hop="local", src_proc=p.proc)
        else:
            proxy = binding.proxies[p.proc]
            qk = queue_key(path)
            proxy.worker.program.append(("msgsnd", qk, frag, p.pid))
            if proxy.worker.state == "done":
                proxy.worker.state = "ready"
            self.machine.emit("uds_handoff", self.machine.step_no, path, p.proc, len(frag))
        i += 1
        if i >= len(frags):
            p.finish_verb(len(payload))
        else:
            p.stash = (binding, frags, i)
        return "uds_send_frag"

    def _deliver(self, binding: Binding, sender_pid: int, frag: bytes,
                 hop: str, src_proc: int) -> None:
        self.machine.emit("uds", binding.path, src_proc, binding.owner_proc,
                          len(frag), hop)
        if binding.recv_waiters:
            waiter = binding.recv_waiters.popleft()
            waiter.wake_result = (sender_pid, frag)
            self.scheds[binding.owner_proc].wake(waiter)
        else:
            binding.deliveries.append((sender_pid, frag))

    def _step_recv(self, sched: LocalSched, p: Process, path: str) -> str:
        if p.phase == "start":
            binding = self.bindings.get(path)
            if binding is None:
                p.finish_verb(("error", "NotBound"))
                return "uds_recv"
            if binding.deliveries:
                p.finish_verb(binding.deliveries.popleft())
                return "uds_recv"
            binding.recv_waiters.append(p)
            p.state = "blocked"
            p.phase = "resume"
            return "uds_recv_block"
        result = p.wake_result
        p.wake_result = None
        p.finish_verb(result)
        return "uds_recv_resume"

    def _step_deliver(self, sched: LocalSched, p: Process, path: str) -> str:
        binding = self.bindings.get(path)
        typ, frag = p.results[-1][1]
        if binding is not None:
            src_proc = self.pid_proc.get(typ, -1)
            self._deliver(binding, typ, frag, hop="proxy", src_proc=src_proc)
            p.program.extend([("msgrcv", queue_key(path)), ("uds_deliver", path)])
        p.finish_verb(None)
        if p.state == "done" and p.ip < len(p.program):
            p.state = "ready"
        return "uds_deliver"

    # --- close ------------------------------------------------------------------------

    def _step_close(self, sched: LocalSched, p: Process, path: str) -> str:
        binding = self.bindings.get(path)
        if p.phase == "start":
            if binding is None:
                p.finish_verb(("error", "NotBound"))
                return "uds_close"
            if binding.owner_pid != p.pid:
                p.finish_verb(("error", "NotOwner"))
                return "uds_close"
            binding.state = "closing"
            for proc, ctrl in self.controllers.items():
                if proc != p.proc:
                    ctrl.inbox.append(("close", path))
                    self.scheds[proc].wake(ctrl)
            p.phase = "wait_peers"
            return "uds_close_notify"
        if p.phase == "wait_peers":
            if binding.close_acks >= len(self.controllers) - 1:
                p.phase = "wait_drain"
            return "uds_close_wait"
        # Drain: forwarding queue empty and the receiver idle in its next recv.
        if self._drained(binding):
            self._teardown(binding)
            p.finish_verb(None)
            return "uds_closed"
        return "uds_close_drain"

    def _drained(self, binding: Binding) -> bool:
        if len(self.controllers) <= 1 or binding.receiver is None:
            return True
        engine = self.scheds[binding.owner_proc].ipc
        q = engine.objects.get(queue_key(binding.path))
        if q is None:
            return True
        if q.messages or q.send_waiters:
            return False
        recv = binding.receiver
        return any(w[1] == recv.pid for w in q.recv_waiters)

    def _teardown(self, binding: Binding) -> None:
        engine = self.scheds[binding.owner_proc].ipc
        qk = queue_key(binding.path)
        q = engine.objects.get(qk)
        recv = binding.receiver
        if q is not None:
            if recv is not None:
                q.recv_waiters = deque(w for w in q.recv_waiters if w[1] != recv.pid)
            engine.objects.pop(qk, None)
            engine.by_id.pop(q.offset, None)
            engine.region.buddy.free(q.offset)
        if recv is not None:
            recv.state = "done"
            recv.program = recv.program[:recv.ip]
            binding.receiver = None
        del self.bindings[binding.path]
        self.machine.emit("uds_closed", self.machine.step_no, binding.path)

    # --- controller --------------------------------------------------------------------

    def _step_controller(self, sched: LocalSched, p: Process) -> str:
        if not p.inbox:
            p.state = "sleeping"
            return "uds_ctrl_sleep"
        kind, path = p.inbox[0]
        binding = self.bindings.get(path)
        if kind == "bind":
            p.inbox.pop(0)
            worker = sched.spawn(self.alloc_pid(), [], name=f"uds_worker:{path}",
                                 kind="uds_worker")
            worker.state = "done"       # idle until fragments arrive
            self.pid_proc[worker.pid] = p.proc
            if binding is not None:
                binding.proxies[p.proc] = ProxyEndpoint(path, binding.owner_proc, worker)
                binding.bind_acks += 1
            self.machine.emit("uds_proxy_up", self.machine.step_no, path, p.proc)
            return "uds_ctrl_bind"
        # close: wait for the local worker to finish forwarding, then destroy it.
        proxy = binding.proxies.get(p.proc) if binding is not None else None
        if proxy is not None and proxy.worker.ip < len(proxy.worker.program):
            return "uds_ctrl_close_wait"
        p.inbox.pop(0)
        if binding is not None:
            if proxy is not None:
                proxy.worker.state = "done"
                del binding.proxies[p.proc]
            binding.close_acks += 1
        self.machine.emit("uds_proxy_down", self.machine.step_no, path, p.proc)
        return "uds_ctrl_close"
