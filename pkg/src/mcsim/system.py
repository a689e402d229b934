"""Platform builders: wire the machine, firewall, VMMs, and workloads.

Two builders cover the scenario families:

  Platform          partitioning/virtualization scenarios: domains with
                    firewall policies, per-domain page tables and programs,
                    the shared switch-code window, master VMM and the
                    dynamic-partitioning context manager.

  IpcPlatform       middleware scenarios: per-processor schedulers hosting
                    simulated processes over a shared IPC region, with the
                    wake-up helper process on every processor, optionally
                    the socket layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa
from .bmu import DomainPolicy, compile_policy, RangeEntry
from .dynpart import DynPart, SwitchCodeLayout, install_switch_code
from .errors import ConfigError, UnknownDomain
from .ipc import IpcEngine, IpcRegion, DEFAULT_REGION_SIZE
from .machine import (AccessKind, Machine, MachineConfig, PageTable, RunState,
                      zero_context)
from .procs import LocalSched, Process
from .uds import UdsLayer
from .virt import MasterVmm

WORK_STEPS = 8          # one work unit per this many machine steps


@dataclass
class DomainSpec:
    name: str
    kind: str = "open"              # base|operator|manufacturer|trusted|untrusted|open
    policy: dict[str, str] = field(default_factory=dict)
    owns: list[str] = field(default_factory=list)
    program: list[str] | None = None
    placed_on: int | None = None


@dataclass
class PlatformSpec:
    processors: int = 4
    ram_size: int = 16 * 1024 * 1024
    page_size: int = 4096
    seed: int = 0
    regions: dict[str, tuple[int, int]] = field(default_factory=dict)
    domains: list[DomainSpec] = field(default_factory=list)
    work_steps: int = WORK_STEPS
    switch_timeout: int = 10_000
    layout: SwitchCodeLayout = field(default_factory=SwitchCodeLayout)
    skip_install_for: list[str] = field(default_factory=list)   # hazard scenarios


def worker_program(counter: int, work_steps: int, base_vaddr: int,
                   hotadd_done: int | None = None, name: str = "worker") -> isa.Program:
    """K-step work loop; optionally with the hot-add entry used after merge."""
    lines = ["idle:"]
    lines += ["nop"] * max(0, work_steps - 2)
    lines += [f"count {counter}", "branch idle"]
    if hotadd_done is not None:
        lines += [
            "hotadd:",
            "setcoh 1",
            "irqdist 1",
            f"writei {hotadd_done} 1",
            "branch idle",
        ]
    return isa.assemble(lines, base_vaddr, name=name)


class Platform:
    """A built partitioning platform, ready to run scenarios."""

    def __init__(self, spec: PlatformSpec):
        self.spec = spec
        base_domains = [d for d in spec.domains if d.kind == "base"]
        if len(base_domains) != 1:
            raise ConfigError("exactly one base domain required")
        self.base_spec = base_domains[0]
        self.open_specs = [d for d in spec.domains if d.kind != "base"]

        layout = spec.layout
        slaves = [("switch_text", layout.common_text),
                  ("switch_data", layout.common_data)]
        self.machine = Machine(MachineConfig(
            processor_count=spec.processors, ram_size=spec.ram_size,
            page_size=spec.page_size, slaves=slaves, rng_seed=spec.seed))
        m = self.machine

        # Page tables: the base table sees all RAM; each open domain sees
        # only the regions it owns.
        self.base_table = PageTable(spec.page_size)
        self.base_table.map(0, 0, spec.ram_size)
        self.base_table_id = m.add_table(self.base_table, 1)
        self.tables: dict[str, int] = {self.base_spec.name: self.base_table_id}
        install_tables = {self.base_table_id: self.base_table}
        for i, d in enumerate(self.open_specs):
            table = PageTable(spec.page_size)
            for region in d.owns:
                base, length = spec.regions[region]
                table.map(base, base, length)
            tid = m.add_table(table, 2 + i)
            self.tables[d.name] = tid
            if d.name not in spec.skip_install_for:
                install_tables[tid] = table

        self.switch_code = install_switch_code(m, layout, install_tables)

        # Firewall: base processors control; open processors carry policy
        # entries plus the standing switch-window protections.
        self.policy = DomainPolicy(dict(spec.regions),
                                   {d.name: dict(d.policy) for d in spec.domains},
                                   base_domain=self.base_spec.name)
        placed = {d.placed_on: d.name for d in self.open_specs
                  if d.placed_on is not None}
        assignment = {p: placed.get(p, self.base_spec.name)
                      for p in range(spec.processors)}
        self.matrix = compile_policy(self.policy, assignment)
        m.matrix = self.matrix
        self.base_procs = {p for p, name in assignment.items()
                           if name == self.base_spec.name}

        self.master = MasterVmm(m, self.matrix, self.policy, self.switch_code.ivc,
                                manager_proc=min(self.base_procs),
                                timeout=spec.switch_timeout)
        self.master.standing_entries = self._standing_entries
        self.master.switch_window = layout.window
        self.master.open_procs = set(placed)

        # Counters and programs.
        self.counters: dict[str, int] = {self.base_spec.name: 0}
        for i, d in enumerate(self.open_specs):
            self.counters[d.name] = i + 1
        self.symbols = self._build_symbols()

        self.hotadd_labels: dict[int, int] = {}
        self.base_code: dict[int, isa.Program] = {}
        base_region = spec.regions[self.base_spec.owns[0]]
        for p in range(spec.processors):
            base_vaddr = base_region[0] + p * 0x400
            prog = worker_program(self.counters[self.base_spec.name], spec.work_steps,
                                  base_vaddr,
                                  hotadd_done=self.switch_code.ivc.mailboxes[p].hotadd_done,
                                  name=f"base_os_cpu{p}")
            m.load_words(base_vaddr, prog.words)
            self.base_code[p] = prog
            self.hotadd_labels[p] = prog.label("hotadd")

        self.guest_programs: dict[str, isa.Program] = {}
        for d in self.open_specs:
            self.guest_programs[d.name] = self._load_guest(d)

        self.dynpart = DynPart(
            m, self.master, self.switch_code, members=set(self.base_procs),
            base_regions=[spec.regions[r] for r in self.base_spec.owns],
            hotadd_labels=self.hotadd_labels, counters=self.counters)

        # Start the base domain everywhere, then place the open domains.
        for p in range(spec.processors):
            st = m.procs[p]
            st.system_regs["ptb"] = self.base_table_id
            st.system_regs["coherence"] = 1
            st.pc = self.base_code[p].label("idle")
            st.run_state = RunState.RUNNING
        m.procs[self.master.manager_proc].driver = self.master
        for d in self.open_specs:
            ctx = zero_context(pc=self._entry(d), ptb=self.tables[d.name])
            self.master.set_context(d.name, ctx, policy_domain=d.name)
        for d in self.open_specs:
            if d.placed_on is not None:
                self.master.activate_initial(d.name, d.placed_on)
                m.procs[d.placed_on].system_regs["coherence"] = 0

    # --- helpers ---------------------------------------------------------------

    def _build_symbols(self) -> dict[str, int]:
        symbols: dict[str, int] = {}
        for name, (base, length) in self.spec.regions.items():
            symbols[name] = base
            symbols[f"{name}_len"] = length
        for domain, ctr in self.counters.items():
            symbols[f"ctr_{domain}"] = ctr
        layout = self.spec.layout
        symbols["switch_text"] = layout.text_vbase
        symbols["switch_data"] = layout.data_vbase
        symbols["switch_text_phys"] = layout.common_text[0]
        return symbols

    def _entry(self, d: DomainSpec) -> int:
        prog = self.guest_programs[d.name]
        return prog.labels.get("entry", prog.base_vaddr)

    def _load_guest(self, d: DomainSpec) -> isa.Program:
        base, _ = self.spec.regions[d.owns[0]]
        if d.program is not None:
            prog = isa.assemble(d.program, base, name=f"{d.name}_main",
                                symbols=self.symbols)
        else:
            prog = worker_program(self.counters[d.name], self.spec.work_steps,
                                  base, name=f"{d.name}_main")
        self.machine.load_words(base, prog.words)
        return prog

    def _standing_entries(self, proc: int) -> list[RangeEntry]:
        """Switch-window protections for an open-domain processor.

        The switch code text is execute-only; of the data window the
        processor may touch only its own mailbox slice, which keeps the
        other mailboxes, the base context buffers, and the transition token
        out of reach.
        """
        layout = self.spec.layout
        text_base, text_len = layout.common_text
        data_base, data_len = layout.common_data
        box = self.switch_code.ivc.mailboxes[proc]
        slice_lo = layout.data_phys(box.slice_base)
        slice_hi = slice_lo + box.slice_len
        rw = frozenset({AccessKind.READ, AccessKind.WRITE})
        entries = [RangeEntry((text_base, text_len), rw)]
        if slice_lo > data_base:
            entries.append(RangeEntry((data_base, slice_lo - data_base), rw))
        if slice_hi < data_base + data_len:
            entries.append(RangeEntry((slice_hi, data_base + data_len - slice_hi), rw))
        return entries

    # --- scenario verbs -------------------------------------------------------------

    def switch(self, domain: str, proc: int):
        return self.master.switch_domain(domain, proc)

    def separate(self, proc: int, domain: str) -> None:
        self.dynpart.separate(proc, domain)

    def merge(self, proc: int) -> None:
        self.dynpart.merge(proc)

    def probe(self, window: int) -> dict[str, int]:
        return self.dynpart.throughput_probe(window)

    def reboot_domain(self, domain: str) -> None:
        """Reset the processor running a crashed domain and restore it pristine."""
        rec = self.master.store.get(domain)
        proc = rec.running_on
        if proc is None:
            raise UnknownDomain(f"{domain} is not placed on any processor")
        spec = next(d for d in self.open_specs if d.name == domain)
        self.machine.reset_processor(proc)
        self.guest_programs[domain] = self._load_guest(spec)
        ctx = zero_context(pc=self._entry(spec), ptb=self.tables[domain])
        rec.context = ctx
        rec.running_on = None
        self.master.running_on.pop(proc, None)
        self.master.activate_initial(domain, proc)
        self.machine.emit("reboot", self.machine.step_no, domain, proc)

    def run(self, steps: int) -> None:
        self.machine.run(steps)


# --- middleware platform ------------------------------------------------------------


class IpcPlatform:
    """Processors hosting simulated processes over one shared IPC region."""

    def __init__(self, nprocs: int = 3, ram_size: int = 4 * 1024 * 1024,
                 region_base: int = 0x0010_0000, region_size: int = DEFAULT_REGION_SIZE,
                 seed: int = 0, with_uds: bool = False):
        self.machine = Machine(MachineConfig(
            processor_count=nprocs, ram_size=ram_size, rng_seed=seed))
        m = self.machine
        self.scheds: dict[int, LocalSched] = {}
        for p in range(nprocs):
            table = PageTable(m.config.page_size)
            table.map(0, 0, ram_size)
            tid = m.add_table(table, p + 1)
            st = m.procs[p]
            st.system_regs["ptb"] = tid
            st.run_state = RunState.RUNNING
            sched = LocalSched(m, p)
            st.driver = sched
            self.scheds[p] = sched
        self.region = IpcRegion(m, region_base, region_size)
        self.engine = IpcEngine(m, self.region, self.scheds)
        self._next_pid = 100
        self.uds: UdsLayer | None = None
        if with_uds:
            self.uds = UdsLayer(m, self.scheds, self.alloc_pid)
        for p in range(nprocs):
            self.scheds[p].spawn(self.alloc_pid(), [("mu_loop",)],
                                 name=f"mu_ipc{p}", kind="mu_ipc")

    def alloc_pid(self) -> int:
        pid = self._next_pid
        self._next_pid += 1
        return pid

    def spawn(self, proc: int, program: list[tuple], name: str = "",
              gated: bool = False) -> Process:
        p = self.scheds[proc].spawn(self.alloc_pid(), program, name=name)
        if gated:
            p.credit = 0
        if self.uds is not None:
            self.uds.register_process(p)
        return p

    def run_until_idle(self, max_steps: int = 50_000) -> int:
        """Run until the platform quiesces (every processor parked)."""
        res = self.machine.run_until(lambda m, r: r.op == "idle", max_steps)
        return res.steps

    def run_until_done(self, processes: list[Process], max_steps: int = 100_000) -> None:
        self.machine.run_until(
            lambda m, r: all(p.state == "done" for p in processes), max_steps)
