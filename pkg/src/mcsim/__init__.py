"""Deterministic simulator of a securely partitioned multi-core platform.

Subsystems:
  machine   simulated processors, RAM, page tables, IPIs, step scheduler
  bmu       bus management unit (firewall matrix and policy compiler)
  virt      asymmetric virtualization (master/slave context switching)
  dynpart   dynamic processor lending between the base and open domains
  ipc       System V style user-level IPC over shared RAM
  uds       cross-processor Unix domain socket extension
  harness   scenario runner, attack suite, benchmarks, CLI
"""

from .errors import SimError
from .machine import (AccessKind, BusAccess, DomainContext, Machine,
                      MachineConfig, PageTable, RunState, build)
from .bmu import AccessMatrix, DomainPolicy, RangeEntry, compile_policy

__all__ = [
    "SimError", "AccessKind", "BusAccess", "DomainContext", "Machine",
    "MachineConfig", "PageTable", "RunState", "build",
    "AccessMatrix", "DomainPolicy", "RangeEntry", "compile_policy",
]
