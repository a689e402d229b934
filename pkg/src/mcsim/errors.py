"""Exception hierarchy shared by all simulator modules.

Machine-level faults (bus errors, page faults, lost control flow) derive
from MachineFault and are caught by the step loop, which records them in
the run's fault log instead of propagating. Everything else is a plain
usage or configuration error raised to the caller.
"""

from __future__ import annotations


class SimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimError):
    """Invalid machine or scenario configuration."""


# --- machine faults -------------------------------------------------------

class MachineFault(SimError):
    """A fault raised by simulated hardware during a machine step.

    Carries the address that triggered it. The step loop converts these
    into fault records; host-level callers may also catch them directly.
    """

    kind = "fault"

    def __init__(self, addr: int, detail: str = ""):
        self.addr = addr
        self.detail = detail
        super().__init__(f"{self.kind} at 0x{addr:08x}" + (f" ({detail})" if detail else ""))


class BusError(MachineFault):
    """Access blocked on the system bus (firewall denial or unbacked address)."""

    kind = "bus_error"


class PageFault(MachineFault):
    """Data access to a virtual address with no mapping in the active table."""

    kind = "page_fault"


class UnexpectedFlow(MachineFault):
    """Instruction fetch left the valid instruction stream.

    Raised when the fetched word does not decode to an instruction, or when
    the fetch address has no mapping under the active page table.
    """

    kind = "unexpected_flow"


# --- bus management unit --------------------------------------------------

class SlotError(SimError):
    """Entry slot index out of range."""


class EmptySetError(SimError):
    """Controller set may not be empty."""


class CapacityError(SimError):
    """Policy needs more range entries than a processor has slots."""


# --- virtualization -------------------------------------------------------

class UnknownDomain(SimError):
    """No such domain in the context store."""


class NotOpenProcessor(SimError):
    """Operation requires an open-domain processor."""


class SwitchTimeout(SimError):
    """Slave never acknowledged a context switch within the step budget."""


class NoProcessorAvailable(SimError):
    """All open processors are pinned; cannot activate a dormant domain."""


class ProtocolError(SimError):
    """Inter-VMM handshake violated (missing payload or buffer)."""


# --- dynamic partitioning -------------------------------------------------

class LastProcessor(SimError):
    """Refusing to lend the base domain's final processor."""


class NotLentOut(SimError):
    """Merge requested for a processor that was never separated."""


class MappingError(SimError):
    """Shared switch-code window collides with an existing mapping."""


# --- IPC / sockets --------------------------------------------------------

class OutOfMemory(SimError):
    """Shared-region allocator exhausted."""


class UnknownId(SimError):
    """No IPC object with this id."""


class UnknownKey(SimError):
    """No IPC object with this key."""


class QueueFull(SimError):
    """Message queue has no room (non-blocking mode)."""


class NotAttached(SimError):
    """Caller has no mapping for this shared-memory segment."""


class AlreadyBound(SimError):
    """Socket path already bound somewhere on the platform."""


class NotBound(SimError):
    """Socket path is not bound."""


class NotOwner(SimError):
    """Socket operation attempted by a process that does not own it."""


# --- harness --------------------------------------------------------------

class ParseError(SimError):
    """Scenario file failed to parse; carries line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        loc = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + loc)


class ValidationError(SimError):
    """Scenario parsed but references undeclared entities."""
