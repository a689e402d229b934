"""Bus management unit: the hardware firewall on the system bus.

Every access from a non-controller processor is checked against a
per-processor table of deny-range entries; anything matching a denied
kind raises a bus error at the initiator. Only controller (base-domain)
processors may reconfigure the unit. High-level domain policies compile
down to deny entries, keeping the default-allow hardware semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import BusError, CapacityError, EmptySetError, SlotError
from .machine import AccessKind, BusAccess

DEFAULT_ENTRIES_PER_PROCESSOR = 8

DENY_READ = 1
DENY_WRITE = 2
DENY_FETCH = 4

_KIND_BITS = {AccessKind.READ: DENY_READ,
              AccessKind.WRITE: DENY_WRITE,
              AccessKind.FETCH: DENY_FETCH}


def denied_from_mask(mask: int) -> frozenset[AccessKind]:
    kinds = {k for k, bit in _KIND_BITS.items() if mask & bit}
    return frozenset(kinds)


def mask_from_denied(denied: frozenset[AccessKind]) -> int:
    return sum(_KIND_BITS[k] for k in denied)


@dataclass(frozen=True)
class RangeEntry:
    """One deny entry: a physical range and the access kinds it blocks."""

    range: tuple[int, int]              # (base, length)
    denied: frozenset[AccessKind]

    def __post_init__(self):
        base, length = self.range
        if length <= 0:
            raise ValueError("entry range must be non-empty")
        if not self.denied:
            raise ValueError("entry must deny at least one access kind")
        object.__setattr__(self, "denied", frozenset(self.denied))

    def covers(self, paddr: int, width: int) -> bool:
        base, length = self.range
        return paddr < base + length and base < paddr + width

    def blocks(self, access: BusAccess) -> bool:
        if not self.covers(access.phys_addr, access.width):
            return False
        if access.kind is AccessKind.SWAP:
            # A swap both reads and writes the location.
            return (AccessKind.READ in self.denied
                    or AccessKind.WRITE in self.denied)
        return access.kind in self.denied


class AccessMatrix:
    """Per-processor deny entries plus the controller set that bypasses them."""

    def __init__(self, controllers: set[int],
                 entries_per_processor: int = DEFAULT_ENTRIES_PER_PROCESSOR):
        if not controllers:
            raise EmptySetError("controller set may not be empty")
        self.controllers: set[int] = set(controllers)
        self.entries_per_processor = entries_per_processor
        self.entries: dict[int, list[RangeEntry | None]] = {}
        self.mutation_log: list[tuple] = []     # (op, requester, detail)

    def _slots(self, proc: int) -> list[RangeEntry | None]:
        if proc not in self.entries:
            self.entries[proc] = [None] * self.entries_per_processor
        return self.entries[proc]

    def check(self, access: BusAccess) -> bool:
        """True when the access may proceed. Pure: mutates nothing."""
        if access.initiator in self.controllers:
            return True
        slots = self.entries.get(access.initiator)
        if not slots:
            return True
        for entry in slots:
            if entry is not None and entry.blocks(access):
                return False
        return True

    def set_entry(self, requester: int, target: int, slot: int,
                  entry: RangeEntry | None) -> None:
        """Install or clear one entry slot; controllers only."""
        if slot < 0 or slot >= self.entries_per_processor:
            raise SlotError(f"slot {slot} out of range")
        if requester not in self.controllers:
            raise BusError(0, f"cpu{requester} has no rights over the access matrix")
        self._slots(target)[slot] = entry
        self.mutation_log.append(("set_entry", requester, target, slot, entry))

    def set_controllers(self, requester: int, new_set: set[int]) -> None:
        """Replace the controller set; entries of newly promoted processors clear."""
        if not new_set:
            raise EmptySetError("controller set may not be empty")
        if requester not in self.controllers:
            raise BusError(0, f"cpu{requester} has no rights over the access matrix")
        for p in new_set - self.controllers:
            self.entries[p] = [None] * self.entries_per_processor
        self.controllers = set(new_set)
        self.mutation_log.append(("set_controllers", requester, frozenset(new_set)))

    def set_entries(self, requester: int, target: int,
                    entries: list[RangeEntry]) -> None:
        """Replace all of target's slots with the given entries (then clears)."""
        if len(entries) > self.entries_per_processor:
            raise CapacityError(
                f"cpu{target} needs {len(entries)} entries, has "
                f"{self.entries_per_processor} slots")
        for slot in range(self.entries_per_processor):
            self.set_entry(requester, target, slot,
                           entries[slot] if slot < len(entries) else None)

    def snapshot(self) -> dict:
        return {"controllers": set(self.controllers),
                "entries": {p: list(slots) for p, slots in self.entries.items()}}

    def restore(self, snap: dict) -> None:
        self.controllers = set(snap["controllers"])
        self.entries = {p: list(slots) for p, slots in snap["entries"].items()}


# --- policy compilation ---------------------------------------------------------

ANY = "any"
READ_ONLY = "read_only"
PROHIBITED = "prohibited"

_LEVELS = {ANY, READ_ONLY, PROHIBITED}


@dataclass
class DomainPolicy:
    """Named resource regions and per-domain permission levels.

    regions maps a region name to its physical (base, length); levels maps
    a domain name to {region name: level}. Regions a domain does not list
    default to `any`.
    """

    regions: dict[str, tuple[int, int]]
    levels: dict[str, dict[str, str]]
    base_domain: str = "base"

    def __post_init__(self):
        for domain, table in self.levels.items():
            for region, level in table.items():
                if region not in self.regions:
                    raise ValueError(f"domain {domain!r} references unknown region {region!r}")
                if level not in _LEVELS:
                    raise ValueError(f"bad permission level {level!r}")

    def level(self, domain: str, region: str) -> str:
        return self.levels.get(domain, {}).get(region, ANY)

    def deny_entries(self, domain: str) -> list[RangeEntry]:
        out = []
        for region, (base, length) in self.regions.items():
            lvl = self.level(domain, region)
            if lvl == READ_ONLY:
                out.append(RangeEntry((base, length), frozenset({AccessKind.WRITE})))
            elif lvl == PROHIBITED:
                out.append(RangeEntry((base, length),
                                      frozenset({AccessKind.READ, AccessKind.WRITE,
                                                 AccessKind.FETCH})))
        return out


def compile_policy(policy: DomainPolicy, assignment: dict[int, str],
                   entries_per_processor: int = DEFAULT_ENTRIES_PER_PROCESSOR,
                   ) -> AccessMatrix:
    """Compile a domain policy plus a processor assignment into a matrix.

    Processors assigned to the policy's base domain become controllers and
    carry no entries; every other processor gets deny entries realizing its
    domain's permission levels.
    """
    controllers = {p for p, d in sorted(assignment.items()) if d == policy.base_domain}
    if not controllers:
        raise EmptySetError("assignment names no base-domain processor")
    matrix = AccessMatrix(controllers, entries_per_processor)
    requester = min(controllers)
    for proc, domain in sorted(assignment.items()):
        if proc in controllers:
            continue
        entries = policy.deny_entries(domain)
        if len(entries) > entries_per_processor:
            raise CapacityError(
                f"domain {domain!r} needs {len(entries)} entries for cpu{proc}, "
                f"only {entries_per_processor} slots")
        matrix.set_entries(requester, proc, entries)
    return matrix
