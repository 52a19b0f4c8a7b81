"""Deterministic RV32I interpreter used to verify chains."""
from __future__ import annotations

from dataclasses import dataclass

from .image import BinaryImage
from .isa import (REG_NAMES, IllegalInstruction, Instruction, alu, branch_taken, decode, jalr_target,
                  reg_index, sign_extend)


class Fault(Exception):
    kind = "fault"

    def __init__(self, pc: int, message: str, addr: int | None = None):
        super().__init__(f"{self.kind} at pc=0x{pc:08x}: {message}")
        self.pc = pc
        self.addr = addr


class UnmappedAccess(Fault):
    kind = "UnmappedAccess"


class IllegalInstructionFault(Fault):
    kind = "IllegalInstruction"


class MisalignedFetch(Fault):
    kind = "MisalignedFetch"


class Trapped(Exception):
    """Raised by step() when called with a trap already pending."""


@dataclass
class Region:
    start: int
    data: bytearray
    writable: bool = True
    executable: bool = False
    name: str = ""

    @property
    def end(self) -> int:
        return self.start + len(self.data)


class Memory:
    def __init__(self):
        self.regions: list[Region] = []

    def map(self, start: int, size: int, writable=True, executable=False, name="", data=b"") -> Region:
        for r in self.regions:
            if start < r.end and r.start < start + size:
                raise ValueError(f"region {name or hex(start)} overlaps {r.name or hex(r.start)}")
        buf = bytearray(size)
        buf[:len(data)] = data[:size]
        region = Region(start, buf, writable, executable, name)
        self.regions.append(region)
        self.regions.sort(key=lambda r: r.start)
        return region

    def find(self, addr: int, size: int = 1) -> Region | None:
        for r in self.regions:
            if r.start <= addr and addr + size <= r.end:
                return r
        return None

    def is_mapped(self, addr: int, size: int = 1) -> bool:
        return self.find(addr, size) is not None

    def read(self, addr: int, size: int) -> bytes:
        r = self.find(addr, size)
        if r is None:
            raise KeyError(addr)
        off = addr - r.start
        return bytes(r.data[off:off + size])

    def write(self, addr: int, blob: bytes, force: bool = False) -> None:
        r = self.find(addr, len(blob))
        if r is None or (not r.writable and not force):
            raise KeyError(addr)
        off = addr - r.start
        r.data[off:off + len(blob)] = blob


@dataclass
class TraceEntry:
    step: int
    pc: int
    raw: int
    text: str
    changed: tuple[str, int] | None = None
    label: str = ""

    def to_dict(self) -> dict:
        d = {"step": self.step, "pc": self.pc, "raw": f"{self.raw:08x}", "disassembly": self.text,
             "changed": None, "gadget": self.label}
        if self.changed:
            d["changed"] = {"reg": self.changed[0], "value": self.changed[1]}
        return d


@dataclass
class Trap:
    cause: str
    pc: int
    regs: tuple[int, ...]


class Machine:
    """Architectural state plus memory; ``step`` executes one instruction."""

    def __init__(self, memory: Memory | None = None, xlen: int = 32, record_trace: bool = False):
        self.xlen = xlen
        self.mask = (1 << xlen) - 1
        self.regs = [0] * 32
        self.pc = 0
        self.memory = memory or Memory()
        self.trap: Trap | None = None
        self.steps_executed = 0
        self.record_trace = record_trace
        self.trace: list[TraceEntry] = []
        self.mem_log: list[tuple[str, int, int]] = []
        self._decoded: dict[tuple[int, int], Instruction] = {}

    @classmethod
    def from_image(cls, image: BinaryImage, record_trace: bool = False) -> "Machine":
        m = cls(xlen=image.xlen, record_trace=record_trace)
        for seg in image.segments:
            m.memory.map(seg.addr, seg.size, seg.writable, seg.executable, data=seg.data,
                         name=f"segment@{seg.addr:x}")
        m.pc = image.entry_point
        return m

    def reg(self, name: str | int) -> int:
        return self.regs[reg_index(name)]

    def set_reg(self, name: str | int, value: int) -> None:
        i = reg_index(name)
        if i:
            self.regs[i] = value & self.mask

    def load(self, addr: int, width: int, signed: bool = False) -> int:
        addr &= self.mask
        try:
            raw = int.from_bytes(self.memory.read(addr, width), "little")
        except KeyError:
            raise UnmappedAccess(self.pc, f"load of {width} bytes at 0x{addr:08x}", addr) from None
        self.mem_log.append(("r", addr, width))
        return sign_extend(raw, 8 * width) & self.mask if signed else raw

    def store(self, addr: int, width: int, value: int) -> None:
        addr &= self.mask
        try:
            self.memory.write(addr, (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little"))
        except KeyError:
            raise UnmappedAccess(self.pc, f"store of {width} bytes at 0x{addr:08x}", addr) from None
        self.mem_log.append(("w", addr, width))

    def fetch(self) -> Instruction:
        pc = self.pc
        if pc % 4:
            raise MisalignedFetch(pc, "instruction fetch not 4-byte aligned")
        region = self.memory.find(pc, 4)
        if region is None or not region.executable:
            raise UnmappedAccess(pc, "instruction fetch from unmapped or non-executable memory", pc)
        off = pc - region.start
        word = int.from_bytes(region.data[off:off + 4], "little")
        key = (pc, word)
        ins = self._decoded.get(key)
        if ins is None:
            try:
                ins = decode(word, pc)
            except IllegalInstruction as exc:
                raise IllegalInstructionFault(pc, str(exc)) from None
            self._decoded[key] = ins
        return ins

    def step(self) -> Instruction:
        if self.trap is not None:
            raise Trapped("trap pending")
        ins = self.fetch()
        x = self.regs
        m = ins.mnemonic
        pc = self.pc
        next_pc = (pc + 4) & self.mask
        rd_val = None
        fmt = ins.format
        if fmt == "R":
            rd_val = alu(m, x[ins.rs1], x[ins.rs2], self.xlen)
        elif ins.is_load:
            addr = x[ins.rs1] + ins.imm
            rd_val = self.load(addr, ins.mem_width, signed=m in ("lb", "lh"))
        elif ins.is_store:
            self.store(x[ins.rs1] + ins.imm, ins.mem_width, x[ins.rs2])
        elif m == "jalr":
            next_pc = jalr_target(x[ins.rs1], ins.imm, self.xlen)
            rd_val = (pc + 4) & self.mask
        elif m == "jal":
            next_pc = (pc + ins.imm) & self.mask
            rd_val = (pc + 4) & self.mask
        elif fmt == "B":
            if branch_taken(m, x[ins.rs1], x[ins.rs2], self.xlen):
                next_pc = (pc + ins.imm) & self.mask
        elif m == "lui":
            rd_val = (ins.imm << 12) & self.mask
        elif m == "auipc":
            rd_val = (pc + (sign_extend(ins.imm, 20) << 12)) & self.mask
        elif m == "ecall":
            self.trap = Trap("ecall", pc, tuple(x))
        elif m in ("fence", "fence.i"):
            pass
        elif m == "ebreak":
            raise IllegalInstructionFault(pc, "ebreak")
        elif ins.is_csr:
            raise IllegalInstructionFault(pc, f"CSR access {ins.text()}")
        else:
            rd_val = alu(m, x[ins.rs1], ins.imm & self.mask, self.xlen)

        changed = None
        if rd_val is not None and ins.rd:
            changed = (REG_NAMES[ins.rd], rd_val)
            x[ins.rd] = rd_val
        if self.record_trace:
            self.trace.append(TraceEntry(self.steps_executed, pc, ins.raw, ins.text(), changed))
        self.steps_executed += 1
        if self.trap is None:
            self.pc = next_pc
        return ins

    def run(self, max_steps: int) -> str:
        """Step until trap, fault or limit. Returns "trap" or "step-limit"; faults propagate."""
        while self.steps_executed < max_steps:
            self.step()
            if self.trap is not None:
                return "trap"
        return "step-limit"
