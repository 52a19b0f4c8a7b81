"""Run a payload against an image in the emulator and judge the outcome."""
from __future__ import annotations

from dataclasses import dataclass, field

from .abi import DEFAULT_CONVENTION, SyscallConvention
from .emulator import Fault, Machine, TraceEntry
from .image import BinaryImage
from .isa import REG_NAMES
from .payload import Payload, VulnSpec
from .planner import ChainGoal
from .scanner import DispatcherGadget

DEFAULT_MAX_STEPS = 100_000
STACK_TOP = 0x7fff0000
STACK_SIZE = 0x10000
UNKNOWN = "unknown code"


@dataclass
class Verdict:
    outcome: str  # goal-met, goal-missed, fault, step-limit
    trap_state: dict[str, int] | None
    trace: list[TraceEntry]
    exfiltrated: bytes = b""
    steps: int = 0
    fault: dict | None = None
    reasons: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.outcome == "goal-met"

    def to_dict(self, with_trace: bool = False) -> dict:
        d = {"outcome": self.outcome, "trap_state": self.trap_state, "steps": self.steps,
             "exfiltrated_hex": self.exfiltrated.hex(), "fault": self.fault, "reasons": self.reasons}
        if with_trace:
            d["trace"] = [t.to_dict() for t in self.trace]
        return d


def prepare(image: BinaryImage, payload: Payload, vuln: VulnSpec, record_trace: bool = True) -> Machine:
    """Machine with the payload injected, poised at the victim's hijacked indirect call."""
    m = Machine.from_image(image, record_trace)
    m.memory.map(vuln.buffer_address, max(vuln.capacity, len(payload.buffer_fill)), name="buffer")
    m.memory.write(vuln.buffer_address, payload.buffer_fill)
    if payload.split:
        m.memory.map(payload.table_address, max(vuln.table_region_size, len(payload.table_blob)),
                     name="table")
        m.memory.write(payload.table_address, payload.table_blob)
    m.memory.map(STACK_TOP - STACK_SIZE, STACK_SIZE, name="stack")
    m.set_reg("sp", STACK_TOP - 16)
    m.set_reg("ra", image.entry_point)
    m.set_reg(vuln.context_reg, vuln.buffer_address)
    size = image.xlen // 8
    ptr = vuln.buffer_address + vuln.pointer_offset
    m.pc = int.from_bytes(m.memory.read(ptr, size), "little")
    return m


def _exfiltrated(m: Machine, goal: ChainGoal, conv: SyscallConvention) -> bytes:
    if goal.syscall_name != "write":
        return b""
    a1, a2 = m.regs[conv.arg_registers[1]], m.regs[conv.arg_registers[2]]
    out = bytearray()
    for addr in range(a1, a1 + a2):
        r = m.memory.find(addr & m.mask)
        if r is None:
            break
        out.append(r.data[addr - r.start])
    return bytes(out)


def judge(m: Machine, goal: ChainGoal, image: BinaryImage,
          conv: SyscallConvention = DEFAULT_CONVENTION) -> tuple[bool, list[str], bytes]:
    reasons = []
    for r, v in sorted(goal.required_regs.items()):
        if m.regs[r] != v:
            reasons.append(f"{REG_NAMES[r]}=0x{m.regs[r]:x}, wanted 0x{v:x}")
    data = _exfiltrated(m, goal, conv)
    if goal.secret_address is not None:
        a1 = m.regs[conv.arg_registers[1]]
        lo = goal.secret_address - a1
        want = image.read(goal.secret_address, goal.secret_length)
        if lo < 0 or lo + goal.secret_length > len(data) or data[lo:lo + goal.secret_length] != want:
            reasons.append("secret region not exfiltrated")
    return not reasons, reasons, data


def execute(image: BinaryImage, payload: Payload, vuln: VulnSpec, goal: ChainGoal,
            max_steps: int = DEFAULT_MAX_STEPS, conv: SyscallConvention = DEFAULT_CONVENTION,
            record_trace: bool = True) -> Verdict:
    m = prepare(image, payload, vuln, record_trace)
    try:
        status = m.run(max_steps)
    except Fault as exc:
        return Verdict("fault", None, m.trace, steps=m.steps_executed,
                       fault={"kind": exc.kind, "pc": exc.pc, "addr": exc.addr, "message": str(exc)},
                       reasons=[str(exc)])
    if status == "step-limit":
        return Verdict("step-limit", None, m.trace, steps=m.steps_executed,
                       reasons=[f"no trap within {max_steps} steps"])
    regs = {REG_NAMES[i]: v for i, v in enumerate(m.trap.regs)}
    met, reasons, data = judge(m, goal, image, conv)
    return Verdict("goal-met" if met else "goal-missed", regs, m.trace, data, m.steps_executed,
                   reasons=reasons)


@dataclass
class TraceSegment:
    start_pc: int
    label: str
    entries: list[TraceEntry]


def trace_gadgets(verdict: Verdict | list[TraceEntry], dispatcher: DispatcherGadget,
                  catalog=None) -> list[TraceSegment]:
    """Split the trace into the code run between dispatcher visits.

    Dispatcher instructions separate segments and belong to none. Each segment
    is labeled with the catalog gadget starting at its first pc.
    """
    trace = verdict.trace if isinstance(verdict, Verdict) else verdict
    disp = set(dispatcher.addresses)
    known = {}
    if catalog is not None:
        for c in list(catalog.candidates) + list(catalog.initializers):
            known[c.start_addr] = f"{c.family.value}@0x{c.start_addr:x}"
    segments: list[TraceSegment] = []
    current = None
    for t in trace:
        if t.pc in disp:
            t.label = "dispatcher"
            current = None
            continue
        if current is None:
            current = TraceSegment(t.pc, known.get(t.pc, UNKNOWN), [])
            segments.append(current)
        t.label = current.label
        current.entries.append(t)
    return segments
