"""JALR gadget discovery, effect summaries and classification."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .abi import ARGUMENT_REGISTERS, DEFAULT_CONVENTION, DEFAULT_POLICY, ReservedPolicy, SyscallConvention
from .image import BinaryImage, Unmapped
from .isa import REG_NAMES, IllegalInstruction, Instruction, alu, sign_extend

DEFAULT_MAX_WINDOW = 16


class Family(str, Enum):
    ARITHMETIC_LOGIC = "arithmetic-logic"
    MEMORY_ACCESS = "memory-access"
    FUNCTION_CALL = "function-call"
    SYSTEM_CALL = "system-call"
    BRANCHING = "branching"
    DISPATCHER = "dispatcher"
    INITIALIZER = "initializer"
    UNCLASSIFIED = "unclassified"


# Symbolic register contents after a window, relative to the state on entry.
@dataclass(frozen=True)
class Const:
    value: int
    from_image: bool = False


@dataclass(frozen=True)
class RegOffset:
    reg: int
    offset: int = 0


@dataclass(frozen=True)
class Loaded:
    """Contents of memory at (entry value of ``reg``) + ``offset``."""
    reg: int
    offset: int
    width: int


Value = Const | RegOffset | Loaded | None


@dataclass(frozen=True)
class MemAccess:
    base: int
    offset: int
    width: int


@dataclass(frozen=True)
class GadgetSummary:
    regs_read: frozenset[int]
    regs_written: frozenset[int]
    mem_reads: tuple[MemAccess, ...]
    mem_writes: tuple[MemAccess, ...]
    has_opaque_effect: bool
    terminator: Instruction
    inputs: frozenset[int] = frozenset()
    values: dict = field(default_factory=dict, compare=False, hash=False)

    def value(self, reg: int) -> Value:
        """Symbolic value of ``reg`` after the window (identity if untouched)."""
        if reg not in self.regs_written:
            return RegOffset(reg, 0) if reg else Const(0)
        return self.values.get(reg)


@dataclass(frozen=True)
class GadgetCandidate:
    start_addr: int
    instructions: tuple[Instruction, ...]
    summary: GadgetSummary
    family: Family = Family.UNCLASSIFIED

    @property
    def terminator(self) -> Instruction:
        return self.instructions[-1]

    @property
    def end_addr(self) -> int:
        return self.terminator.address

    def __len__(self) -> int:
        return len(self.instructions)

    def text(self) -> str:
        return " ; ".join(i.text() for i in self.instructions)


def summarize(instructions, image: BinaryImage | None = None, xlen: int = 32) -> GadgetSummary:
    """Compose per-instruction effects over a straight-line window."""
    mask = (1 << xlen) - 1
    state: dict[int, Value] = {}
    read: set[int] = set()
    written: set[int] = set()
    inputs: set[int] = set()
    mem_reads, mem_writes = [], []
    opaque = False
    stored = False

    def get(r: int) -> Value:
        if r == 0:
            return Const(0)
        return state[r] if r in state else RegOffset(r, 0)

    for ins in instructions:
        for r in ins.reads():
            read.add(r)
            if r not in written:
                inputs.add(r)
        opaque |= ins.opaque
        m = ins.mnemonic
        out: Value = None
        if m == "lui":
            out = Const((ins.imm << 12) & mask)
        elif m == "auipc":
            out = Const((ins.address + (sign_extend(ins.imm, 20) << 12)) & mask)
        elif m in ("jal", "jalr"):
            out = Const((ins.address + 4) & mask)
        elif ins.is_load:
            mem_reads.append(MemAccess(ins.rs1, ins.imm, ins.mem_width))
            base = get(ins.rs1)
            if isinstance(base, Const) and image is not None and not stored:
                addr = (base.value + ins.imm) & mask
                try:
                    raw = int.from_bytes(image.read(addr, ins.mem_width), "little")
                except Unmapped:
                    out = None
                else:
                    if m in ("lb", "lh", "lw"):
                        raw = sign_extend(raw, 8 * ins.mem_width) & mask
                    out = Const(raw, from_image=True)
            elif isinstance(base, RegOffset):
                out = Loaded(base.reg, base.offset + ins.imm, ins.mem_width)
        elif ins.is_store:
            mem_writes.append(MemAccess(ins.rs1, ins.imm, ins.mem_width))
            stored = True
        elif ins.format in ("R", "I") and not ins.opaque:
            a = get(ins.rs1)
            b = get(ins.rs2) if ins.format == "R" else Const(ins.imm & mask)
            if isinstance(a, Const) and isinstance(b, Const):
                out = Const(alu(m, a.value, b.value, xlen))
            elif m in ("add", "addi") and isinstance(a, RegOffset) and isinstance(b, Const):
                out = RegOffset(a.reg, sign_extend(a.offset + b.value, xlen))
            elif m == "add" and isinstance(a, Const) and isinstance(b, RegOffset):
                out = RegOffset(b.reg, sign_extend(b.offset + a.value, xlen))
            elif m == "sub" and isinstance(a, RegOffset) and isinstance(b, Const):
                out = RegOffset(a.reg, sign_extend(a.offset - b.value, xlen))
        for r in ins.writes():
            written.add(r)
            state[r] = out
    if isinstance(instructions, tuple):
        term = instructions[-1]
    else:
        term = list(instructions)[-1]
    return GadgetSummary(frozenset(read), frozenset(written), tuple(mem_reads), tuple(mem_writes),
                         opaque, term, frozenset(inputs), {r: state.get(r) for r in written})


def find_terminators(image: BinaryImage) -> list[tuple[int, Instruction]]:
    found = []
    for sec in image.executable_sections:
        start = (sec.addr + 3) & ~3
        for addr in range(start, sec.end - 3, 4):
            try:
                ins = image.instruction_at(addr)
            except IllegalInstruction:
                continue
            if ins.mnemonic == "jalr":
                found.append((addr, ins))
    return found


def _window(image: BinaryImage, end_addr: int, max_len: int) -> list[Instruction]:
    """Longest straight-line run ending at the control transfer at ``end_addr``."""
    term = image.instruction_at(end_addr)
    window = [term]
    addr = end_addr - 4
    while len(window) < max_len:
        try:
            if not image.section_at(addr).executable:
                break
            ins = image.instruction_at(addr)
        except (IllegalInstruction, Unmapped):
            break
        if ins.is_control:
            break
        window.append(ins)
        addr -= 4
    window.reverse()
    return window


def extract_candidates(image: BinaryImage, terminator_addr: int,
                       max_len: int = DEFAULT_MAX_WINDOW) -> list[GadgetCandidate]:
    """One candidate per window length 1..k ending at ``terminator_addr``, shortest first."""
    window = _window(image, terminator_addr, max_len)
    out = []
    for n in range(1, len(window) + 1):
        ins = tuple(window[-n:])
        out.append(GadgetCandidate(ins[0].address, ins, summarize(ins, image, image.xlen)))
    return out


def find_syscall_gadgets(image: BinaryImage, max_len: int = DEFAULT_MAX_WINDOW,
                         conv: SyscallConvention = DEFAULT_CONVENTION) -> list[GadgetCandidate]:
    """Windows ending in ``ecall``; these never return to the dispatcher."""
    out = []
    for sec in image.executable_sections:
        for addr in range((sec.addr + 3) & ~3, sec.end - 3, 4):
            try:
                ins = image.instruction_at(addr)
            except IllegalInstruction:
                continue
            if ins.mnemonic == conv.trap_mnemonic:
                for c in extract_candidates(image, addr, max_len):
                    out.append(GadgetCandidate(c.start_addr, c.instructions, c.summary, Family.SYSTEM_CALL))
    return out


def _seed_source(value: Value) -> bool:
    if isinstance(value, Loaded):
        return True
    return isinstance(value, RegOffset) and value.offset == 0 and value.reg in ARGUMENT_REGISTERS


def is_initializer(candidate: GadgetCandidate, policy: ReservedPolicy = DEFAULT_POLICY) -> bool:
    s = candidate.summary
    term = candidate.terminator
    if term.mnemonic != "jalr" or s.has_opaque_effect:
        return False
    if not policy.registers <= s.regs_written:
        return False
    if term.rd in policy.registers:
        return False
    reaches = term.rs1 == policy.dispatcher_reg and term.imm == 0
    return reaches and all(_seed_source(s.value(r)) for r in policy.registers)


def _plt_or_function(image: BinaryImage | None, addr: int) -> bool:
    if image is None:
        return False
    if any(p.stub_addr == addr for p in image.plt_entries):
        return True
    sym = image.symbol_at(addr)
    return sym is not None and sym.addr == addr


def classify(candidate: GadgetCandidate, image: BinaryImage | None = None,
             conv: SyscallConvention = DEFAULT_CONVENTION,
             policy: ReservedPolicy = DEFAULT_POLICY) -> Family:
    s = candidate.summary
    term = candidate.terminator
    if term.mnemonic == conv.trap_mnemonic or conv.id_register in s.regs_written:
        return Family.SYSTEM_CALL
    if is_initializer(candidate, policy):
        return Family.INITIALIZER
    body = candidate.instructions[:-1]
    writers = [i for i in body if term.rs1 in i.writes()]
    if writers and writers[-1].is_load:
        base = writers[-1].rs1
        if any(_increment(i, base, 1) is not None for i in body):
            return Family.DISPATCHER
    if term.rd == 1:
        # linking jump: an (indirect) call
        return Family.FUNCTION_CALL
    if s.mem_reads or s.mem_writes:
        return Family.MEMORY_ACCESS
    alu_formats = ("R", "I", "U")
    if any(i.format in alu_formats and not i.opaque and i.mnemonic != "jalr"
           and i.writes() & set(ARGUMENT_REGISTERS) for i in body):
        return Family.ARITHMETIC_LOGIC
    target = s.value(term.rs1) if term.rs1 in s.regs_written else None
    if isinstance(target, Const) and _plt_or_function(image, (target.value + term.imm) & ~1):
        return Family.FUNCTION_CALL
    if writers and term.rs1 != policy.dispatcher_reg:
        return Family.BRANCHING
    return Family.UNCLASSIFIED


@dataclass(frozen=True)
class DispatcherGadget:
    kind: str  # "single-stage" | "two-stage"
    stage1_addr: int
    stage2_addr: int | None
    table_cursor_reg: int
    jump_reg: int
    stride: int
    reentry_addr: int
    pre_increment: bool = True
    load_offset: int = 0
    entry_size: int = 4
    addresses: tuple[int, ...] = ()

    def __post_init__(self):
        if self.stride == 0 or abs(self.stride) % self.entry_size:
            raise ValueError(f"bad dispatcher stride {self.stride}")
        if self.kind == "single-stage" and (self.stage2_addr is not None
                                            or self.reentry_addr != self.stage1_addr):
            raise ValueError("single-stage dispatcher re-enters at its only stage")

    def entry_address(self, cursor0: int, i: int) -> int:
        """Address the dispatcher loads on its i-th cycle when the cursor starts at ``cursor0``."""
        return cursor0 + self.load_offset + (i + int(self.pre_increment)) * self.stride

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "stage1_addr": self.stage1_addr, "stage2_addr": self.stage2_addr,
            "table_cursor_reg": REG_NAMES[self.table_cursor_reg], "jump_reg": REG_NAMES[self.jump_reg],
            "stride": self.stride, "reentry_addr": self.reentry_addr,
            "pre_increment": self.pre_increment, "load_offset": self.load_offset,
            "entry_size": self.entry_size, "addresses": list(self.addresses),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DispatcherGadget":
        from .isa import reg_index
        return cls(d["kind"], d["stage1_addr"], d["stage2_addr"], reg_index(d["table_cursor_reg"]),
                   reg_index(d["jump_reg"]), d["stride"], d["reentry_addr"], d["pre_increment"],
                   d["load_offset"], d["entry_size"], tuple(d["addresses"]))


def _load_jump(window: list[Instruction], entry_size: int):
    """(load index, cursor reg, jump reg) when the terminator jumps through a freshly loaded value."""
    term = window[-1]
    if term.mnemonic != "jalr" or term.imm != 0 or term.rs1 == 0:
        return None
    jump = term.rs1
    for idx in range(len(window) - 2, -1, -1):
        ins = window[idx]
        if jump in ins.writes():
            if ins.mnemonic == ("lw" if entry_size == 4 else "ld") and ins.rs1 not in (0, jump):
                return idx, ins.rs1, jump
            return None
    return None


def _clean(instrs, forbidden: set[int]) -> bool:
    return all(not (i.writes() & forbidden) and not i.opaque for i in instrs)


def _increment(ins: Instruction, cursor: int, entry_size: int) -> int | None:
    if (ins.mnemonic == "addi" and ins.rd == cursor and ins.rs1 == cursor
            and ins.imm != 0 and ins.imm % entry_size == 0):
        return ins.imm
    return None


def find_dispatchers(image: BinaryImage, policy: ReservedPolicy = DEFAULT_POLICY,
                     max_len: int = DEFAULT_MAX_WINDOW, reentry: str = "stage1") -> list[DispatcherGadget]:
    """Single-stage and two-stage dispatcher gadgets, in address order."""
    entry_size = image.xlen // 8
    found: list[DispatcherGadget] = []
    stage2: dict[int, tuple[int, int, int, tuple[int, ...]]] = {}
    stage1: list[tuple[int, int, int, int, tuple[int, ...]]] = []

    for addr, _ in find_terminators(image):
        window = _window(image, addr, max_len)
        term = window[-1]
        lj = _load_jump(window, entry_size)
        if lj is not None:
            li, cursor, jump = lj
            load = window[li]
            forbidden_base = {policy.dispatcher_reg}
            if term.rd in (cursor, policy.dispatcher_reg):
                continue
            incs = [(k, _increment(w, cursor, entry_size)) for k, w in enumerate(window[:-1])
                    if cursor in w.writes()]
            if not incs:
                # load-and-jump with no cursor advance: possible second stage
                span = window[li:]
                if _clean(span[1:-1], {cursor, jump} | forbidden_base) and term.rd != jump:
                    stage2[load.address] = (cursor, jump, load.imm, tuple(i.address for i in span))
            else:
                k, stride = incs[-1]
                first = min(k, li)
                span = window[first:]
                others = [w for j, w in enumerate(window[:-1]) if j >= first and j not in (k, li)]
                ok = (stride is not None
                      and all(cursor not in w.writes() for w in window[first:-1] if w is not window[k])
                      and _clean(others, {cursor, jump} | forbidden_base)
                      and term.rd != jump)
                if ok:
                    start = span[0].address
                    found.append(DispatcherGadget(
                        "single-stage", start, None, cursor, jump, stride, start,
                        pre_increment=k < li, load_offset=load.imm, entry_size=entry_size,
                        addresses=tuple(i.address for i in span)))
            continue
        # first stage: advance the cursor, then jump relative to the dispatcher register
        if term.rs1 != policy.dispatcher_reg or term.rd in policy.registers:
            continue
        for k in range(len(window) - 2, -1, -1):
            cursor = next(iter(window[k].writes()), None)
            if cursor is None or cursor in policy.registers - {policy.table_cursor_reg}:
                continue
            stride = _increment(window[k], cursor, entry_size)
            if stride is None:
                continue
            span = window[k:]
            if _clean(span[1:-1], {cursor, policy.dispatcher_reg}):
                stage1.append((span[0].address, cursor, stride, term.imm, tuple(i.address for i in span)))
                break

    for s1_addr, cursor, stride, imm, s1_span in stage1:
        # the dispatcher register holds stage one, so stage one lands on a3 + imm
        target = (s1_addr + imm) & ~1
        hit = stage2.get(target)
        if hit is None or hit[0] != cursor:
            continue
        _, jump, load_off, s2_span = hit
        found.append(DispatcherGadget(
            "two-stage", s1_addr, target, cursor, jump, stride,
            s1_addr if reentry == "stage1" else target,
            pre_increment=True, load_offset=load_off, entry_size=entry_size,
            addresses=s1_span + s2_span))
    found.sort(key=lambda d: (d.stage1_addr, d.kind))
    return found


def find_initializers(image: BinaryImage, policy: ReservedPolicy = DEFAULT_POLICY,
                      max_len: int = DEFAULT_MAX_WINDOW) -> list[GadgetCandidate]:
    """Shortest initializer window per terminator."""
    out = []
    for addr, _ in find_terminators(image):
        for c in extract_candidates(image, addr, max_len):
            if is_initializer(c, policy):
                out.append(GadgetCandidate(c.start_addr, c.instructions, c.summary, Family.INITIALIZER))
                break
    return out


def safety_verdict(candidate: GadgetCandidate, policy: ReservedPolicy,
                   dispatcher: DispatcherGadget | None, relax_imm: bool = False) -> str | None:
    """None when the gadget may be chained, else the reason it may not."""
    if candidate.family is Family.INITIALIZER:
        return None
    term = candidate.terminator
    if term.mnemonic != "jalr":
        return "does not return to the dispatcher"
    s = candidate.summary
    guarded = set(policy.registers)
    if dispatcher is not None:
        guarded |= {dispatcher.table_cursor_reg, dispatcher.jump_reg}
    hit = s.regs_written & guarded
    if hit:
        return "writes " + ", ".join(REG_NAMES[r] for r in sorted(hit))
    if term.rs1 != policy.dispatcher_reg:
        return f"jumps through {REG_NAMES[term.rs1]}, not {REG_NAMES[policy.dispatcher_reg]}"
    if term.imm != 0 and not relax_imm:
        return f"terminator offset {term.imm}"
    if s.has_opaque_effect:
        return "opaque side effect"
    return None


def filter_safe(candidates, policy: ReservedPolicy = DEFAULT_POLICY,
                dispatcher: DispatcherGadget | None = None, relax_imm: bool = False) -> list[GadgetCandidate]:
    return [c for c in candidates if safety_verdict(c, policy, dispatcher, relax_imm) is None]


@dataclass
class Catalog:
    candidates: list[GadgetCandidate]
    dispatchers: list[DispatcherGadget]
    initializers: list[GadgetCandidate]
    verdicts: dict[int, str | None]
    policy: ReservedPolicy = DEFAULT_POLICY
    relax_imm: bool = False

    @property
    def safe(self) -> list[GadgetCandidate]:
        return [c for c in self.candidates if self.verdicts.get(c.start_addr) is None]

    def by_address(self, addr: int) -> GadgetCandidate | None:
        for c in self.candidates:
            if c.start_addr == addr:
                return c
        return None


def scan(image: BinaryImage, max_len: int = DEFAULT_MAX_WINDOW,
         policy: ReservedPolicy = DEFAULT_POLICY, conv: SyscallConvention = DEFAULT_CONVENTION,
         relax_imm: bool = False, reentry: str = "stage1") -> Catalog:
    """Full catalog: every JALR and ecall window, classified and safety-checked."""
    candidates: dict[int, GadgetCandidate] = {}
    for addr, _ in find_terminators(image):
        for c in extract_candidates(image, addr, max_len):
            fam = classify(c, image, conv, policy)
            candidates[c.start_addr] = GadgetCandidate(c.start_addr, c.instructions, c.summary, fam)
    for c in find_syscall_gadgets(image, max_len, conv):
        candidates.setdefault(c.start_addr, c)
    dispatchers = find_dispatchers(image, policy, max_len, reentry)
    for d in dispatchers:
        for a in (d.stage1_addr, d.stage2_addr):
            c = candidates.get(a)
            if c is not None:
                candidates[a] = GadgetCandidate(c.start_addr, c.instructions, c.summary, Family.DISPATCHER)
    usable = [d for d in dispatchers if d.table_cursor_reg == policy.table_cursor_reg]
    dispatcher = usable[0] if usable else None
    ordered = [candidates[a] for a in sorted(candidates)]
    verdicts = {c.start_addr: safety_verdict(c, policy, dispatcher, relax_imm) for c in ordered}
    initializers = find_initializers(image, policy, max_len)
    return Catalog(ordered, dispatchers, initializers, verdicts, policy, relax_imm)


def summary_to_dict(s: GadgetSummary) -> dict:
    def acc(m):
        return {"base": REG_NAMES[m.base], "offset": m.offset, "width": m.width}
    return {"regs_read": [REG_NAMES[r] for r in sorted(s.regs_read)],
            "regs_written": [REG_NAMES[r] for r in sorted(s.regs_written)],
            "mem_reads": [acc(m) for m in s.mem_reads],
            "mem_writes": [acc(m) for m in s.mem_writes],
            "has_opaque_effect": s.has_opaque_effect}


def candidate_to_dict(c: GadgetCandidate, verdict: str | None = None) -> dict:
    return {"start_addr": c.start_addr, "end_addr": c.end_addr, "length": len(c),
            "family": c.family.value, "text": c.text(),
            "words": [f"{i.raw:08x}" for i in c.instructions],
            "summary": summary_to_dict(c.summary), "safe": verdict is None, "rejected_because": verdict}


def catalog_to_dict(catalog: Catalog) -> dict:
    return {"policy": catalog.policy.to_dict(), "relax_imm": catalog.relax_imm,
            "candidates": [candidate_to_dict(c, catalog.verdicts.get(c.start_addr))
                           for c in catalog.candidates],
            "dispatchers": [d.to_dict() for d in catalog.dispatchers],
            "initializers": [candidate_to_dict(c) for c in catalog.initializers]}


def _candidate_from_dict(d: dict, image: BinaryImage | None, xlen: int) -> GadgetCandidate:
    from .isa import decode
    ins = tuple(decode(int(w, 16), d["start_addr"] + 4 * i) for i, w in enumerate(d["words"]))
    return GadgetCandidate(d["start_addr"], ins, summarize(ins, image, xlen), Family(d["family"]))


def load_catalog(d: dict, image: BinaryImage | None = None) -> Catalog:
    """Rebuild a catalog from its JSON form; summaries are recomputed from the stored words."""
    xlen = image.xlen if image is not None else 32
    cands = [_candidate_from_dict(c, image, xlen) for c in d["candidates"]]
    verdicts = {c["start_addr"]: c["rejected_because"] for c in d["candidates"]}
    return Catalog(cands, [DispatcherGadget.from_dict(x) for x in d["dispatchers"]],
                   [_candidate_from_dict(c, image, xlen) for c in d["initializers"]], verdicts,
                   ReservedPolicy.from_dict(d["policy"]), d["relax_imm"])
