"""RV32I instruction decoding, encoding and value-level semantics.

Only the 32-bit base encodings are handled. Anything whose two low bits are
not ``0b11`` (the compressed space), the all-zero word, and opcodes from the
M/A/F/D extensions decode as :class:`IllegalInstruction`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

XLEN = 32

REG_NAMES = (
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2",
    "s0", "s1", "a0", "a1", "a2", "a3", "a4", "a5",
    "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7",
    "s8", "s9", "s10", "s11", "t3", "t4", "t5", "t6",
)
_REG_LOOKUP = {name: i for i, name in enumerate(REG_NAMES)}
_REG_LOOKUP.update({f"x{i}": i for i in range(32)})
_REG_LOOKUP["fp"] = 8


class IllegalInstruction(ValueError):
    def __init__(self, word: int, reason: str = "illegal instruction"):
        super().__init__(f"{reason}: 0x{word & 0xFFFFFFFF:08x}")
        self.word = word


class OperandOutOfRange(ValueError):
    pass


def reg_index(name: str | int) -> int:
    if isinstance(name, int):
        if not 0 <= name < 32:
            raise ValueError(f"register index out of range: {name}")
        return name
    try:
        return _REG_LOOKUP[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown register {name!r}") from None


def reg_name(index: int) -> str:
    return REG_NAMES[index]


# mnemonic -> (funct3, funct7)
_R_OPS = {
    "add": (0, 0x00), "sub": (0, 0x20), "sll": (1, 0x00), "slt": (2, 0x00),
    "sltu": (3, 0x00), "xor": (4, 0x00), "srl": (5, 0x00), "sra": (5, 0x20),
    "or": (6, 0x00), "and": (7, 0x00),
}
_I_ALU = {"addi": 0, "slti": 2, "sltiu": 3, "xori": 4, "ori": 6, "andi": 7}
_SHIFT_IMM = {"slli": (1, 0x00), "srli": (5, 0x00), "srai": (5, 0x20)}
_LOADS = {"lb": 0, "lh": 1, "lw": 2, "lbu": 4, "lhu": 5}
_STORES = {"sb": 0, "sh": 1, "sw": 2}
_BRANCHES = {"beq": 0, "bne": 1, "blt": 4, "bge": 5, "bltu": 6, "bgeu": 7}
_CSR = {"csrrw": 1, "csrrs": 2, "csrrc": 3, "csrrwi": 5, "csrrsi": 6, "csrrci": 7}

OPCODE_LOAD = 0x03
OPCODE_MISC_MEM = 0x0F
OPCODE_OP_IMM = 0x13
OPCODE_AUIPC = 0x17
OPCODE_STORE = 0x23
OPCODE_OP = 0x33
OPCODE_LUI = 0x37
OPCODE_BRANCH = 0x63
OPCODE_JALR = 0x67
OPCODE_JAL = 0x6F
OPCODE_SYSTEM = 0x73

FORMATS: dict[str, str] = {}
FORMATS.update({m: "R" for m in _R_OPS})
FORMATS.update({m: "I" for m in (*_I_ALU, *_SHIFT_IMM, *_LOADS, *_CSR)})
FORMATS.update({m: "I" for m in ("jalr", "fence", "fence.i", "ecall", "ebreak")})
FORMATS.update({m: "S" for m in _STORES})
FORMATS.update({m: "B" for m in _BRANCHES})
FORMATS.update({"lui": "U", "auipc": "U", "jal": "J"})

MNEMONICS = tuple(sorted(FORMATS))

LOAD_WIDTH = {"lb": 1, "lh": 2, "lw": 4, "lbu": 1, "lhu": 2}
STORE_WIDTH = {"sb": 1, "sh": 2, "sw": 4}


def sign_extend(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def _bits(word: int, hi: int, lo: int) -> int:
    return (word >> lo) & ((1 << (hi - lo + 1)) - 1)


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    rd: int | None = None
    rs1: int | None = None
    rs2: int | None = None
    imm: int | None = None
    address: int = 0
    raw: int | None = field(default=None, compare=False)

    @property
    def format(self) -> str:
        return FORMATS[self.mnemonic]

    @property
    def is_load(self) -> bool:
        return self.mnemonic in LOAD_WIDTH

    @property
    def is_store(self) -> bool:
        return self.mnemonic in STORE_WIDTH

    @property
    def is_control(self) -> bool:
        """True for anything that leaves straight-line execution."""
        return (self.mnemonic in ("jal", "jalr", "ecall", "ebreak")
                or self.mnemonic in _BRANCHES)

    @property
    def is_csr(self) -> bool:
        return self.mnemonic in _CSR

    @property
    def opaque(self) -> bool:
        # side effects outside the register/memory model
        return self.mnemonic in ("fence", "fence.i", "ecall", "ebreak") or self.is_csr

    @property
    def mem_width(self) -> int | None:
        return LOAD_WIDTH.get(self.mnemonic) or STORE_WIDTH.get(self.mnemonic)

    def reads(self) -> frozenset[int]:
        m = self.mnemonic
        fmt = self.format
        if m in ("lui", "auipc", "jal", "fence", "fence.i", "ecall", "ebreak"):
            regs: set[int] = set()
        elif fmt in ("R", "S", "B"):
            regs = {self.rs1, self.rs2}
        elif m in ("csrrwi", "csrrsi", "csrrci"):
            regs = set()
        else:
            regs = {self.rs1}
        regs.discard(0)
        return frozenset(regs)

    def writes(self) -> frozenset[int]:
        if self.format in ("S", "B") or self.mnemonic in ("fence", "fence.i", "ecall", "ebreak"):
            return frozenset()
        if self.rd:
            return frozenset({self.rd})
        return frozenset()

    def text(self) -> str:
        return disassemble(self)

    def __str__(self) -> str:
        return self.text()


def _fence_set(bits: int) -> str:
    s = "".join(c for c, b in zip("iorw", (8, 4, 2, 1)) if bits & b)
    return s or "0"


def disassemble(ins: Instruction) -> str:
    m = ins.mnemonic
    fmt = ins.format
    r = REG_NAMES
    if m in ("ecall", "ebreak", "fence.i"):
        return m
    if m == "fence":
        return f"fence {_fence_set(ins.imm >> 4)}, {_fence_set(ins.imm)}"
    if ins.is_csr:
        src = str(ins.rs1) if m.endswith("i") else r[ins.rs1]
        return f"{m} {r[ins.rd]}, 0x{ins.imm:x}, {src}"
    if fmt == "R":
        return f"{m} {r[ins.rd]}, {r[ins.rs1]}, {r[ins.rs2]}"
    if m == "jalr" or ins.is_load:
        return f"{m} {r[ins.rd]}, {ins.imm}({r[ins.rs1]})"
    if fmt == "I":
        return f"{m} {r[ins.rd]}, {r[ins.rs1]}, {ins.imm}"
    if fmt == "S":
        return f"{m} {r[ins.rs2]}, {ins.imm}({r[ins.rs1]})"
    if fmt == "B":
        return f"{m} {r[ins.rs1]}, {r[ins.rs2]}, {ins.imm}"
    if fmt == "U":
        return f"{m} {r[ins.rd]}, 0x{ins.imm:x}"
    return f"{m} {r[ins.rd]}, {ins.imm}"


def decode(word: int, address: int = 0) -> Instruction:
    """Decode one 32-bit little-endian-fetched word."""
    word &= 0xFFFFFFFF
    if word & 0b11 != 0b11:
        raise IllegalInstruction(word, "not a 32-bit encoding")
    opcode = word & 0x7F
    rd = _bits(word, 11, 7)
    funct3 = _bits(word, 14, 12)
    rs1 = _bits(word, 19, 15)
    rs2 = _bits(word, 24, 20)
    funct7 = _bits(word, 31, 25)
    imm_i = sign_extend(word >> 20, 12)

    def mk(m, **kw):
        return Instruction(m, address=address, raw=word, **kw)

    if opcode == OPCODE_LUI:
        return mk("lui", rd=rd, imm=word >> 12)
    if opcode == OPCODE_AUIPC:
        return mk("auipc", rd=rd, imm=word >> 12)
    if opcode == OPCODE_JAL:
        imm = (_bits(word, 31, 31) << 20 | _bits(word, 19, 12) << 12
               | _bits(word, 20, 20) << 11 | _bits(word, 30, 21) << 1)
        return mk("jal", rd=rd, imm=sign_extend(imm, 21))
    if opcode == OPCODE_JALR:
        if funct3 != 0:
            raise IllegalInstruction(word)
        return mk("jalr", rd=rd, rs1=rs1, imm=imm_i)
    if opcode == OPCODE_BRANCH:
        for m, f3 in _BRANCHES.items():
            if f3 == funct3:
                imm = (_bits(word, 31, 31) << 12 | _bits(word, 7, 7) << 11
                       | _bits(word, 30, 25) << 5 | _bits(word, 11, 8) << 1)
                return mk(m, rs1=rs1, rs2=rs2, imm=sign_extend(imm, 13))
        raise IllegalInstruction(word)
    if opcode == OPCODE_LOAD:
        for m, f3 in _LOADS.items():
            if f3 == funct3:
                return mk(m, rd=rd, rs1=rs1, imm=imm_i)
        raise IllegalInstruction(word)
    if opcode == OPCODE_STORE:
        for m, f3 in _STORES.items():
            if f3 == funct3:
                imm = funct7 << 5 | rd
                return mk(m, rs1=rs1, rs2=rs2, imm=sign_extend(imm, 12))
        raise IllegalInstruction(word)
    if opcode == OPCODE_OP_IMM:
        for m, f3 in _I_ALU.items():
            if f3 == funct3:
                return mk(m, rd=rd, rs1=rs1, imm=imm_i)
        for m, (f3, f7) in _SHIFT_IMM.items():
            if f3 == funct3 and f7 == funct7:
                return mk(m, rd=rd, rs1=rs1, imm=rs2)
        raise IllegalInstruction(word)
    if opcode == OPCODE_OP:
        for m, (f3, f7) in _R_OPS.items():
            if f3 == funct3 and f7 == funct7:
                return mk(m, rd=rd, rs1=rs1, rs2=rs2)
        raise IllegalInstruction(word)
    if opcode == OPCODE_MISC_MEM:
        if funct3 == 0:
            return mk("fence", rd=rd, rs1=rs1, imm=word >> 20)
        if funct3 == 1:
            return mk("fence.i", rd=rd, rs1=rs1, imm=word >> 20)
        raise IllegalInstruction(word)
    if opcode == OPCODE_SYSTEM:
        if funct3 == 0:
            if rd == 0 and rs1 == 0 and word >> 20 == 0:
                return mk("ecall")
            if rd == 0 and rs1 == 0 and word >> 20 == 1:
                return mk("ebreak")
            raise IllegalInstruction(word, "privileged instruction")
        for m, f3 in _CSR.items():
            if f3 == funct3:
                return mk(m, rd=rd, rs1=rs1, imm=word >> 20)
        raise IllegalInstruction(word)
    raise IllegalInstruction(word, "opcode outside RV32I")


def _check_reg(value, what):
    if value is None or not 0 <= value < 32:
        raise OperandOutOfRange(f"{what} must be a register index 0-31, got {value!r}")
    return value


def _check_imm(value, lo, hi, what, align=1):
    if value is None or not lo <= value <= hi or value % align:
        raise OperandOutOfRange(f"{what} {value!r} outside [{lo}, {hi}]"
                                + (f" or not a multiple of {align}" if align > 1 else ""))
    return value


def encode(ins: Instruction) -> int:
    m = ins.mnemonic
    if m not in FORMATS:
        raise OperandOutOfRange(f"unknown mnemonic {m!r}")
    if m in ("ecall", "ebreak"):
        return 0x73 | (0x100000 if m == "ebreak" else 0)
    if m in ("lui", "auipc"):
        rd = _check_reg(ins.rd, "rd")
        imm = _check_imm(ins.imm, 0, 0xFFFFF, "upper immediate")
        return imm << 12 | rd << 7 | (OPCODE_LUI if m == "lui" else OPCODE_AUIPC)
    if m == "jal":
        rd = _check_reg(ins.rd, "rd")
        imm = _check_imm(ins.imm, -(1 << 20), (1 << 20) - 2, "jump offset", 2) & 0x1FFFFF
        return (_bits(imm, 20, 20) << 31 | _bits(imm, 10, 1) << 21 | _bits(imm, 11, 11) << 20
                | _bits(imm, 19, 12) << 12 | rd << 7 | OPCODE_JAL)
    if m in ("fence", "fence.i"):
        rd = _check_reg(ins.rd if ins.rd is not None else 0, "rd")
        rs1 = _check_reg(ins.rs1 if ins.rs1 is not None else 0, "rs1")
        imm = _check_imm(ins.imm if ins.imm is not None else 0, 0, 0xFFF, "fence field")
        return imm << 20 | rs1 << 15 | (m == "fence.i") << 12 | rd << 7 | OPCODE_MISC_MEM
    if m in _CSR:
        rd = _check_reg(ins.rd, "rd")
        rs1 = _check_reg(ins.rs1, "rs1/uimm")
        imm = _check_imm(ins.imm, 0, 0xFFF, "csr number")
        return imm << 20 | rs1 << 15 | _CSR[m] << 12 | rd << 7 | OPCODE_SYSTEM
    if m in _R_OPS:
        f3, f7 = _R_OPS[m]
        return (f7 << 25 | _check_reg(ins.rs2, "rs2") << 20 | _check_reg(ins.rs1, "rs1") << 15
                | f3 << 12 | _check_reg(ins.rd, "rd") << 7 | OPCODE_OP)
    if m in _SHIFT_IMM:
        f3, f7 = _SHIFT_IMM[m]
        sh = _check_imm(ins.imm, 0, XLEN - 1, "shift amount")
        return (f7 << 25 | sh << 20 | _check_reg(ins.rs1, "rs1") << 15 | f3 << 12
                | _check_reg(ins.rd, "rd") << 7 | OPCODE_OP_IMM)
    if m in _I_ALU or m in _LOADS or m == "jalr":
        imm = _check_imm(ins.imm, -2048, 2047, "12-bit immediate") & 0xFFF
        if m in _I_ALU:
            f3, op = _I_ALU[m], OPCODE_OP_IMM
        elif m in _LOADS:
            f3, op = _LOADS[m], OPCODE_LOAD
        else:
            f3, op = 0, OPCODE_JALR
        return (imm << 20 | _check_reg(ins.rs1, "rs1") << 15 | f3 << 12
                | _check_reg(ins.rd, "rd") << 7 | op)
    if m in _STORES:
        imm = _check_imm(ins.imm, -2048, 2047, "store offset") & 0xFFF
        return (_bits(imm, 11, 5) << 25 | _check_reg(ins.rs2, "rs2") << 20
                | _check_reg(ins.rs1, "rs1") << 15 | _STORES[m] << 12
                | _bits(imm, 4, 0) << 7 | OPCODE_STORE)
    # branches
    imm = _check_imm(ins.imm, -4096, 4094, "branch offset", 2) & 0x1FFF
    return (_bits(imm, 12, 12) << 31 | _bits(imm, 10, 5) << 25 | _check_reg(ins.rs2, "rs2") << 20
            | _check_reg(ins.rs1, "rs1") << 15 | _BRANCHES[m] << 12
            | _bits(imm, 4, 1) << 8 | _bits(imm, 11, 11) << 7 | OPCODE_BRANCH)


def jalr_target(rs1_value: int, imm: int, xlen: int = XLEN) -> int:
    """Target of ``jalr``: (rs1 + imm) with bit 0 cleared, wrapped to xlen."""
    return (rs1_value + imm) & ((1 << xlen) - 1) & ~1


_IMM_TO_REG_OP = {
    "addi": "add", "slti": "slt", "sltiu": "sltu", "xori": "xor", "ori": "or",
    "andi": "and", "slli": "sll", "srli": "srl", "srai": "sra",
}


def alu(mnemonic: str, a: int, b: int, xlen: int = XLEN) -> int:
    """Result of a register/immediate ALU op on unsigned xlen-bit operands."""
    mask = (1 << xlen) - 1
    a &= mask
    b &= mask
    op = _IMM_TO_REG_OP.get(mnemonic, mnemonic)
    if op == "add":
        r = a + b
    elif op == "sub":
        r = a - b
    elif op == "and":
        r = a & b
    elif op == "or":
        r = a | b
    elif op == "xor":
        r = a ^ b
    elif op == "sll":
        r = a << (b & (xlen - 1))
    elif op == "srl":
        r = a >> (b & (xlen - 1))
    elif op == "sra":
        r = sign_extend(a, xlen) >> (b & (xlen - 1))
    elif op == "slt":
        r = int(sign_extend(a, xlen) < sign_extend(b, xlen))
    elif op == "sltu":
        r = int(a < b)
    else:
        raise ValueError(f"not an ALU mnemonic: {mnemonic}")
    return r & mask


def branch_taken(mnemonic: str, a: int, b: int, xlen: int = XLEN) -> bool:
    sa, sb = sign_extend(a, xlen), sign_extend(b, xlen)
    mask = (1 << xlen) - 1
    return {
        "beq": a & mask == b & mask,
        "bne": a & mask != b & mask,
        "blt": sa < sb,
        "bge": sa >= sb,
        "bltu": a & mask < b & mask,
        "bgeu": a & mask >= b & mask,
    }[mnemonic]


_MEM_OPERAND = re.compile(r"^(-?(?:0x[0-9a-f]+|\d+))\((\w+)\)$")
_FENCE_BITS = {"i": 8, "o": 4, "r": 2, "w": 1}


def _num(tok: str) -> int:
    return int(tok, 0)


def _fence_bits(tok: str) -> int:
    if tok == "0":
        return 0
    return sum(_FENCE_BITS[c] for c in tok)


def parse(text: str, address: int = 0) -> Instruction:
    """Parse one line of assembly in the syntax :func:`disassemble` emits.

    Also accepts the pseudo-instructions ``nop``, ``li`` (12-bit), ``mv``,
    ``ret``, ``jr`` and ``j``.
    """
    text = text.split("#")[0].strip().lower()
    if not text:
        raise ValueError("empty assembly line")
    m, _, rest = text.partition(" ")
    ops = [o.strip() for o in rest.split(",")] if rest.strip() else []

    if m == "nop":
        return Instruction("addi", rd=0, rs1=0, imm=0, address=address)
    if m == "li":
        return Instruction("addi", rd=reg_index(ops[0]), rs1=0, imm=_num(ops[1]), address=address)
    if m == "mv":
        return Instruction("addi", rd=reg_index(ops[0]), rs1=reg_index(ops[1]), imm=0, address=address)
    if m == "ret":
        return Instruction("jalr", rd=0, rs1=1, imm=0, address=address)
    if m == "jr":
        return Instruction("jalr", rd=0, rs1=reg_index(ops[0]), imm=0, address=address)
    if m == "j":
        return Instruction("jal", rd=0, imm=_num(ops[0]), address=address)
    if m not in FORMATS:
        raise ValueError(f"unknown mnemonic {m!r}")

    fmt = FORMATS[m]
    if m in ("ecall", "ebreak", "fence.i"):
        return Instruction(m, address=address) if m != "fence.i" else Instruction(m, rd=0, rs1=0, imm=0, address=address)
    if m == "fence":
        pred, succ = (ops + ["iorw", "iorw"])[:2] if ops else ("iorw", "iorw")
        return Instruction(m, rd=0, rs1=0, imm=_fence_bits(pred) << 4 | _fence_bits(succ), address=address)
    if m in _CSR:
        src = _num(ops[2]) if m.endswith("i") else reg_index(ops[2])
        return Instruction(m, rd=reg_index(ops[0]), rs1=src, imm=_num(ops[1]), address=address)
    if fmt == "R":
        return Instruction(m, rd=reg_index(ops[0]), rs1=reg_index(ops[1]), rs2=reg_index(ops[2]), address=address)
    if m == "jalr" or m in _LOADS or fmt == "S":
        if len(ops) == 2 and (mo := _MEM_OPERAND.match(ops[1].replace(" ", ""))):
            imm, base = _num(mo.group(1)), reg_index(mo.group(2))
        elif m == "jalr" and len(ops) == 1:
            imm, base = 0, reg_index(ops[0])
            return Instruction(m, rd=1, rs1=base, imm=imm, address=address)
        else:
            raise ValueError(f"bad memory operand in {text!r}")
        if fmt == "S":
            return Instruction(m, rs1=base, rs2=reg_index(ops[0]), imm=imm, address=address)
        return Instruction(m, rd=reg_index(ops[0]), rs1=base, imm=imm, address=address)
    if fmt == "I":
        return Instruction(m, rd=reg_index(ops[0]), rs1=reg_index(ops[1]), imm=_num(ops[2]), address=address)
    if fmt == "B":
        return Instruction(m, rs1=reg_index(ops[0]), rs2=reg_index(ops[1]), imm=_num(ops[2]), address=address)
    if fmt == "U":
        return Instruction(m, rd=reg_index(ops[0]), imm=_num(ops[1]), address=address)
    if len(ops) == 1:
        return Instruction(m, rd=1, imm=_num(ops[0]), address=address)
    return Instruction(m, rd=reg_index(ops[0]), imm=_num(ops[1]), address=address)


def assemble(lines, address: int = 0) -> list[Instruction]:
    """Parse and encode a block of assembly, one instruction per 4 bytes."""
    if isinstance(lines, str):
        lines = [ln for ln in lines.replace(";", "\n").splitlines() if ln.split("#")[0].strip()]
    out = []
    for i, line in enumerate(lines):
        ins = parse(line, address + 4 * i)
        out.append(replace(ins, raw=encode(ins)))
    return out


def assemble_bytes(lines, address: int = 0) -> bytes:
    return b"".join(ins.raw.to_bytes(4, "little") for ins in assemble(lines, address))
