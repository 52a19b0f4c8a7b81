"""Regenerate rv32i_corpus.tsv with clang's integrated assembler.

Random operands are chosen here, rendered as assembly text, and assembled by
clang (riscv32, rv32i, no relaxation). The tsv records the word clang
produced next to the fields that were asked for, so the decoder is checked
against an encoder it shares no code with.
"""
import pathlib
import random
import struct
import subprocess
import tempfile

from elftools.elf.elffile import ELFFile

ABI = ("zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 a6 a7 "
       "s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6").split()
R = "add sub sll slt sltu xor srl sra or and".split()
IALU = "addi slti sltiu xori ori andi".split()
SHIFT = "slli srli srai".split()
LOAD = "lb lh lw lbu lhu".split()
STORE = "sb sh sw".split()
BRANCH = "beq bne blt bge bltu bgeu".split()
CSR = "csrrw csrrs csrrc".split()
CSRI = "csrrwi csrrsi csrrci".split()
FENCE_SETS = ["i", "o", "r", "w", "rw", "iorw", "ow", "ir"]


def pick(rng):
    kind = rng.choice(["R", "IALU", "SHIFT", "LOAD", "STORE", "BRANCH", "JAL",
                       "JALR", "LUI", "AUIPC", "CSR", "CSRI", "SYS", "FENCE"])
    rd, rs1, rs2 = rng.randrange(32), rng.randrange(32), rng.randrange(32)
    imm12 = rng.randint(-2048, 2047)
    if kind == "R":
        m = rng.choice(R)
        return f"{m} {ABI[rd]}, {ABI[rs1]}, {ABI[rs2]}", (m, rd, rs1, rs2, None)
    if kind == "IALU":
        m = rng.choice(IALU)
        return f"{m} {ABI[rd]}, {ABI[rs1]}, {imm12}", (m, rd, rs1, None, imm12)
    if kind == "SHIFT":
        m, sh = rng.choice(SHIFT), rng.randrange(32)
        return f"{m} {ABI[rd]}, {ABI[rs1]}, {sh}", (m, rd, rs1, None, sh)
    if kind == "LOAD":
        m = rng.choice(LOAD)
        return f"{m} {ABI[rd]}, {imm12}({ABI[rs1]})", (m, rd, rs1, None, imm12)
    if kind == "STORE":
        m = rng.choice(STORE)
        return f"{m} {ABI[rs2]}, {imm12}({ABI[rs1]})", (m, None, rs1, rs2, imm12)
    if kind == "BRANCH":
        m, off = rng.choice(BRANCH), rng.randrange(-2048, 2048) * 2
        return f"{m} {ABI[rs1]}, {ABI[rs2]}, {off}", (m, None, rs1, rs2, off)
    if kind == "JAL":
        off = rng.randrange(-(1 << 19), 1 << 19) * 2
        return f"jal {ABI[rd]}, {off}", ("jal", rd, None, None, off)
    if kind == "JALR":
        return f"jalr {ABI[rd]}, {imm12}({ABI[rs1]})", ("jalr", rd, rs1, None, imm12)
    if kind in ("LUI", "AUIPC"):
        m, up = kind.lower(), rng.randrange(1 << 20)
        return f"{m} {ABI[rd]}, {up:#x}", (m, rd, None, None, up)
    if kind == "CSR":
        m, csr = rng.choice(CSR), rng.choice([0x300, 0x305, 0x340, 0x341, 0xC00, 0x001])
        return f"{m} {ABI[rd]}, {csr:#x}, {ABI[rs1]}", (m, rd, rs1, None, csr)
    if kind == "CSRI":
        m, csr, z = rng.choice(CSRI), rng.choice([0x300, 0x305, 0x340, 0x001]), rng.randrange(32)
        return f"{m} {ABI[rd]}, {csr:#x}, {z}", (m, rd, z, None, csr)
    if kind == "SYS":
        m = rng.choice(["ecall", "ebreak"])
        return m, (m, None, None, None, None)
    pred, succ = rng.choice(FENCE_SETS), rng.choice(FENCE_SETS)
    bits = lambda s: sum({"i": 8, "o": 4, "r": 2, "w": 1}[c] for c in s)
    return f"fence {pred}, {succ}", ("fence", 0, 0, None, bits(pred) << 4 | bits(succ))


def main(n=400, seed=20240613):
    rng = random.Random(seed)
    rows = [pick(rng) for _ in range(n)]
    here = pathlib.Path(__file__).parent
    with tempfile.TemporaryDirectory() as tmp:
        src = pathlib.Path(tmp) / "corpus.s"
        obj = pathlib.Path(tmp) / "corpus.o"
        src.write_text(".option norvc\n" + "\n".join(t for t, _ in rows) + "\n")
        subprocess.run(["clang", "--target=riscv32", "-march=rv32i", "-mno-relax",
                        "-c", str(src), "-o", str(obj)], check=True)
        with open(obj, "rb") as f:
            elf = ELFFile(f)
            if elf.get_section_by_name(".rela.text"):
                raise SystemExit("corpus must not need relocations")
            words = [w for (w,) in struct.iter_unpack("<I", elf.get_section_by_name(".text").data())]
    assert len(words) == len(rows)
    fmt = lambda v: "-" if v is None else str(v)
    with open(here / "rv32i_corpus.tsv", "w") as out:
        out.write("word\tasm\tmnemonic\trd\trs1\trs2\timm\n")
        for w, (text, fields) in zip(words, rows):
            out.write(f"{w:08x}\t{text}\t" + "\t".join(fmt(v) for v in fields) + "\n")


if __name__ == "__main__":
    main()
