import csv

import pytest
from hypothesis import given, settings, strategies as st

from rvjop.isa import (FORMATS, MNEMONICS, IllegalInstruction, Instruction, OperandOutOfRange,
                       assemble, decode, encode, jalr_target, parse)

from conftest import DATA


def test_decode_jalr_a3():
    ins = decode(0x00068067, 0x1000)
    assert (ins.mnemonic, ins.rd, ins.rs1, ins.imm) == ("jalr", 0, 13, 0)
    assert ins.text() == "jalr zero, 0(a3)"
    assert ins.format == "I"


def test_decode_nop():
    ins = decode(0x00000013)
    assert (ins.mnemonic, ins.rd, ins.rs1, ins.imm) == ("addi", 0, 0, 0)


@pytest.mark.parametrize("word", [0x00000000, 0x4501, 0x0000_8082, 0x02B50533, 0x0000_0007, 0xFFFFFFFF])
def test_illegal_words(word):
    # zero word, compressed forms, M-extension mul, F-extension load, all-ones
    with pytest.raises(IllegalInstruction):
        decode(word)


def test_encode_examples():
    assert encode(Instruction("jalr", rd=0, rs1=13, imm=0)) == 0x00068067
    w = encode(Instruction("addi", rd=14, rs1=14, imm=4))
    assert decode(w) == Instruction("addi", rd=14, rs1=14, imm=4)
    with pytest.raises(OperandOutOfRange):
        encode(Instruction("addi", rd=1, rs1=1, imm=4096))
    with pytest.raises(OperandOutOfRange):
        encode(Instruction("beq", rs1=1, rs2=2, imm=3))


def test_jalr_target():
    assert jalr_target(0x10400, 0) == 0x10400
    assert jalr_target(0x10001, 0) == 0x10000  # bit 0 cleared
    assert jalr_target(0x10000, -1) == 0x0FFFE
    assert jalr_target(0xFFFFFFFF, 1) == 0  # wraps
    assert jalr_target(0xFFFFFFFF, 1, xlen=64) == 0x100000000


def test_parse_and_assemble():
    ins = assemble("addi a4, a4, 4; lw a5, 0(a4); jalr zero, 0(a5)", 0x1002c)
    assert [i.raw for i in ins] == [0x00470713, 0x00072783, 0x00078067]
    assert parse("ret") == Instruction("jalr", rd=0, rs1=1, imm=0)
    assert parse("li a0, 1") == Instruction("addi", rd=10, rs1=0, imm=1)


def test_reads_writes():
    ins = decode(0x00470713)  # addi a4, a4, 4
    assert ins.reads() == {14} and ins.writes() == {14}
    assert decode(0x00068067).writes() == frozenset()  # rd = zero
    st_ = parse("sw a0, 4(sp)")
    assert st_.reads() == {2, 10} and st_.writes() == frozenset()


reg = st.integers(0, 31)


@st.composite
def instructions(draw):
    m = draw(st.sampled_from(MNEMONICS))
    fmt = FORMATS[m]
    if m in ("ecall", "ebreak"):
        return Instruction(m)
    if m == "fence":
        pred, succ = draw(st.integers(1, 15)), draw(st.integers(1, 15))
        return Instruction(m, rd=0, rs1=0, imm=pred << 4 | succ)
    if m == "fence.i":
        return Instruction(m, rd=0, rs1=0, imm=0)
    if m.startswith("csr"):
        return Instruction(m, rd=draw(reg), rs1=draw(reg), imm=draw(st.integers(0, 0xFFF)))
    if m in ("slli", "srli", "srai"):
        return Instruction(m, rd=draw(reg), rs1=draw(reg), imm=draw(st.integers(0, 31)))
    if fmt == "R":
        return Instruction(m, rd=draw(reg), rs1=draw(reg), rs2=draw(reg))
    if fmt == "I":
        return Instruction(m, rd=draw(reg), rs1=draw(reg), imm=draw(st.integers(-2048, 2047)))
    if fmt == "S":
        return Instruction(m, rs1=draw(reg), rs2=draw(reg), imm=draw(st.integers(-2048, 2047)))
    if fmt == "B":
        return Instruction(m, rs1=draw(reg), rs2=draw(reg), imm=2 * draw(st.integers(-2048, 2047)))
    if fmt == "U":
        return Instruction(m, rd=draw(reg), imm=draw(st.integers(0, 0xFFFFF)))
    return Instruction(m, rd=draw(reg), imm=2 * draw(st.integers(-(1 << 19), (1 << 19) - 1)))


@settings(max_examples=10_000, deadline=None, derandomize=True)
@given(instructions(), st.integers(0, 0x3FFFFFFF))
def test_roundtrip(ins, slot):
    addr = slot * 4
    word = encode(ins)
    back = decode(word, addr)
    assert back == Instruction(ins.mnemonic, ins.rd, ins.rs1, ins.rs2, ins.imm, addr)
    assert encode(back) == word
    # text form parses back to the same instruction
    assert parse(back.text(), addr) == back


def load_corpus():
    with open(DATA / "rv32i_corpus.tsv") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    return rows


def _field(v):
    return None if v == "-" else int(v)


def test_corpus_agreement():
    rows = load_corpus()
    assert len(rows) >= 200
    bad = []
    for row in rows:
        word = int(row["word"], 16)
        ins = decode(word)
        want = (row["mnemonic"], _field(row["rd"]), _field(row["rs1"]), _field(row["rs2"]), _field(row["imm"]))
        got = (ins.mnemonic, ins.rd, ins.rs1, ins.rs2, ins.imm)
        if got != want:
            bad.append((row["word"], row["asm"], got, want))
        elif encode(ins) != word or parse(row["asm"]) != ins:
            bad.append((row["word"], row["asm"], "reencode/parse"))
    assert bad == []
