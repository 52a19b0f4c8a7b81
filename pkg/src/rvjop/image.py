"""Loading RISC-V ELF files into an analyzable, immutable image."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

from elftools.common.exceptions import ELFError
from elftools.elf.constants import P_FLAGS, SH_FLAGS
from elftools.elf.elffile import ELFFile
from elftools.elf.relocation import RelocationSection
from elftools.elf.sections import SymbolTableSection

from .isa import IllegalInstruction, decode, sign_extend

EM_RISCV = "EM_RISCV"
R_RISCV_JUMP_SLOT = 5
PLT_HEADER_SIZE = 32
PLT_ENTRY_SIZE = 16


class ImageError(Exception):
    pass


class NotElf(ImageError):
    pass


class UnsupportedClass(ImageError):
    pass


class Malformed(ImageError):
    pass


class Unmapped(ImageError):
    def __init__(self, addr: int):
        super().__init__(f"address 0x{addr:x} is not mapped")
        self.addr = addr


@dataclass(frozen=True)
class Section:
    name: str
    addr: int
    data: bytes
    executable: bool
    writable: bool

    @property
    def end(self) -> int:
        return self.addr + len(self.data)

    def __contains__(self, addr: int) -> bool:
        return self.addr <= addr < self.end


@dataclass(frozen=True)
class Segment:
    """A loadable memory range: file bytes followed by zero fill up to ``size``."""
    addr: int
    size: int
    data: bytes
    readable: bool = True
    writable: bool = False
    executable: bool = False


@dataclass(frozen=True)
class Symbol:
    name: str
    addr: int
    size: int = 0


@dataclass(frozen=True)
class PltEntry:
    name: str
    stub_addr: int
    got_addr: int | None = None


@dataclass
class BinaryImage:
    xlen: int
    sections: list[Section]
    segments: list[Segment]
    symbols: list[Symbol] = field(default_factory=list)
    plt_entries: list[PltEntry] = field(default_factory=list)
    entry_point: int = 0

    @property
    def executable_sections(self) -> list[Section]:
        return [s for s in self.sections if s.executable]

    def section_at(self, addr: int) -> Section:
        for s in self.sections:
            if addr in s:
                return s
        raise Unmapped(addr)

    def is_mapped(self, addr: int) -> bool:
        return any(addr in s for s in self.sections)

    def read(self, addr: int, size: int) -> bytes:
        s = self.section_at(addr)
        if addr + size > s.end:
            raise Unmapped(s.end)
        off = addr - s.addr
        return s.data[off:off + size]

    def byte_at(self, addr: int) -> int:
        return self.read(addr, 1)[0]

    def word_at(self, addr: int) -> int:
        return struct.unpack("<I", self.read(addr, 4))[0]

    def instruction_at(self, addr: int):
        """Decode the word at ``addr``; raises IllegalInstruction or Unmapped."""
        if addr % 4:
            raise IllegalInstruction(0, f"unaligned address 0x{addr:x}")
        return decode(self.word_at(addr), addr)

    def symbol(self, name: str) -> Symbol | None:
        for s in self.symbols:
            if s.name == name:
                return s
        return None

    def symbol_at(self, addr: int) -> Symbol | None:
        best = None
        for s in self.symbols:
            if s.addr == addr:
                return s
            if s.addr < addr < s.addr + s.size and best is None:
                best = s
        return best

    def plt_entry(self, name: str) -> PltEntry | None:
        for p in self.plt_entries:
            if p.name == name:
                return p
        return None

    @classmethod
    def from_code(cls, code: bytes, base: int = 0x10000, data: dict[int, bytes] | None = None,
                  xlen: int = 32) -> "BinaryImage":
        """Build an image from raw code (plus optional writable data blobs)."""
        sections = [Section(".text", base, bytes(code), True, False)]
        segments = [Segment(base, len(code), bytes(code), executable=True)]
        for i, (addr, blob) in enumerate(sorted((data or {}).items())):
            sections.append(Section(f".data{i}", addr, bytes(blob), False, True))
            segments.append(Segment(addr, len(blob), bytes(blob), writable=True))
        return cls(xlen, sections, segments, entry_point=base)


def load(data: bytes, xlen: int = 32) -> BinaryImage:
    """Parse an ELF file's bytes.

    ``xlen`` is the configured register width; a 64-bit ELF is refused unless
    it is 64.
    """
    if data[:4] != b"\x7fELF":
        raise NotElf("not an ELF file (bad magic)")
    try:
        elf = ELFFile(io.BytesIO(data))
        machine = elf.header["e_machine"]
        if machine != EM_RISCV:
            raise UnsupportedClass(f"not a RISC-V ELF (machine {machine})")
        if elf.little_endian is False:
            raise UnsupportedClass("big-endian ELF")
        if elf.elfclass != xlen:
            raise UnsupportedClass(f"ELF{elf.elfclass} while configured for {xlen}-bit")
        return _load(elf, xlen)
    except (ELFError, struct.error, ValueError) as exc:
        raise Malformed(str(exc)) from exc


def _load(elf: ELFFile, xlen: int) -> BinaryImage:
    sections = []
    for sec in elf.iter_sections():
        flags = sec["sh_flags"]
        if not flags & SH_FLAGS.SHF_ALLOC or sec["sh_addr"] == 0:
            continue
        if sec["sh_type"] == "SHT_NOBITS":
            payload = bytes(sec["sh_size"])
        else:
            payload = sec.data()
        sections.append(Section(sec.name, sec["sh_addr"], payload,
                                bool(flags & SH_FLAGS.SHF_EXECINSTR),
                                bool(flags & SH_FLAGS.SHF_WRITE)))
    sections.sort(key=lambda s: s.addr)

    segments = []
    for seg in elf.iter_segments():
        if seg["p_type"] != "PT_LOAD":
            continue
        fl = seg["p_flags"]
        segments.append(Segment(seg["p_vaddr"], seg["p_memsz"], seg.data(),
                                bool(fl & P_FLAGS.PF_R), bool(fl & P_FLAGS.PF_W),
                                bool(fl & P_FLAGS.PF_X)))

    execs = sorted((s for s in sections if s.executable), key=lambda s: s.addr)
    for a, b in zip(execs, execs[1:]):
        if a.end > b.addr:
            raise Malformed(f"executable sections {a.name} and {b.name} overlap")

    symbols = []
    for sec in elf.iter_sections():
        if not isinstance(sec, SymbolTableSection) or sec.name != ".symtab":
            continue
        for sym in sec.iter_symbols():
            if not sym.name or sym["st_shndx"] == "SHN_UNDEF":
                continue
            if sym["st_info"]["type"] in ("STT_SECTION", "STT_FILE"):
                continue
            symbols.append(Symbol(sym.name, sym["st_value"], sym["st_size"]))
    symbols.sort(key=lambda s: (s.addr, s.name))

    image = BinaryImage(xlen, sections, segments, symbols, [], elf.header["e_entry"])
    image.plt_entries = _plt_entries(elf, image)
    return image


def _jump_slots(elf: ELFFile) -> dict[int, str]:
    slots = {}
    for sec in elf.iter_sections():
        if not isinstance(sec, RelocationSection):
            continue
        symtab = elf.get_section(sec["sh_link"]) if sec["sh_link"] else None
        for rel in sec.iter_relocations():
            if rel["r_info_type"] != R_RISCV_JUMP_SLOT or symtab is None:
                continue
            slots[rel["r_offset"]] = symtab.get_symbol(rel["r_info_sym"]).name
    return slots


def plt_stub_got(image: BinaryImage, addr: int) -> int | None:
    """GOT slot used by a canonical ``auipc t3; lw t3; jalr t1, t3`` stub, else None."""
    try:
        a, b, c = (image.instruction_at(addr + 4 * i) for i in range(3))
    except (IllegalInstruction, Unmapped):
        return None
    if a.mnemonic != "auipc" or b.mnemonic not in ("lw", "ld") or c.mnemonic != "jalr":
        return None
    if b.rs1 != a.rd or c.rs1 != b.rd:
        return None
    return (addr + (sign_extend(a.imm, 20) << 12) + b.imm) & ((1 << image.xlen) - 1)


def _plt_entries(elf: ELFFile, image: BinaryImage) -> list[PltEntry]:
    slots = _jump_slots(elf)
    entries = []
    for sec in image.sections:
        if sec.name not in (".plt", ".plt.sec") or not sec.executable:
            continue
        start = sec.addr + (PLT_HEADER_SIZE if sec.name == ".plt" else 0)
        for stub in range(start, sec.end - 11, PLT_ENTRY_SIZE):
            got = plt_stub_got(image, stub)
            if got is None:
                continue
            name = slots.get(got, f"plt_{stub:x}")
            entries.append(PltEntry(name, stub, got))
    return entries


def load_file(path, xlen: int = 32) -> BinaryImage:
    with open(path, "rb") as f:
        return load(f.read(), xlen)
