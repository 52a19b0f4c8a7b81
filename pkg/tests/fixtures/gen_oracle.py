"""Record fixture facts as reported by binutils readelf into oracle.json.

PLT stub addresses follow the RISC-V psABI layout: a 32-byte header, then
one 16-byte stub per R_RISCV_JUMP_SLOT relocation in .rela.plt order.
"""
import json
import pathlib
import re
import subprocess

HERE = pathlib.Path(__file__).parent


def readelf(*args):
    return subprocess.run(["readelf", "-W", *args], check=True, capture_output=True, text=True).stdout


def facts(path):
    out = {}
    hdr = readelf("-h", path)
    out["entry_point"] = int(re.search(r"Entry point address:\s+(0x[0-9a-f]+)", hdr).group(1), 16)
    out["class"] = re.search(r"Class:\s+(\S+)", hdr).group(1)
    sections = {}
    for m in re.finditer(r"\]\s+(\S+)\s+\S+\s+([0-9a-f]{8})\s+([0-9a-f]{6})\s+([0-9a-f]{6})\s+\S+\s+(\S*)\s", readelf("-S", path)):
        name, addr, off, size, flags = m.groups()
        sections[name] = {"addr": int(addr, 16), "size": int(size, 16), "flags": flags}
    out["executable_sections"] = sorted(n for n, s in sections.items() if "X" in s["flags"])
    out["sections"] = sections
    symbols = {}
    for line in readelf("-s", path).splitlines():
        parts = line.split()
        if len(parts) == 8 and parts[0].endswith(":") and parts[6] != "UND" and parts[3] in ("FUNC", "OBJECT", "NOTYPE"):
            symbols[parts[7]] = int(parts[1], 16)
    out["symbols"] = symbols
    plt = []
    if ".plt" in sections:
        slots = [l.split()[4] for l in readelf("-r", path).splitlines() if "R_RISCV_JUMP_SLOT" in l]
        for i, name in enumerate(slots):
            plt.append({"name": name, "stub_addr": sections[".plt"]["addr"] + 32 + 16 * i})
    out["plt_entries"] = plt
    dump = readelf("-x", ".text", path)
    first = re.search(r"0x[0-9a-f]+ ([0-9a-f]{8})", dump).group(1)
    out["text_first_word"] = int.from_bytes(bytes.fromhex(first), "little")
    return out


def main():
    data = {p.stem: facts(str(p)) for p in sorted(HERE.glob("*.elf"))}
    (HERE / "oracle.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
