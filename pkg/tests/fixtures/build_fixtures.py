"""Rebuild the committed RV32 fixture binaries.

Needs clang with the riscv32 target and ld.lld. The outputs are committed so
the test suite never needs a cross toolchain.
"""
import pathlib
import subprocess
import tempfile

HERE = pathlib.Path(__file__).parent
SRC = HERE / "src"
CC = ["clang", "--target=riscv32", "-march=rv32i", "-mno-relax", "-c"]


def assemble(src: pathlib.Path, obj: pathlib.Path) -> None:
    subprocess.run(CC + ["-I", str(SRC), str(src), "-o", str(obj)], check=True)


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        for name in ("fixture_single", "fixture_twostage"):
            assemble(SRC / f"{name}.s", tmp / f"{name}.o")
            subprocess.run(
                ["ld.lld", "-static", "--no-pie", "-T", str(SRC / "fixture.ld"),
                 str(tmp / f"{name}.o"), "-o", str(HERE / f"{name}.elf")],
                check=True,
            )
        assemble(SRC / "libstub.s", tmp / "libstub.o")
        subprocess.run(["ld.lld", "-shared", "-soname", "libstub.so",
                        str(tmp / "libstub.o"), "-o", str(HERE / "libstub.so")], check=True)
        assemble(SRC / "fixture_dynamic.s", tmp / "fixture_dynamic.o")
        subprocess.run(["ld.lld", "--no-pie", "-e", "_start",
                        str(tmp / "fixture_dynamic.o"), str(HERE / "libstub.so"),
                        "-o", str(HERE / "fixture_dynamic.elf")], check=True)


if __name__ == "__main__":
    main()
