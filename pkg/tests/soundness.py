"""Run gadget windows from random register states against a wildcard memory."""
import random

from rvjop.emulator import Machine, Memory
from rvjop.isa import reg_index
from rvjop.scanner import Const, Loaded, RegOffset


class WildMemory(Memory):
    """Image regions are real; every other byte is random but stable per address."""

    def __init__(self, rng: random.Random):
        super().__init__()
        self.rng = rng
        self.extra: dict[int, int] = {}

    def _byte(self, addr: int) -> int:
        r = super().find(addr)
        if r is not None:
            return r.data[addr - r.start]
        if addr not in self.extra:
            self.extra[addr] = self.rng.randrange(256)
        return self.extra[addr]

    def read(self, addr, size):
        if super().find(addr, size) is not None:
            return super().read(addr, size)
        return bytes(self._byte(a) for a in range(addr, addr + size))

    def write(self, addr, blob, force=False):
        r = super().find(addr, len(blob))
        if r is not None:
            r.data[addr - r.start:addr - r.start + len(blob)] = blob
            return
        for i, b in enumerate(blob):
            self.extra[addr + i] = b


def run_window(image, candidate, rng: random.Random):
    """(initial regs, machine) after executing exactly the candidate's instructions."""
    mem = WildMemory(rng)
    for seg in image.segments:
        mem.map(seg.addr, seg.size, seg.writable, seg.executable, data=seg.data)
    m = Machine(mem, image.xlen, record_trace=True)
    m.regs = [0] + [rng.getrandbits(32) for _ in range(31)]
    init = list(m.regs)
    m.pc = candidate.start_addr
    for _ in range(len(candidate)):
        m.step()
        if m.trap is not None:
            break
    return init, m


def memory_value(m, addr, width):
    return int.from_bytes(m.memory.read(addr & m.mask, width), "little")


def check_soundness(img, catalog, states=200, seed=7):
    """Compare each candidate's summary with emulation from random states; returns violations."""
    rng = random.Random(seed)
    bad = []
    check_soundness.runs = 0
    for c in catalog.candidates:
        s = c.summary
        predicted = set(s.regs_written)
        for _ in range(states):
            init, m = run_window(img, c, rng)
            check_soundness.runs += 1
            written = {reg_index(t.changed[0]) for t in m.trace if t.changed}
            delta = {r for r in range(32) if m.regs[r] != init[r]}
            if written != predicted or not delta <= written:
                bad.append((c.start_addr, "regs", sorted(written), sorted(predicted)))
                break
            log = [(k, w) for k, _, w in m.mem_log]
            want = [("r", a.width) for a in s.mem_reads] + [("w", a.width) for a in s.mem_writes]
            if sorted(log) != sorted(want):
                bad.append((c.start_addr, "mem", log, want))
                break
            for r in predicted:
                v = s.value(r)
                if isinstance(v, Const):
                    ok = m.regs[r] == v.value
                elif isinstance(v, RegOffset):
                    ok = m.regs[r] == (init[v.reg] + v.offset) & m.mask
                elif isinstance(v, Loaded) and not s.mem_writes:
                    ok = m.regs[r] == memory_value(m, init[v.reg] + v.offset, v.width)
                else:
                    ok = True
                if not ok:
                    bad.append((c.start_addr, "value", r))
            if bad:
                break
    return bad
