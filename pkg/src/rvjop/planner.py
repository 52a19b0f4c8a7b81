"""Backward chain construction from a single final syscall."""
from __future__ import annotations

from dataclasses import dataclass, field

from .abi import DEFAULT_CONVENTION, DEFAULT_POLICY, ReservedPolicy, SyscallConvention
from .image import BinaryImage, Unmapped
from .isa import REG_NAMES, IllegalInstruction, reg_index
from .scanner import (Const, DispatcherGadget, Family, GadgetCandidate, Loaded, RegOffset,
                      filter_safe, summarize)

MAX_REPEAT = 1 << 16
SYSCALL_SEARCH_LIMIT = 64


class PlanError(Exception):
    pass


class NoDispatcher(PlanError):
    pass


class NoInitializer(PlanError):
    pass


class SyscallNotFound(PlanError):
    pass


class Unsynthesizable(PlanError):
    pass


class UnsatisfiableRegister(PlanError):
    def __init__(self, reg: int, why: str = ""):
        super().__init__(f"no non-clobbering producer for {REG_NAMES[reg]}" + (f": {why}" if why else ""))
        self.reg = reg


class GoalError(PlanError):
    pass


@dataclass(frozen=True)
class ChainGoal:
    syscall_name: str
    syscall_number: int
    required_regs: dict[int, int]
    secret_address: int | None = None
    secret_length: int | None = None

    def check(self, policy: ReservedPolicy = DEFAULT_POLICY) -> None:
        bad = sorted(set(self.required_regs) & policy.registers)
        if bad:
            raise GoalError("goal constrains reserved register(s) "
                            + ", ".join(REG_NAMES[r] for r in bad))
        if 0 in self.required_regs:
            raise GoalError("x0 cannot be constrained")

    def to_dict(self) -> dict:
        d = {"syscall": {"name": self.syscall_name, "number": self.syscall_number},
             "registers": {REG_NAMES[r]: v for r, v in sorted(self.required_regs.items())}}
        if self.secret_address is not None:
            d["secret"] = {"address": self.secret_address, "length": self.secret_length}
        return d


def _resolve_value(v, image: BinaryImage | None) -> int:
    if isinstance(v, int):
        return v
    if isinstance(v, str):
        if v.startswith("@"):
            v = {"symbol": v[1:]}
        else:
            return int(v, 0)
    if isinstance(v, dict) and "symbol" in v:
        sym = image.symbol(v["symbol"]) if image is not None else None
        if sym is None:
            raise GoalError(f"unknown symbol {v['symbol']!r}")
        return sym.addr + int(v.get("offset", 0))
    raise GoalError(f"cannot interpret register value {v!r}")


def goal_from_dict(d: dict, image: BinaryImage | None = None,
                   conv: SyscallConvention = DEFAULT_CONVENTION) -> ChainGoal:
    """Build a goal from its JSON form; values may be ints, "0x.." strings or ``{"symbol": name}``."""
    sc = d.get("syscall", "write")
    if isinstance(sc, str):
        sc = {"name": sc}
    name = sc["name"]
    number = sc.get("number")
    if number is None:
        number = conv.number(name)
    regs = {reg_index(k): _resolve_value(v, image) for k, v in d.get("registers", {}).items()}
    regs.setdefault(conv.id_register, number)
    if regs[conv.id_register] != number:
        raise GoalError(f"{REG_NAMES[conv.id_register]} must hold the syscall number {number}")
    secret = d.get("secret")
    addr = length = None
    if secret:
        addr = _resolve_value(secret.get("address", secret.get("symbol") and {"symbol": secret["symbol"]}), image)
        length = secret.get("length")
        if length is None:
            sym = image.symbol(secret["symbol"]) if image is not None and "symbol" in secret else None
            length = sym.size if sym is not None else None
        if not length:
            raise GoalError("secret region needs a length")
    return ChainGoal(name, number, regs, addr, length)


@dataclass(frozen=True)
class ChainStep:
    address: int
    purpose: str  # init-literal, increment, load-address, set-fd, syscall, initializer
    repeat: int = 1
    register: int | None = None
    length: int = 1
    rationale: str = ""

    def __post_init__(self):
        if self.repeat < 1:
            raise ValueError("repeat must be >= 1")
        if self.repeat > 1 and self.purpose != "increment":
            raise ValueError("only increment steps repeat")

    def to_dict(self) -> dict:
        return {"address": self.address, "purpose": self.purpose, "repeat": self.repeat,
                "register": None if self.register is None else REG_NAMES[self.register],
                "length": self.length, "rationale": self.rationale}

    @classmethod
    def from_dict(cls, d: dict) -> "ChainStep":
        reg = None if d.get("register") is None else reg_index(d["register"])
        return cls(d["address"], d["purpose"], d.get("repeat", 1), reg, d.get("length", 1),
                   d.get("rationale", ""))


@dataclass(frozen=True)
class LiteralSource:
    """A gadget that sets a register to ``value`` (setter) or adds ``value`` to it (incrementer)."""
    address: int
    value: int
    length: int = 1


def synthesize_literal(target: int, setters, incrementers, max_repeat: int = MAX_REPEAT,
                       register: int | None = None) -> list[ChainStep]:
    """Cheapest ``set c`` + ``n x add k`` sequence reaching ``target``.

    Cost is the number of dispatch-table entries, 1 + n.
    """
    if target < 0:
        raise ValueError("target must be non-negative")
    best = None
    for s in setters:
        diff = target - s.value
        if diff == 0:
            options = [(1, s.address, -1, s, None, 0)]
        else:
            options = []
            for inc in incrementers:
                k = inc.value
                if k == 0 or diff % k:
                    continue
                n = diff // k
                if 0 < n <= max_repeat:
                    options.append((1 + n, s.address, inc.address, s, inc, n))
        for opt in options:
            if best is None or opt[:3] < best[:3]:
                best = opt
    if best is None:
        raise Unsynthesizable(f"no setter/incrementer pair reaches {target}")
    _, _, _, s, inc, n = best
    steps = [ChainStep(s.address, "init-literal", 1, register, s.length,
                       f"set {REG_NAMES[register] if register is not None else 'register'} to {s.value}")]
    if n:
        steps.append(ChainStep(inc.address, "increment", n, register, inc.length,
                               f"add {inc.value} x{n} -> {target}"))
    return steps


@dataclass
class ChainPlan:
    initializer: ChainStep
    dispatcher: DispatcherGadget
    steps: list[ChainStep]
    predicted_final_state: dict[int, int]
    goal: ChainGoal
    seeds: dict[int, tuple[int, int]] = field(default_factory=dict)  # reserved reg -> (base reg, offset)
    policy: ReservedPolicy = DEFAULT_POLICY

    @property
    def table_entries(self) -> list[int]:
        out = []
        for s in self.steps:
            out.extend([s.address] * s.repeat)
        return out

    def to_dict(self) -> dict:
        return {
            "goal": self.goal.to_dict(),
            "policy": self.policy.to_dict(),
            "dispatcher": self.dispatcher.to_dict(),
            "initializer": self.initializer.to_dict(),
            "seeds": {REG_NAMES[r]: {"base": REG_NAMES[b], "offset": off}
                      for r, (b, off) in sorted(self.seeds.items())},
            "steps": [s.to_dict() for s in self.steps],
            "predicted_final_state": {REG_NAMES[r]: v for r, v in sorted(self.predicted_final_state.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainPlan":
        g = d["goal"]
        secret = g.get("secret") or {}
        goal = ChainGoal(g["syscall"]["name"], g["syscall"]["number"],
                         {reg_index(k): v for k, v in g["registers"].items()},
                         secret.get("address"), secret.get("length"))
        return cls(
            ChainStep.from_dict(d["initializer"]),
            DispatcherGadget.from_dict(d["dispatcher"]),
            [ChainStep.from_dict(s) for s in d["steps"]],
            {reg_index(k): v for k, v in d["predicted_final_state"].items()},
            goal,
            {reg_index(k): (reg_index(v["base"]), v["offset"]) for k, v in d["seeds"].items()},
            ReservedPolicy.from_dict(d["policy"]),
        )


def _syscall_window(image: BinaryImage, entry: int, conv: SyscallConvention):
    """Instructions from ``entry`` up to and including the trap, or None."""
    out = []
    addr = entry
    for _ in range(SYSCALL_SEARCH_LIMIT):
        try:
            ins = image.instruction_at(addr)
        except (IllegalInstruction, Unmapped):
            return None
        out.append(ins)
        if ins.mnemonic == conv.trap_mnemonic:
            return out
        if ins.is_control:
            return None
        addr += 4
    return None


def resolve_syscall_entry(goal: ChainGoal, image: BinaryImage,
                          conv: SyscallConvention = DEFAULT_CONVENTION, address: int | None = None,
                          symbol: str | None = None, offset: int | None = None) -> ChainStep:
    """Where the chain enters the syscall wrapper: the instruction that sets the id register."""
    if address is not None:
        return ChainStep(address, "syscall", rationale="user-supplied syscall entry")
    name = symbol or goal.syscall_name
    sym = image.symbol(name)
    if sym is not None:
        if offset is not None:
            return ChainStep(sym.addr + offset, "syscall",
                             rationale=f"{name}+{offset:#x} (configured offset)")
        # first instruction that leaves the id register holding the number, followed by the trap
        addr = sym.addr
        for _ in range(SYSCALL_SEARCH_LIMIT):
            win = _syscall_window(image, addr, conv)
            if win is None:
                try:
                    ins = image.instruction_at(addr)
                except (IllegalInstruction, Unmapped):
                    break
                if ins.is_control and ins.mnemonic != conv.trap_mnemonic:
                    break
                addr += 4
                continue
            s = summarize(win, image, image.xlen)
            if s.value(conv.id_register) == Const(goal.syscall_number) and \
                    conv.id_register in win[0].writes():
                return ChainStep(addr, "syscall", length=len(win),
                                 rationale=f"{name}+{addr - sym.addr:#x} sets "
                                           f"{REG_NAMES[conv.id_register]}={goal.syscall_number}")
            addr += 4
        raise SyscallNotFound(f"{name} has no '{REG_NAMES[conv.id_register]} = "
                              f"{goal.syscall_number}; ecall' sequence")
    plt = image.plt_entry(name)
    if plt is not None and offset is not None:
        return ChainStep(plt.stub_addr + offset, "syscall",
                         rationale=f"{name}@plt {plt.stub_addr:#x} + {offset:#x}")
    raise SyscallNotFound(f"no symbol, PLT entry or configured address for {name!r}")


def _producer_steps(reg: int, target: int, pool: list[GadgetCandidate], goal: ChainGoal,
                    conv: SyscallConvention) -> list[list[ChainStep]]:
    """Every way the pool can leave ``reg`` == ``target``, cheapest first."""
    options: list[tuple[int, int, list[ChainStep]]] = []
    setters, incs = [], []
    for c in pool:
        v = c.summary.value(reg)
        if isinstance(v, Const):
            if v.value == target:
                if v.from_image:
                    purpose = "load-address"
                elif reg == conv.arg_registers[0] and goal.syscall_name in ("write", "read"):
                    purpose = "set-fd"
                else:
                    purpose = "init-literal"
                step = ChainStep(c.start_addr, purpose, 1, reg, len(c),
                                 f"{c.text()} leaves {REG_NAMES[reg]}={target:#x}")
                options.append((1, len(c), [step]))
            if not v.from_image:
                setters.append(LiteralSource(c.start_addr, v.value, len(c)))
        elif isinstance(v, RegOffset) and v.reg == reg and v.offset:
            incs.append(LiteralSource(c.start_addr, v.offset, len(c)))
    try:
        steps = synthesize_literal(target, setters, incs, register=reg)
    except (Unsynthesizable, ValueError):
        pass
    else:
        if len(steps) > 1:
            options.append((sum(s.repeat for s in steps), sum(s.length for s in steps), steps))
    options.sort(key=lambda o: (o[0], o[1], [s.address for s in o[2]]))
    return [o[2] for o in options]


def _step_writes(step: ChainStep, by_addr: dict[int, GadgetCandidate]) -> frozenset[int]:
    return by_addr[step.address].summary.regs_written


def predict(steps: list[ChainStep], windows: dict[int, object], initial: dict[int, int],
            xlen: int = 32) -> dict[int, int]:
    """Known register values after running ``steps`` on top of ``initial``."""
    mask = (1 << xlen) - 1
    state = dict(initial)
    for step in steps:
        s = windows[step.address]
        for _ in range(step.repeat):
            new = {}
            for r in s.regs_written:
                v = s.value(r)
                if isinstance(v, Const):
                    new[r] = v.value
                elif isinstance(v, RegOffset) and v.reg in state:
                    new[r] = (state[v.reg] + v.offset) & mask
                else:
                    new[r] = None
            for r, v in new.items():
                if v is None:
                    state.pop(r, None)
                else:
                    state[r] = v
    return state


def plan_chain(goal: ChainGoal, catalog: list[GadgetCandidate], dispatcher: DispatcherGadget | None,
               initializer: GadgetCandidate | None, image: BinaryImage,
               conv: SyscallConvention = DEFAULT_CONVENTION, policy: ReservedPolicy = DEFAULT_POLICY,
               syscall_address: int | None = None, syscall_symbol: str | None = None,
               syscall_offset: int | None = None) -> ChainPlan:
    """Greedy backward planning: syscall first, then each register from last to first."""
    goal.check(policy)
    if dispatcher is None:
        raise NoDispatcher("no usable dispatcher gadget")
    if initializer is None:
        raise NoInitializer("no initializer gadget writes both reserved registers")

    init_sum = initializer.summary
    seeds = {}
    for r in sorted(policy.registers):
        v = init_sum.value(r)
        if isinstance(v, Loaded):
            seeds[r] = (v.reg, v.offset)

    sys_step = resolve_syscall_entry(goal, image, conv, syscall_address, syscall_symbol, syscall_offset)
    win = _syscall_window(image, sys_step.address, conv)
    sys_summary = summarize(win, image, image.xlen) if win else None
    if sys_summary is not None:
        sys_writes = set(sys_summary.regs_written)
        sys_values = {r: sys_summary.value(r) for r in sys_summary.regs_written}
    else:
        # wrapper lives outside the image; trust the configured entry to set only the id register
        sys_writes = {conv.id_register}
        sys_values = {conv.id_register: Const(goal.syscall_number)}
    sys_step = ChainStep(sys_step.address, "syscall", 1, conv.id_register,
                         len(win) if win else 1, sys_step.rationale)

    satisfied = {r for r, v in sys_values.items()
                 if r in goal.required_regs and v == Const(goal.required_regs[r])}
    clobbered = (sys_writes - satisfied) & set(goal.required_regs)
    if clobbered:
        raise UnsatisfiableRegister(min(clobbered), "syscall entry overwrites it")

    pool = [c for c in filter_safe(catalog, policy, dispatcher)
            if c.family not in (Family.INITIALIZER, Family.SYSTEM_CALL, Family.DISPATCHER)
            and c.terminator.imm == 0 and c.terminator.rs1 == policy.dispatcher_reg]
    by_addr = {c.start_addr: c for c in pool}
    required = goal.required_regs
    pending = [r for r in required if r not in satisfied]

    later: list[ChainStep] = []  # execution order, built back to front
    for reg in reversed(pending):
        if any(reg in _step_writes(s, by_addr) for s in later):
            raise UnsatisfiableRegister(reg, "a later step overwrites it")
        chosen = None
        others = set(required) - {reg}
        options = _producer_steps(reg, required[reg], pool, goal, conv)
        options.sort(key=lambda steps: bool(any(_step_writes(s, by_addr) & others for s in steps)))
        for steps in options:
            writes = set().union(*(_step_writes(s, by_addr) for s in steps))
            if writes & satisfied:
                continue
            chosen = steps
            break
        if chosen is None:
            raise UnsatisfiableRegister(reg)
        later = chosen + later
        satisfied.add(reg)

    windows = {c.start_addr: c.summary for c in pool}
    state = predict(later, windows, {}, image.xlen)
    for r in sys_writes:
        v = sys_values.get(r)
        if isinstance(v, Const):
            state[r] = v.value
        else:
            state.pop(r, None)
    missing = {r for r, v in required.items() if state.get(r) != v}
    if missing:
        raise UnsatisfiableRegister(min(missing), "predicted state does not reach the goal")

    init_step = ChainStep(initializer.start_addr, "initializer", 1, None, len(initializer),
                          f"{initializer.text()} seeds "
                          + ", ".join(REG_NAMES[r] for r in sorted(policy.registers)))
    return ChainPlan(init_step, dispatcher, later + [sys_step],
                     {r: state[r] for r in sorted(state) if r not in policy.registers},
                     goal, seeds, policy)


def pick_dispatcher(dispatchers, policy: ReservedPolicy = DEFAULT_POLICY) -> DispatcherGadget | None:
    for d in dispatchers:
        if d.table_cursor_reg == policy.table_cursor_reg and d.jump_reg not in policy.registers:
            return d
    return None


def plan_from_catalog(goal: ChainGoal, catalog, image: BinaryImage,
                      conv: SyscallConvention = DEFAULT_CONVENTION, **kw) -> ChainPlan:
    """Plan with the first usable dispatcher and initializer of a scan result."""
    policy = catalog.policy
    dispatcher = pick_dispatcher(catalog.dispatchers, policy)
    initializer = catalog.initializers[0] if catalog.initializers else None
    return plan_chain(goal, catalog.candidates, dispatcher, initializer, image, conv, policy, **kw)
