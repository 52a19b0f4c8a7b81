"""Integer register roles, the syscall convention and the reserved-register policy."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .isa import REG_NAMES, reg_index


class Role(str, Enum):
    ZERO = "zero"
    RETURN_ADDRESS = "return-address"
    STACK_POINTER = "stack-pointer"
    GLOBAL_POINTER = "global-pointer"
    THREAD_POINTER = "thread-pointer"
    ARGUMENT = "argument"
    TEMPORARY = "temporary"
    SAVED = "saved"


@dataclass(frozen=True)
class RegisterRole:
    index: int
    abi_name: str
    role: Role
    caller_saved: bool


def _build_table() -> tuple[RegisterRole, ...]:
    fixed = {
        0: Role.ZERO, 1: Role.RETURN_ADDRESS, 2: Role.STACK_POINTER,
        3: Role.GLOBAL_POINTER, 4: Role.THREAD_POINTER,
    }
    table = []
    for i, name in enumerate(REG_NAMES):
        if i in fixed:
            role = fixed[i]
        elif name.startswith("a"):
            role = Role.ARGUMENT
        elif name.startswith("t"):
            role = Role.TEMPORARY
        else:
            role = Role.SAVED
        caller_saved = role in (Role.RETURN_ADDRESS, Role.ARGUMENT, Role.TEMPORARY)
        table.append(RegisterRole(i, name, role, caller_saved))
    return tuple(table)


ROLES = _build_table()
ARGUMENT_REGISTERS = tuple(r.index for r in ROLES if r.role is Role.ARGUMENT)


def abi_role(index: int) -> RegisterRole:
    return ROLES[index]


@dataclass(frozen=True)
class ReservedPolicy:
    """Registers the chain keeps for itself.

    ``dispatcher_reg`` holds the dispatcher re-entry address, ``table_cursor_reg``
    the current dispatch-table position. Only the initializer may write them.
    """

    dispatcher_reg: int = 13  # a3
    table_cursor_reg: int = 14  # a4

    def __post_init__(self):
        if self.dispatcher_reg == self.table_cursor_reg:
            raise ValueError("dispatcher and table cursor registers must differ")
        for r in self.registers:
            if not 1 <= r < 32:
                raise ValueError(f"cannot reserve x{r}")

    @property
    def registers(self) -> frozenset[int]:
        return frozenset((self.dispatcher_reg, self.table_cursor_reg))

    @classmethod
    def from_names(cls, dispatcher: str | int = "a3", cursor: str | int = "a4") -> "ReservedPolicy":
        return cls(reg_index(dispatcher), reg_index(cursor))

    def to_dict(self) -> dict:
        return {"dispatcher_reg": REG_NAMES[self.dispatcher_reg],
                "table_cursor_reg": REG_NAMES[self.table_cursor_reg]}

    @classmethod
    def from_dict(cls, d: dict) -> "ReservedPolicy":
        return cls.from_names(d.get("dispatcher_reg", "a3"), d.get("table_cursor_reg", "a4"))


DEFAULT_POLICY = ReservedPolicy()


def is_reserved(index: int, policy: ReservedPolicy = DEFAULT_POLICY) -> bool:
    return index in policy.registers


# Linux asm-generic numbering, shared by riscv32 and riscv64.
LINUX_SYSCALLS = {"read": 63, "write": 64, "exit": 93, "exit_group": 94, "openat": 56, "close": 57}


@dataclass(frozen=True)
class SyscallConvention:
    id_register: int = 17  # a7
    arg_registers: tuple[int, ...] = ARGUMENT_REGISTERS[:7]
    trap_mnemonic: str = "ecall"
    syscall_numbers: dict[str, int] = field(default_factory=lambda: dict(LINUX_SYSCALLS))

    def __post_init__(self):
        if self.id_register != ARGUMENT_REGISTERS[-1]:
            raise ValueError("the syscall id lives in the last argument register")

    def number(self, name: str) -> int:
        try:
            return self.syscall_numbers[name]
        except KeyError:
            raise KeyError(f"no syscall number configured for {name!r}") from None

    def with_numbers(self, overrides: dict[str, int]) -> "SyscallConvention":
        return SyscallConvention(self.id_register, self.arg_registers, self.trap_mnemonic,
                                 {**self.syscall_numbers, **overrides})


DEFAULT_CONVENTION = SyscallConvention()
