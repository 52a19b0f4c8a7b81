import pytest

from rvjop.abi import (ARGUMENT_REGISTERS, DEFAULT_CONVENTION, DEFAULT_POLICY, ROLES, ReservedPolicy, Role,
                       SyscallConvention, abi_role, is_reserved)


def test_role_table():
    assert abi_role(13).abi_name == "a3" and abi_role(13).role is Role.ARGUMENT
    assert abi_role(2).role is Role.STACK_POINTER
    assert abi_role(8).abi_name == "s0" and abi_role(8).role is Role.SAVED
    assert ARGUMENT_REGISTERS == tuple(range(10, 18))
    temps = [r.index for r in ROLES if r.role is Role.TEMPORARY]
    assert temps == [5, 6, 7, 28, 29, 30, 31]
    saved = [r.index for r in ROLES if r.role is Role.SAVED]
    assert len(saved) == 12
    assert all(r.caller_saved for r in ROLES if r.role in (Role.ARGUMENT, Role.TEMPORARY))
    assert not any(r.caller_saved for r in ROLES if r.role is Role.SAVED)


def test_policy():
    assert DEFAULT_POLICY.registers == {13, 14}
    assert is_reserved(13) and not is_reserved(15)
    p = ReservedPolicy.from_names("s2", "s3")
    assert p.registers == {18, 19}
    assert ReservedPolicy.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        ReservedPolicy(13, 13)
    with pytest.raises(ValueError):
        ReservedPolicy(0, 14)


def test_syscall_convention():
    assert DEFAULT_CONVENTION.id_register == 17
    assert DEFAULT_CONVENTION.number("write") == 64
    assert DEFAULT_CONVENTION.with_numbers({"write": 4}).number("write") == 4
    with pytest.raises(KeyError):
        DEFAULT_CONVENTION.number("fork")
    with pytest.raises(ValueError):
        SyscallConvention(id_register=10)
