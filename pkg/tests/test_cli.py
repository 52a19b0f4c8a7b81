import json
import subprocess
import sys

import pytest

from rvjop.cli import main

from conftest import FIXTURES

ELF = str(FIXTURES / "fixture_single.elf")
GOAL = ["--set", "a0=1", "--set", "a1=@aes_key", "--set", "a2=256", "--secret", "aes_key"]


def pipeline(tmp, elf=ELF, extra=()):
    assert main(["scan", elf, "-o", str(tmp / "catalog.json"), *extra]) == 0
    assert main(["plan", elf, "--catalog", str(tmp / "catalog.json"), *GOAL, "-o", str(tmp / "plan.json"), *extra]) == 0
    assert main(["emit", "--plan", str(tmp / "plan.json"), "-o", str(tmp)]) == 0
    return main(["verify", elf, "--plan", str(tmp / "plan.json"), "--payload", str(tmp / "payload.json"),
                 "-o", str(tmp / "verdict.json")])


def test_pipeline_equals_attack(tmp_path):
    (tmp_path / "a").mkdir()
    assert pipeline(tmp_path / "a") == 0
    assert main(["attack", ELF, *GOAL, "-o", str(tmp_path / "b")]) == 0
    for name in ("catalog.json", "plan.json", "payload.json", "payload.bin", "payload.hex", "verdict.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    verdict = json.loads((tmp_path / "a" / "verdict.json").read_text())
    assert verdict["schema_version"] == 1 and verdict["verdict"]["outcome"] == "goal-met"


def test_two_stage_pipeline(tmp_path):
    assert pipeline(tmp_path, str(FIXTURES / "fixture_twostage.elf")) == 0
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["plan"]["dispatcher"]["kind"] == "two-stage"


def test_scan_output(tmp_path):
    assert main(["scan", ELF, "-o", str(tmp_path / "c.json")]) == 0
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["kind"] == "catalog" and doc["schema_version"] == 1
    assert main(["scan", "--max-window", "1", ELF, "-o", str(tmp_path / "one.json")]) == 0
    one = json.loads((tmp_path / "one.json").read_text())
    assert {c["length"] for c in one["catalog"]["candidates"]} == {1}


def test_scan_not_elf(tmp_path, capsys):
    junk = tmp_path / "notanelf.bin"
    junk.write_bytes(b"hello world" * 10)
    assert main(["scan", str(junk), "-o", str(tmp_path / "x.json")]) != 0
    assert "NotElf" in capsys.readouterr().err


def test_impossible_goal(tmp_path, capsys):
    rc = main(["plan", ELF, "--set", "a0=1", "--set", "a5=3", "-o", str(tmp_path / "p.json")])
    assert rc != 0
    err = capsys.readouterr().err
    assert "plan:" in err and "UnsatisfiableRegister" in err


def test_emit_requires_plan():
    with pytest.raises(SystemExit) as e:
        main(["emit"])
    assert e.value.code == 2


def test_plan_requires_goal():
    with pytest.raises(SystemExit) as e:
        main(["plan", ELF])
    assert e.value.code == 2


def test_verify_exit_code(tmp_path):
    assert pipeline(tmp_path) == 0
    doc = json.loads((tmp_path / "payload.json").read_text())
    buf = bytearray.fromhex(doc["payload"]["buffer_hex"])
    buf[0:4] = (0x10074).to_bytes(4, "little")  # dispatcher seed -> g_clobber_a3
    doc["payload"]["buffer_hex"] = buf.hex()
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    rc = main(["verify", ELF, "--plan", str(tmp_path / "plan.json"), "--payload", str(tmp_path / "bad.json"),
               "--max-steps", "2000", "-o", str(tmp_path / "v.json")])
    assert rc == 1


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("RVJOP_OUT_DIR", str(tmp_path / "env"))
    assert main(["scan", ELF]) == 0
    assert (tmp_path / "env" / "catalog.json").exists()


def test_trace_jsonl(tmp_path):
    assert main(["attack", ELF, *GOAL, "-o", str(tmp_path), "--trace", str(tmp_path / "t.jsonl")]) == 0
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert lines and all({"pc", "disassembly"} <= set(json.loads(ln)) for ln in lines)


def test_report(tmp_path):
    assert pipeline(tmp_path) == 0
    assert main(["report", ELF, "--catalog", str(tmp_path / "catalog.json"), "--plan", str(tmp_path / "plan.json"),
                 "--payload", str(tmp_path / "payload.json"), "-o", str(tmp_path / "r.json")]) == 0
    text = (tmp_path / "r.json").read_text()
    assert json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n" == text


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "rvjop", "scan", ELF, "-o", str(tmp_path / "c.json")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
