"""Command-line front end: scan, plan, emit, verify, attack, report."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .abi import DEFAULT_CONVENTION, ReservedPolicy, SyscallConvention
from .image import ImageError, load
from .isa import reg_index
from .payload import (SCHEMA_VERSION, Payload, PayloadError, VulnSpec, build_payload, dumps,
                      emit_report)
from .planner import ChainPlan, PlanError, goal_from_dict, plan_from_catalog
from .scanner import DEFAULT_MAX_WINDOW, catalog_to_dict, load_catalog, scan
from .verifier import DEFAULT_MAX_STEPS, execute, trace_gadgets

OUT_DIR_ENV = "RVJOP_OUT_DIR"


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class RunConfig:
    binary: Path | None = None
    policy: ReservedPolicy = field(default_factory=ReservedPolicy)
    conv: SyscallConvention = DEFAULT_CONVENTION
    max_window: int = DEFAULT_MAX_WINDOW
    relax_imm: bool = False
    reentry: str = "stage1"
    goal: dict | None = None
    vuln: VulnSpec = field(default_factory=VulnSpec)
    syscall_address: int | None = None
    syscall_offset: int | None = None
    syscall_symbol: str | None = None
    max_steps: int = DEFAULT_MAX_STEPS
    out_dir: Path = Path(".")


def _doc(kind: str, image_bytes: bytes | None, body: dict) -> dict:
    d = {"schema_version": SCHEMA_VERSION, "kind": kind, **body}
    if image_bytes is not None:
        d["binary_sha256"] = hashlib.sha256(image_bytes).hexdigest()
    return d


def _read_doc(path, kind: str) -> dict:
    with open(path) as f:
        d = json.load(f)
    if d.get("kind") != kind:
        raise ValueError(f"{path} is a {d.get('kind')!r} document, expected {kind!r}")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {d.get('schema_version')}")
    return d


def _write(path: Path | str, text: str) -> None:
    if str(path) == "-":
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_image(cfg: RunConfig):
    try:
        data = Path(cfg.binary).read_bytes()
    except OSError as exc:
        raise StageError("load", exc) from exc
    try:
        return load(data, 32), data
    except ImageError as exc:
        raise StageError("load", exc) from exc


# Pipeline stages; each returns the JSON document it produces.

def stage_scan(cfg: RunConfig, image, data) -> dict:
    cat = scan(image, cfg.max_window, cfg.policy, cfg.conv, cfg.relax_imm, cfg.reentry)
    return _doc("catalog", data, {"max_window": cfg.max_window, "catalog": catalog_to_dict(cat)})


def stage_plan(cfg: RunConfig, image, data, catalog_doc: dict) -> dict:
    cat = load_catalog(catalog_doc["catalog"], image)
    try:
        goal = goal_from_dict(cfg.goal, image, cfg.conv)
        plan = plan_from_catalog(goal, cat, image, cfg.conv, syscall_address=cfg.syscall_address,
                                 syscall_symbol=cfg.syscall_symbol, syscall_offset=cfg.syscall_offset)
    except (PlanError, KeyError) as exc:
        raise StageError("plan", exc) from exc
    return _doc("plan", data, {"plan": plan.to_dict()})


def stage_emit(cfg: RunConfig, plan_doc: dict) -> tuple[dict, Payload]:
    plan = ChainPlan.from_dict(plan_doc["plan"])
    try:
        payload = build_payload(plan, cfg.vuln)
    except PayloadError as exc:
        raise StageError("emit", exc) from exc
    return _doc("payload", None, {"vuln": cfg.vuln.to_dict(), "payload": payload.to_dict()}), payload


def stage_verify(cfg: RunConfig, image, data, plan_doc: dict, payload_doc: dict):
    plan = ChainPlan.from_dict(plan_doc["plan"])
    payload = Payload.from_dict(payload_doc["payload"])
    vuln = VulnSpec.from_dict(payload_doc["vuln"])
    verdict = execute(image, payload, vuln, plan.goal, cfg.max_steps, cfg.conv)
    segments = trace_gadgets(verdict, plan.dispatcher)
    body = verdict.to_dict()
    body["segments"] = [{"start_pc": s.start_pc, "instructions": len(s.entries)} for s in segments]
    return _doc("verdict", data, {"verdict": body}), verdict


def _write_payload_files(out_dir: Path, doc: dict, payload: Payload) -> None:
    _write(out_dir / "payload.json", dumps(doc))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "payload.bin").write_bytes(payload.buffer_fill)
    _write(out_dir / "payload.hex", payload.buffer_fill.hex() + "\n")


def _write_trace(path, verdict) -> None:
    _write(path, "".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in verdict.trace))


# Commands

def cmd_scan(cfg: RunConfig, args) -> int:
    image, data = _load_image(cfg)
    doc = stage_scan(cfg, image, data)
    _write(args.output or cfg.out_dir / "catalog.json", dumps(doc))
    n = len(doc["catalog"]["candidates"])
    print(f"scan: {n} candidates, {len(doc['catalog']['dispatchers'])} dispatchers", file=sys.stderr)
    return 0


def cmd_plan(cfg: RunConfig, args) -> int:
    image, data = _load_image(cfg)
    catalog_doc = _read_doc(args.catalog, "catalog") if args.catalog else stage_scan(cfg, image, data)
    doc = stage_plan(cfg, image, data, catalog_doc)
    _write(args.output or cfg.out_dir / "plan.json", dumps(doc))
    return 0


def cmd_emit(cfg: RunConfig, args) -> int:
    doc, payload = stage_emit(cfg, _read_doc(args.plan, "plan"))
    out = Path(args.output) if args.output else cfg.out_dir
    _write_payload_files(out, doc, payload)
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    image, data = _load_image(cfg)
    doc, verdict = stage_verify(cfg, image, data, _read_doc(args.plan, "plan"),
                                _read_doc(args.payload, "payload"))
    _write(args.output or cfg.out_dir / "verdict.json", dumps(doc))
    if args.trace:
        _write_trace(args.trace, verdict)
    print(f"verify: {verdict.outcome}", file=sys.stderr)
    return 0 if verdict.ok else 1


def cmd_attack(cfg: RunConfig, args) -> int:
    image, data = _load_image(cfg)
    out = Path(args.output) if args.output else cfg.out_dir
    cat_doc = stage_scan(cfg, image, data)
    _write(out / "catalog.json", dumps(cat_doc))
    plan_doc = stage_plan(cfg, image, data, cat_doc)
    _write(out / "plan.json", dumps(plan_doc))
    pay_doc, payload = stage_emit(cfg, plan_doc)
    _write_payload_files(out, pay_doc, payload)
    ver_doc, verdict = stage_verify(cfg, image, data, plan_doc, pay_doc)
    _write(out / "verdict.json", dumps(ver_doc))
    if args.trace:
        _write_trace(args.trace, verdict)
    print(f"attack: {verdict.outcome}", file=sys.stderr)
    return 0 if verdict.ok else 1


def cmd_report(cfg: RunConfig, args) -> int:
    image, data = _load_image(cfg)
    cat = load_catalog(_read_doc(args.catalog, "catalog")["catalog"], image) if args.catalog \
        else scan(image, cfg.max_window, cfg.policy, cfg.conv, cfg.relax_imm, cfg.reentry)
    plan = ChainPlan.from_dict(_read_doc(args.plan, "plan")["plan"]) if args.plan else None
    payload = Payload.from_dict(_read_doc(args.payload, "payload")["payload"]) if args.payload else None
    table = payload.table if payload is not None else None
    _write(args.output or cfg.out_dir / "report.json", dumps(emit_report(plan, table, cat, payload)))
    return 0


# Argument handling

def _int(s: str) -> int:
    return int(s, 0)


def _assignment(s: str) -> tuple[str, str]:
    if "=" not in s:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {s!r}")
    k, v = s.split("=", 1)
    return k.strip(), v.strip()


def _add_binary(p, required=True):
    p.add_argument("binary", type=Path, nargs=None if required else "?")
    g = p.add_argument_group("policy")
    g.add_argument("--dispatcher-reg", default="a3")
    g.add_argument("--cursor-reg", default="a4")
    g.add_argument("--syscall-number", type=_assignment, action="append", default=[],
                   metavar="NAME=N", help="override a syscall number")
    g.add_argument("--max-window", type=int, default=DEFAULT_MAX_WINDOW)
    g.add_argument("--relax-imm", action="store_true", help="accept jalr terminators with nonzero offset")
    g.add_argument("--reentry", choices=("stage1", "stage2"), default="stage1",
                   help="two-stage dispatcher re-entry point")


def _add_goal(p):
    g = p.add_argument_group("goal")
    g.add_argument("--goal", type=Path, help="goal JSON file")
    g.add_argument("--syscall", default=None, help="final syscall name (default write)")
    g.add_argument("--set", type=_assignment, action="append", default=[], metavar="REG=VALUE",
                   help="required register value; @symbol resolves an address")
    g.add_argument("--secret", help="SYMBOL or ADDR:LEN of the region to exfiltrate")
    g.add_argument("--syscall-address", type=_int)
    g.add_argument("--syscall-symbol")
    g.add_argument("--syscall-offset", type=_int)


def _add_vuln(p):
    g = p.add_argument_group("vulnerable buffer")
    g.add_argument("--vuln", type=Path, help="vuln spec JSON file")
    g.add_argument("--buffer-address", type=_int)
    g.add_argument("--pointer-offset", type=_int)
    g.add_argument("--capacity", type=_int)
    g.add_argument("--context-reg")
    g.add_argument("--table-address", type=_int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rvjop", description="RISC-V JOP chain toolkit")
    ap.add_argument("--out-dir", type=Path, default=None,
                    help=f"default output directory (env {OUT_DIR_ENV}, else .)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="catalog JALR gadgets")
    _add_binary(p)
    p.add_argument("-o", "--output")

    p = sub.add_parser("plan", help="build a chain for a goal")
    _add_binary(p)
    _add_goal(p)
    p.add_argument("--catalog", type=Path, help="catalog from scan (rescanned if absent)")
    p.add_argument("-o", "--output")

    p = sub.add_parser("emit", help="encode a plan into a payload")
    p.add_argument("--plan", type=Path, required=True)
    _add_vuln(p)
    p.add_argument("-o", "--output", help="output directory")

    p = sub.add_parser("verify", help="run a payload in the emulator")
    _add_binary(p)
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--payload", type=Path, required=True)
    p.add_argument("--max-steps", type=int, default=DEFAULT_MAX_STEPS)
    p.add_argument("--trace", help="write the trace as JSON lines")
    p.add_argument("-o", "--output")

    p = sub.add_parser("attack", help="scan, plan, emit and verify in one go")
    _add_binary(p)
    _add_goal(p)
    _add_vuln(p)
    p.add_argument("--max-steps", type=int, default=DEFAULT_MAX_STEPS)
    p.add_argument("--trace", help="write the trace as JSON lines")
    p.add_argument("-o", "--output", help="output directory")

    p = sub.add_parser("report", help="combined JSON report")
    _add_binary(p)
    p.add_argument("--catalog", type=Path)
    p.add_argument("--plan", type=Path)
    p.add_argument("--payload", type=Path)
    p.add_argument("-o", "--output")
    return ap


def _goal_dict(args) -> dict | None:
    goal = None
    if getattr(args, "goal", None):
        goal = json.loads(Path(args.goal).read_text())
    if getattr(args, "set", None) or getattr(args, "syscall", None) or getattr(args, "secret", None):
        goal = dict(goal or {})
        if args.syscall:
            goal["syscall"] = args.syscall
        regs = dict(goal.get("registers", {}))
        regs.update(dict(args.set))
        goal["registers"] = regs
        if args.secret:
            if ":" in args.secret:
                a, n = args.secret.split(":", 1)
                goal["secret"] = {"address": a, "length": int(n, 0)}
            else:
                goal["secret"] = {"symbol": args.secret.lstrip("@")}
    return goal


def _vuln(args) -> VulnSpec:
    d = json.loads(Path(args.vuln).read_text()) if getattr(args, "vuln", None) else {}
    for key in ("buffer_address", "pointer_offset", "capacity", "context_reg", "table_address"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return VulnSpec.from_dict(d)


def config_from_args(args, parser) -> RunConfig:
    env_dir = os.environ.get(OUT_DIR_ENV)
    out_dir = args.out_dir or (Path(env_dir) if env_dir else Path("."))
    cfg = RunConfig(out_dir=out_dir)
    if getattr(args, "binary", None) is not None:
        cfg.binary = args.binary
    if hasattr(args, "dispatcher_reg"):
        try:
            cfg.policy = ReservedPolicy(reg_index(args.dispatcher_reg), reg_index(args.cursor_reg))
        except ValueError as exc:
            parser.error(str(exc))
        if args.syscall_number:
            cfg.conv = DEFAULT_CONVENTION.with_numbers({k: _int(v) for k, v in args.syscall_number})
        cfg.max_window = args.max_window
        cfg.relax_imm = args.relax_imm
        cfg.reentry = args.reentry
        if cfg.max_window < 1:
            parser.error("--max-window must be at least 1")
    if args.command in ("plan", "attack"):
        cfg.goal = _goal_dict(args)
        if cfg.goal is None:
            parser.error(f"{args.command} needs a goal (--goal or --set/--syscall)")
        cfg.syscall_address = args.syscall_address
        cfg.syscall_offset = args.syscall_offset
        cfg.syscall_symbol = args.syscall_symbol
    if args.command in ("emit", "attack"):
        cfg.vuln = _vuln(args)
    if hasattr(args, "max_steps"):
        cfg.max_steps = args.max_steps
    return cfg


COMMANDS = {"scan": cmd_scan, "plan": cmd_plan, "emit": cmd_emit, "verify": cmd_verify,
            "attack": cmd_attack, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = config_from_args(args, parser)
    try:
        return COMMANDS[args.command](cfg, args)
    except StageError as exc:
        print(f"rvjop: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"rvjop: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
