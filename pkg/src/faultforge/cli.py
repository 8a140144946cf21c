"""``faultforge`` command line.

Every invocation boots a fresh simulated kernel: the logical clock starts at
zero and config writes saved by earlier ``cfg set`` calls are replayed from
the state directory.  Exit codes: 0 success, 1 an expectation was violated
(or a store operation failed without any injected fault), 2 usage error.
"""

from __future__ import annotations

import argparse
import errno
import json
import os
import shlex
import sys

from . import crashgen, pfault, rfsck, scenarios
from .errors import (AllocationError, CombinatorialLimitError, ConfigError, FaultForgeError, IOFault, StoreError,
                     TraceFormatError)
from .failcmd import failcmd
from .fixtures import corrupted_image, crosslinked_image, populated_image
from .runtime import Runtime
from .simstore.checker import Checker
from .simstore.device import BlockDevice
from .simstore.layout import MIN_BLOCKS, format_image
from .simstore.store import Store
from .tracefile import dump_history
from .workloads import TASKS, parse_ops

EXIT_OK, EXIT_EXPECTATION, EXIT_USAGE = 0, 1, 2

FIXTURES = {
    "fixture:crosslink": crosslinked_image,
    "fixture:corrupted": corrupted_image,
    "fixture:populated": populated_image,
}


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# state directory: saved config writes

def state_dir(args):
    return args.state_dir or os.environ.get("FAULTFORGE_STATE") or ".faultforge"


def _state_file(args):
    return os.path.join(state_dir(args), "config.json")


def load_state(args) -> dict:
    try:
        with open(_state_file(args)) as fh:
            return json.load(fh)
    except FileNotFoundError:
        return {"cmdline": "", "writes": []}


def save_state(args, state):
    os.makedirs(state_dir(args), exist_ok=True)
    with open(_state_file(args), "w") as fh:
        json.dump(state, fh, indent=1, sort_keys=True)


DEVICE_ROOTS = {"nvme": "nvme", "nullb": "nullb", "block": "normal"}


def _device_of(path):
    """(name, mode) when ``path`` belongs to a device's nodes, else None."""
    parts = path.strip("/").split("/")
    if parts[0] in DEVICE_ROOTS and len(parts) >= 3:
        return parts[1], DEVICE_ROOTS[parts[0]]
    return None


def _prepare_path(rt, path):
    """Create the on-demand nodes (slab caches, devices) a write refers to."""
    parts = path.strip("/").split("/")
    if parts[0] == "slab" and len(parts) == 3:
        rt.kmem_cache_create(parts[1])
    dev = _device_of(path)
    if dev and dev[0] not in rt.devices:
        attach_device(rt, BlockDevice(dev[0], MIN_BLOCKS, mode=dev[1]))


def boot(args, log_sink=None) -> Runtime:
    """Fresh runtime with the saved config replayed.  Writes for device nodes
    wait in ``rt.pending_writes`` until that device is attached."""
    state = load_state(args)
    rt = Runtime(seed=args.seed, cmdline=state.get("cmdline", ""), log_sink=log_sink)
    rt.pending_writes = []
    for path, value in state.get("writes", []):
        if _device_of(path):
            rt.pending_writes.append((path, value))
            continue
        _prepare_path(rt, path)
        rt.write(path, value)
    return rt


def attach_device(rt, device):
    rt.attach(device)
    for path, value in getattr(rt, "pending_writes", []):
        if _device_of(path)[0] == device.name:
            rt.write(path, value)
    return device


# output helpers

def emit(args, report: dict, text: str):
    if args.json:
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text.rstrip("\n") + "\n")


def campaign(args, results, status, events=None):
    report = {"command": args.echo, "seed": args.seed, "results": results, "exit_status": status}
    if events is not None:
        report["events"] = {"count": len(events), "failures": sum(e.decision for e in events),
                            "log": log_path(args)}
    return report


def log_path(args):
    return os.environ.get("FAULTFORGE_LOG") or os.path.join(state_dir(args), "events.log")


def append_log(args, rt, events):
    if not events:
        return
    path = log_path(args)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "a") as fh:
        fh.write(f"# {args.echo}\n")
        fh.write(rt.log.render(events))


def load_image(spec) -> bytes:
    if spec in FIXTURES:
        return FIXTURES[spec]()
    with open(spec, "rb") as fh:
        return fh.read()


def save_image(path, data):
    with open(path, "wb") as fh:
        fh.write(data)


def _figures(args):
    if not args.report_dir:
        return None
    from . import plotting
    return plotting


# cfg

def cmd_cfg(args):
    state = load_state(args)
    if args.cfg_cmd == "set":
        rt = boot(args)
        _prepare_path(rt, args.path)
        rt.write(args.path, args.value)
        state.setdefault("writes", []).append([args.path.strip("/"), args.value])
        save_state(args, state)
        emit(args, {"path": args.path, "value": rt.read(args.path)}, f"{args.path} = {rt.read(args.path)}")
        return EXIT_OK
    if args.cfg_cmd == "boot":
        state["cmdline"] = args.cmdline
        Runtime(seed=args.seed, cmdline=args.cmdline)  # validate before saving
        save_state(args, state)
        emit(args, {"cmdline": args.cmdline}, f"boot parameters: {args.cmdline}")
        return EXIT_OK
    if args.cfg_cmd == "reset":
        save_state(args, {"cmdline": "", "writes": []})
        emit(args, {"reset": True}, "config state cleared")
        return EXIT_OK
    rt = boot(args)
    if args.cfg_cmd == "get":
        _prepare_path(rt, args.path)
        value = rt.read(args.path)
        emit(args, {"path": args.path, "value": value}, value)
        return EXIT_OK
    for path, _ in rt.pending_writes:
        _prepare_path(rt, path)
    paths = rt.tree.paths(args.prefix or "")
    values = {p: rt.read(p) for p in paths}
    emit(args, values, "".join(f"{p}\t{v!r}\n" for p, v in values.items()))
    return EXIT_OK


# failcmd

FAILCMD_OPTIONS = ("probability", "interval", "times", "space", "verbose", "task-filter",
                   "ignore-gfp-wait", "ignore-gfp-highmem", "cache-filter", "require-start",
                   "require-end", "reject-start", "reject-end", "stacktrace-depth")


def cmd_failcmd(args):
    if not args.workload:
        raise UsageError("failcmd needs a workload after --")
    name, *rest = args.workload
    if name not in TASKS:
        raise UsageError(f"unknown workload {name}; choose from {', '.join(TASKS)}")
    kwargs = {}
    for item in rest:
        key, _, value = item.partition("=")
        kwargs[key.replace("-", "_")] = int(value)
    rt = boot(args)
    if args.capability not in rt.capabilities:
        raise UsageError(f"unknown capability {args.capability}")
    overrides = {opt: getattr(args, opt.replace("-", "_")) for opt in FAILCMD_OPTIONS
                 if getattr(args, opt.replace("-", "_")) is not None}
    result = failcmd(rt, args.capability, lambda r: TASKS[name](r, **kwargs), overrides)
    append_log(args, rt, result.events)
    status = EXIT_OK
    if args.max_failures is not None and len(result.failures) > args.max_failures:
        status = EXIT_EXPECTATION
    results = {"capability": args.capability, "settings": result.settings, "workload": name,
               "value": result.value, "error": str(result.error) if result.error else None,
               "failures": len(result.failures)}
    text = rt.log.render(result.events) + f"failures: {len(result.failures)}\nworkload: {result.value}\n"
    emit(args, campaign(args, results, status, result.events), text)
    plots = _figures(args)
    if plots:
        plots.report_events(result.events, args.report_dir, "failcmd")
    return status


# store

def _open_store(args, rt, image):
    dev = BlockDevice.from_image(image, name=args.device, mode=args.mode)
    attach_device(rt, dev)
    return dev


def cmd_store(args):
    sub = args.store_cmd
    if sub == "format":
        if args.blocks < MIN_BLOCKS:
            print(f"device too small: {args.blocks} blocks, need at least {MIN_BLOCKS}", file=sys.stderr)
            return EXIT_EXPECTATION
        save_image(args.image, format_image(args.blocks))
        emit(args, {"image": args.image, "blocks": args.blocks}, f"formatted {args.image}: {args.blocks} blocks")
        return EXIT_OK
    image = load_image(args.image)
    if sub == "check":
        dev = BlockDevice.from_image(image)
        report = Checker(dev, args.variant).run()
        if not args.dry_run and not args.image.startswith("fixture:"):
            save_image(args.image, dev.image())
        emit(args, report.to_dict(), report.render())
        return EXIT_OK
    rt = boot(args)
    dev = _open_store(args, rt, image)
    mark = rt.log.clock
    status = EXIT_OK
    try:
        store = Store.mount(dev, rt, journaled=not args.unsafe)
        if sub == "mount":
            out = {"mounted": True, "objects": len(store.names()), "replayed": store.replayed,
                   "discarded": store.discarded}
            text = f"mounted {args.image}: {len(store.names())} objects"
        elif sub == "ls":
            out = {"objects": {n: store.index[n][1].size for n in store.names()}}
            text = "".join(f"{store.index[n][1].size}\t{n}\n" for n in store.names())
        elif sub == "put":
            if args.file:
                with open(args.file, "rb") as fh:
                    data = fh.read()
            else:
                data = (args.data or "").encode()
            store.put(args.name, data)
            out = {"put": args.name, "size": len(data)}
            text = f"put {args.name} ({len(data)} bytes)"
        elif sub == "delete":
            store.delete(args.name)
            out = {"deleted": args.name}
            text = f"deleted {args.name}"
        else:
            data = store.get(args.name)
            if args.out:
                save_image(args.out, data)
                out = {"get": args.name, "size": len(data), "out": args.out}
                text = f"wrote {len(data)} bytes to {args.out}"
            else:
                out = {"get": args.name, "size": len(data)}
                sys.stdout.buffer.write(data)
                text = ""
    except (StoreError, AllocationError, IOFault) as exc:
        out = {"error": str(exc), "errno": -abs(getattr(exc, "errno", None) or errno.EIO)}
        text = f"error: {exc}"
        status = EXIT_EXPECTATION
    events = rt.log.since(mark)
    if status and any(e.decision for e in events):
        status = EXIT_OK  # the error was injected on purpose
    append_log(args, rt, events)
    if not args.image.startswith("fixture:"):
        save_image(args.image, dev.image())
    emit(args, campaign(args, out, status, events), text)
    return status


# rfsck

def cmd_rfsck(args):
    image = load_image(args.image)
    try:
        result = rfsck.run_campaign(image, args.prefixes, args.variant, args.workers, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.history:
        with open(args.history, "wb") as fh:
            fh.write(dump_history(result.history))
    counts = result.counts()
    expect = args.expect
    if expect == "auto":
        expect = "no-mismatch" if args.variant == "journaled" else "mismatch"
    violated = False
    if expect == "no-mismatch":
        violated = counts[rfsck.MISMATCH] > 0
    elif expect == "mismatch":
        violated = counts[rfsck.MISMATCH] == 0
    last = [v for v in result.verdicts if v.prefix_length == len(result.history)]
    if last and last[0].outcome != rfsck.MATCH:
        violated = True
    status = EXIT_EXPECTATION if violated else EXIT_OK
    lines = [f"history: {len(result.history)} records, reference {result.reference_digest:016x}"]
    lines += [f"p={v.prefix_length}\t{v.outcome}" + (f"\t{'; '.join(v.diff)}" if v.diff else "")
              for v in result.verdicts]
    lines.append("counts: " + " ".join(f"{k}={n}" for k, n in counts.items()))
    lines.append(f"expectation {expect}: {'violated' if violated else 'met'}")
    emit(args, campaign(args, dict(result.to_dict(), expectation=expect), status), "\n".join(lines))
    plots = _figures(args)
    if plots:
        plots.report_rfsck(result, args.report_dir)
    return status


# crashgen

def cmd_crashgen(args):
    sub = args.crash_cmd
    if sub == "record":
        image = load_image(args.image) if args.image else format_image(args.blocks)
        ops = parse_ops(args.workload)
        trace, results = crashgen.record(ops, image, journaled=not args.unsafe, seed=args.seed)
        trace.save(args.trace)
        epochs = [len(e) for e in trace.epochs()]
        out = {"trace": args.trace, "records": len(trace.records), "epochs": epochs,
               "states": crashgen.count_states(epochs), "journaled": trace.journaled,
               "aborted": trace.aborted, "ops": [list(r) for r in results]}
        text = (f"recorded {len(trace.records)} records in {len(epochs)} epochs "
                f"({out['states']} crash states) to {args.trace}")
        emit(args, out, text)
        return EXIT_OK
    trace = crashgen.WriteTrace.load(args.trace)
    try:
        states = list(crashgen.enumerate_states(trace, args.limit, args.seed, args.torn))
    except CombinatorialLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if sub == "enumerate":
        rows = [{"state": s.index, "epoch": s.epoch, "subset": list(s.subset())} for s in states]
        text = "".join(f"{s.index}\tepoch={s.epoch}\tsubset={','.join(map(str, s.subset())) or '-'}\n"
                       for s in states)
        emit(args, {"states": rows, "total": crashgen.count_states(trace, args.torn)}, text)
        return EXIT_OK
    report = crashgen.test_states(trace, states, args.workers, args.torn)
    expect = args.expect
    if expect == "auto":
        expect = "consistent" if trace.journaled else "inconsistent"
    if expect == "consistent":
        violated = not report.all_consistent
    elif expect == "inconsistent":
        violated = report.all_consistent
    else:
        violated = False
    status = EXIT_EXPECTATION if violated else EXIT_OK
    lines = [f"{o.index}\tepoch={o.epoch}\t{o.outcome}" for o in report.outcomes]
    lines.append("counts: " + " ".join(f"{k}={n}" for k, n in report.counts().items()))
    lines.append(f"expectation {expect}: {'violated' if violated else 'met'}")
    emit(args, campaign(args, dict(report.to_dict(), expectation=expect), status), "\n".join(lines))
    plots = _figures(args)
    if plots:
        plots.report_crashgen(report, args.report_dir)
    return status


# pfault

def cmd_pfault(args):
    originals = [load_image(p) for p in args.images]
    model = pfault.FaultModel(args.model, args.blocks, args.seed)
    result = pfault.apply(model, originals)
    for msg in result.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for path, faulted in zip(args.images, result.images):
            save_image(os.path.join(args.out_dir, os.path.basename(path.replace(":", "_")) + ".faulted"),
                       faulted.image)
    if args.manifest:
        with open(args.manifest, "w") as fh:
            fh.write(result.manifest_text())
    outcomes = pfault.post_fault_check(result, originals, args.timeout)
    status = EXIT_OK
    if args.expect != "any":
        violated = any(o.outcome != args.expect for o in outcomes)
        status = EXIT_EXPECTATION if violated else EXIT_OK
    results = {"model": args.model, "blocks": args.blocks, "warnings": result.warnings,
               "manifest": result.manifest_text().splitlines(),
               "failed_devices": [i for i, f in enumerate(result.images) if f.failed],
               "outcomes": [o.to_dict() for o in outcomes]}
    text = result.manifest_text() + "".join(f"image {o.image}: {o.label()}\n" for o in outcomes)
    emit(args, campaign(args, results, status), text)
    plots = _figures(args)
    if plots:
        plots.report_pfault(outcomes, result.manifest, args.report_dir)
    return status


# log

def cmd_log(args):
    path = log_path(args)
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        lines = []
    out = []
    keep = True
    for line in lines:
        if line.startswith("#"):
            out.append(line)
            continue
        if not line.startswith(" "):
            fields = line.split()
            keep = True
            if args.capability and (len(fields) < 2 or fields[1] != args.capability):
                keep = False
            if args.failures and (len(fields) < 3 or fields[2] != "FAIL"):
                keep = False
        if keep:
            out.append(line)
    emit(args, {"log": path, "lines": out}, "\n".join(out))
    return EXIT_OK


# scenario

def cmd_scenario(args):
    names = list(scenarios.SCENARIOS) if args.name == "all" else [args.name]
    if any(n not in scenarios.SCENARIOS for n in names):
        raise UsageError(f"unknown scenario {args.name}; choose from all, {', '.join(scenarios.SCENARIOS)}")
    results = [scenarios.run(n, seed=args.seed) for n in names]
    status = EXIT_OK if all(r.passed for r in results) else EXIT_EXPECTATION
    text = "\n".join(r.render() + ("\n" + r.log.rstrip() if args.verbose and r.log else "") for r in results)
    emit(args, campaign(args, [r.to_dict() for r in results], status), text)
    plots = _figures(args)
    if plots:
        plots.report_scenarios(results, args.report_dir)
    return status


def build_parser():
    p = ArgParser(prog="faultforge", description="Fault injection over a simulated storage stack.")
    add_globals(p, top=True)
    sub = p.add_subparsers(dest="command", parser_class=ArgParser)
    sub.required = True

    cfg = sub.add_parser("cfg", help="read and write the config tree")
    cs = cfg.add_subparsers(dest="cfg_cmd", parser_class=ArgParser)
    cs.required = True
    s = cs.add_parser("set")
    s.add_argument("path")
    s.add_argument("value")
    g = cs.add_parser("get")
    g.add_argument("path")
    ls = cs.add_parser("list")
    ls.add_argument("prefix", nargs="?")
    b = cs.add_parser("boot", help="set boot parameters, e.g. 'failslab=1,100,0,-1'")
    b.add_argument("cmdline")
    cs.add_parser("reset")
    cfg.set_defaults(func=cmd_cfg)

    fc = sub.add_parser("failcmd", help="run a workload with one capability enabled")
    fc.add_argument("--capability", default="failslab")
    for opt in FAILCMD_OPTIONS:
        fc.add_argument(f"--{opt}", dest=opt.replace("-", "_"))
    fc.add_argument("--max-failures", type=int, help="exit 1 if more failures than this are logged")
    fc.add_argument("workload", nargs=argparse.REMAINDER, help=f"-- one of {', '.join(TASKS)} [key=value...]")
    fc.set_defaults(func=cmd_failcmd)

    st = sub.add_parser("store", help="object store operations on an image file")
    ss = st.add_subparsers(dest="store_cmd", parser_class=ArgParser)
    ss.required = True
    for name in ("format", "mount", "ls", "put", "get", "delete", "check"):
        sp = ss.add_parser(name)
        sp.add_argument("image")
        if name == "format":
            sp.add_argument("--blocks", type=int, default=MIN_BLOCKS)
        if name in ("put", "get", "delete"):
            sp.add_argument("name")
        if name == "put":
            sp.add_argument("--data")
            sp.add_argument("--file")
        if name == "get":
            sp.add_argument("--out")
        if name == "check":
            sp.add_argument("--variant", choices=("journaled", "inplace"), default="journaled")
            sp.add_argument("--dry-run", action="store_true", help="do not write repairs back")
        if name not in ("format", "check"):
            sp.add_argument("--device", default="loop0", help="device name for config paths")
            sp.add_argument("--mode", choices=("normal", "nvme", "nullb"), default="normal")
            sp.add_argument("--unsafe", action="store_true", help="metadata in place, no journal")
    st.set_defaults(func=cmd_store)

    rf = sub.add_parser("rfsck", help="interrupted-repair campaign")
    rf.add_argument("--image", required=True, help="image path or fixture:crosslink|fixture:corrupted")
    rf.add_argument("--prefixes", default="all", help="all | sample:k:seed | list:1,2,3")
    rf.add_argument("--variant", choices=("journaled", "inplace"), default="journaled")
    rf.add_argument("--mode", choices=("logical", "byte"), default="logical")
    rf.add_argument("--workers", type=int, default=1)
    rf.add_argument("--history", help="write the recorded command history here")
    rf.add_argument("--expect", choices=("auto", "no-mismatch", "mismatch", "none"), default="auto")
    rf.set_defaults(func=cmd_rfsck)

    cg = sub.add_parser("crashgen", help="record, enumerate and test crash states")
    cgs = cg.add_subparsers(dest="crash_cmd", parser_class=ArgParser)
    cgs.required = True
    rec = cgs.add_parser("record")
    rec.add_argument("--trace", required=True)
    rec.add_argument("--image")
    rec.add_argument("--blocks", type=int, default=MIN_BLOCKS)
    rec.add_argument("--workload", default="puts3", help="preset or ops like put:a:5000,delete:a")
    rec.add_argument("--unsafe", action="store_true")
    for name in ("enumerate", "test"):
        sp = cgs.add_parser(name)
        sp.add_argument("--trace", required=True)
        sp.add_argument("--limit", type=int)
        sp.add_argument("--torn", action="store_true", help="split multi-block writes")
        if name == "test":
            sp.add_argument("--workers", type=int, default=1)
            sp.add_argument("--expect", choices=("auto", "consistent", "inconsistent", "none"), default="auto")
    cg.set_defaults(func=cmd_crashgen)

    pf = sub.add_parser("pfault", help="apply a fault model, then check")
    pf.add_argument("--model", choices=pfault.MODELS, required=True)
    pf.add_argument("--blocks", type=int, default=1)
    pf.add_argument("--timeout", type=float, default=pfault.DEFAULT_TIMEOUT)
    pf.add_argument("--manifest")
    pf.add_argument("--out-dir")
    pf.add_argument("--expect", choices=("any", pfault.RECOVERED, pfault.DATA_LOSS, pfault.CHECKER_FAILED),
                    default="any")
    pf.add_argument("images", nargs="+")
    pf.set_defaults(func=cmd_pfault)

    lg = sub.add_parser("log", help="event log inspection")
    lgs = lg.add_subparsers(dest="log_cmd", parser_class=ArgParser)
    lgs.required = True
    show = lgs.add_parser("show")
    show.add_argument("--capability")
    show.add_argument("--failures", action="store_true")
    lg.set_defaults(func=cmd_log)

    sc = sub.add_parser("scenario", help="packaged walkthrough reproductions")
    sc.add_argument("name", help=f"all, {', '.join(scenarios.SCENARIOS)}")
    sc.add_argument("-v", "--verbose", action="store_true", help="include log excerpts")
    sc.set_defaults(func=cmd_scenario)
    for leaf in _leaves(p):
        add_globals(leaf, top=False)
    return p


def add_globals(p, top):
    # below the top level the defaults are suppressed so they don't clobber it
    kw = {} if top else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, help="seed for every random choice (default 0)",
                   **(kw or {"default": 0}))
    p.add_argument("--json", action="store_true", help="machine-readable output", **kw)
    p.add_argument("--state-dir", help="saved config location (env FAULTFORGE_STATE, default ./.faultforge)", **kw)
    p.add_argument("--report-dir", help="also write TSV tables and PNG figures here", **kw)


def _leaves(parser):
    subs = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    if not subs:
        return [parser]
    return [leaf for a in subs for child in dict.fromkeys(a.choices.values()) for leaf in _leaves(child)]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workload", None) and args.workload[0] == "--":
            args.workload = args.workload[1:]
        args.echo = "faultforge " + " ".join(shlex.quote(a) for a in argv)
        return args.func(args)
    except UsageError as exc:
        print(f"faultforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (ConfigError, TraceFormatError, FileNotFoundError) as exc:
        print(f"faultforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FaultForgeError as exc:
        print(f"faultforge: error: {exc}", file=sys.stderr)
        return EXIT_EXPECTATION


if __name__ == "__main__":
    sys.exit(main())
