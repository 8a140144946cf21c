"""Acceptance criteria 1-7.  Each test prints a single PASS/FAIL line."""

import hashlib
import random

import pytest

from faultforge import crashgen, pfault, rfsck, scenarios
from faultforge.cli import main
from faultforge.core import ADDR_MAX, EventLog, FaultAttr, FaultContext, SymbolTable, Task, TaskTable, should_fail
from faultforge.fixtures import corrupted_image, crosslinked_image, populated_image
from faultforge.simstore import BLOCK_SIZE, ImageView, audit_image, check_image, format_image
from faultforge.workloads import parse_ops
from oracles import brute_force_states, reference_gate, split_epochs

BS = BLOCK_SIZE


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail=""):
        with capsys.disabled():
            print(f"\nacceptance {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        assert ok, detail
    return say


def _random_case(rng):
    calls = [{"size": rng.randrange(200), "marked": rng.random() < 0.5,
              "trace": [rng.randrange(0x500) for _ in range(rng.randrange(6))]}
             for _ in range(rng.randrange(40))]
    kw = dict(probability=rng.randrange(101), interval=rng.randrange(6), times=rng.randrange(-1, 7),
              space=rng.randrange(400), task_filter=rng.random() < 0.5, depth=rng.randrange(7),
              seed=rng.randrange(6), fail_nth=rng.randrange(9),
              require=(0x100, 0x300) if rng.random() < 0.5 else None,
              reject=(0x280, 0x400) if rng.random() < 0.5 else None)
    return calls, kw


def _run_gate(calls, kw):
    req, rej = kw["require"], kw["reject"]
    a = FaultAttr(probability=kw["probability"], interval=kw["interval"], times=kw["times"],
                  space=kw["space"], task_filter=kw["task_filter"], stacktrace_depth=kw["depth"],
                  verbose=0, seed=kw["seed"],
                  require_start=req[0] if req else 0, require_end=req[1] if req else ADDR_MAX,
                  reject_start=rej[0] if rej else 0, reject_end=rej[1] if rej else 0)
    task = Task(1)
    task.fail_nth = kw["fail_nth"]
    out = []
    for c in calls:
        task.make_it_fail = c["marked"]
        out.append(should_fail(a, FaultContext(task, tuple(c["trace"]), c["size"])))
    return out, (a.times, a.space, task.fail_nth)


def _ctx(size=0, marked=False, trace=(), task=None):
    return FaultContext(task or Task(7, make_it_fail=marked), tuple(trace), size)


def test_1_gate_semantics(verdict):
    problems = []
    rng = random.Random(1)
    for i in range(2000):
        calls, kw = _random_case(rng)
        if _run_gate(calls, kw) != reference_gate(calls, **kw):
            problems.append(f"oracle case {i}")
    # probability: +-0.01 over 100k seeded calls
    a = FaultAttr(probability=37, times=-1, verbose=0, seed=11)
    rate = sum(should_fail(a, _ctx()) for _ in range(100_000)) / 100_000
    if abs(rate - 0.37) > 0.01:
        problems.append(f"probability rate {rate}")
    # times exact count
    a = FaultAttr(probability=100, times=7, verbose=0)
    if sum(should_fail(a, _ctx()) for _ in range(50)) != 7:
        problems.append("times")
    # space blocked until consumed
    a = FaultAttr(probability=100, space=100, times=-1, verbose=0)
    if [should_fail(a, _ctx(size=60)) for _ in range(2)] != [False, True]:
        problems.append("space")
    # interval periodicity
    a = FaultAttr(probability=100, interval=4, times=-1, verbose=0)
    if [should_fail(a, _ctx()) for _ in range(8)] != [i % 4 == 0 for i in range(1, 9)]:
        problems.append("interval")
    # task and stack filters
    a = FaultAttr(probability=100, task_filter=True, times=-1, verbose=0)
    if should_fail(a, _ctx(marked=False)) or not should_fail(a, _ctx(marked=True)):
        problems.append("task filter")
    a = FaultAttr(probability=100, times=-1, verbose=0, require_start=0x100, require_end=0x200,
                  stacktrace_depth=2)
    if should_fail(a, _ctx(trace=(1, 2, 0x150))) or not should_fail(a, _ctx(trace=(1, 0x150))):
        problems.append("stack filter")
    # verbose levels
    syms = SymbolTable()
    site = syms.address("kmem_cache_alloc")
    for level in (0, 1, 2):
        log = EventLog(syms)
        should_fail(FaultAttr(probability=100, times=-1, verbose=level, log=log, name="failslab"),
                    _ctx(trace=(site,)))
        want_lines, want_trace = (0, False) if level == 0 else (1, level == 2)
        if len(log) != want_lines or ("Call Trace:" in log.render()) != want_trace:
            problems.append(f"verbose {level}")
    # fail-nth: exact Nth, read-back positive while pending and 0 once fired
    tasks = TaskTable()
    t = tasks.spawn("t")
    tasks.arm_fail_nth(t.task_id, 3)
    a = FaultAttr(probability=0, times=-1, verbose=0)
    got = [should_fail(a, _ctx(task=t)) for _ in range(2)]
    pending = tasks.read_fail_nth(t.task_id)
    got.append(should_fail(a, _ctx(task=t)))
    if got != [False, False, True] or pending <= 0 or tasks.read_fail_nth(t.task_id) != 0:
        problems.append("fail-nth")
    verdict(1, not problems, f"rate={rate:.4f} " + ", ".join(problems))


def test_2_scenarios(verdict):
    results = {name: scenarios.run(name, seed=0) for name in scenarios.SCENARIOS}
    obs = {n: r.observed for n, r in results.items()}
    problems = [n for n, r in results.items() if not r.passed]
    if not obs["slab-module-init"]["init_errors"] > 0:
        problems.append("module init never failed")
    pa = obs["page-alloc-range"]
    if not (pa["in_range_failed"] > 0 and pa["outside_failed"] == 0 and pa["deep_failed"] == 0):
        problems.append("page-alloc confinement")
    if (obs["open-ctree"]["first_mount"], obs["open-ctree"]["second_mount"]) != (-12, 0):
        problems.append("open-ctree errno")
    sc = obs["slab-cache-filter"]
    if not (sc["failures"] <= 1 and sc["caches"] in ("", "buff_head")):
        problems.append("cache filter")
    if "INVALID_OPCODE dnr" not in obs["nvme-default"]["error"]:
        problems.append("nvme status")
    verdict(2, not problems, ", ".join(problems) or f"{len(results)} scenarios")


def test_3_rfsck_controls(verdict):
    corrupted = corrupted_image()
    good = rfsck.run_campaign(corrupted, "all", "journaled")
    bad = rfsck.run_campaign(crosslinked_image(), "all", "inplace")
    mism_good = good.counts()[rfsck.MISMATCH]
    mism_bad = bad.counts()[rfsck.MISMATCH]
    full_ok = all(c.verdicts[-1].prefix_length == len(c.history) and c.verdicts[-1].outcome == rfsck.MATCH
                  for c in (good, bad))
    ok = mism_good == 0 and mism_bad >= 1 and full_ok
    verdict(3, ok, f"journaled mismatches={mism_good} inplace mismatches={mism_bad} full-prefix-match={full_ok}")


def _synthetic(ops):
    from faultforge.simstore.device import FLUSH, WRITE, IoRecord
    records, k = [], 0
    for op in ops:
        if op == "W":
            records.append(IoRecord(len(records), WRITE, k, bytes([k + 1]) * 512))
            k += 1
        else:
            records.append(IoRecord(len(records), FLUSH))
    return crashgen.WriteTrace(bytes(max(k, 1) * 512), records, block_size=512)


def _ids(ops):
    ids, e, i, k = {}, 0, 0, 0
    for op in ops:
        if op == "W":
            ids[k] = (e, i)
            i, k = i + 1, k + 1
        elif i:
            e, i = e + 1, 0
    return ids


def test_4_crashgen_oracle(verdict):
    rng = random.Random(4)
    problems = []
    traces = ["", "W", "F", "WF", "FW", "WWFFWW", "W" * 12, "WF" * 12]
    traces += ["".join(rng.choice("WF") for _ in range(rng.randrange(25))) for _ in range(120)]
    for ops in traces:
        if ops.count("W") > 12:
            continue
        trace = _synthetic(ops)
        epochs = split_epochs(ops)
        closed = sum(2 ** n for n in epochs) - (len(epochs) - 1)
        oracle = brute_force_states(epochs)
        ids = _ids(ops)
        got = set()
        for s in crashgen.enumerate_states(trace):
            img = s.materialize(trace)
            got.add(frozenset(ids[img[j * 512] - 1] for j in range(len(img) // 512) if img[j * 512]))
        if not (crashgen.count_states(trace) == closed == len(oracle) and got == oracle):
            problems.append(ops)
    j_trace, _ = crashgen.record(parse_ops("puts3"), format_image(64))
    journaled = crashgen.test_states(j_trace, crashgen.enumerate_states(j_trace))
    u_trace, _ = crashgen.record(parse_ops("puts3"), format_image(64), journaled=False)
    unsafe = crashgen.test_states(u_trace, crashgen.enumerate_states(u_trace)).counts()
    non_consistent = sum(v for k, v in unsafe.items() if k != crashgen.CONSISTENT)
    ok = not problems and journaled.all_consistent and non_consistent >= 1
    verdict(4, ok, f"traces={len(traces)} oracle-mismatch={len(problems)} "
                   f"journaled={journaled.counts()[crashgen.CONSISTENT]}/{len(journaled.outcomes)} "
                   f"unsafe-non-consistent={non_consistent}")


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _session(base, monkeypatch, capsys):
    """Run a fixed command script in a fresh directory; return stdout and file digests."""
    base.mkdir()
    monkeypatch.chdir(base)
    # relative paths so both sessions issue the very same commands
    monkeypatch.setenv("FAULTFORGE_STATE", "state")
    monkeypatch.setenv("FAULTFORGE_LOG", "events.log")
    script = [
        ["store", "format", "s.img"],
        ["store", "put", "s.img", "a", "--data", "alpha"],
        ["cfg", "set", "failslab/probability", "30"],
        ["--seed", "7", "store", "put", "s.img", "b", "--data", "beta"],
        ["cfg", "reset"],
        ["--json", "--seed", "7", "--report-dir", "rep/fc", "failcmd", "--capability=failslab",
         "--probability=20", "--", "put-loop"],
        ["--json", "--seed", "7", "--report-dir", "rep/rf", "rfsck", "--image", "fixture:corrupted",
         "--prefixes", "sample:3:4"],
        ["crashgen", "record", "--trace", "t.bin", "--workload", "puts3", "--unsafe"],
        ["--json", "--seed", "7", "--report-dir", "rep/cg", "crashgen", "test", "--trace", "t.bin",
         "--limit", "20"],
        ["--json", "--seed", "7", "--report-dir", "rep/pf", "pfault", "--model", "global-inconsistency",
         "--blocks", "3", "s.img", "--manifest", "m.txt", "--out-dir", "out"],
        ["--json", "--seed", "7", "--report-dir", "rep/sc", "scenario", "all"],
    ]
    outs = []
    for argv in script:
        code = main(argv)
        outs.append((code, capsys.readouterr().out))
    files = _tree_bytes(base)
    return outs, files


def test_5_determinism(tmp_path, monkeypatch, capsys, verdict):
    a_out, a_files = _session(tmp_path / "a", monkeypatch, capsys)
    b_out, b_files = _session(tmp_path / "b", monkeypatch, capsys)
    images = [k for k in a_files if k.endswith((".img", ".faulted"))]
    reports = [k for k in a_files if k.startswith("rep/")]
    ok = a_out == b_out and a_files == b_files and images and reports
    verdict(5, ok, f"outputs={len(a_out)} reports={len(reports)} images={len(images)}")


def _corrupt(image, rng, n):
    sb = ImageView(image).sb
    meta = list(range(sb.data_start)) + [sb.backup_lba]
    out = bytearray(image)
    for _ in range(n):
        lba = rng.choice(meta)
        if rng.random() < 0.3:
            out[lba * BS:(lba + 1) * BS] = bytes(BS)
        else:
            out[lba * BS + rng.randrange(BS)] ^= 1 << rng.randrange(8)
    return bytes(out)


def test_6_checker_invariants(verdict):
    problems = []
    clean_inputs = [format_image(64), populated_image(), populated_image(seed=3, block_count=128)]
    for variant in ("journaled", "inplace"):
        for img in clean_inputs:
            repaired, report = check_image(img, variant)
            if repaired != img or not report.clean:
                problems.append(f"clean identity {variant}")
    base = populated_image()
    inputs = [corrupted_image(), crosslinked_image()]
    rng = random.Random(6)
    inputs += [_corrupt(base, rng, rng.randrange(1, 7)) for _ in range(150)]
    audited = 0
    for variant in ("journaled", "inplace"):
        for img in inputs:
            repaired, report = check_image(img, variant)
            if report.unrepairable:
                continue
            audited += 1
            if audit_image(repaired):
                problems.append(f"audit {variant}")
            again, report2 = check_image(repaired, variant)
            if again != repaired or not report2.clean:
                problems.append(f"idempotence {variant}")
    verdict(6, not problems, f"audited={audited} " + ", ".join(sorted(set(problems))))


def test_7_manifest_completeness(verdict):
    images = [populated_image(seed=i) for i in range(3)]
    bad = []
    for seed in range(100):
        n = 1 + seed % 3
        res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 1 + seed % 8, seed), images[:n])
        for i in range(n):
            listed = sorted(m.lba for m in res.manifest if m.image == i)
            if pfault.image_diff(images[i], res.images[i].image) != listed:
                bad.append(seed)
    verdict(7, not bad, f"applications=100 mismatched={len(bad)}")
