"""Figures for ``--report-dir``.  Each writer returns the paths it created."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# no Software/date metadata, so reruns give identical bytes
PNG_META = {"Software": None}

OUTCOME_COLORS = {
    "Match": "#4c9a2a", "RepairedToMatch": "#9ccc65", "Mismatch": "#c62828",
    "Consistent": "#4c9a2a", "ChecksumErr": "#ef6c00", "JournalTxnErr": "#6a1b9a",
    "MetadataErr": "#c62828", "MountErr": "#37474f",
    "Recovered": "#4c9a2a", "DataLoss": "#ef6c00", "CheckerFailed": "#c62828",
}


def write_tsv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)
    return path


def counts_bar(counts: dict, title, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        keys = list(counts)
        ax.bar(keys, [counts[k] for k in keys], color=[OUTCOME_COLORS.get(k, "#607d8b") for k in keys])
        ax.set_ylabel("count")
        ax.set_title(title)
        ax.tick_params(axis="x", labelrotation=20)
        return _save(fig, path)


def outcome_strip(xs, outcomes, xlabel, title, path):
    """One colored tick per item along x: prefixes or crash states."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.4, 2.2))
        seen = []
        for label in dict.fromkeys(outcomes):
            pts = [x for x, o in zip(xs, outcomes) if o == label]
            ax.scatter(pts, [0] * len(pts), marker="|", s=400, color=OUTCOME_COLORS.get(label, "#607d8b"),
                       label=label)
            seen.append(label)
        ax.set_yticks([])
        ax.set_xlabel(xlabel)
        ax.set_title(title)
        if seen:
            ax.legend(loc="upper center", bbox_to_anchor=(0.5, -0.45), ncol=len(seen), frameon=False)
        return _save(fig, path)


def event_timeline(events, title, path):
    """Cumulative FAIL events over logical time, one line per capability."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        caps = sorted({e.capability for e in events if e.decision})
        for cap in caps:
            ts = [e.logical_time for e in events if e.decision and e.capability == cap]
            ax.step(ts, range(1, len(ts) + 1), where="post", label=cap)
        ax.set_xlabel("logical time")
        ax.set_ylabel("cumulative failures")
        ax.set_title(title)
        if caps:
            ax.legend(frameon=False)
        return _save(fig, path)


def report_rfsck(campaign, outdir):
    os.makedirs(outdir, exist_ok=True)
    rows = [(v.prefix_length, v.outcome, f"{v.interrupted_digest:016x}", "; ".join(v.diff))
            for v in campaign.verdicts]
    return [
        write_tsv(os.path.join(outdir, "rfsck.tsv"), ("prefix", "outcome", "interrupted_digest", "diff"), rows),
        counts_bar(campaign.counts(), f"interrupted repair verdicts ({campaign.variant})",
                   os.path.join(outdir, "rfsck_counts.png")),
        outcome_strip([v.prefix_length for v in campaign.verdicts], [v.outcome for v in campaign.verdicts],
                      "prefix length", "verdict by prefix", os.path.join(outdir, "rfsck_prefixes.png")),
    ]


def report_crashgen(report, outdir):
    os.makedirs(outdir, exist_ok=True)
    rows = [(o.index, o.epoch, ",".join(map(str, o.subset)), o.outcome, f"{o.digest:016x}",
             o.detail.replace("\n", "; ")) for o in report.outcomes]
    return [
        write_tsv(os.path.join(outdir, "crashgen.tsv"), ("state", "epoch", "subset", "outcome", "digest", "detail"),
                  rows),
        counts_bar(report.counts(), "crash state outcomes", os.path.join(outdir, "crashgen_counts.png")),
        outcome_strip([o.index for o in report.outcomes], [o.outcome for o in report.outcomes],
                      "crash state", "outcome by state", os.path.join(outdir, "crashgen_states.png")),
    ]


def report_pfault(outcomes, manifest, outdir):
    os.makedirs(outdir, exist_ok=True)
    counts = {}
    for o in outcomes:
        counts[o.outcome] = counts.get(o.outcome, 0) + 1
    return [
        write_tsv(os.path.join(outdir, "pfault.tsv"), ("image", "outcome", "reason", "findings"),
                  [(o.image, o.outcome, o.reason, "; ".join(o.findings)) for o in outcomes]),
        write_tsv(os.path.join(outdir, "pfault_manifest.tsv"), ("image", "lba", "mutation"),
                  [(m.image, m.lba, m.mutation) for m in manifest]),
        counts_bar(counts, "post-fault outcomes", os.path.join(outdir, "pfault_counts.png")),
    ]


def report_events(events, outdir, stem="events"):
    os.makedirs(outdir, exist_ok=True)
    rows = [(e.logical_time, e.capability, "FAIL" if e.decision else "PASS", e.task_id, e.size,
             " ".join(f"{k}={v}" for k, v in e.extra)) for e in events]
    return [
        write_tsv(os.path.join(outdir, f"{stem}.tsv"), ("time", "capability", "decision", "task", "size", "extra"),
                  rows),
        event_timeline(events, "injected failures", os.path.join(outdir, f"{stem}.png")),
    ]


def report_scenarios(results, outdir):
    os.makedirs(outdir, exist_ok=True)
    rows = [(r.name, what, "ok" if ok else "FAILED", detail) for r in results for what, ok, detail in r.checks]
    counts = {r.name: sum(ok for _, ok, _ in r.checks) for r in results}
    return [
        write_tsv(os.path.join(outdir, "scenarios.tsv"), ("scenario", "check", "result", "detail"), rows),
        counts_bar(counts, "scenario checks passed", os.path.join(outdir, "scenarios.png")),
    ]
