"""Independent reference implementations used as test oracles.

Nothing here imports the code under test's decision logic; each oracle is a
straight-line restatement of the contract it checks.
"""

import itertools
import random


def reference_gate(calls, *, probability, interval=1, times=-1, space=0, task_filter=False,
                   require=None, reject=None, depth=32, seed=0, name="fault", fail_nth=0):
    """Decisions for a sequence of calls under the pinned gate order.

    ``calls`` is a list of dicts with keys size, marked, trace.  Returns a list
    of booleans plus the final (times, space, fail_nth).
    """
    rng = random.Random(f"{seed}:{name}")
    count = 0
    out = []
    for call in calls:
        count += 1
        if fail_nth > 0:
            fail_nth -= 1
            if fail_nth == 0:
                if times > 0:
                    times -= 1
                out.append(True)
            else:
                out.append(False)
            continue
        if task_filter and not call["marked"]:
            out.append(False)
            continue
        frames = list(call["trace"])[:depth]
        if reject is not None and any(reject[0] <= a < reject[1] for a in frames):
            out.append(False)
            continue
        if require is not None and not any(require[0] <= a < require[1] for a in frames):
            out.append(False)
            continue
        if space > 0:
            if space > call["size"]:
                space -= call["size"]
                out.append(False)
                continue
            space = 0
        if times == 0:
            out.append(False)
            continue
        if interval > 1 and count % interval != 0:
            out.append(False)
            continue
        if not rng.randrange(100) < probability:
            out.append(False)
            continue
        if times > 0:
            times -= 1
        out.append(True)
    return out, (times, space, fail_nth)


def brute_force_states(epochs):
    """Distinct crash states as frozensets of (epoch, index) write ids.

    All subsets of each epoch on top of every earlier epoch in full, deduped.
    """
    seen = set()
    prefix = frozenset()
    for e, n in enumerate(epochs):
        ids = [(e, i) for i in range(n)]
        for r in range(n + 1):
            for combo in itertools.combinations(ids, r):
                seen.add(prefix | frozenset(combo))
        prefix = prefix | frozenset(ids)
    return seen


def split_epochs(ops):
    """['W', 'F', 'W', ...] -> list of write counts per flush-delimited epoch."""
    epochs, cur = [], 0
    for op in ops:
        if op == "W":
            cur += 1
        elif cur:
            epochs.append(cur)
            cur = 0
    if cur or not epochs:
        epochs.append(cur)
    return epochs
