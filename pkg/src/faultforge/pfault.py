"""Coarse fault states applied to whole images, then a checker campaign.

Two models: whole-device failure (bytes intact, every I/O errors) and
global inconsistency (seeded bit flips or zeroed blocks spread over the
metadata of one or more images).  Network partitioning needs more than one
node and is out of scope.
"""

from __future__ import annotations

import random
import threading
import warnings
from dataclasses import dataclass, field

from .errors import DeviceFailedError, FormatError, IOFault, StoreError
from .simstore.checker import Checker
from .simstore.device import BlockDevice
from .simstore.layout import ImageView, geometry
from .simstore.store import Store

WHOLE_DEVICE = "whole-device"
GLOBAL_INCONSISTENCY = "global-inconsistency"
MODELS = (WHOLE_DEVICE, GLOBAL_INCONSISTENCY)

# relative pick weight per metadata region
REGION_WEIGHTS = {"bitmap": 4, "table": 4, "superblock": 1, "journal": 1, "backup": 1}

RECOVERED, DATA_LOSS, CHECKER_FAILED = "Recovered", "DataLoss", "CheckerFailed"
DEFAULT_TIMEOUT = 10.0


@dataclass(frozen=True)
class FaultModel:
    kind: str
    blocks: int = 1
    seed: int = 0
    weights: tuple = tuple(sorted(REGION_WEIGHTS.items()))

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ValueError(f"unknown fault model {self.kind}")
        if self.blocks < 0:
            raise ValueError("blocks must be non-negative")


@dataclass(frozen=True)
class Mutation:
    image: int
    lba: int
    mutation: str

    def render(self):
        return f"block {self.lba} {self.mutation}"


@dataclass
class FaultedImage:
    image: bytes
    failed: bool = False

    def device(self, name="sim0") -> BlockDevice:
        dev = BlockDevice.from_image(self.image, name=name)
        dev.failed = self.failed
        return dev


@dataclass
class FaultResult:
    images: list
    manifest: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def manifest_text(self):
        if len(self.images) == 1:
            return "".join(m.render() + "\n" for m in self.manifest)
        out = []
        for i in range(len(self.images)):
            out.append(f"image {i}")
            out += [m.render() for m in self.manifest if m.image == i]
        return "".join(line + "\n" for line in out)


def metadata_regions(image: bytes) -> dict[str, list[int]]:
    n = len(image) // 4096
    try:
        sb = ImageView(image).sb
    except (FormatError, ValueError):
        sb = geometry(n)
    return {
        "superblock": [0],
        "bitmap": list(range(sb.bitmap_start, sb.bitmap_start + sb.bitmap_blocks)),
        "table": list(range(sb.table_start, sb.table_start + sb.table_blocks)),
        "journal": list(range(sb.journal_start, sb.journal_start + sb.journal_blocks)),
        "backup": [sb.backup_lba],
    }


def _mutate(block: bytes, rng) -> tuple[bytes, str]:
    """A mutation that changes the block: zeroing, or a single bit flip."""
    if rng.random() < 0.25 and any(block):
        return bytes(len(block)), "zero"
    byte, bit = rng.randrange(len(block)), rng.randrange(8)
    out = bytearray(block)
    out[byte] ^= 1 << bit
    return bytes(out), f"flip:{byte}:{bit}"


def apply(model: FaultModel, images) -> FaultResult:
    images = [bytes(i) for i in images]
    if model.kind == WHOLE_DEVICE:
        return FaultResult([FaultedImage(i, failed=True) for i in images])
    rng = random.Random(f"pfault:{model.seed}")
    weights = dict(model.weights)
    pool = []
    for idx, image in enumerate(images):
        for region, lbas in metadata_regions(image).items():
            pool += [(idx, lba, weights.get(region, 1)) for lba in lbas]
    result = FaultResult([])
    count = model.blocks
    if count > len(pool):
        msg = f"{count} corrupt blocks requested but only {len(pool)} metadata blocks exist; clipped"
        warnings.warn(msg, stacklevel=2)
        result.warnings.append(msg)
        count = len(pool)
    picks = []
    for _ in range(count):
        total = sum(w for _, _, w in pool)
        r = rng.uniform(0, total)
        for pos, (_, _, w) in enumerate(pool):
            r -= w
            if r <= 0:
                break
        picks.append(pool.pop(pos)[:2])
    out = [bytearray(i) for i in images]
    for idx, lba in sorted(picks):
        block = bytes(out[idx][lba * 4096:(lba + 1) * 4096])
        new, desc = _mutate(block, rng)
        out[idx][lba * 4096:(lba + 1) * 4096] = new
        result.manifest.append(Mutation(idx, lba, desc))
    result.images = [FaultedImage(bytes(i)) for i in out]
    return result


def image_diff(a: bytes, b: bytes) -> list[int]:
    bs = 4096
    return [i for i in range(len(a) // bs) if a[i * bs:(i + 1) * bs] != b[i * bs:(i + 1) * bs]]


@dataclass
class ImageOutcome:
    image: int
    outcome: str
    reason: str = ""
    findings: list = field(default_factory=list)

    def label(self):
        return f"{self.outcome}({self.reason})" if self.outcome == CHECKER_FAILED else self.outcome

    def to_dict(self):
        return {"image": self.image, "outcome": self.outcome, "reason": self.reason,
                "findings": list(self.findings)}


def _run_with_watchdog(fn, timeout):
    box = {}

    def target():
        try:
            box["value"] = fn()
        except BaseException as exc:  # reported to the caller
            box["error"] = exc

    worker = threading.Thread(target=target, daemon=True)
    worker.start()
    worker.join(timeout)
    if worker.is_alive():
        raise TimeoutError(f"checker did not finish within {timeout}s")
    if "error" in box:
        raise box["error"]
    return box["value"]


def check_one(idx, faulted: FaultedImage, original_objects=None, timeout=DEFAULT_TIMEOUT,
              checker=None) -> ImageOutcome:
    dev = faulted.device()
    run = checker or (lambda d: Checker(d).run())
    try:
        report = _run_with_watchdog(lambda: run(dev), timeout)
    except TimeoutError:
        return ImageOutcome(idx, CHECKER_FAILED, "timeout")
    except DeviceFailedError:
        return ImageOutcome(idx, CHECKER_FAILED, "device-error")
    except Exception as exc:
        return ImageOutcome(idx, CHECKER_FAILED, f"abort: {exc}")
    findings = [f.render() for f in report.findings]
    if report.unrepairable:
        return ImageOutcome(idx, CHECKER_FAILED, "unrepairable", findings)
    # verifiable workload: mount, read back everything, write and read a probe
    try:
        store = Store.mount(dev)
        objects = store.objects()
        store.put("pfault-probe", b"probe" * 100)
        if store.get("pfault-probe") != b"probe" * 100:
            return ImageOutcome(idx, CHECKER_FAILED, "probe readback differs", findings)
        store.delete("pfault-probe")
    except (StoreError, IOFault) as exc:
        return ImageOutcome(idx, CHECKER_FAILED, f"post-check workload: {exc}", findings)
    if original_objects is not None and objects != original_objects:
        lost = sorted(n for n in original_objects if objects.get(n) != original_objects[n])
        return ImageOutcome(idx, DATA_LOSS, ",".join(lost), findings)
    return ImageOutcome(idx, RECOVERED, "", findings)


def post_fault_check(result: FaultResult, originals=None, timeout=DEFAULT_TIMEOUT) -> list[ImageOutcome]:
    outcomes = []
    for idx, faulted in enumerate(result.images):
        expected = None
        if originals is not None:
            try:
                expected = ImageView(originals[idx]).objects()
            except (FormatError, ValueError):
                expected = None
        outcomes.append(check_one(idx, faulted, expected, timeout))
    return outcomes


__all__ = ["FaultModel", "FaultResult", "FaultedImage", "ImageOutcome", "Mutation", "apply", "check_one",
           "image_diff", "metadata_regions", "post_fault_check"]
