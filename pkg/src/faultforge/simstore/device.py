"""Block devices, I/O recording, and the block layer that runs capability hooks."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

from ..capabilities import NvmeCompletion, NvmeStatus
from ..errors import DeviceFailedError, DeviceTimeout, IOFault
from .checksum import digest64

BLOCK_SIZE = 4096

WRITE, FLUSH, MARK = "write", "flush", "mark"
OP_CODES = {WRITE: 0, FLUSH: 1, MARK: 2}
OP_NAMES = {v: k for k, v in OP_CODES.items()}


@dataclass(frozen=True)
class IoRecord:
    seq: int
    op: str
    lba: int = 0
    payload: bytes = b""

    @property
    def length(self):
        return len(self.payload)

    def nblocks(self, block_size=BLOCK_SIZE):
        return len(self.payload) // block_size

    @property
    def digest(self):
        return digest64(self.payload)

    @property
    def label(self):
        return self.payload.decode() if self.op == MARK else ""


class Recorder:
    """Collects every write, flush and mark a device sees, in order."""

    def __init__(self):
        self.records: list[IoRecord] = []
        self._lock = threading.Lock()

    def _append(self, op, lba=0, payload=b""):
        with self._lock:
            self.records.append(IoRecord(len(self.records), op, lba, bytes(payload)))

    def __len__(self):
        return len(self.records)


class BlockDevice:
    """A flat array of fixed-size blocks.  Never-written blocks read as zeros.

    Writes land in the image as soon as they are acknowledged; the crash model
    (which acknowledged writes survive a power cut) lives in crashgen, driven
    by the recorded write/flush sequence.
    """

    def __init__(self, name="sim0", block_count=64, block_size=BLOCK_SIZE, mode="normal", image=None):
        if mode not in ("normal", "nvme", "nullb"):
            raise ValueError(f"unknown device mode {mode}")
        self.name = name
        self.block_size = block_size
        self.mode = mode
        if image is not None:
            if len(image) % block_size:
                raise ValueError("image size is not a multiple of the block size")
            self._data = bytearray(image)
            block_count = len(image) // block_size
        else:
            self._data = bytearray(block_count * block_size)
        self.block_count = block_count
        self.partitions: dict[str, tuple[int, int]] = {}
        self.make_it_fail = False
        self.failing_partitions: set[str] = set()
        self.failed = False
        self.recorders: list[Recorder] = []
        self.flushes = 0
        self._lock = threading.RLock()

    @classmethod
    def from_image(cls, image, name="sim0", block_size=BLOCK_SIZE, mode="normal"):
        return cls(name, block_size=block_size, mode=mode, image=image)

    def __repr__(self):
        return f"<BlockDevice {self.name} {self.block_count}x{self.block_size} {self.mode}>"

    def _check_range(self, lba, count):
        if lba < 0 or count < 0 or lba + count > self.block_count:
            raise IOFault(f"{self.name}: access beyond end of device (lba {lba}, {count} blocks)")

    def read(self, lba, count=1) -> bytes:
        self._check_range(lba, count)
        bs = self.block_size
        with self._lock:
            return bytes(self._data[lba * bs:(lba + count) * bs])

    def write(self, lba, data):
        bs = self.block_size
        if len(data) % bs:
            data = bytes(data) + bytes(bs - len(data) % bs)
        self._check_range(lba, len(data) // bs)
        with self._lock:
            self._data[lba * bs:lba * bs + len(data)] = data
            for rec in self.recorders:
                rec._append(WRITE, lba, data)

    def flush(self):
        with self._lock:
            self.flushes += 1
            for rec in self.recorders:
                rec._append(FLUSH)

    def mark(self, label):
        with self._lock:
            for rec in self.recorders:
                rec._append(MARK, 0, label.encode())

    @contextmanager
    def recording(self):
        rec = Recorder()
        with self._lock:
            self.recorders.append(rec)
        try:
            yield rec
        finally:
            with self._lock:
                self.recorders.remove(rec)

    def image(self) -> bytes:
        with self._lock:
            return bytes(self._data)

    def digest(self):
        return digest64(self.image())

    def add_partition(self, name, start, count):
        self._check_range(start, count)
        for other, (s, c) in self.partitions.items():
            if start < s + c and s < start + count:
                raise ValueError(f"partition {name} overlaps {other}")
        self.partitions[name] = (start, count)

    def partition_of(self, lba):
        for name, (start, count) in self.partitions.items():
            if start <= lba < start + count:
                return name
        return None


@dataclass
class Bio:
    device: BlockDevice
    op: str
    lba: int = 0
    count: int = 0
    data: bytes = b""
    dispatches: int = 0
    attempts: list = field(default_factory=list)

    @property
    def is_write(self):
        return self.op == WRITE

    @property
    def nbytes(self):
        return len(self.data) if self.is_write else self.count * self.device.block_size


NVME_MAX_RETRIES = 5
DEFAULT_REQUEUE_CAP = 8


class BlockLayer:
    """submit_bio analog: fail_make_request check, then the device driver."""

    def __init__(self, rt):
        self.rt = rt
        self.requeue_cap: dict[str, int] = {}

    def submit(self, bio: Bio):
        dev = bio.device
        if dev.failed:
            raise DeviceFailedError(f"{dev.name}: device has failed")
        rt = self.rt
        if bio.op != FLUSH:
            part = dev.partition_of(bio.lba)
            ctx = rt.context("submit_bio_noacct", size=bio.nbytes)
            if rt.fail_make_request.check(ctx, dev, part, bio.is_write):
                raise IOFault(f"{dev.name}: I/O error, {bio.op} lba {bio.lba}")
        if dev.mode == "nvme":
            return self._nvme(bio)
        if dev.mode == "nullb":
            return self._nullb(bio)
        return self._execute(bio)

    @staticmethod
    def _execute(bio):
        dev = bio.device
        if bio.op == WRITE:
            dev.write(bio.lba, bio.data)
            return None
        if bio.op == FLUSH:
            dev.flush()
            return None
        return dev.read(bio.lba, bio.count)

    def _nvme(self, bio):
        rt = self.rt
        dev = bio.device
        cap = rt.capabilities[f"nvme/{dev.name}/fault_inject"]
        command = {WRITE: "write", FLUSH: "flush"}.get(bio.op, "read")
        while True:
            result = self._execute(bio)
            completion = NvmeCompletion(dev.name, command)
            ctx = rt.context("nvme_try_complete_req", size=bio.nbytes)
            cap.inject(ctx, completion)
            bio.attempts.append(completion.status)
            if completion.status == NvmeStatus.SUCCESS:
                return result
            if completion.dnr or len(bio.attempts) > NVME_MAX_RETRIES:
                code = NvmeStatus(completion.code)
                raise IOFault(f"{dev.name}: I/O error, status {code.name}"
                              f"{' dnr' if completion.dnr else ''}", status=completion)

    def _nullb(self, bio):
        rt = self.rt
        dev = bio.device
        timeout = rt.capabilities[f"nullb/{dev.name}/timeout_inject"]
        requeue = rt.capabilities[f"nullb/{dev.name}/requeue_inject"]
        cap = self.requeue_cap.get(dev.name, DEFAULT_REQUEUE_CAP)
        requeues = 0
        while True:
            bio.dispatches += 1
            ctx = rt.context("null_queue_rq", size=bio.nbytes)
            ctx.info["effect"] = "timeout"
            if timeout.should_fail(ctx):
                raise DeviceTimeout(f"{dev.name}: request timed out, {bio.op} lba {bio.lba}")
            if requeues < cap:
                ctx = rt.context("null_queue_rq", size=bio.nbytes)
                ctx.info["effect"] = "requeue"
                if requeue.should_fail(ctx):
                    requeues += 1
                    continue
            # null_blk transfers nothing
            return bytes(bio.count * dev.block_size) if bio.op not in (WRITE, FLUSH) else None


class BlockIO:
    """Convenience front-end for filesystem code: direct when no runtime."""

    def __init__(self, device: BlockDevice, rt=None):
        self.device = device
        self.rt = rt

    def read(self, lba, count=1):
        if self.rt is None:
            if self.device.failed:
                raise DeviceFailedError(f"{self.device.name}: device has failed")
            return self.device.read(lba, count)
        return self.rt.block.submit(Bio(self.device, "read", lba, count))

    def write(self, lba, data):
        if self.rt is None:
            if self.device.failed:
                raise DeviceFailedError(f"{self.device.name}: device has failed")
            return self.device.write(lba, data)
        return self.rt.block.submit(Bio(self.device, WRITE, lba, len(data) // self.device.block_size, bytes(data)))

    def flush(self):
        if self.rt is None:
            if self.device.failed:
                raise DeviceFailedError(f"{self.device.name}: device has failed")
            return self.device.flush()
        return self.rt.block.submit(Bio(self.device, FLUSH))

    def mark(self, label):
        self.device.mark(label)


__all__ = ["BLOCK_SIZE", "BlockDevice", "BlockIO", "BlockLayer", "Bio", "IoRecord", "Recorder",
           "WRITE", "FLUSH", "MARK"]
