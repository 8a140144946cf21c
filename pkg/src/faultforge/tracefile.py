"""Binary history (checker I/O) and trace (workload I/O) files.

Both share one record layout, little-endian::

    seq u64 | op u8 (0 write, 1 flush, 2 mark) | lba u64 | len u32 | payload

History header: ``FFHIST01`` magic, version u32, block_size u32.
Trace header: ``FFTRACE1`` magic, version u32, block_size u32, block_count u64,
base digest u64, flags u8 (bit 0 journaled, bit 1 aborted), base image
length u32 followed by the zlib-compressed base image.  Flush records
delimit epochs; mark records carry ``durable`` and ``op-end`` labels.
"""

from __future__ import annotations

import struct
import zlib

from .errors import TraceFormatError
from .simstore.checksum import digest64
from .simstore.device import OP_CODES, OP_NAMES, IoRecord

VERSION = 1
HISTORY_MAGIC = b"FFHIST01"
TRACE_MAGIC = b"FFTRACE1"
HISTORY_HEADER = struct.Struct("<8sII")
TRACE_HEADER = struct.Struct("<8sIIQQBI")
RECORD = struct.Struct("<QBQI")


def _pack_records(records) -> bytes:
    out = bytearray()
    for rec in records:
        out += RECORD.pack(rec.seq, OP_CODES[rec.op], rec.lba, len(rec.payload))
        out += rec.payload
    return bytes(out)


def _unpack_records(buf, offset) -> list[IoRecord]:
    records = []
    last = -1
    while offset < len(buf):
        if offset + RECORD.size > len(buf):
            raise TraceFormatError("truncated record header")
        seq, op, lba, length = RECORD.unpack_from(buf, offset)
        offset += RECORD.size
        if op not in OP_NAMES:
            raise TraceFormatError(f"unknown op code {op}")
        if seq <= last:
            raise TraceFormatError("record sequence numbers must increase")
        payload = bytes(buf[offset:offset + length])
        if len(payload) != length:
            raise TraceFormatError("truncated record payload")
        offset += length
        records.append(IoRecord(seq, OP_NAMES[op], lba, payload))
        last = seq
    return records


def renumber(records) -> list[IoRecord]:
    return [IoRecord(i, r.op, r.lba, r.payload) for i, r in enumerate(records)]


def dump_history(records, block_size=4096) -> bytes:
    return HISTORY_HEADER.pack(HISTORY_MAGIC, VERSION, block_size) + _pack_records(records)


def load_history(buf: bytes) -> tuple[int, list[IoRecord]]:
    if len(buf) < HISTORY_HEADER.size:
        raise TraceFormatError("file too short for a history header")
    magic, version, block_size = HISTORY_HEADER.unpack_from(buf)
    if magic != HISTORY_MAGIC:
        raise TraceFormatError("not a history file")
    if version != VERSION:
        raise TraceFormatError(f"unsupported history version {version}")
    return block_size, _unpack_records(buf, HISTORY_HEADER.size)


def dump_trace(trace) -> bytes:
    packed = zlib.compress(trace.base_image)
    flags = (1 if trace.journaled else 0) | (2 if trace.aborted else 0)
    header = TRACE_HEADER.pack(TRACE_MAGIC, VERSION, trace.block_size,
                               len(trace.base_image) // trace.block_size,
                               digest64(trace.base_image), flags, len(packed))
    return header + packed + _pack_records(trace.records)


def load_trace(buf: bytes) -> dict:
    if len(buf) < TRACE_HEADER.size:
        raise TraceFormatError("file too short for a trace header")
    magic, version, block_size, block_count, digest, flags, base_len = TRACE_HEADER.unpack_from(buf)
    if magic != TRACE_MAGIC:
        raise TraceFormatError("not a trace file")
    if version != VERSION:
        raise TraceFormatError(f"unsupported trace version {version}")
    start = TRACE_HEADER.size
    try:
        base = zlib.decompress(buf[start:start + base_len])
    except zlib.error as exc:
        raise TraceFormatError(f"corrupt base image: {exc}") from None
    if len(base) != block_count * block_size or digest64(base) != digest:
        raise TraceFormatError("base image does not match its recorded digest")
    return {"base_image": base, "block_size": block_size, "journaled": bool(flags & 1),
            "aborted": bool(flags & 2), "records": _unpack_records(buf, start + base_len)}
