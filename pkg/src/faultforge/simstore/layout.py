"""On-disk format of the simulated object store.

All integers are little-endian; blocks are ``block_size`` bytes (4096 by
default).  Layout, by block number::

    0                      superblock
    1 .. b                 allocation bitmap (bit i <=> block i in use, LSB first)
    next t                 object table, 32 entries of 128 bytes per block
    next j                 journal: descriptor, payload blocks, commit record
    ... up to N-2          data blocks
    N-1                    backup superblock (geometry copy written at format time)

See docs/image-format.md for the byte-level description.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from ..errors import FormatError
from .checksum import digest64
from .device import BLOCK_SIZE

MAGIC = b"FFSTORE1"
VERSION = 1
MIN_BLOCKS = 64
DEFAULT_TABLE_BLOCKS = 2
DEFAULT_JOURNAL_BLOCKS = 16

SB = struct.Struct("<8sIIQQQQQQQQQQQQ")
ENTRY = struct.Struct("<BBHIQQQ64s")
ENTRY_SIZE = 128
ENTRY_CSUM = struct.Struct("<Q")
NAME_MAX = 64

JDESC_MAGIC = b"FFJDESC1"
JCOMMIT_MAGIC = b"FFJCMIT1"
JDESC = struct.Struct("<8sQI4x")
JCOMMIT = struct.Struct("<8sQQ")


@dataclass(frozen=True)
class Superblock:
    block_size: int
    block_count: int
    bitmap_start: int
    bitmap_blocks: int
    table_start: int
    table_blocks: int
    journal_start: int
    journal_blocks: int
    data_start: int
    data_blocks: int
    object_count: int = 0
    seq: int = 0
    version: int = VERSION

    GEOMETRY = ("block_size", "block_count", "bitmap_start", "bitmap_blocks", "table_start",
                "table_blocks", "journal_start", "journal_blocks", "data_start", "data_blocks")

    @property
    def backup_lba(self):
        return self.block_count - 1

    @property
    def entries_per_block(self):
        return self.block_size // ENTRY_SIZE

    @property
    def table_slots(self):
        return self.table_blocks * self.entries_per_block

    def geometry(self):
        return tuple(getattr(self, f) for f in self.GEOMETRY)

    def metadata_blocks(self):
        """Blocks that are always allocated."""
        yield 0
        yield from range(self.bitmap_start, self.bitmap_start + self.bitmap_blocks)
        yield from range(self.table_start, self.table_start + self.table_blocks)
        yield from range(self.journal_start, self.journal_start + self.journal_blocks)
        yield self.backup_lba

    def is_data(self, lba, count=1):
        return self.data_start <= lba and lba + count <= self.data_start + self.data_blocks

    def pack(self) -> bytes:
        body = SB.pack(MAGIC, self.version, self.block_size, self.block_count,
                       self.bitmap_start, self.bitmap_blocks, self.table_start, self.table_blocks,
                       self.journal_start, self.journal_blocks, self.data_start, self.data_blocks,
                       self.object_count, self.seq, 0)
        body = body[:-8]
        return (body + struct.pack("<Q", digest64(body))).ljust(self.block_size, b"\0")

    @classmethod
    def unpack(cls, block: bytes) -> Superblock:
        fields = SB.unpack_from(block)
        if fields[0] != MAGIC:
            raise FormatError("bad superblock magic")
        if digest64(block[:SB.size - 8]) != fields[-1]:
            raise FormatError("bad superblock checksum")
        sb = cls(*fields[2:14], version=fields[1])
        if sb.version != VERSION:
            raise FormatError(f"unsupported version {sb.version}")
        sb.validate()
        return sb

    def validate(self, device_blocks=None):
        if device_blocks is not None and device_blocks != self.block_count:
            raise FormatError("superblock block_count disagrees with device size")
        if self.block_count < MIN_BLOCKS or self.block_size < ENTRY_SIZE:
            raise FormatError("superblock geometry too small")
        expected = geometry(self.block_count, self.block_size, self.table_blocks, self.journal_blocks)
        if self.geometry() != expected.geometry():
            raise FormatError("superblock geometry inconsistent")
        if self.journal_blocks < 3:
            raise FormatError("journal too small")

    def backup_copy(self) -> Superblock:
        """The backup keeps geometry only, as written by format."""
        return replace(self, object_count=0, seq=0)

    def with_counts(self, object_count=None, seq=None) -> Superblock:
        return replace(self,
                       object_count=self.object_count if object_count is None else object_count,
                       seq=self.seq if seq is None else seq)


def geometry(block_count, block_size=BLOCK_SIZE, table_blocks=DEFAULT_TABLE_BLOCKS,
             journal_blocks=DEFAULT_JOURNAL_BLOCKS) -> Superblock:
    bitmap_blocks = -(-block_count // (block_size * 8))
    bitmap_start = 1
    table_start = bitmap_start + bitmap_blocks
    journal_start = table_start + table_blocks
    data_start = journal_start + journal_blocks
    data_blocks = block_count - 1 - data_start
    return Superblock(block_size, block_count, bitmap_start, bitmap_blocks, table_start,
                      table_blocks, journal_start, journal_blocks, data_start, data_blocks)


@dataclass(frozen=True)
class Entry:
    name: str
    start: int
    nblocks: int
    size: int
    checksum: int

    def pack(self) -> bytes:
        raw = self.name.encode()
        body = ENTRY.pack(1, len(raw), 0, self.nblocks, self.start, self.size, self.checksum, raw)
        return (body + ENTRY_CSUM.pack(digest64(body))).ljust(ENTRY_SIZE, b"\0")

    def blocks(self):
        return range(self.start, self.start + self.nblocks)


FREE_ENTRY = bytes(ENTRY_SIZE)


class EntryError(FormatError):
    pass


def unpack_entry(raw: bytes) -> Entry | None:
    """Decode one table slot: None for a free slot, EntryError for garbage."""
    if raw == FREE_ENTRY:
        return None
    in_use, name_len, _, nblocks, start, size, csum, name = ENTRY.unpack_from(raw)
    (stored,) = ENTRY_CSUM.unpack_from(raw, ENTRY.size)
    if digest64(raw[:ENTRY.size]) != stored:
        raise EntryError("entry checksum mismatch")
    if in_use != 1 or not 0 < name_len <= NAME_MAX:
        raise EntryError("malformed entry")
    try:
        decoded = name[:name_len].decode()
    except UnicodeDecodeError:
        raise EntryError("undecodable name") from None
    return Entry(decoded, start, nblocks, size, csum)


def blocks_for(size, block_size=BLOCK_SIZE):
    return -(-size // block_size)


def object_checksum(data: bytes) -> int:
    return digest64(data)


def bitmap_get(bitmap, lba):
    return bool(bitmap[lba >> 3] & (1 << (lba & 7)))


def bitmap_set(bitmap, lba, on=True):
    if on:
        bitmap[lba >> 3] |= 1 << (lba & 7)
    else:
        bitmap[lba >> 3] &= ~(1 << (lba & 7)) & 0xFF


def build_bitmap(sb: Superblock, entries) -> bytearray:
    bitmap = bytearray(sb.bitmap_blocks * sb.block_size)
    for lba in sb.metadata_blocks():
        bitmap_set(bitmap, lba)
    for entry in entries:
        for lba in entry.blocks():
            bitmap_set(bitmap, lba)
    return bitmap


@dataclass(frozen=True)
class JournalTxn:
    seq: int
    targets: tuple
    payload: tuple  # block images, parallel to targets
    committed: bool


def pack_descriptor(seq, targets, block_size=BLOCK_SIZE) -> bytes:
    body = JDESC.pack(JDESC_MAGIC, seq, len(targets)) + b"".join(struct.pack("<Q", t) for t in targets)
    body = body.ljust(block_size - 8, b"\0")
    return body + struct.pack("<Q", digest64(body))


def pack_commit(seq, descriptor, payload, block_size=BLOCK_SIZE) -> bytes:
    csum = digest64(descriptor + b"".join(payload))
    return JCOMMIT.pack(JCOMMIT_MAGIC, seq, csum).ljust(block_size, b"\0")


def read_journal(sb: Superblock, read_block) -> JournalTxn | None:
    """Parse the journal; None when no valid descriptor is present."""
    desc = read_block(sb.journal_start)
    magic, seq, count = JDESC.unpack_from(desc)
    if magic != JDESC_MAGIC:
        return None
    (stored,) = struct.unpack_from("<Q", desc, sb.block_size - 8)
    if digest64(desc[:-8]) != stored or count > sb.journal_blocks - 2:
        return None
    targets = struct.unpack_from(f"<{count}Q", desc, JDESC.size)
    payload = tuple(read_block(sb.journal_start + 1 + i) for i in range(count))
    commit = read_block(sb.journal_start + 1 + count)
    cmagic, cseq, ccsum = JCOMMIT.unpack_from(commit)
    committed = (cmagic == JCOMMIT_MAGIC and cseq == seq
                 and ccsum == digest64(desc + b"".join(payload)))
    return JournalTxn(seq, tuple(targets), payload, committed)


def replayable_targets(sb: Superblock, targets) -> bool:
    allowed = {0, *range(sb.bitmap_start, sb.journal_start)}
    return all(t in allowed for t in targets)


def format_image(block_count=MIN_BLOCKS, block_size=BLOCK_SIZE, table_blocks=DEFAULT_TABLE_BLOCKS,
                 journal_blocks=DEFAULT_JOURNAL_BLOCKS) -> bytes:
    """mkfs: a valid, empty image."""
    if block_count < MIN_BLOCKS:
        raise FormatError(f"device too small: {block_count} blocks, need at least {MIN_BLOCKS}")
    sb = geometry(block_count, block_size, table_blocks, journal_blocks)
    if sb.data_blocks < 1:
        raise FormatError("no room for data blocks")
    image = bytearray(block_count * block_size)
    image[:block_size] = sb.pack()
    image[sb.backup_lba * block_size:] = sb.backup_copy().pack()
    bitmap = build_bitmap(sb, ())
    off = sb.bitmap_start * block_size
    image[off:off + len(bitmap)] = bitmap
    return bytes(image)


class ImageView:
    """Read-only parse of a raw image, used by comparison and audits."""

    def __init__(self, image: bytes, block_size=BLOCK_SIZE):
        self.image = image
        self.block_size = block_size
        self.block_count = len(image) // block_size
        self.sb = Superblock.unpack(self.block(0))
        self.sb.validate(self.block_count)

    def block(self, lba):
        bs = self.block_size
        return self.image[lba * bs:(lba + 1) * bs]

    def blocks(self, lba, count):
        bs = self.block_size
        return self.image[lba * bs:(lba + count) * bs]

    def slots(self):
        sb = self.sb
        for i in range(sb.table_slots):
            blk, off = divmod(i, sb.entries_per_block)
            raw = self.block(sb.table_start + blk)[off * ENTRY_SIZE:(off + 1) * ENTRY_SIZE]
            yield i, raw

    def entries(self):
        out = []
        for slot, raw in self.slots():
            try:
                entry = unpack_entry(raw)
            except EntryError:
                continue
            if entry is not None:
                out.append((slot, entry))
        return out

    def bitmap(self):
        return self.blocks(self.sb.bitmap_start, self.sb.bitmap_blocks)

    def object_bytes(self, entry):
        return self.blocks(entry.start, entry.nblocks)[:entry.size]

    def objects(self) -> dict[str, bytes]:
        return {e.name: self.object_bytes(e) for _, e in self.entries()}

    def journal(self):
        return read_journal(self.sb, self.block)
