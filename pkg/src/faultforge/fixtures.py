"""Deterministic store images for tests, scenarios and the CLI."""

from __future__ import annotations

import random

from .simstore.device import BlockDevice
from .simstore.layout import ENTRY_SIZE, Entry, ImageView, format_image
from .simstore.store import Store


def payload(name, size, seed=0) -> bytes:
    return random.Random(f"{seed}:{name}:{size}").randbytes(size)


def populated_image(objects=(("a", 5000), ("b", 300), ("c", 9000)), block_count=64, seed=0) -> bytes:
    dev = BlockDevice(block_count=block_count)
    dev.write(0, format_image(block_count))
    store = Store.mount(dev)
    for name, size in objects:
        store.put(name, payload(name, size, seed))
    return dev.image()


def _set_block(image: bytearray, lba, data, bs=4096):
    image[lba * bs:(lba + 1) * bs] = data


def clear_journal(image: bytes) -> bytes:
    """Zero the journal descriptor so no stale txn shadows later edits."""
    view = ImageView(image)
    out = bytearray(image)
    _set_block(out, view.sb.journal_start, bytes(view.sb.block_size))
    return bytes(out)


def crosslinked_image(seed=0) -> bytes:
    """Object ``b`` is written into a free slot pointing at ``a``'s extent.

    Both entries verify (same bytes), the bitmap does not know about ``b`` and
    the object count is stale, so a repair has to clone ``b`` into free space
    and then fix the table, bitmap and superblock.
    """
    image = clear_journal(populated_image((("a", 6000),), seed=seed))
    view = ImageView(image)
    sb = view.sb
    (_, a), = view.entries()
    b = Entry("b", a.start, a.nblocks, a.size, a.checksum)
    out = bytearray(image)
    table = bytearray(view.block(sb.table_start))
    table[ENTRY_SIZE:2 * ENTRY_SIZE] = b.pack()
    _set_block(out, sb.table_start, table)
    return bytes(out)


def corrupted_image(seed=0) -> bytes:
    """Several independent faults: cross-link, a flipped bitmap bit, a garbage slot."""
    out = bytearray(crosslinked_image(seed))
    sb = ImageView(bytes(out)).sb
    bs = sb.block_size
    off = sb.bitmap_start * bs + (sb.data_blocks + sb.data_start - 2) // 8
    out[off] ^= 0x40
    slot = sb.table_start * bs + 5 * ENTRY_SIZE
    out[slot:slot + ENTRY_SIZE] = random.Random(seed).randbytes(ENTRY_SIZE)
    return bytes(out)
