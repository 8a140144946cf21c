"""The store's fixed 64-bit block digest: CRC-32 in the high word, Adler-32 in the low."""

import zlib


def digest64(data) -> int:
    return (zlib.crc32(data) << 32) | zlib.adler32(data)
