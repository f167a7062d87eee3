"""CRC-32C (Castagnoli) used by the session container.

The wire protocol uses plain zlib.crc32; the on-disk records use CRC-32C.
No compiled CRC-32C implementation ships with CPython, so this is a
table-driven pure-Python one (~5 MB/s, far above the data rates involved).
"""

_POLY = 0x82F63B78


def _build_table() -> tuple[int, ...]:
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ _POLY if c & 1 else c >> 1
        table.append(c)
    return tuple(table)


_TABLE = _build_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    """Return the CRC-32C of *data*, optionally continuing from *crc*."""
    table = _TABLE
    crc ^= 0xFFFFFFFF
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF
