"""Self-describing archive container and compression-ratio accounting.

Layout (little-endian):

  magic "GBAT" | version u16 | section count u16
  table entries: id u16, offset u64, length u64, crc32 u32
  table checksum: crc32 u32 over preamble plus table
  section payloads, contiguous, in table order

Each payload carries its own crc32 and the preamble/table region carries one
too, so any single-byte corruption lands inside some checksummed span and is
detected; the file size always equals overhead plus declared lengths.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

from .errors import CorruptArchiveError, InvalidSpecError

MAGIC = b"GBAT"
VERSION = 1

SECTION_HEADER = 1
SECTION_PREDICTOR = 2
SECTION_LATENTS = 3
SECTION_BASES = 4
SECTION_RECORDS = 5

SECTION_NAMES = {
    SECTION_HEADER: "header",
    SECTION_PREDICTOR: "predictor",
    SECTION_LATENTS: "latents",
    SECTION_BASES: "bases",
    SECTION_RECORDS: "records",
}

_PREAMBLE = struct.Struct("<4sHH")
_ENTRY = struct.Struct("<HQQI")


_TABLE_CRC = struct.Struct("<I")


def overhead_bytes(section_count: int) -> int:
    return _PREAMBLE.size + section_count * _ENTRY.size + _TABLE_CRC.size


def write_archive(sections: dict[int, bytes]) -> bytes:
    """Serialize sections (keyed by id, written in ascending id order)."""
    if not sections:
        raise InvalidSpecError("archive needs at least one section")
    ids = sorted(sections)
    out = [_PREAMBLE.pack(MAGIC, VERSION, len(ids))]
    offset = overhead_bytes(len(ids))
    table = []
    for sid in ids:
        payload = sections[sid]
        table.append(_ENTRY.pack(sid, offset, len(payload), zlib.crc32(payload)))
        offset += len(payload)
    out.extend(table)
    out.append(_TABLE_CRC.pack(zlib.crc32(b"".join(out))))
    out.extend(sections[sid] for sid in ids)
    return b"".join(out)


def read_archive(blob: bytes) -> dict[int, bytes]:
    """Parse and fully validate an archive; inverse of write_archive."""
    if len(blob) < _PREAMBLE.size:
        raise CorruptArchiveError("file shorter than preamble")
    magic, version, count = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptArchiveError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptArchiveError(f"unsupported archive version {version}")
    expected = overhead_bytes(count)
    if len(blob) < expected:
        raise CorruptArchiveError("file shorter than declared section table")
    covered = expected - _TABLE_CRC.size
    (table_crc,) = _TABLE_CRC.unpack_from(blob, covered)
    if zlib.crc32(blob[:covered]) != table_crc:
        raise CorruptArchiveError("section table checksum mismatch")
    sections: dict[int, bytes] = {}
    running = expected
    for i in range(count):
        sid, offset, length, crc = _ENTRY.unpack_from(blob, _PREAMBLE.size + i * _ENTRY.size)
        name = SECTION_NAMES.get(sid, str(sid))
        if sid in sections:
            raise CorruptArchiveError(f"duplicate section id {sid}", section=name)
        if offset != running:
            raise CorruptArchiveError(
                f"section offset {offset} breaks contiguous layout (expected {running})",
                section=name,
            )
        if offset + length > len(blob):
            raise CorruptArchiveError("section extends past end of file", section=name)
        payload = blob[offset:offset + length]
        if zlib.crc32(payload) != crc:
            raise CorruptArchiveError("checksum mismatch", section=name)
        sections[sid] = payload
        running = offset + length
    if running != len(blob):
        raise CorruptArchiveError(
            f"file size {len(blob)} != preamble + declared lengths {running}"
        )
    return sections


def encode_header(header: dict) -> bytes:
    """Compact, key-sorted JSON so identical configs yield identical bytes."""
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def decode_header(payload: bytes) -> dict:
    try:
        return json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchiveError(f"header not parseable: {exc}", section="header") from None


@dataclass
class SizeReport:
    """Honest accounting: every archive byte lands in some bucket."""

    raw_bytes: int
    section_bytes: dict[str, int]
    overhead: int

    @property
    def total_bytes(self) -> int:
        return self.overhead + sum(self.section_bytes.values())

    @property
    def ratio(self) -> float:
        return compression_ratio(self)

    def lines(self) -> list[str]:
        out = [f"raw_bytes={self.raw_bytes}"]
        for name, size in self.section_bytes.items():
            out.append(f"section={name} bytes={size}")
        out.append(f"overhead_bytes={self.overhead}")
        out.append(f"total_bytes={self.total_bytes}")
        out.append(f"ratio={self.ratio:.4f}")
        return out


def size_report(raw_bytes: int, sections: dict[int, bytes]) -> SizeReport:
    named = {SECTION_NAMES.get(sid, str(sid)): len(payload)
             for sid, payload in sorted(sections.items())}
    return SizeReport(raw_bytes, named, overhead_bytes(len(sections)))


def compression_ratio(report: SizeReport) -> float:
    total = report.total_bytes
    if total <= 0:
        raise InvalidSpecError("compressed size must be positive")
    return report.raw_bytes / total
