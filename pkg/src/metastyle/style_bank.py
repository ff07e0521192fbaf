"""Domain-indexed store of accumulated style statistics.

On disk a bank is a little-endian binary record::

    b"MSBK" | version u32 | domain count u32
    per domain: domain_id u32 | channels u32 | count u64
                | mean f64[channels] | std f64[channels]
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BankFormatError, DataError, DimensionError
from .style_stats import StyleStats

MAGIC = b"MSBK"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_ENTRY = struct.Struct("<IIQ")


class StyleMiss(KeyError):
    """Requested domain has no entry in the bank."""


@dataclass
class StyleBank:
    entries: dict[int, StyleStats] = field(default_factory=dict)
    version: int = VERSION

    @property
    def channels(self) -> int | None:
        for stats in self.entries.values():
            return stats.channels
        return None

    def __contains__(self, domain_id: int) -> bool:
        return domain_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StyleBank) or self.entries.keys() != other.entries.keys():
            return False
        return all(
            a.count == b.count and a.mean.tobytes() == b.mean.tobytes() and a.std.tobytes() == b.std.tobytes()
            for a, b in ((self.entries[k], other.entries[k]) for k in self.entries)
        )


def save_style_bank(bank: StyleBank, domain_id: int, stats: StyleStats) -> StyleBank:
    """Merge ``stats`` into the bank entry for ``domain_id`` (count-weighted mean)."""
    if domain_id < 0:
        raise DataError(f"domain id must be non-negative, got {domain_id}")
    if stats.count < 1:
        raise DataError("cannot store empty style statistics")
    if bank.channels is not None and stats.channels != bank.channels:
        raise DimensionError(f"bank holds {bank.channels}-channel stats, got {stats.channels}")
    entries = dict(bank.entries)
    old = entries.get(domain_id)
    if old is None:
        entries[domain_id] = stats
    else:
        n, m = old.count, stats.count
        total = n + m
        # sigma is averaged linearly, matching the linear style mixing
        entries[domain_id] = StyleStats(
            (n * old.mean + m * stats.mean) / total,
            (n * old.std + m * stats.std) / total,
            total,
        )
    return StyleBank(entries, bank.version)


def load_style_bank(bank: StyleBank, domain_id: int) -> StyleStats:
    try:
        return bank.entries[domain_id]
    except KeyError:
        raise StyleMiss(domain_id) from None


def serialize(bank: StyleBank) -> bytes:
    parts = [_HEADER.pack(MAGIC, bank.version, len(bank.entries))]
    for domain_id in sorted(bank.entries):
        stats = bank.entries[domain_id]
        parts.append(_ENTRY.pack(domain_id, stats.channels, stats.count))
        parts.append(stats.mean.astype("<f8").tobytes())
        parts.append(stats.std.astype("<f8").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> StyleBank:
    if len(blob) < _HEADER.size:
        raise BankFormatError("truncated style bank header")
    magic, version, n_domains = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BankFormatError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise BankFormatError(f"unsupported style bank version {version}")
    offset = _HEADER.size
    entries: dict[int, StyleStats] = {}
    channels = None
    for _ in range(n_domains):
        if len(blob) < offset + _ENTRY.size:
            raise BankFormatError("truncated style bank entry")
        domain_id, c, count = _ENTRY.unpack_from(blob, offset)
        offset += _ENTRY.size
        if len(blob) < offset + 16 * c:
            raise BankFormatError(f"truncated statistics for domain {domain_id}")
        if channels is not None and c != channels:
            raise BankFormatError("entries disagree on channel count")
        if domain_id in entries:
            raise BankFormatError(f"duplicate domain id {domain_id}")
        if count < 1:
            raise BankFormatError(f"domain {domain_id} has zero count")
        channels = c
        mean = np.frombuffer(blob, dtype="<f8", count=c, offset=offset).astype(np.float64)
        std = np.frombuffer(blob, dtype="<f8", count=c, offset=offset + 8 * c).astype(np.float64)
        offset += 16 * c
        try:
            entries[domain_id] = StyleStats(mean, std, count)
        except DataError as exc:
            raise BankFormatError(f"domain {domain_id}: {exc}") from None
    if offset != len(blob):
        raise BankFormatError(f"{len(blob) - offset} trailing bytes after last entry")
    return StyleBank(entries, version)


def write_bank(bank: StyleBank, path: str | os.PathLike) -> None:
    """Atomically replace ``path`` with the serialized bank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(serialize(bank))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bank(path: str | os.PathLike) -> StyleBank:
    return deserialize(Path(path).read_bytes())
