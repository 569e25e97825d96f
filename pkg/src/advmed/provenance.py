"""Point-of-capture hash registry: detects any change to an image file after registration."""

from __future__ import annotations

import csv
import hashlib
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable

REGISTRY_HEADER = ["image_id", "hex_digest", "timestamp", "source"]


class DuplicateImageError(KeyError):
    pass


class Status(str, Enum):
    MATCH = "match"
    TAMPERED = "tampered"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Entry:
    digest: str
    registered_at: str
    source: str


def digest(image_bytes: bytes) -> str:
    return hashlib.sha256(image_bytes).hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class HashRegistry:
    """SHA-256 digests keyed by image id, optionally backed by an append-only CSV.

    Writes take a lock; ``verify`` only reads.
    """

    def __init__(self, path: str | Path | None = None, clock: Callable[[], str] = _utc_now):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.entries: dict[str, Entry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != REGISTRY_HEADER:
                raise ValueError(f"registry header must be {','.join(REGISTRY_HEADER)}, got {reader.fieldnames}")
            for row in reader:
                iid = row["image_id"]
                if iid in self.entries:
                    raise DuplicateImageError(f"registry lists {iid!r} twice")
                self.entries[iid] = Entry(row["hex_digest"].lower(), row["timestamp"], row["source"])

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def register(self, image_id: str, image_bytes: bytes, source: str = "") -> Entry:
        with self._lock:
            if image_id in self.entries:
                raise DuplicateImageError(f"image {image_id!r} is already registered")
            entry = Entry(digest(image_bytes), self.clock(), source)
            self.entries[image_id] = entry
            if self.path is not None:
                fresh = not self.path.exists() or self.path.stat().st_size == 0
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    if fresh:
                        w.writerow(REGISTRY_HEADER)
                    w.writerow([image_id, entry.digest, entry.registered_at, entry.source])
            return entry

    def verify(self, image_id: str, image_bytes: bytes) -> Status:
        entry = self.entries.get(image_id)
        if entry is None:
            return Status.UNKNOWN
        return Status.MATCH if digest(image_bytes) == entry.digest else Status.TAMPERED
