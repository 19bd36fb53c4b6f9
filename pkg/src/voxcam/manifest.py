"""Cohort manifests: one CSV row per subject."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import BadLabel, DuplicateSubject, MissingColumn

__all__ = ["ManifestRow", "read_manifest", "write_manifest", "MANIFEST_HEADER"]

MANIFEST_HEADER = ["subject_id", "image", "label", "mask"]


@dataclass
class ManifestRow:
    subject_id: str
    image: str
    label: int
    mask: str | None = None


def read_manifest(path: str | Path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, expected header row") from None
        if header != MANIFEST_HEADER:
            raise MissingColumn(
                f"{path}: header {header!r}, expected {MANIFEST_HEADER!r}"
            )
        rows: list[ManifestRow] = []
        seen: set[str] = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise MissingColumn(f"{path}:{lineno}: {len(rec)} fields, expected 4")
            sid, image, label_s, mask = rec
            if sid in seen:
                raise DuplicateSubject(f"{path}:{lineno}: subject {sid!r} repeats")
            seen.add(sid)
            if label_s not in ("0", "1"):
                raise BadLabel(f"{path}:{lineno}: label {label_s!r}, expected 0 or 1")
            rows.append(ManifestRow(sid, image, int(label_s), mask or None))
    return rows


def write_manifest(rows: list[ManifestRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.subject_id, r.image, str(r.label), r.mask or ""])
