"""Binary feature-store files and the companion slide manifest.

Store layout (integers little-endian):

    magic   4 bytes  b"MHFS"
    version u32      currently 1
    d       u32      feature dimension
    slides  u32      slide count
    per slide:
        id_len u32, id UTF-8,
        grid_width u32, grid_height u32,
        label tag u8: 0 survival / 1 class
            survival payload: time f64, reserved f64 (must be 0), event u8
            class payload:    class_id u32
        patch count u32
        per patch: x u16, y u16, foreground u8, d values f32

The manifest is a tab-separated text file with a header row
``slide_id\tsplit\tlabel``; labels are ``survival:<time>:<0|1>`` or
``class:<id>`` with the time printed via repr for exact round-trips.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .types import (
    ClassLabel,
    FeatureStore,
    SlideLabel,
    SlideRecord,
    StoreError,
    SurvivalLabel,
)

__all__ = [
    "read_manifest",
    "read_store",
    "write_manifest",
    "write_store",
    "format_label",
    "parse_label",
]

MAGIC = b"MHFS"
VERSION = 1


def _patch_dtype(d: int) -> np.dtype:
    return np.dtype([("x", "<u2"), ("y", "<u2"), ("fg", "u1"), ("feat", "<f4", (d,))])


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise StoreError("truncated store file")
    return buf


def write_store(store: FeatureStore, path) -> None:
    store.validate()
    d = store.feature_dim
    dt = _patch_dtype(d)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, d, len(store.slides)))
        for slide in store.slides:
            blob = slide.slide_id.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<II", slide.grid_width, slide.grid_height))
            label = slide.label
            if isinstance(label, SurvivalLabel):
                fh.write(struct.pack("<BddB", 0, label.time_years, 0.0, int(label.event)))
            else:
                fh.write(struct.pack("<BI", 1, label.class_id))
            fh.write(struct.pack("<I", slide.n_patches))
            rows = np.empty(slide.n_patches, dtype=dt)
            rows["x"] = slide.xs
            rows["y"] = slide.ys
            rows["fg"] = slide.foreground.astype(np.uint8)
            rows["feat"] = slide.features
            fh.write(rows.tobytes())


def read_store(path) -> FeatureStore:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MAGIC:
            raise StoreError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, d, n_slides = struct.unpack("<III", _read_exact(fh, 12))
        if version != VERSION:
            raise StoreError(f"unsupported store version {version}")
        dt = _patch_dtype(d)
        slides = []
        for _ in range(n_slides):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4))
            slide_id = _read_exact(fh, id_len).decode("utf-8")
            grid_w, grid_h = struct.unpack("<II", _read_exact(fh, 8))
            (tag,) = struct.unpack("<B", _read_exact(fh, 1))
            label: SlideLabel
            if tag == 0:
                time_years, reserved, event = struct.unpack("<ddB", _read_exact(fh, 17))
                if reserved != 0.0:
                    raise StoreError(f"{slide_id}: reserved survival field must be 0")
                label = SurvivalLabel(time_years=time_years, event=bool(event))
            elif tag == 1:
                (class_id,) = struct.unpack("<I", _read_exact(fh, 4))
                label = ClassLabel(class_id=class_id)
            else:
                raise StoreError(f"{slide_id}: unknown label tag {tag}")
            (n_patches,) = struct.unpack("<I", _read_exact(fh, 4))
            rows = np.frombuffer(_read_exact(fh, dt.itemsize * n_patches), dtype=dt)
            slides.append(
                SlideRecord(
                    slide_id=slide_id,
                    grid_width=grid_w,
                    grid_height=grid_h,
                    xs=rows["x"].copy(),
                    ys=rows["y"].copy(),
                    foreground=rows["fg"].astype(bool),
                    features=rows["feat"].copy(),
                    label=label,
                )
            )
        if fh.read(1):
            raise StoreError("trailing bytes after store payload")
    store = FeatureStore(feature_dim=d, slides=slides)
    store.validate()
    return store


def format_label(label: SlideLabel) -> str:
    if isinstance(label, SurvivalLabel):
        return f"survival:{label.time_years!r}:{int(label.event)}"
    return f"class:{label.class_id}"


def parse_label(text: str) -> SlideLabel:
    kind, _, rest = text.partition(":")
    if kind == "survival":
        time_str, _, event_str = rest.partition(":")
        return SurvivalLabel(time_years=float(time_str), event=bool(int(event_str)))
    if kind == "class":
        return ClassLabel(class_id=int(rest))
    raise StoreError(f"unparseable label '{text}'")


def write_manifest(path, rows: list[tuple[str, str, SlideLabel]]) -> None:
    """Rows are (slide_id, split, label)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("slide_id\tsplit\tlabel\n")
        for slide_id, split, label in rows:
            fh.write(f"{slide_id}\t{split}\t{format_label(label)}\n")


def read_manifest(path) -> list[tuple[str, str, SlideLabel]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "slide_id\tsplit\tlabel":
            raise StoreError(f"unexpected manifest header '{header}'")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise StoreError(f"malformed manifest line '{line}'")
            rows.append((parts[0], parts[1], parse_label(parts[2])))
    return rows
