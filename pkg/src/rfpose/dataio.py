"""File formats: PACS binary arrays, calibration/index/report JSON, checkpoints, SVG.

The PACS container is a little-endian header (magic, version, dtype code,
ndim, dims as u64) followed by the row-major payload; complex values are
stored interleaved (re, im).  Structured metadata (calibration, dataset
index, reports) is JSON with a schema_version field.  Report files carry
their timestamp in a single leading comment line so that the JSON body
diffs cleanly.  All writers go through an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .geometry import DeviceLayout, RigidTransform

PACS_MAGIC = b"PACS"
PACS_VERSION = 1
_CODE_FOR_DTYPE = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<c8"): 3}
_DTYPE_FOR_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<c8")}

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1


class IoError(ValueError):
    """Base class for file-format failures."""


class BadMagic(IoError):
    """File does not start with the expected magic bytes."""


class BadVersion(IoError):
    """Format version is not supported."""


class TruncatedPayload(IoError):
    """Payload length does not match the header dims."""


class ParseError(IoError):
    """Structured-text document is malformed."""


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-pacs-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PACS binary arrays


def write_array(path, array: np.ndarray):
    """Write an f32/f64/c64 array losslessly; other dtypes must be cast first."""
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _CODE_FOR_DTYPE:
        raise IoError(f"unsupported dtype {array.dtype}; cast to float32/float64/complex64")
    header = PACS_MAGIC + struct.pack("<HBB", PACS_VERSION, _CODE_FOR_DTYPE[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    _atomic_write(path, header + array.astype(dtype, copy=False).tobytes())


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PACS_MAGIC:
        raise BadMagic(f"{path}: expected PACS magic, got {blob[:4]!r}")
    if len(blob) < 8:
        raise TruncatedPayload(f"{path}: header truncated")
    version, code, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != PACS_VERSION:
        raise BadVersion(f"{path}: version {version}, supported {PACS_VERSION}")
    if code not in _DTYPE_FOR_CODE:
        raise ParseError(f"{path}: unknown dtype code {code}")
    offset = 8
    if len(blob) < offset + 8 * ndim:
        raise TruncatedPayload(f"{path}: dims truncated")
    dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    dtype = _DTYPE_FOR_CODE[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise TruncatedPayload(f"{path}: payload {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob[offset:], dtype=dtype).reshape(dims).copy()


# ---------------------------------------------------------------------------
# structured text (JSON with schema version)


def _canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_json(path, payload: dict):
    _atomic_write(path, _canonical_json(payload).encode())


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class CalibrationRecord:
    layout_id: str
    layout: DeviceLayout
    transforms: dict


def write_calibration(path, record: CalibrationRecord):
    payload = {
        "schema_version": 1,
        "kind": "calibration",
        "layout_id": record.layout_id,
        "tx": [float(v) for v in record.layout.tx],
        "rxs": [[float(v) for v in rx] for rx in record.layout.rxs],
        "provenance": list(record.layout.provenance),
        "transforms": {name: [[float(v) for v in row] for row in t.as_matrix()]
                       for name, t in record.transforms.items()},
    }
    write_json(path, payload)


def read_calibration(path) -> CalibrationRecord:
    doc = read_json(path)
    if doc.get("kind") != "calibration" or "tx" not in doc or "rxs" not in doc:
        raise ParseError(f"{path}: not a calibration document")
    if doc.get("schema_version") != 1:
        raise BadVersion(f"{path}: calibration schema {doc.get('schema_version')}")
    layout = DeviceLayout(tx=np.array(doc["tx"], dtype=float),
                          rxs=tuple(np.array(r, dtype=float) for r in doc["rxs"]),
                          provenance=tuple(doc.get("provenance", ())))
    transforms = {name: RigidTransform.from_matrix(np.array(rows, dtype=float))
                  for name, rows in doc.get("transforms", {}).items()}
    return CalibrationRecord(doc.get("layout_id", ""), layout, transforms)


# ---------------------------------------------------------------------------
# dataset index

_ENTRY_KEYS = ("sample_id", "scene_id", "layout_id", "subject_id", "location",
               "orientation", "action", "csi_paths", "pose_path", "calibration_path",
               "n_frames", "frame_rate")


def write_index(path, entries: list):
    for e in entries:
        missing = [k for k in _ENTRY_KEYS if k not in e]
        if missing:
            raise ParseError(f"entry {e.get('sample_id')!r} missing keys {missing}")
    write_json(path, {"schema_version": 1, "kind": "dataset_index", "entries": entries})


def read_index(path, check_files: bool = True) -> list:
    """Load and canonicalize the index: entries sorted by sample_id, ids unique."""
    doc = read_json(path)
    if doc.get("kind") != "dataset_index":
        raise ParseError(f"{path}: not a dataset index")
    entries = sorted(doc.get("entries", []), key=lambda e: e["sample_id"])
    seen = set()
    root = os.path.dirname(os.fspath(path))
    layouts_with_calibration = set()
    for e in entries:
        if e["sample_id"] in seen:
            raise ParseError(f"duplicate sample_id {e['sample_id']!r}")
        seen.add(e["sample_id"])
        if check_files:
            for p in list(e["csi_paths"]) + [e["pose_path"], e["calibration_path"]]:
                full = os.path.join(root, p)
                if not os.path.exists(full):
                    raise ParseError(f"referenced file missing: {full}")
        layouts_with_calibration.add(e["layout_id"])
    return entries


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, header: dict, params: dict):
    names = sorted(params)
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<H", CKPT_VERSION)
    header_json = json.dumps({"header": header, "params": names}, sort_keys=True).encode()
    blob += struct.pack("<I", len(header_json))
    blob += header_json
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        encoded = name.encode()
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    _atomic_write(path, bytes(blob))


def read_checkpoint(path) -> tuple:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: expected checkpoint magic")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise BadVersion(f"{path}: checkpoint version {version}")
    (json_len,) = struct.unpack_from("<I", blob, 6)
    offset = 10
    meta = json.loads(blob[offset:offset + json_len].decode())
    offset += json_len
    params = {}
    for _ in meta["params"]:
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
        offset += 8 * ndim
        count = int(np.prod(dims, dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob):
            raise TruncatedPayload(f"{path}: parameter {name} truncated")
        params[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(dims).copy()
        offset = end
    return meta["header"], params


# ---------------------------------------------------------------------------
# reports (timestamp isolated to the first line)


def write_report(path, payload: dict, timestamp: str | None = None):
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat()
    body = f"# generated {timestamp}\n" + _canonical_json(payload)
    _atomic_write(path, body.encode())


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.readlines() if not ln.startswith("#")]
    try:
        return json.loads("".join(lines))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def report_body(path) -> str:
    """Report content with the timestamp header stripped (for byte comparisons)."""
    with open(path, "r", encoding="utf-8") as fh:
        return "".join(ln for ln in fh.readlines() if not ln.startswith("#"))


# ---------------------------------------------------------------------------
# minimal SVG charts


def _svg_header(width, height, title):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
    ]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_chart(path, series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
                   width: int = 640, height: int = 400):
    """Write a line chart; ``series`` maps label -> (xs, ys)."""
    margin = 56
    xs_all = np.concatenate([np.asarray(xs, dtype=float) for xs, _ in series.values()])
    ys_all = np.concatenate([np.asarray(ys, dtype=float) for _, ys in series.values()])
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(v):
        return margin + (v - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)

    parts = _svg_header(width, height, title)
    parts.append(f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
                 f'height="{height - 2 * margin}" fill="none" stroke="#888"/>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 14 * (i + 1)}" '
                     f'font-size="10" fill="{color}">{label}</text>')
    parts.append(f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="11">{xlabel}</text>')
    parts.append(f'<text x="14" y="{height / 2:.1f}" font-size="11" '
                 f'transform="rotate(-90 14 {height / 2:.1f})" text-anchor="middle">{ylabel}</text>')
    for v, anchor in ((x0, "start"), (x1, "end")):
        parts.append(f'<text x="{sx(v):.1f}" y="{height - margin + 14}" font-size="9" '
                     f'text-anchor="{anchor}">{v:.4g}</text>')
    for v in (y0, y1):
        parts.append(f'<text x="{margin - 4}" y="{sy(v):.1f}" font-size="9" text-anchor="end">{v:.4g}</text>')
    parts.append("</svg>")
    _atomic_write(path, "\n".join(parts).encode())


def svg_bar_chart(path, labels, values, title: str = "", ylabel: str = "",
                  width: int = 640, height: int = 400):
    margin = 56
    values = [float(v) for v in values]
    top = max(values) if values else 1.0
    if top <= 0.0:
        top = 1.0
    parts = _svg_header(width, height, title)
    span = width - 2 * margin
    slot = span / max(len(values), 1)
    for i, (label, value) in enumerate(zip(labels, values)):
        h = (value / top) * (height - 2 * margin)
        x = margin + i * slot + 0.15 * slot
        y = height - margin - h
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{0.7 * slot:.1f}" height="{h:.1f}" '
                     f'fill="{_PALETTE[i % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{x + 0.35 * slot:.1f}" y="{height - margin + 14}" font-size="10" '
                     f'text-anchor="middle">{label}</text>')
        parts.append(f'<text x="{x + 0.35 * slot:.1f}" y="{y - 4:.1f}" font-size="9" '
                     f'text-anchor="middle">{value:.4g}</text>')
    parts.append(f'<text x="14" y="{height / 2:.1f}" font-size="11" '
                 f'transform="rotate(-90 14 {height / 2:.1f})" text-anchor="middle">{ylabel}</text>')
    parts.append("</svg>")
    _atomic_write(path, "\n".join(parts).encode())
