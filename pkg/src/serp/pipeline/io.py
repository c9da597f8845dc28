"""Point-cloud file formats (xyz, ASCII PLY, OFF) and dataset manifests."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..geometry import PointCloud

FORMATS = ("xyz", "ply", "off")


class FormatError(ValueError):
    """A file could not be parsed; carries the 1-based line number when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class InvalidDataError(ValueError):
    pass


def infer_format(path):
    ext = Path(path).suffix.lower().lstrip(".")
    if ext in ("xyz", "txt", "pts"):
        return "xyz"
    if ext == "ply":
        return "ply"
    if ext == "off":
        return "off"
    raise FormatError(f"cannot infer point-cloud format from extension {ext!r}", path)


def _parse_row(tokens, path, lineno, width=3):
    if len(tokens) < width:
        raise FormatError(f"expected {width} coordinates, got {len(tokens)}", path, lineno)
    try:
        row = [float(t) for t in tokens[:width]]
    except ValueError as exc:
        raise FormatError(f"bad number ({exc})", path, lineno) from None
    if not all(np.isfinite(row)):
        raise FormatError("non-finite coordinate", path, lineno)
    return row


def _content_lines(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def _read_xyz(text, path):
    rows = [_parse_row(line.replace(",", " ").split(), path, n) for n, line in _content_lines(text)]
    return rows


def _read_off(text, path):
    lines = list(_content_lines(text))
    if not lines:
        return []
    lineno, first = lines[0]
    if not first.upper().startswith("OFF"):
        raise FormatError("missing OFF header", path, lineno)
    rest = first[3:].split()
    pos = 1
    if rest:
        counts, counts_line = rest, lineno
    else:
        if len(lines) < 2:
            raise FormatError("missing vertex/face counts", path, lineno)
        counts_line, counts = lines[1][0], lines[1][1].split()
        pos = 2
    try:
        n_vertices = int(counts[0])
    except (ValueError, IndexError):
        raise FormatError("bad vertex count", path, counts_line) from None
    body = lines[pos : pos + n_vertices]
    if len(body) < n_vertices:
        raise FormatError(f"expected {n_vertices} vertices, found {len(body)}", path, counts_line)
    return [_parse_row(line.split(), path, n) for n, line in body]


def _read_ply(text, path):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("missing 'ply' magic", path, 1)
    n_vertices = None
    props = []
    element = None
    body_start = None
    for i, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise FormatError("only ASCII PLY is supported", path, i)
        elif parts[0] == "element":
            element = parts[1] if len(parts) > 1 else None
            if element == "vertex":
                try:
                    n_vertices = int(parts[2])
                except (ValueError, IndexError):
                    raise FormatError("bad vertex count", path, i) from None
        elif parts[0] == "property":
            if element == "vertex":
                props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i
            break
        else:
            raise FormatError(f"unexpected header line {raw.strip()!r}", path, i)
    if body_start is None:
        raise FormatError("missing end_header", path, len(lines))
    if n_vertices is None:
        raise FormatError("no vertex element", path, body_start)
    try:
        cols = [props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise FormatError("vertex element lacks x/y/z properties", path, body_start) from None
    rows = []
    lineno = body_start
    for raw in lines[body_start:]:
        lineno += 1
        if len(rows) == n_vertices:
            break
        parts = raw.split()
        if not parts:
            continue
        if len(parts) < len(props):
            raise FormatError(f"expected {len(props)} values, got {len(parts)}", path, lineno)
        rows.append(_parse_row([parts[c] for c in cols], path, lineno))
    if len(rows) < n_vertices:
        raise FormatError(f"expected {n_vertices} vertices, found {len(rows)}", path, lineno)
    return rows


_READERS = {"xyz": _read_xyz, "off": _read_off, "ply": _read_ply, "ply-ascii": _read_ply}


def load_cloud(path, format=None, label=None):
    """Read a point cloud from an xyz, ASCII PLY or OFF file."""
    fmt = format or infer_format(path)
    if fmt not in _READERS:
        raise FormatError(f"unknown format {fmt!r}", path)
    text = Path(path).read_text()
    rows = _READERS[fmt](text, str(path))
    if not rows:
        raise InvalidDataError(f"{path}: no points")
    return PointCloud(np.asarray(rows, dtype=np.float32), label)


def write_cloud(path, cloud, format=None):
    """Write coordinates as text; 9 significant digits round-trip float32 exactly."""
    fmt = format or infer_format(path)
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float32)
    body = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in pts.tolist())
    if fmt == "xyz":
        text = body + "\n"
    elif fmt in ("ply", "ply-ascii"):
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(pts)}",
            "property float x",
            "property float y",
            "property float z",
            "end_header",
        ]
        text = "\n".join(header) + "\n" + body + "\n"
    elif fmt == "off":
        text = f"OFF\n{len(pts)} 0 0\n{body}\n"
    else:
        raise FormatError(f"unknown format {fmt!r}", path)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def read_manifest(path):
    """Parse ``path [label [split]]`` lines; paths are relative to the manifest."""
    base = Path(path).parent
    entries = []
    for lineno, line in _content_lines(Path(path).read_text()):
        parts = line.split()
        if len(parts) > 3:
            raise FormatError("expected 'path [label [split]]'", str(path), lineno)
        file_path = parts[0] if os.path.isabs(parts[0]) else str(base / parts[0])
        label = parts[1] if len(parts) > 1 else None
        split = parts[2] if len(parts) > 2 else None
        entries.append((file_path, label, split))
    if not entries:
        raise InvalidDataError(f"{path}: empty manifest")
    return entries


def write_manifest(path, entries):
    lines = []
    for file_path, label, split in entries:
        row = [str(file_path)]
        if label is not None:
            row.append(str(label))
            if split is not None:
                row.append(split)
        lines.append(" ".join(row))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
