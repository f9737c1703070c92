"""Readers and writers for every on-disk artifact of the pipeline.

Binary containers are little-endian and versioned by an ASCII magic
line; every writer/reader pair round-trips losslessly at the stored
precision.
"""

import struct

import numpy as np

from .core import MeasurementMatrix, PixelGridMask, ShapeSequence
from .errors import FormatError, InvalidInputError
from .occlusion import FlowField

FLO_MAGIC = 202021.25
SHAPE_MAGIC = b"SPVA-SHAPE v1"
MATRIX_MAGIC = b"SPVA-W v1"


# --- Middlebury .flo flow fields -------------------------------------------

def read_flo(path):
    """Read a Middlebury .flo file into a FlowField (float32 pairs)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError("truncated .flo header", offset=len(raw))
    magic = struct.unpack("<f", raw[0:4])[0]
    if magic != FLO_MAGIC:
        raise FormatError("bad .flo magic %r" % magic, offset=0)
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FormatError("bad .flo dimensions %dx%d" % (w, h), offset=4)
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FormatError("truncated .flo payload", offset=len(raw))
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12)
    data = data.reshape(h, w, 2)
    return FlowField(u=data[:, :, 0].astype(np.float32),
                     v=data[:, :, 1].astype(np.float32))


def write_flo(flow, path):
    """Write a FlowField as a Middlebury .flo file."""
    h, w = flow.u.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = flow.u
    data[:, :, 1] = flow.v
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


# --- PGM masks and occlusion maps ------------------------------------------

def write_pgm(gray, path):
    """Write an 8-bit binary PGM (P5, maxval 255)."""
    g = np.asarray(gray)
    if g.ndim != 2:
        raise InvalidInputError("PGM payload must be 2-D")
    g = np.clip(np.rint(g), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (g.shape[1], g.shape[0]))
        fh.write(g.tobytes())


def read_pgm(path):
    """Read an 8-bit binary PGM into a uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4 and pos < len(raw):
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise FormatError("not a binary PGM (P5)", offset=0)
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError("only maxval 255 PGM supported", offset=pos)
    pos += 1
    if len(raw) - pos < w * h:
        raise FormatError("truncated PGM payload", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h,
                         offset=pos).reshape(h, w)


def write_mask(mask, path):
    """Active pixels -> 255, inactive -> 0."""
    write_pgm(np.where(mask.active, 255, 0), path)


def read_mask(path):
    """Nonzero PGM pixels become active mask pixels, row-major order."""
    g = read_pgm(path)
    return PixelGridMask(width=g.shape[1], height=g.shape[0],
                         active=g > 0)


# --- PPM / PNG images -------------------------------------------------------

def write_ppm(rgb, path):
    """Write an 8-bit binary PPM (P6)."""
    img = np.asarray(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError("PPM payload must be HxWx3")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def read_image(path):
    """Read a PGM, PPM or PNG image as uint8 (grayscale or RGB)."""
    path = str(path)
    if path.endswith(".pgm"):
        return read_pgm(path)
    if path.endswith(".ppm"):
        with open(path, "rb") as fh:
            raw = fh.read()
        if not raw.startswith(b"P6"):
            raise FormatError("not a binary PPM (P6)", offset=0)
        header = raw[:64].split()
        w, h = int(header[1]), int(header[2])
        offset = raw.index(b"255") + 4
        return np.frombuffer(raw, dtype=np.uint8, count=3 * w * h,
                             offset=offset).reshape(h, w, 3)
    if path.endswith(".png"):
        from PIL import Image
        return np.asarray(Image.open(path).convert("RGB"))
    raise FormatError("unsupported image format: %s" % path)


# --- ASCII PLY point clouds -------------------------------------------------

def write_ply(shapes, frame, path):
    """One frame of a shape sequence as an ASCII PLY point cloud."""
    if frame < 0 or frame >= shapes.frames:
        raise InvalidInputError("frame %d out of range" % frame)
    pts = shapes.frame(frame)
    lines = [
        "ply",
        "format ascii 1.0",
        "element vertex %d" % shapes.points,
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    for p in range(shapes.points):
        lines.append("%.9g %.9g %.9g" % (pts[0, p], pts[1, p], pts[2, p]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply_points(path):
    """Read vertex coordinates back from an ASCII PLY, 3 x N."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise FormatError("not a PLY file", offset=0)
    try:
        n = next(int(ln.split()[-1]) for ln in lines
                 if ln.startswith("element vertex"))
        start = lines.index("end_header") + 1
    except (StopIteration, ValueError):
        raise FormatError("malformed PLY header")
    pts = np.array([[float(v) for v in ln.split()[:3]]
                    for ln in lines[start:start + n]])
    return pts.T


# --- Versioned binary shape / measurement containers ------------------------

def _write_container(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write((" ".join(str(d) for d in dims)).encode() + b"\n")
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def _read_container(path, magic, ndims):
    with open(path, "rb") as fh:
        raw = fh.read()
    head = magic + b"\n"
    if not raw.startswith(head):
        raise FormatError("bad container magic (expected %s)"
                          % magic.decode(), offset=0)
    nl = raw.index(b"\n", len(head))
    fields = raw[len(head):nl].split()
    if len(fields) != ndims:
        raise FormatError("bad container header", offset=len(head))
    dims = [int(x) for x in fields]
    payload = raw[nl + 1:]
    return dims, payload, nl + 1


def write_shape_container(shapes, path):
    """3F x N float64 payload behind the SPVA-SHAPE v1 magic."""
    _write_container(path, SHAPE_MAGIC,
                     (shapes.frames, shapes.points, 3), shapes.data)


def read_shape_container(path):
    dims, payload, off = _read_container(path, SHAPE_MAGIC, 3)
    F, N, layout = dims
    if layout != 3:
        raise FormatError("unknown shape layout tag %d" % layout, offset=off)
    expected = 3 * F * N * 8
    if len(payload) != expected:
        raise FormatError("shape payload length %d, expected %d"
                          % (len(payload), expected), offset=off)
    data = np.frombuffer(payload, dtype="<f8").reshape(3 * F, N).copy()
    return ShapeSequence(data=data, frames=F, points=N)


def write_matrix_container(w, path):
    """2F x N float64 payload behind the SPVA-W v1 magic."""
    _write_container(path, MATRIX_MAGIC,
                     (w.frames, w.points, w.reference_index), w.data)


def read_matrix_container(path):
    dims, payload, off = _read_container(path, MATRIX_MAGIC, 3)
    F, N, ref = dims
    expected = 2 * F * N * 8
    if len(payload) != expected:
        raise FormatError("matrix payload length %d, expected %d"
                          % (len(payload), expected), offset=off)
    data = np.frombuffer(payload, dtype="<f8").reshape(2 * F, N).copy()
    return MeasurementMatrix(data=data, frames=F, points=N,
                             reference_index=ref)
