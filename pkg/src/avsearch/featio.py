"""Binary feature files and model checkpoints.

Feature file layout (all integers little-endian):

    magic   4 bytes  "AVSF"
    version u8       1
    dim     u32
    count   u64
    name    u16 length + UTF-8 space name
    records count times: u16 id length, UTF-8 id, dim float32 values

Values are stored as 32-bit floats and widened to 64-bit on load. Frame
features reuse the same container with ids of the form `item_id#frame_index`.

Checkpoints (magic "AVSC") store h, d, both space lists with their input
dims, and every parameter as float64 in the model's canonical order, so a
reloaded model reproduces similarities bit-identically.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DimensionError, FormatError
from .fusion import LaffBranchParams, LaffHead, LaffModel
from .numeric import LinearTanhParams

FEATURE_MAGIC = b"AVSF"
CHECKPOINT_MAGIC = b"AVSC"
FORMAT_VERSION = 1


class _Reader:
    """Tracks the byte offset so parse errors can point at it."""

    def __init__(self, fh, path):
        self.fh = fh
        self.path = path
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise FormatError(
                f"{self.path}: truncated while reading {what}"
                f" at byte offset {self.offset} (wanted {n} bytes, got {len(data)})"
            )
        self.offset += n
        return data

    def unpack(self, fmt: str, what: str):
        values = struct.unpack(fmt, self.read(struct.calcsize(fmt), what))
        return values[0] if len(values) == 1 else values

    def expect_eof(self) -> None:
        extra = self.fh.read(1)
        if extra:
            raise FormatError(
                f"{self.path}: trailing data at byte offset {self.offset}"
            )


def _read_name(reader: _Reader, what: str) -> str:
    length = reader.unpack("<H", f"{what} length")
    raw = reader.read(length, what)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{reader.path}: invalid UTF-8 in {what}: {exc}") from None


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long ({len(raw)} bytes): {name[:40]!r}...")
    return struct.pack("<H", len(raw)) + raw


def write_features(path, space_name: str, features: dict[str, np.ndarray]) -> None:
    """Write one feature space; record order follows dict insertion order."""
    items = list(features.items())
    if items:
        dim = int(np.asarray(items[0][1]).shape[0])
    else:
        dim = 1
    for item_id, vec in items:
        vec = np.asarray(vec)
        if vec.ndim != 1 or vec.shape[0] != dim:
            raise DimensionError(
                f"feature {item_id!r} has shape {vec.shape}, expected ({dim},)"
            )
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<Q", len(items)))
        fh.write(_pack_name(space_name))
        for item_id, vec in items:
            fh.write(_pack_name(item_id))
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def read_features(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read one feature space; vectors come back as float64."""
    with open(path, "rb") as fh:
        reader = _Reader(fh, path)
        magic = reader.read(4, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        version = reader.unpack("<B", "version")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        dim = reader.unpack("<I", "dim")
        if dim < 1:
            raise FormatError(f"{path}: dim must be >= 1, got {dim}")
        count = reader.unpack("<Q", "count")
        space_name = _read_name(reader, "space name")
        features: dict[str, np.ndarray] = {}
        for i in range(count):
            item_id = _read_name(reader, f"record {i} id")
            raw = reader.read(4 * dim, f"record {i} ({item_id!r}) values")
            if item_id in features:
                raise FormatError(f"{path}: duplicate record id {item_id!r}")
            features[item_id] = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        reader.expect_eof()
    return space_name, features


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_save(model: LaffModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<II", model.h, model.d))
        for dims in (model.video_dims(), model.text_dims()):
            fh.write(struct.pack("<H", len(dims)))
            for name in sorted(dims):
                fh.write(_pack_name(name))
                fh.write(struct.pack("<I", dims[name]))
        fh.write(model.to_vector().astype("<f8").tobytes())


def checkpoint_load(path) -> LaffModel:
    with open(path, "rb") as fh:
        reader = _Reader(fh, path)
        magic = reader.read(4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(
                f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}"
            )
        version = reader.unpack("<B", "version")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        h, d = reader.unpack("<II", "h and d")
        if h < 1 or d < 1:
            raise FormatError(f"{path}: corrupt header (h={h}, d={d})")
        space_dims: list[dict[str, int]] = []
        for what in ("video", "text"):
            n_spaces = reader.unpack("<H", f"{what} space count")
            if n_spaces < 1:
                raise FormatError(f"{path}: no {what} spaces")
            dims: dict[str, int] = {}
            for _ in range(n_spaces):
                name = _read_name(reader, f"{what} space name")
                dim = reader.unpack("<I", f"{what} space {name!r} dim")
                if dim < 1 or name in dims:
                    raise FormatError(f"{path}: corrupt {what} space table")
                dims[name] = dim
            space_dims.append(dims)
        video_dims, text_dims = space_dims

        def read_branch(dims: dict[str, int]) -> LaffBranchParams:
            transforms = {}
            for name in sorted(dims):
                d_in = dims[name]
                w_raw = reader.read(8 * d * d_in, f"weights of {name!r}")
                w = np.frombuffer(w_raw, dtype="<f8").reshape(d, d_in).copy()
                b_raw = reader.read(8 * d, f"bias of {name!r}")
                b = np.frombuffer(b_raw, dtype="<f8").copy()
                transforms[name] = LinearTanhParams(w, b)
            u_raw = reader.read(8 * d, "attention vector")
            u = np.frombuffer(u_raw, dtype="<f8").copy()
            return LaffBranchParams(transforms, u)

        heads = []
        for _ in range(h):
            video = read_branch(video_dims)
            text = read_branch(text_dims)
            heads.append(LaffHead(video, text))
        reader.expect_eof()
    return LaffModel(heads)


def group_frame_features(features: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Group `item_id#frame_index` records into per-item (n, dim) arrays,
    ordered by frame index."""
    grouped: dict[str, list[tuple[int, np.ndarray]]] = {}
    for rec_id, vec in features.items():
        item_id, sep, frame_str = rec_id.rpartition("#")
        if not sep:
            raise FormatError(
                f"frame record id {rec_id!r} is not of the form item_id#frame_index"
            )
        try:
            frame_index = int(frame_str)
        except ValueError:
            raise FormatError(
                f"frame record id {rec_id!r} has non-integer frame index"
            ) from None
        grouped.setdefault(item_id, []).append((frame_index, vec))
    return {
        item_id: np.stack([vec for _, vec in sorted(frames, key=lambda fv: fv[0])])
        for item_id, frames in grouped.items()
    }
