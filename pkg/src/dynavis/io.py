"""Binary checkpoints, retrieval indexes, and CSV reports.

Both binary containers are little-endian with a trailing CRC32 over the
whole preceding byte stream, so truncation and bit-flips are caught at
load time.  Checkpoints store every array by name -- model parameters,
optimizer moments, and bookkeeping scalars alike -- which is what makes
bit-identical resume possible.
"""

from __future__ import annotations

import csv
import os
import struct
import zlib

import numpy as np

CKPT_MAGIC = b"DVCK1"
INDEX_MAGIC = b"DVIX1"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1", 4: "<i4", 5: "?"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long: {s[:40]}...")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob, self.off, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated (wanted {n} bytes at {self.off})")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def str(self) -> str:
        return self.take(self.unpack("<H")).decode("utf-8")


def _check_crc(blob: bytes, path: str) -> bytes:
    if len(blob) < 4:
        raise FormatError(f"{path}: too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: CRC mismatch")
    return body


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">"
                          else arr.dtype)
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        arr = np.asarray(arr, dtype=_DTYPES[code], order="C")  # keeps 0-d shape
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(_check_crc(blob, path), path)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.str()
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        if rank == 1:
            shape = (shape,)
        dt = np.dtype(_DTYPES[code])
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = arr.copy()  # writable, owns its memory
    if r.off != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.off} trailing bytes")
    return out


def save_checkpoint(path: str, model, optimizer=None, epoch: int = 0,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"model.{k}": np.asarray(v) for k, v in model.state_dict().items()}
    if optimizer is not None:
        for k, v in optimizer.state_dict().items():
            tensors[f"opt.{k}"] = np.asarray(v)
    tensors["epoch"] = np.asarray(epoch, dtype=np.int64)
    for k, v in (extra or {}).items():
        tensors[f"extra.{k}"] = np.asarray(v)
    save_tensors(path, tensors)


def load_checkpoint(path: str):
    """Returns (model_state, optimizer_state_or_None, epoch, extra)."""
    tensors = load_tensors(path)
    model = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    opt = {k[len("opt."):]: v for k, v in tensors.items() if k.startswith("opt.")}
    extra = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    epoch = int(tensors.get("epoch", np.asarray(0)))
    return model, (opt or None), epoch, extra


# ---------------------------------------------------------------------------
# retrieval index


def save_index(path: str, ids: list[str], embeddings: np.ndarray,
               hashes: np.ndarray | None = None) -> None:
    """ids + float32 embeddings (M, d) + optional boolean hash codes (M, bits)."""
    emb = np.ascontiguousarray(np.asarray(embeddings, dtype="<f4"))
    if emb.ndim != 2 or emb.shape[0] != len(ids):
        raise FormatError("embeddings must be (len(ids), d)")
    bits = 0
    packed = b""
    if hashes is not None:
        h = np.asarray(hashes, dtype=bool)
        if h.shape[0] != len(ids):
            raise FormatError("hashes must be (len(ids), bits)")
        bits = h.shape[1]
        packed = np.packbits(h, axis=1).tobytes()
    parts = [INDEX_MAGIC, struct.pack("<HIII", VERSION, len(ids), emb.shape[1], bits)]
    parts += [_pack_str(s) for s in ids]
    parts.append(emb.tobytes())
    parts.append(packed)
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_index(path: str):
    """Returns (ids, embeddings (M, d) float32, hashes (M, bits) bool or None)."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(_check_crc(blob, path), path)
    if r.take(len(INDEX_MAGIC)) != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, m, d, bits = r.unpack("<HIII")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    ids = [r.str() for _ in range(m)]
    emb = np.frombuffer(r.take(m * d * 4), dtype="<f4").reshape(m, d).copy()
    hashes = None
    if bits:
        nbytes = (bits + 7) // 8
        raw = np.frombuffer(r.take(m * nbytes), dtype=np.uint8).reshape(m, nbytes)
        hashes = np.unpackbits(raw, axis=1)[:, :bits].astype(bool)
    if r.off != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.off} trailing bytes")
    return ids, emb, hashes


# ---------------------------------------------------------------------------
# CSV


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def append_csv_row(path: str, header: list[str], row: list) -> None:
    """Create with header on first write, then append rows."""
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if new:
            w.writerow(header)
        w.writerow(row)
