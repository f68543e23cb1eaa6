"""Versioned binary container for a trained model and its background density.

Layout (all integers little-endian; see docs/FORMATS.md):

    magic    8 bytes  b"DCLNMDL\\0"
    version  uint32
    count    uint32   number of entries
    entries  count x { name_len uint16, name utf-8, kind uint8 ('f' float64,
             'i' int64, 'b' raw bytes), ndim uint8, shape ndim x uint64, data }
    digest   32 bytes SHA-256 of everything before it
"""
import hashlib
import json
import struct

import numpy as np

from .background import BackgroundDensity
from .model import ModelParams

MAGIC = b"DCLNMDL\x00"
VERSION = 1
_DTYPES = {ord("f"): np.dtype("<f8"), ord("i"): np.dtype("<i8"), ord("b"): np.dtype("u1")}


class ModelFormatError(ValueError):
    """The file is not a readable model container."""


def _pack_entry(name, arr, kind):
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[ord(kind)])
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", ord(kind), arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def dumps(params, bg, metadata=None):
    """Serialise ``params``, ``bg`` and a JSON-able ``metadata`` dict to bytes."""
    meta = dict(metadata or {})
    meta["patch_dims"] = list(params.patch_dims)
    meta["var_floor"] = params.var_floor
    entries = [
        ("meta", np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype="u1"), "b"),
        ("pi", params.pi, "f"),
        ("W", params.W, "f"),
        ("phi", params.phi, "f"),
        ("alpha", params.alpha, "f"),
        ("bg_edges", bg.edges, "f"),
        ("bg_densities", bg.densities, "f"),
        ("bg_floor", bg.floor, "f"),
    ]
    body = MAGIC + struct.pack("<II", VERSION, len(entries))
    body += b"".join(_pack_entry(n, a, k) for n, a, k in entries)
    return body + hashlib.sha256(body).digest()


def loads(blob):
    """Inverse of :func:`dumps`: returns ``(params, bg, metadata)``."""
    blob = bytes(blob)
    if len(blob) < len(MAGIC) + 8 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic or too short)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("checksum mismatch: file is truncated or corrupt")
    version, count = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {VERSION})")
    pos = len(MAGIC) + 8
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            kind, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            dt = _DTYPES[kind]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise ModelFormatError(f"entry {name!r} runs past the end of the file")
            arrays[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize,
                                         offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise ModelFormatError(f"malformed entry table: {e}") from e
    if pos != len(body):
        raise ModelFormatError("trailing bytes after the entry table")
    missing = {"meta", "pi", "W", "phi", "alpha", "bg_edges", "bg_densities", "bg_floor"} - set(arrays)
    if missing:
        raise ModelFormatError(f"missing entries: {sorted(missing)}")
    meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
    params = ModelParams(pi=arrays["pi"], W=arrays["W"], phi=arrays["phi"], alpha=arrays["alpha"],
                         patch_dims=tuple(meta["patch_dims"]), var_floor=float(meta["var_floor"]))
    bg = BackgroundDensity(edges=arrays["bg_edges"], densities=arrays["bg_densities"],
                           floor=arrays["bg_floor"])
    return params, bg, meta


def save_model(path, params, bg, metadata=None):
    blob = dumps(params, bg, metadata)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
