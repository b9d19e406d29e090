"""Adapter files and merged-weight export.

Container layout (all integers and floats little-endian)::

    header   magic b"OFTKADPT" | u16 version | u16 reserved | u32 header_len | u32 num_entries
    entries  num_entries x ENTRY  (u8 kind, u8 shared, 2 pad, u32 d, u32 n, u32 r,
                                   4 pad, f64 eps_prime, u64 num_skew, u64 num_theta)
    payload  per entry: num_skew f64 skew params, then num_theta f64 log-scales;
             a ``merged`` entry instead carries its d*n weight row-major
    trailer  SHA-256 of header + payload (32 bytes)

``kind`` is 0 oft, 1 coft, 2 rescaled_oft, 3 merged. A ``merged`` entry is a
plain weight matrix, readable without any adapter code. Each file gets a
human-readable ``<path>.json`` sidecar; it is never read back.
"""

import hashlib
import json
import os
import struct

import numpy as np

from . import adapter as adp
from .errors import ChecksumError, CorruptAdapterError, FormatError, FormatVersionError, OftError

MAGIC = b"OFTKADPT"
VERSION = 1
KINDS = ("oft", "coft", "rescaled_oft", "merged")

_HEAD = struct.Struct("<8sHHII")
_ENTRY = struct.Struct("<BBxxIII4xdQQ")
_DIGEST = 32
_F64 = np.dtype("<f8")


def _entry_for(a):
    return dict(
        kind=KINDS.index(a.mode),
        shared=int(a.transform.shared),
        d=a.d,
        n=a.n,
        r=a.transform.num_blocks,
        eps_prime=0.0 if a.eps_prime is None else a.eps_prime,
        payload=[a.transform.free.reshape(-1)] + ([] if a.theta is None else [a.theta]),
        num_skew=a.num_skew,
        num_theta=0 if a.theta is None else a.n,
    )


def _merged_entry(w):
    w = np.asarray(w, dtype=np.float64)
    d, n = w.shape
    return dict(kind=3, shared=0, d=d, n=n, r=1, eps_prime=0.0, payload=[w.reshape(-1)],
                num_skew=d * n, num_theta=0)


def _encode(entries):
    head = _HEAD.pack(MAGIC, VERSION, 0, _HEAD.size + _ENTRY.size * len(entries), len(entries))
    table = b"".join(
        _ENTRY.pack(e["kind"], e["shared"], e["d"], e["n"], e["r"], e["eps_prime"],
                    e["num_skew"], e["num_theta"])
        for e in entries
    )
    payload = b"".join(np.ascontiguousarray(p, dtype=_F64).tobytes() for e in entries for p in e["payload"])
    body = head + table + payload
    return body + hashlib.sha256(body).digest()


def _write(path, blob, meta):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    meta = {"format": MAGIC.decode(), "version": VERSION, "sha256": blob[-_DIGEST:].hex(), **meta}
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)


def _decode(blob):
    if len(blob) < _HEAD.size + _DIGEST:
        raise ChecksumError(f"file too short ({len(blob)} bytes) to hold a header and checksum")
    magic, version, _, header_len, count = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("not an oftkit adapter file (bad magic)")
    if version != VERSION:
        raise FormatVersionError(f"unsupported format version {version} (this build reads {VERSION})")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is truncated or corrupted")
    if header_len != _HEAD.size + _ENTRY.size * count or header_len > len(body):
        raise CorruptAdapterError("header length does not match entry count")
    entries, off = [], header_len
    for i in range(count):
        kind, shared, d, n, r, eps, num_skew, num_theta = _ENTRY.unpack_from(body, _HEAD.size + i * _ENTRY.size)
        end = off + 8 * (num_skew + num_theta)
        if kind >= len(KINDS) or end > len(body):
            raise CorruptAdapterError(f"entry {i} is malformed")
        data = np.frombuffer(body, dtype=_F64, count=num_skew + num_theta, offset=off).astype(np.float64)
        entries.append(dict(kind=KINDS[kind], shared=bool(shared), d=d, n=n, r=r, eps_prime=eps,
                            skew=data[:num_skew], theta=data[num_skew:] if num_theta else None))
        off = end
    if off != len(body):
        raise CorruptAdapterError("trailing bytes after payload")
    return entries


def _read(path):
    with open(path, "rb") as fh:
        return _decode(fh.read())


def _build(e):
    if e["kind"] == "merged":
        raise FormatError("entry is a merged weight, not an adapter; use load_weight")
    try:
        t = adp.OrthoTransform(e["d"], e["r"], e["shared"], e["skew"])
        return adp.Adapter(t, e["n"], e["kind"], e["eps_prime"] if e["kind"] == "coft" else None, e["theta"])
    except OftError as exc:
        raise CorruptAdapterError(f"stored adapter violates its invariants: {exc}") from exc


def _meta(a):
    return dict(mode=a.mode, d=a.d, n=a.n, r=a.transform.num_blocks, shared=a.transform.shared,
                eps_prime=a.eps_prime, num_params=a.num_params, q_norm=a.q_norm())


def save_adapters(adapters, path):
    adapters = list(adapters)
    _write(path, _encode([_entry_for(a) for a in adapters]), {"layers": [_meta(a) for a in adapters]})


def save_adapter(a, path):
    save_adapters([a], path)


def load_adapters(path):
    return [_build(e) for e in _read(path)]


def load_adapter(path):
    entries = _read(path)
    if len(entries) != 1:
        raise FormatError(f"expected one adapter entry, found {len(entries)}")
    return _build(entries[0])


def save_weight(w, path, **meta):
    """Store a plain ``d x n`` weight as a single ``merged`` entry."""
    w = np.asarray(w, dtype=np.float64)
    _write(path, _encode([_merged_entry(w)]), {"layers": [{"mode": "merged", "d": w.shape[0], "n": w.shape[1], **meta}]})


def load_weight(path):
    entries = _read(path)
    if len(entries) != 1 or entries[0]["kind"] != "merged":
        raise FormatError("expected a single merged-weight entry")
    e = entries[0]
    return e["skew"].reshape(e["d"], e["n"])


def export_merged(a, w0, path):
    """Write ``merge(a, w0)`` so inference needs no adapter code."""
    w = adp.merge(a, w0)
    save_weight(w, path, source_mode=a.mode, r=a.transform.num_blocks, shared=a.transform.shared)
    return w
