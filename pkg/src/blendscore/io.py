"""On-disk formats: binary column container, JSON sidecars and JSON-lines diagnostics.

Container layout (all little-endian)::

    magic    4 bytes  b"BSRB"
    version  uint32
    n        uint64   rows
    d        uint64   columns per row
    flags    uint32   bit 0 scores, bit 1 log-likelihoods, bit 2 proxy
    [proxy header: kind uint32 (0 diag, 1 lrd), k uint32, r uint32]
    points (n, d) float64
    [scores (n, d)] [loglik (n,)]
    [proxy mu (n, d), variances (n, d), V (n, d, r), lam (n, r)]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .proxy import ProxyModel
from .snis import ReferenceBank

__all__ = [
    "MAGIC",
    "VERSION",
    "FormatError",
    "write_bank",
    "read_bank",
    "write_samples",
    "read_samples",
    "write_jsonl",
    "read_jsonl",
]

MAGIC = b"BSRB"
VERSION = 1
_HEAD = struct.Struct("<4sIQQI")
_PROXY_HEAD = struct.Struct("<III")
_F_SCORES, _F_LOGLIK, _F_PROXY = 1, 2, 4
_KINDS = ("diag", "lrd")
_F8 = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed or unsupported container file."""


def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_bank(path, bank, proxy=None, provenance=None):
    """Write a bank (and optionally its proxy) plus a ``<path>.json`` sidecar."""
    if proxy is not None and proxy.anchors.shape != bank.points.shape:
        raise ValueError("proxy anchors do not match bank points")
    flags = ((_F_SCORES if bank.scores is not None else 0)
             | (_F_LOGLIK if bank.log_likelihoods is not None else 0)
             | (_F_PROXY if proxy is not None else 0))
    n, d = bank.points.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, n, d, flags))
        if proxy is not None:
            fh.write(_PROXY_HEAD.pack(_KINDS.index(proxy.kind), proxy.k, proxy.r))
        cols = [bank.points, bank.scores, bank.log_likelihoods]
        if proxy is not None:
            cols += [proxy.mu, proxy.variances, proxy.V, proxy.lam]
        for c in cols:
            if c is not None:
                fh.write(np.ascontiguousarray(c, dtype=_F8).tobytes())
    meta = {"format": "blendscore-bank", "version": VERSION, "n": n, "d": d,
            "has_scores": bank.scores is not None,
            "has_log_likelihoods": bank.log_likelihoods is not None,
            "proxy": None if proxy is None else {"kind": proxy.kind, "k": proxy.k, "r": proxy.r},
            "provenance": provenance or {}}
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def _take(buf, off, shape):
    size = int(np.prod(shape)) * 8
    if off + size > len(buf):
        raise FormatError("file truncated")
    return np.frombuffer(buf, dtype=_F8, count=int(np.prod(shape)), offset=off).reshape(shape).astype(float), off + size


def read_bank(path, with_proxy=False):
    """Read a container; returns the bank, or ``(bank, proxy_or_None)`` with ``with_proxy``."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise FormatError("file too short for header")
    magic, version, n, d, flags = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    off = _HEAD.size
    kind = k = r = None
    if flags & _F_PROXY:
        kcode, k, r = _PROXY_HEAD.unpack_from(buf, off)
        off += _PROXY_HEAD.size
        kind = _KINDS[kcode]
    pts, off = _take(buf, off, (n, d))
    scores = ll = None
    if flags & _F_SCORES:
        scores, off = _take(buf, off, (n, d))
    if flags & _F_LOGLIK:
        ll, off = _take(buf, off, (n,))
    proxy = None
    if flags & _F_PROXY:
        mu, off = _take(buf, off, (n, d))
        var, off = _take(buf, off, (n, d))
        V = lam = None
        if kind == "lrd":
            V, off = _take(buf, off, (n, d, r))
            lam, off = _take(buf, off, (n, r))
        proxy = ProxyModel(pts, mu, kind, var, k, V, lam)
    if off != len(buf):
        raise FormatError("trailing bytes after last section")
    bank = ReferenceBank(pts, scores, ll)
    return (bank, proxy) if with_proxy else bank


def write_samples(path, samples, provenance=None):
    return write_bank(path, ReferenceBank(samples), provenance=provenance)


def read_samples(path):
    return read_bank(path).points


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def write_jsonl(path, records, append=False):
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: _plain(v) for k, v in rec.items()}) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
