"""Versioned binary container for weights, datasets and tensor dumps.

Layout::

    b"DCRL"                      magic
    uint32 LE                    format version
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON: kind, layers, arrays[{name, shape}], meta
    payload                      every array in header order, little-endian

Arrays are float64 unless their descriptor says ``"dtype": "u1"``; rendered
frames use that (they are exact multiples of 1/255 and are stored as the
integer levels). Integer data (actions, ids) round-trips through float64
exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DCRL"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


_DTYPES = {"f8": "<f8", "u1": "u1"}


def pack(arrays: dict[str, np.ndarray], kind: str, layers=None, meta=None) -> bytes:
    descr = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "u1" if arr.dtype == np.uint8 else "f8"
        a = np.ascontiguousarray(arr.astype(_DTYPES[code], copy=False))
        d = {"name": name, "shape": list(a.shape)}
        if code != "f8":
            d["dtype"] = code
        descr.append(d)
        chunks.append(a.tobytes())
    header = {"kind": kind, "layers": list(layers or []), "arrays": descr, "meta": dict(meta or {})}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def unpack(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise ContainerError("not a DCRL container (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError("corrupt container header") from exc
    offset = 16 + hlen
    arrays = {}
    for d in header["arrays"]:
        shape = tuple(d["shape"])
        count = int(np.prod(shape)) if shape else 1
        code = d.get("dtype", "f8")
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype {code!r}")
        dt = np.dtype(_DTYPES[code])
        nbytes = dt.itemsize * count
        if offset + nbytes > len(data):
            raise ContainerError(f"truncated payload for array {d['name']!r}")
        raw = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape)
        arrays[d["name"]] = raw.astype(np.float64) if code == "f8" else raw.copy()
        offset += nbytes
    if offset != len(data):
        raise ContainerError("trailing bytes after payload")
    return header, arrays


def save(path, arrays: dict[str, np.ndarray], kind: str, layers=None, meta=None) -> Path:
    atomic_write_bytes(path, pack(arrays, kind, layers, meta))
    return Path(path)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def array_fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype="<f8")).tobytes())
    return h.hexdigest()[:16]


# -- networks -----------------------------------------------------------------


def save_network(path, net, meta=None) -> Path:
    from .nn import Network  # noqa: F401  (type only)

    arrays = {f"p{i:03d}": p for i, p in enumerate(net.parameters())}
    m = {"input_shape": list(net.input_shape), "seed": net.seed}
    m.update(meta or {})
    return save(path, arrays, "network", layers=net.spec, meta=m)


def network_from_container(header: dict, arrays: dict[str, np.ndarray]):
    from .nn import Network

    if header["kind"] != "network":
        raise ContainerError(f"expected a network container, got {header['kind']!r}")
    net = Network(header["layers"], header["meta"]["input_shape"], seed=header["meta"].get("seed", 0))
    params = net.parameters()
    if len(params) != len(arrays):
        raise ContainerError("parameter count does not match layer descriptors")
    for p, name in zip(params, sorted(arrays)):
        if p.shape != arrays[name].shape:
            raise ContainerError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p[...] = arrays[name]
    return net


def load_network(path):
    header, arrays = load(path)
    return network_from_container(header, arrays), header["meta"]


def save_bundle(path, nets: dict, kind: str, arrays: dict | None = None, meta=None) -> Path:
    """Several named networks (plus loose arrays) in one container."""
    layers = []
    payload = {}
    for name, net in nets.items():
        layers.append({"net": name, "input_shape": list(net.input_shape), "seed": net.seed,
                       "layers": net.spec})
        for i, p in enumerate(net.parameters()):
            payload[f"{name}/p{i:03d}"] = p
    for k, v in (arrays or {}).items():
        payload[k] = v
    return save(path, payload, kind, layers=layers, meta=meta)


def bundle_from_container(header: dict, arrays: dict[str, np.ndarray]):
    from .nn import Network

    nets = {}
    used = set()
    for entry in header["layers"]:
        name = entry["net"]
        net = Network(entry["layers"], entry["input_shape"], seed=entry.get("seed", 0))
        for i, p in enumerate(net.parameters()):
            key = f"{name}/p{i:03d}"
            if key not in arrays or arrays[key].shape != p.shape:
                raise ContainerError(f"missing or mis-shaped parameter {key}")
            p[...] = arrays[key]
            used.add(key)
        nets[name] = net
    extra = {k: v for k, v in arrays.items() if k not in used}
    return nets, extra


def load_bundle(path):
    header, arrays = load(path)
    nets, extra = bundle_from_container(header, arrays)
    return header, nets, extra
