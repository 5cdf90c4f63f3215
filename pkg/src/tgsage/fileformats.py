"""Binary containers for activations, RDMs and controller checkpoints.

``TGSA`` layout (little endian)::

    b"TGSA" | version u32 | n_i u32 | n_a u32
    n_i * n_a float32, row major
    ids_len u32 | UTF-8 input ids joined by "\\n"
    cat_len u32 | UTF-8 category ids joined by "\\n"   (cat_len == 0: absent)

An RDM file is the same container with ``n_a == n_i``; symmetry, a zero
diagonal and the [0, 2] range are enforced when it is loaded.

``TGRL`` layout::

    b"TGRL" | version u32 | n_tensors u32
    per tensor: name_len u16 | name UTF-8 | ndim u32 | dims u32 * ndim | float32 data
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .rsa import ActivationMatrix, Rdm, RsaError, TeacherLayer, TeacherSpec

TGSA_MAGIC = b"TGSA"
TGRL_MAGIC = b"TGRL"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file violates its container layout; the message names the field."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_text(items) -> bytes:
    raw = "\n".join(items).encode("utf-8") if items else b""
    return struct.pack("<I", len(raw)) + raw


def pack_matrix(values: np.ndarray, ids, categories=None) -> bytes:
    values = np.asarray(values)
    n_i, n_a = values.shape
    body = np.ascontiguousarray(values, dtype="<f4").tobytes()
    out = _HEADER.pack(TGSA_MAGIC, VERSION, n_i, n_a) + body + _pack_text(list(ids))
    out += _pack_text(list(categories) if categories is not None else [])
    return out


def unpack_matrix(data: bytes) -> tuple[np.ndarray, tuple[str, ...], tuple[str, ...] | None]:
    if len(data) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(data)} bytes)")
    magic, version, n_i, n_a = _HEADER.unpack_from(data)
    if magic != TGSA_MAGIC:
        raise FormatError(f"bad magic {magic!r}: expected {TGSA_MAGIC!r} (TGSA)")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (expected {VERSION})")
    off = _HEADER.size
    n_bytes = 4 * n_i * n_a
    if len(data) < off + n_bytes:
        raise FormatError(f"payload truncated: header n_i={n_i}, n_a={n_a} needs {n_bytes} bytes")
    values = np.frombuffer(data, dtype="<f4", count=n_i * n_a, offset=off).astype(np.float64).reshape(n_i, n_a)
    off += n_bytes
    ids, off = _unpack_text(data, off, "input_ids")
    if len(ids) != n_i:
        raise FormatError(f"input_ids block has {len(ids)} entries, header n_i={n_i}")
    cats, off = _unpack_text(data, off, "category block")
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after category block")
    if cats and len(cats) != n_i:
        raise FormatError(f"category block has {len(cats)} entries, header n_i={n_i}")
    return values, tuple(ids), (tuple(cats) if cats else None)


def _unpack_text(data: bytes, off: int, what: str):
    if len(data) < off + 4:
        raise FormatError(f"{what} length missing")
    (length,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + length:
        raise FormatError(f"{what} truncated")
    raw = data[off : off + length]
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what} is not valid UTF-8") from exc
    return (text.split("\n") if length else []), off + length


def save_activations(path, act: ActivationMatrix) -> None:
    atomic_write(path, pack_matrix(act.values, act.input_ids, act.category_ids))


def load_activations(path) -> ActivationMatrix:
    values, ids, cats = unpack_matrix(Path(path).read_bytes())
    try:
        return ActivationMatrix(values, ids, cats)
    except RsaError as exc:
        raise FormatError(str(exc)) from exc


def save_rdm(path, rdm: Rdm) -> None:
    atomic_write(path, pack_matrix(rdm.values, rdm.ids))


def load_rdm(path) -> Rdm:
    values, ids, _ = unpack_matrix(Path(path).read_bytes())
    n_i, n_a = values.shape
    if n_i != n_a:
        raise FormatError(f"RDM file must have n_a == n_i (header n_i={n_i}, n_a={n_a})")
    try:
        return Rdm(values, ids)
    except RsaError as exc:
        raise FormatError(f"invalid RDM payload: {exc}") from exc


# ---------------------------------------------------------------------------
# teacher manifests


def probe_hash(ids) -> str:
    return hashlib.sha256("\n".join(ids).encode("utf-8")).hexdigest()


def write_teacher_manifest(directory, teacher: TeacherSpec, provenance: str | None = None) -> Path:
    """Write one RDM file per teacher layer plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in teacher.layers:
        fname = f"{layer.name}.rdm"
        save_rdm(directory / fname, layer.rdm)
        entries.append({"name": layer.name, "file": fname, "provenance": provenance or layer.provenance})
    manifest = {"version": VERSION, "probe_hash": probe_hash(teacher.ids), "rdms": entries}
    path = directory / "manifest.json"
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def load_teacher_manifest(path, provenance: str = "external-file") -> TeacherSpec:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        entries = manifest["rdms"]
        expected = manifest["probe_hash"]
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"unreadable teacher manifest {path}: {exc}") from exc
    layers = []
    for entry in entries:
        rdm = load_rdm(path.parent / entry["file"])
        if probe_hash(rdm.ids) != expected:
            raise FormatError(f"RDM {entry['file']} probe_hash does not match the manifest")
        layers.append(TeacherLayer(entry["name"], rdm, entry.get("provenance", provenance)))
    try:
        return TeacherSpec(tuple(layers))
    except RsaError as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# controller checkpoints


def pack_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [TGRL_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != TGRL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}: expected {TGRL_MAGIC!r} (TGRL)")
    if len(data) < 12:
        raise FormatError("checkpoint header truncated")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (expected {VERSION})")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if len(data) < off + 4 * size:
                raise FormatError(f"tensor {name!r} data truncated")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"checkpoint truncated: {exc}") from exc
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes in checkpoint")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, pack_tensors(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return unpack_tensors(Path(path).read_bytes())
