"""Single-file model checkpoints.

Layout::

    MOSENHANCE-CHECKPOINT <version>
    kind <pmos|se>
    fingerprint <hex>
    hparam <key> <value>          (repeated)
    tensor <name> <d0,d1,...>     (repeated, in blob order)
    end
    <raw little-endian float64 blobs, concatenated>

The fingerprint hashes the kind plus every tensor name and shape, so a file
written for a differently-shaped model is rejected rather than reinterpreted.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = "MOSENHANCE-CHECKPOINT"
VERSION = 1


def shape_fingerprint(kind: str, tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(kind.encode())
    for name, arr in tensors.items():
        h.update(f"{name}:{','.join(map(str, arr.shape))};".encode())
    return h.hexdigest()[:16]


def encode(kind: str, hparams: dict[str, object], tensors: dict[str, np.ndarray]) -> bytes:
    lines = [f"{MAGIC} {VERSION}", f"kind {kind}", f"fingerprint {shape_fingerprint(kind, tensors)}"]
    for key, value in hparams.items():
        lines.append(f"hparam {key} {value}")
    for name, arr in tensors.items():
        lines.append(f"tensor {name} {','.join(map(str, arr.shape)) or '-'}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    return header + blobs


def decode(raw: bytes) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise FormatError("not a checkpoint file", field="magic")
    lines = raw[:end].decode("ascii").split("\n")
    version = int(lines[0].split()[1])
    if version != VERSION:
        raise ConfigError(f"checkpoint version {version}, expected {VERSION}", field="version")
    kind = ""
    fingerprint = ""
    hparams: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for line in lines[1:]:
        tag, _, rest = line.partition(" ")
        if tag == "kind":
            kind = rest
        elif tag == "fingerprint":
            fingerprint = rest
        elif tag == "hparam":
            key, _, value = rest.partition(" ")
            hparams[key] = value
        elif tag == "tensor":
            name, dims = rest.split(" ")
            shapes.append((name, () if dims == "-" else tuple(int(d) for d in dims.split(","))))
        else:
            raise FormatError(f"unknown checkpoint record {tag!r}", field="manifest")
    offset = end + len(b"\nend\n")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError(f"truncated blob for tensor {name}", field=name)
        tensors[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(raw):
        raise FormatError("trailing bytes after tensor blobs", field="blobs")
    if shape_fingerprint(kind, tensors) != fingerprint:
        raise ConfigError("checkpoint fingerprint does not match its tensors", field="fingerprint")
    return kind, hparams, tensors


def save(path, kind: str, hparams: dict[str, object], tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(kind, hparams, tensors))


def load(path, expected_kind: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{expected_kind} checkpoint not found: {p}", field=f"{expected_kind}_checkpoint")
    kind, hparams, tensors = decode(p.read_bytes())
    if kind != expected_kind:
        raise ConfigError(f"checkpoint kind {kind!r}, expected {expected_kind!r}", field="kind")
    return hparams, tensors


def assign(params: dict, tensors: dict[str, np.ndarray], kind: str) -> None:
    """Copy loaded arrays into a freshly built model's parameter tensors."""
    if list(params) != list(tensors):
        raise ConfigError(f"{kind} checkpoint tensor names do not match the model", field="tensors")
    for name, t in params.items():
        if t.shape != tensors[name].shape:
            raise ConfigError(
                f"{kind} tensor {name}: checkpoint shape {tensors[name].shape}, model {t.shape}",
                field=name,
            )
        t.data[...] = tensors[name]
