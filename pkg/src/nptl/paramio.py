"""ParamVector file formats.

Binary layout (all integers little-endian)::

    magic        6 bytes   b"NPTLPV"
    version      uint16    FORMAT_VERSION
    spec digest  32 bytes  sha256 of the canonical ModelSpec JSON
    phi span     2 x uint64
    head span    2 x uint64
    count        uint64
    values       count x float64 (little-endian)

The text export is JSON with every value written by ``float.hex`` so it
round-trips exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import ModelSpec, ParamVector

MAGIC = b"NPTLPV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<6sH32s5Q")
TEXT_FORMAT = "nptl-params-text/1"


class ParamFormatError(ValueError):
    pass


def to_bytes(spec: ModelSpec, params: ParamVector) -> bytes:
    if len(params) != spec.n_params:
        raise ValueError("parameter vector does not match spec")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, spec.digest(), *params.phi_span,
                          *params.head_span, len(params))
    return header + params.values.astype("<f8").tobytes()


def from_bytes(blob: bytes, spec: ModelSpec | None = None) -> ParamVector:
    """Decode a binary ParamVector; if ``spec`` is given its digest must match."""
    if len(blob) < _HEADER.size:
        raise ParamFormatError("truncated parameter file header")
    magic, version, digest, p0, p1, h0, h1, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ParamFormatError("not a parameter file (bad magic)")
    if version != FORMAT_VERSION:
        raise ParamFormatError(f"unsupported parameter format version {version}")
    if spec is not None and digest != spec.digest():
        raise ParamFormatError("parameter file was written for a different model spec")
    body = blob[_HEADER.size:]
    if len(body) != 8 * count:
        raise ParamFormatError(f"expected {count} values, found {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ParamVector(values, (p0, p1), (h0, h1))


def save(path, spec: ModelSpec, params: ParamVector) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(spec, params))
    return path


def load(path, spec: ModelSpec | None = None) -> ParamVector:
    return from_bytes(Path(path).read_bytes(), spec)


def read_digest(path) -> bytes:
    blob = Path(path).read_bytes()[:_HEADER.size]
    if len(blob) < _HEADER.size or blob[:6] != MAGIC:
        raise ParamFormatError(f"{path}: not a parameter file")
    return _HEADER.unpack(blob)[2]


def to_text(spec: ModelSpec, params: ParamVector) -> str:
    doc = {
        "format": TEXT_FORMAT,
        "spec": spec.to_dict(),
        "spec_sha256": spec.digest().hex(),
        "phi_span": list(params.phi_span),
        "head_span": list(params.head_span),
        "values": [float(v).hex() for v in params.values],
    }
    return json.dumps(doc, indent=1)


def from_text(text: str) -> tuple[ModelSpec, ParamVector]:
    doc = json.loads(text)
    if doc.get("format") != TEXT_FORMAT:
        raise ParamFormatError(f"unsupported text format {doc.get('format')!r}")
    spec = ModelSpec.from_dict(doc["spec"])
    values = np.array([float.fromhex(v) for v in doc["values"]])
    return spec, ParamVector(values, tuple(doc["phi_span"]), tuple(doc["head_span"]))
