"""Bit-exact model files.

Layout: an ASCII header terminated by a line ``end``, then every stored
array in declared layer order as a little-endian uint32 element count
followed by little-endian IEEE-754 values, then an 8-byte BLAKE2b digest of
that binary section.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from acnet.blocks import Ablation, Model, ModelSpec, build_model

MAGIC = "ACNET-MODEL"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8


class ModelFormatError(ValueError):
    pass


def _digest(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=CHECKSUM_BYTES).digest()


def model_header(model: Model) -> str:
    bns = model.bn_states()
    ab = model.ablation
    lines = [
        MAGIC,
        f"format {FORMAT_VERSION}",
        f"precision {np.dtype(model.dtype).name}",
        f"fused {int(model.is_fused)}",
        f"eps {bns[0].eps!r}" if bns else "eps 1e-05",
        f"momentum {bns[0].momentum!r}" if bns else "momentum 0.1",
        f"ablation horizontal={int(ab.use_horizontal)} vertical={int(ab.use_vertical)} "
        f"bn_in_branch={int(ab.bn_in_branch)}",
    ]
    spec_lines = model.spec.format().splitlines()
    lines.append(spec_lines[0])
    lines += [f"layer {line}" for line in spec_lines[1:]]
    lines.append(f"arrays {len(model.state_arrays())}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_model(model: Model, path) -> None:
    dt = np.dtype(model.dtype).newbyteorder("<")
    chunks = []
    for _, arr in model.state_arrays():
        chunks.append(struct.pack("<I", arr.size))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(model_header(model).encode("ascii"))
        f.write(blob)
        f.write(_digest(blob))


def _parse_header(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise ModelFormatError("not a model file (bad magic line)")
    meta = {"layers": []}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "layer":
            meta["layers"].append(rest)
        else:
            meta[key] = rest
    if meta.get("format") != str(FORMAT_VERSION):
        raise ModelFormatError(f"unsupported format version {meta.get('format')!r}, "
                               f"expected {FORMAT_VERSION}")
    return meta


def load_model(path) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    marker = raw.find(b"\nend\n")
    if marker < 0:
        raise ModelFormatError("header is not terminated")
    head_end = marker + len(b"\nend\n")
    meta = _parse_header(raw[:head_end].decode("ascii"))
    body = raw[head_end:]
    if len(body) < CHECKSUM_BYTES:
        raise ModelFormatError("truncated file: missing checksum")
    blob, digest = body[:-CHECKSUM_BYTES], body[-CHECKSUM_BYTES:]
    if _digest(blob) != digest:
        raise ModelFormatError("checksum mismatch: binary section is corrupt or truncated")

    flags = dict(item.split("=") for item in meta["ablation"].split())
    ablation = Ablation(flags["horizontal"] == "1", flags["vertical"] == "1",
                        flags["bn_in_branch"] == "1")
    spec = ModelSpec.parse("\n".join(["input " + meta["input"]] + meta["layers"]))
    dtype = np.dtype(meta["precision"])
    model = build_model(spec, ablation, dtype=dtype.type, eps=float(meta["eps"]))
    for bn in model.bn_states():
        bn.momentum = float(meta["momentum"])

    targets = model.state_arrays()
    if int(meta["arrays"]) != len(targets):
        raise ModelFormatError(f"header declares {meta['arrays']} arrays, spec implies {len(targets)}")
    le = dtype.newbyteorder("<")
    pos = 0
    for name, arr in targets:
        if pos + 4 > len(blob):
            raise ModelFormatError(f"truncated before array {name}")
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if count != arr.size:
            raise ModelFormatError(f"array {name}: stored {count} values, expected {arr.size}")
        nbytes = count * le.itemsize
        if pos + nbytes > len(blob):
            raise ModelFormatError(f"truncated inside array {name}")
        arr[...] = np.frombuffer(blob, dtype=le, count=count, offset=pos).reshape(arr.shape)
        pos += nbytes
    if pos != len(blob):
        raise ModelFormatError(f"{len(blob) - pos} trailing bytes after the last array")
    return model
