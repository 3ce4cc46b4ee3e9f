"""Reader/writer for the DFDARCH tensor archive format used by the C++ library."""

import json
import struct

import numpy as np

MAGIC = b"DFDARCH\0"
VERSION = 1


def save(path, tensors, meta=None):
    entries, offset, payload = [], 0, []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)


def load(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, head_len = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(blob[20:20 + head_len])
    base = 20 + head_len
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        tensors[e["name"]] = np.frombuffer(blob, "<f4", count, start).reshape(e["shape"])
    return tensors, header.get("meta", {})
