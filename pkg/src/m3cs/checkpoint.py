"""Binary checkpoint format: named float32 tensors plus a JSON config snapshot.

Layout (all integers little-endian):
  magic "M3CS" | version u32 | tensor_count u32
  per tensor:  name_len u32 | name utf-8 | rank u32 | dims u64 each | data f32
  trailer:     json_len u64 | config json utf-8
Round trips are bit-exact for float32 data; unknown versions are refused.
"""

import json
import struct

import numpy as np

MAGIC = b"M3CS"
VERSION = 1


def save_checkpoint(path, tensors, config):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_checkpoint(path):
    """Returns (tensors dict, config dict)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a M3CS checkpoint (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims)
            tensors[name] = data.copy()
        (json_len,) = struct.unpack("<Q", fh.read(8))
        config = json.loads(fh.read(json_len).decode("utf-8"))
    return tensors, config


def collect_pretrain_state(model, teacher, opt):
    """Flat tensor dict for a resumable pretrain checkpoint."""
    out = {}
    for k, p in model.params().items():
        out[f"student.{k}"] = p.data
    for k, arr in teacher.params().items():
        out[f"teacher.{k}"] = arr
    out.update(opt.state_arrays())
    return out


def collect_finetune_state(model):
    return {f"model.{k}": p.data for k, p in model.params().items()}
