"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic  b"JKOCKPT\\0"
    u32    format version
    u64    byte length of the UTF-8 header text, then the text
    u32    tensor count
    per tensor: u32 name length, name, u32 rank, rank x u64 dims, float64 data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w
import torch

MAGIC = b"JKOCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    controller: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def header(self):
        return tomli_w.dumps({"controller": self.controller}) + "\n# config\n" + self.config_text

    def to_bytes(self):
        out = [MAGIC, struct.pack("<I", VERSION)]
        text = self.header().encode("utf-8")
        out.append(struct.pack("<Q", len(text)))
        out.append(text)
        out.append(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            arr = np.require(arr, dtype="<f8", requirements="C")
            key = name.encode("utf-8")
            out.append(struct.pack("<I", len(key)) + key)
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        view = memoryview(data)
        if bytes(view[:8]) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = 8

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, view, pos)
            pos += struct.calcsize(fmt)
            return vals

        try:
            (version,) = take("<I")
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            (n,) = take("<Q")
            text = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (count,) = take("<I")
            tensors = {}
            for _ in range(count):
                (k,) = take("<I")
                name = bytes(view[pos:pos + k]).decode("utf-8")
                pos += k
                (rank,) = take("<I")
                dims = take(f"<{rank}Q")
                size = int(np.prod(dims, dtype=np.int64))
                arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(dims)
                pos += 8 * size
                tensors[name] = arr.astype(np.float64)
        except CheckpointError:
            raise
        except (struct.error, ValueError) as exc:
            raise CheckpointError("truncated checkpoint") from exc
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
        head, _, config_text = text.partition("\n# config\n")
        return cls(config_text, tomli.loads(head).get("controller", {}), tensors)

    def save(self, path):
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def module_tensors(module, prefix="param."):
    return {prefix + k: v.detach().cpu().double().numpy() for k, v in module.state_dict().items()}


def optimizer_tensors(opt):
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"opt.{idx}.{key}"] = torch.as_tensor(val).detach().cpu().double().numpy()
    return out


def load_module(module, tensors, prefix="param."):
    own = module.state_dict()
    wanted = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if set(wanted) != set(own):
        missing = sorted(set(own) - set(wanted))
        extra = sorted(set(wanted) - set(own))
        raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    module.load_state_dict({k: torch.as_tensor(wanted[k]).to(own[k].dtype).reshape(own[k].shape)
                            for k in own})


def load_optimizer(opt, tensors):
    sd = opt.state_dict()
    state = {}
    for name, arr in tensors.items():
        if not name.startswith("opt."):
            continue
        _, idx, key = name.split(".", 2)
        t = torch.as_tensor(arr.copy())
        dtype = opt.param_groups[0]["params"][0].dtype
        state.setdefault(int(idx), {})[key] = t.reshape(()).to(torch.get_default_dtype()) if key == "step" else t.to(dtype)
    sd["state"] = state
    opt.load_state_dict(sd)
