"""Checkpoints: JSON sidecar plus a raw little-endian float32 payload.

The payload holds every feature-network parameter in declaration order,
followed by the head weight and bias.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..volume import FormatError
from .network import FeatureNet, Head, Topology

FORMAT = "densecluster-checkpoint"
FORMAT_VERSION = 1


def _paths(stem):
    p = Path(stem)
    if p.suffix in (".json", ".f32raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32raw"), p.with_name(p.name + ".json")


def save_checkpoint(stem, net: FeatureNet, head: Head, *, epoch: int,
                    seeds: dict | None = None) -> Path:
    raw, meta = _paths(stem)
    raw.parent.mkdir(parents=True, exist_ok=True)
    tensors = list(net.params.items()) + list(head.params.items())
    sidecar = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "topology": net.topology.to_dict(),
        "k": head.k,
        "epoch": int(epoch),
        "seeds": dict(seeds or {}),
        "dtype": "f32le",
        "tensors": [{"name": n, "shape": list(v.shape)} for n, v in tensors],
    }
    raw.write_bytes(b"".join(np.asarray(v, dtype="<f4").tobytes() for _, v in tensors))
    meta.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return meta


def load_checkpoint(stem) -> tuple[FeatureNet, Head, dict]:
    raw, meta = _paths(stem)
    if not meta.exists() or not raw.exists():
        raise FileNotFoundError(f"checkpoint {raw.with_suffix('')} not found")
    info = json.loads(meta.read_text())
    if info.get("format") != FORMAT:
        raise FormatError(f"{meta}: not a checkpoint")
    topology = Topology.from_dict(info["topology"])
    payload = np.frombuffer(raw.read_bytes(), dtype="<f4")
    expected = {n: (c_out, c_in, 3, 3, 3) for n, c_in, c_out in
                ((f"{n}.weight", ci, co) for n, ci, co in topology.layer_specs())}
    offset = 0
    tensors = {}
    for t in info["tensors"]:
        shape = tuple(t["shape"])
        if t["name"] in expected and expected[t["name"]] != shape:
            raise FormatError(f"{meta}: {t['name']} shape {shape} does not match topology")
        size = int(np.prod(shape))
        if offset + size > payload.size:
            raise FormatError(f"{raw}: payload size mismatch")
        tensors[t["name"]] = payload[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
    if offset != payload.size:
        raise FormatError(f"{raw}: payload size mismatch")
    names = [n for spec in topology.layer_specs() for n in (spec[0] + ".weight", spec[0] + ".bias")]
    missing = [n for n in names + ["head.weight", "head.bias"] if n not in tensors]
    if missing:
        raise FormatError(f"{meta}: missing tensors {missing}")
    net = FeatureNet(topology, {n: tensors[n] for n in names})
    head = Head(tensors["head.weight"], tensors["head.bias"])
    if head.in_channels != topology.out_channels:
        raise FormatError(f"{meta}: head expects {head.in_channels} channels, "
                          f"network emits {topology.out_channels}")
    return net, head, info
