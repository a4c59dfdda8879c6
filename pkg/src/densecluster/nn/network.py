"""3D U-Net feature extractor and the 1x1x1 classification head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..volume import check_divisible
from . import ops

VARIANTS = ("proposed", "baseline")


@dataclass(frozen=True)
class Topology:
    """Layer plan of a feature network.

    ``up_filters`` is empty for the baseline, which then emits its
    bottleneck activations at ``1 / 2**levels`` resolution.
    """
    variant: str
    down_filters: tuple[int, ...]
    bottleneck_filters: int
    up_filters: tuple[int, ...] = ()
    skip_connections: bool = True
    relu_features: bool = True
    in_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "down_filters", tuple(int(f) for f in self.down_filters))
        object.__setattr__(self, "up_filters", tuple(int(f) for f in self.up_filters))
        if self.up_filters and len(self.up_filters) != len(self.down_filters):
            raise ValueError("need one up level per down level")

    @property
    def levels(self) -> int:
        return len(self.down_filters)

    @property
    def factor(self) -> int:
        return 2 ** self.levels

    @property
    def with_upsampling(self) -> bool:
        return bool(self.up_filters)

    @property
    def out_channels(self) -> int:
        return self.up_filters[-1] if self.up_filters else self.bottleneck_filters

    def layer_specs(self) -> list[tuple[str, int, int]]:
        """``(name, c_in, c_out)`` for every 3^3 conv in declaration order."""
        specs = []
        c = self.in_channels
        for lvl, f in enumerate(self.down_filters):
            specs += [(f"down{lvl}.conv0", c, f), (f"down{lvl}.conv1", f, f)]
            c = f
        b = self.bottleneck_filters
        specs += [("bottleneck.conv0", c, b), ("bottleneck.conv1", b, b)]
        c = b
        for lvl, f in enumerate(self.up_filters):
            skip = self.down_filters[self.levels - 1 - lvl] if self.skip_connections else 0
            specs += [(f"up{lvl}.conv0", c + skip, f), (f"up{lvl}.conv1", f, f)]
            c = f
        return specs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down_filters"] = list(self.down_filters)
        d["up_filters"] = list(self.up_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(**d)


def proposed_topology(base_filters: int = 8, levels: int = 3,
                      skip_connections: bool = True, relu_features: bool = True) -> Topology:
    down = tuple(base_filters * 2 ** i for i in range(levels))
    return Topology("proposed", down, 2 * down[-1], tuple(reversed(down)),
                    skip_connections=skip_connections, relu_features=relu_features)


def baseline_topology(base_filters: int = 16, levels: int = 4, out_filters: int = 32,
                      relu_features: bool = True) -> Topology:
    down = tuple(min(base_filters * 2 ** i, 4 * base_filters) for i in range(levels))
    return Topology("baseline", down, out_filters, (), skip_connections=False,
                    relu_features=relu_features)


def _uniform_fan_in(rng, c_out, c_in, ksize, dtype):
    bound = np.sqrt(1.0 / (c_in * ksize ** 3))
    w = rng.uniform(-bound, bound, size=(c_out, c_in, ksize, ksize, ksize))
    b = rng.uniform(-bound, bound, size=c_out)
    return w.astype(dtype), b.astype(dtype)


@dataclass
class FeatureNet:
    topology: Topology
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self, dtype=None) -> "FeatureNet":
        return FeatureNet(self.topology,
                          {k: v.astype(dtype or v.dtype, copy=True) for k, v in self.params.items()})

    def param_bytes(self) -> bytes:
        return b"".join(v.astype("<f4").tobytes() for v in self.params.values())

    def _conv(self, h, name, tape, relu=True):
        w, b = self.params[name + ".weight"], self.params[name + ".bias"]
        if tape is None:
            out = ops.conv3d_forward(h, w, b)
        else:
            out, cols = ops.conv3d_forward(h, w, b, return_cols=True)
            tape.append(("conv", name, h.shape, cols))
        if relu:
            if tape is not None:
                tape.append(("relu", out > 0))
            out = ops.relu_forward(out)
        return out

    def forward(self, x, tape: list | None = None) -> np.ndarray:
        """Dense features for a batch ``(N, D, H, W)`` of volumes.

        Pass a list as ``tape`` to record what :meth:`backward` needs.
        Returns ``(N, D', H', W', F)``.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4:
            x = x[..., None]
        check_divisible(x.shape[1:4], self.topology.factor)
        topo = self.topology
        h = x
        skips = []
        for lvl in range(topo.levels):
            h = self._conv(h, f"down{lvl}.conv0", tape)
            h = self._conv(h, f"down{lvl}.conv1", tape)
            if topo.skip_connections and topo.with_upsampling:
                skips.append(h)
                if tape is not None:
                    tape.append(("fork", lvl))
            h, idx = ops.maxpool2_forward(h)
            if tape is not None:
                tape.append(("pool", idx))
        last = not topo.with_upsampling
        h = self._conv(h, "bottleneck.conv0", tape)
        h = self._conv(h, "bottleneck.conv1", tape, relu=not last or topo.relu_features)
        for lvl in range(len(topo.up_filters)):
            h = ops.trilinear_up2_forward(h)
            if tape is not None:
                tape.append(("up",))
            if topo.skip_connections:
                src = topo.levels - 1 - lvl
                if tape is not None:
                    tape.append(("concat", src, h.shape[-1]))
                h = np.concatenate([h, skips[src]], axis=-1)
            last = lvl == len(topo.up_filters) - 1
            h = self._conv(h, f"up{lvl}.conv0", tape)
            h = self._conv(h, f"up{lvl}.conv1", tape, relu=not last or topo.relu_features)
        return h

    def backward(self, tape: list, grad_features: np.ndarray,
                 input_grad: bool = False) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(features) and a forward tape.

        With ``input_grad`` the gradient w.r.t. the input batch is stored
        under the key ``"input"``.
        """
        first = next(iter(self.params)).rsplit(".", 1)[0]
        grads = {}
        skip_grads = {}
        g = grad_features
        for rec in reversed(tape):
            kind = rec[0]
            if kind == "relu":
                g = g * rec[1]
            elif kind == "conv":
                _, name, in_shape, cols = rec
                w = self.params[name + ".weight"]
                gx, gw, gb = ops.conv3d_backward(np.empty(in_shape, dtype=g.dtype), w, g, cols=cols,
                                                 input_grad=input_grad or name != first)
                grads[name + ".weight"] = gw
                grads[name + ".bias"] = gb
                g = gx
            elif kind == "pool":
                g = ops.maxpool2_backward(g, rec[1])
            elif kind == "up":
                g = ops.trilinear_up2_backward(g)
            elif kind == "concat":
                _, src, c_up = rec
                skip_grads[src] = g[..., c_up:]
                g = np.ascontiguousarray(g[..., :c_up])
            elif kind == "fork":
                g = g + skip_grads.pop(rec[1])
        out = {name: grads[name] for name in self.params}
        if input_grad:
            out["input"] = g[..., 0] if g.shape[-1] == 1 else g
        return out


def init_random(topology: Topology, seed: int, dtype=np.float32) -> FeatureNet:
    """Fan-in scaled uniform init, bound ``sqrt(1 / fan_in)``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, c_in, c_out in topology.layer_specs():
        w, b = _uniform_fan_in(rng, c_out, c_in, 3, dtype)
        params[name + ".weight"] = w
        params[name + ".bias"] = b
    return FeatureNet(topology, params)


@dataclass
class Head:
    """1x1x1 convolution with bias mapping F feature channels to k logits."""
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 5 or self.weight.shape[2:] != (1, 1, 1):
            raise ValueError(f"head weight must be (k, F, 1, 1, 1), got {self.weight.shape}")
        if self.k < 2:
            raise ValueError("head needs k >= 2")

    @property
    def k(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def copy(self, dtype=None) -> "Head":
        return Head(self.weight.astype(dtype or self.weight.dtype, copy=True),
                    self.bias.astype(dtype or self.bias.dtype, copy=True))

    def __call__(self, features):
        """Logits for pooled vectors or for every voxel of a dense map."""
        return ops.head_apply(self.weight, self.bias, features)


def init_head(in_channels: int, k: int, seed, dtype=np.float32) -> Head:
    rng = np.random.default_rng(seed)
    w, b = _uniform_fan_in(rng, k, in_channels, 1, dtype)
    return Head(w, b)


def derive_seed(base: int, index: int) -> int:
    """Deterministic child seed for ``(base, index)``, e.g. one per epoch."""
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


def head_reset_seed(head_seed: int, epoch: int) -> int:
    return derive_seed(head_seed, epoch)


def downsample_mask(mask: np.ndarray, times: int) -> np.ndarray:
    """2x2x2 any-reduction applied ``times`` times over the last 3 axes."""
    m = np.asarray(mask, dtype=bool)
    for _ in range(times):
        *lead, d, h, w = m.shape
        m = m.reshape(*lead, d // 2, 2, h // 2, 2, w // 2, 2).any(axis=(-5, -3, -1))
    return m


def feature_mask(topology: Topology, mask: np.ndarray) -> np.ndarray:
    """The mask at the resolution of the network's features."""
    return mask if topology.with_upsampling else downsample_mask(mask, topology.levels)


def unet_forward(net: FeatureNet, volume) -> np.ndarray:
    """Dense features ``(D', H', W', F)`` for one volume."""
    v = volume.values if hasattr(volume, "values") else np.asarray(volume)
    return net.forward(v[None])[0]
