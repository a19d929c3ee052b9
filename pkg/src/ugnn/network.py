"""UNet and UNet-GNN assembly, shape planning and parameter counting.

All convolutions are unpadded, so every 3x3x3 layer trims one voxel per
side.  Skip connections crop the encoder map centrally before channel
concatenation.  In the UGnn variants the two convolutions of the deepest
level are replaced by the GNN module, which keeps the spatial extent.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .graph import GnnModuleSpec, gnn_module_forward, init_gnn_weights
from .rng import substream
from .tensor import Tensor

VARIANTS = ("UNetLev3", "UNetLev5", "UGnnReg", "UGnnDyn")


class ShapePlanError(ValueError):
    """Input extents admit no legal sequence of valid convolutions and pools."""


@dataclass(frozen=True)
class NetworkSpec:
    variant: str
    input_dims: tuple = (52, 52, 52)
    first_level_features: int = 8
    gnn_layers: int = 4
    k: int = 26
    radius: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose one of {', '.join(VARIANTS)}")
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        if len(self.input_dims) != 3:
            raise ValueError("input_dims must have three entries")

    @property
    def levels(self) -> int:
        return 5 if self.variant == "UNetLev5" else 3

    @property
    def features(self) -> list[int]:
        return [self.first_level_features * 2 ** i for i in range(self.levels)]

    @property
    def gnn(self) -> GnnModuleSpec | None:
        if self.variant not in ("UGnnReg", "UGnnDyn"):
            return None
        f = self.features[-2]
        return GnnModuleSpec(in_features=f, out_features=2 * f, num_layers=self.gnn_layers,
                             adjacency="regular" if self.variant == "UGnnReg" else "dynamic",
                             k=self.k, radius=self.radius)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def _plan_axis(n: int, levels: int, gnn: bool) -> dict:
    """Extents along one axis through the network, or ShapePlanError."""
    enc = []
    for lev in range(levels - 1):
        n -= 4
        if n < 1:
            raise ShapePlanError("feature map vanished in the encoder")
        if n % 2:
            raise ShapePlanError(f"odd extent {n} before pooling at level {lev}")
        enc.append(n)
        n //= 2
    if not gnn:
        if n < 5:
            raise ShapePlanError("bottleneck too small for two valid convolutions")
        # conv inputs must be >= 3: n and n-2
        n -= 4
    bottleneck = n
    dec = []
    for lev in reversed(range(levels - 1)):
        n *= 2
        if enc[lev] < n:
            raise ShapePlanError("encoder map smaller than decoder map at skip connection")
        n -= 4
        if n < 1:
            raise ShapePlanError("feature map vanished in the decoder")
        dec.append(n)
    return {"encoder": enc, "bottleneck": bottleneck, "decoder": dec, "output": n}


def shape_plan(spec: NetworkSpec) -> list[dict]:
    return [_plan_axis(n, spec.levels, spec.gnn is not None) for n in spec.input_dims]


def output_shape(spec: NetworkSpec) -> tuple:
    return tuple(p["output"] for p in shape_plan(spec))


def valid_input_dims(variant: str, min_output: int, limit: int = 1024) -> int:
    """Smallest legal input extent whose output extent is at least ``min_output``."""
    levels = 5 if variant == "UNetLev5" else 3
    gnn = variant.startswith("UGnn")
    for n in range(1, limit):
        try:
            if _plan_axis(n, levels, gnn)["output"] >= min_output:
                return n
        except ShapePlanError:
            continue
    raise ShapePlanError(f"no input extent below {limit} yields output >= {min_output}")


def crop_and_concat(encoder_fm: Tensor, decoder_fm: Tensor) -> Tensor:
    """Centrally crop the encoder map to the decoder extents and stack channels.

    An odd margin leaves the extra voxel on the high-index side.
    """
    enc_dims, dec_dims = encoder_fm.shape[1:], decoder_fm.shape[1:]
    if any(e < d for e, d in zip(enc_dims, dec_dims)):
        raise ValueError(f"encoder extents {enc_dims} smaller than decoder extents {dec_dims}")
    start = [(e - d) // 2 for e, d in zip(enc_dims, dec_dims)]
    cropped = encoder_fm if tuple(enc_dims) == tuple(dec_dims) else T.crop3d(encoder_fm, start, dec_dims)
    return T.concat([cropped, decoder_fm], axis=0)


def _param_shapes(spec: NetworkSpec) -> dict[str, tuple]:
    fs = spec.features
    shapes = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = 1
    for lev, f in enumerate(fs[:-1]):
        conv(f"enc{lev}.conv0", cin, f)
        conv(f"enc{lev}.conv1", f, f)
        cin = f
    gnn = spec.gnn
    if gnn is None:
        conv("bottom.conv0", fs[-2], fs[-1])
        conv("bottom.conv1", fs[-1], fs[-1])
    else:
        for name, shape in gnn.param_shapes().items():
            shapes[f"bottom.gnn.{name}"] = shape
    up = fs[-1]
    for lev in reversed(range(len(fs) - 1)):
        conv(f"dec{lev}.conv0", up + fs[lev], fs[lev])
        conv(f"dec{lev}.conv1", fs[lev], fs[lev])
        up = fs[lev]
    conv("head", fs[0], 1, k=1)
    return shapes


class Network:
    """Parameterised layer stack realised from a ``NetworkSpec``."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params
        self.plan = shape_plan(spec)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def with_input_dims(self, dims) -> "Network":
        """Same weights, different patch size."""
        return Network(replace(self.spec, input_dims=tuple(dims)), self.params)

    def _gnn_weights(self) -> dict[str, Tensor]:
        prefix = "bottom.gnn."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def _conv(self, name: str, x: Tensor, act: str | None = "relu") -> Tensor:
        y = T.conv3d_valid(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        return T.activation(y, act) if act else y

    def forward(self, patch, bottleneck_adjacency=None) -> Tensor:
        """Voxelwise probabilities for a ``(1, D, H, W)`` patch."""
        x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=self.dtype))
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[0] != 1 or tuple(x.shape[1:]) != self.spec.input_dims:
            raise ValueError(f"patch shape {x.shape} does not match network input (1, {self.spec.input_dims})")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        levels = self.spec.levels
        skips = []
        for lev in range(levels - 1):
            x = self._conv(f"enc{lev}.conv1", self._conv(f"enc{lev}.conv0", x))
            skips.append(x)
            x = T.maxpool3d_2(x)
        if self.spec.gnn is None:
            x = self._conv("bottom.conv1", self._conv("bottom.conv0", x))
        else:
            x = gnn_module_forward(x, self.spec.gnn, self._gnn_weights(), adjacency=bottleneck_adjacency)
        for lev in reversed(range(levels - 1)):
            x = crop_and_concat(skips[lev], T.upsample_nearest3d_2(x))
            x = self._conv(f"dec{lev}.conv1", self._conv(f"dec{lev}.conv0", x))
        return self._conv("head", x, act="sigmoid")

    __call__ = forward


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> Network:
    """Deterministically initialised network (He fan-in, zero biases)."""
    shape_plan(spec)
    rng = substream(seed, "weights")
    params: dict[str, Tensor] = {}
    gnn = spec.gnn
    gnn_init = init_gnn_weights(gnn, rng, dtype) if gnn is not None else {}
    for name, shape in _param_shapes(spec).items():
        if name.startswith("bottom.gnn."):
            params[name] = gnn_init[name[len("bottom.gnn."):]]
        elif name.endswith(".bias"):
            params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        else:
            fan_in = int(np.prod(shape[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            params[name] = Tensor(w.astype(dtype), requires_grad=True)
    return Network(spec, params)


def count_parameters(net: Network) -> int:
    return int(sum(p.size for p in net.params.values()))
