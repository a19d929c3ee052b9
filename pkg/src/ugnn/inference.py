"""Tiling volumes into network-sized patches and stitching predictions back.

Unpadded convolutions make the network output smaller than its input by a
fixed margin per axis.  Volumes are therefore padded by that margin and
tiled in output space; each tile reads the matching larger input window.
Images are standardized per volume before padding, in training and
inference alike.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import tensor as T
from .data import Volume, standardize_intensity, tile_offsets
from .network import Network, NetworkSpec, output_shape


def network_margin(spec: NetworkSpec) -> tuple:
    return tuple(i - o for i, o in zip(spec.input_dims, output_shape(spec)))


@dataclass
class Sample:
    offset: tuple          # output-window origin in volume coordinates
    image: np.ndarray      # network input window
    target: np.ndarray     # reference inside the output window, exclusion removed
    roi: np.ndarray        # loss mask inside the output window


def _pad_plan(vol_shape, spec: NetworkSpec):
    out = output_shape(spec)
    margin = network_margin(spec)
    extra = [max(0, o - n) for o, n in zip(out, vol_shape)]
    before = [m // 2 for m in margin]
    after = [m - b + e for m, b, e in zip(margin, before, extra)]
    return out, before, after, [n + e for n, e in zip(vol_shape, extra)]


def tile_origins(vol_shape, spec: NetworkSpec, overlap: float = 0.0) -> list[tuple]:
    out, _, _, grid = _pad_plan(vol_shape, spec)
    return list(product(*[tile_offsets(n, o, overlap) for n, o in zip(grid, out)]))


def extract_samples(vol: Volume, spec: NetworkSpec, overlap: float = 0.0,
                    pad_mode: str = "reflect") -> list[Sample]:
    """Input windows and output-space targets covering the whole volume."""
    if vol.reference is None:
        raise ValueError(f"volume {vol.name!r} has no reference mask")
    out, before, after, grid = _pad_plan(vol.shape, spec)
    image = np.pad(standardize_intensity(vol.image), list(zip(before, after)), mode=pad_mode)
    target = vol.reference.astype(bool)
    if vol.exclusion is not None:
        target = target & ~vol.exclusion.astype(bool)
    roi = np.ones(vol.shape, bool) if vol.roi is None else vol.roi.astype(bool)
    extra = [g - n for g, n in zip(grid, vol.shape)]
    target = np.pad(target, [(0, e) for e in extra])
    roi = np.pad(roi, [(0, e) for e in extra])
    samples = []
    for origin in tile_origins(vol.shape, spec, overlap):
        osl = tuple(slice(a, a + o) for a, o in zip(origin, out))
        isl = tuple(slice(a, a + i) for a, i in zip(origin, spec.input_dims))
        samples.append(Sample(origin, image[isl], target[osl].astype(np.float64), roi[osl].astype(np.float64)))
    return samples


def predict_volume(net: Network, image: np.ndarray, overlap: float = 0.0, pad_mode: str = "reflect") -> np.ndarray:
    """Voxelwise probabilities for a full volume; overlapping tiles are averaged."""
    spec = net.spec
    out, before, after, grid = _pad_plan(image.shape, spec)
    padded = np.pad(standardize_intensity(image), list(zip(before, after)), mode=pad_mode)
    acc = np.zeros(grid, dtype=np.float64)
    count = np.zeros(grid, dtype=np.float64)
    with T.no_grad():
        for origin in tile_origins(image.shape, spec, overlap):
            isl = tuple(slice(a, a + i) for a, i in zip(origin, spec.input_dims))
            prob = net.forward(padded[isl][None].astype(net.dtype)).data[0]
            osl = tuple(slice(a, a + o) for a, o in zip(origin, out))
            acc[osl] += prob
            count[osl] += 1.0
    prob = acc / count
    return prob[tuple(slice(0, n) for n in image.shape)]
