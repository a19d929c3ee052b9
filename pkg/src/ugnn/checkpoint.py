"""Checkpoint container.

A checkpoint is an uncompressed zip archive with fixed member timestamps:

    manifest.json            format tag, network spec, seed, epoch, validation
                             loss, parameter shapes, optimiser step, history
    params/<layer path>      raw little-endian float64 payload
    adam_m/<layer path>      Adam first moments (optional)
    adam_v/<layer path>      Adam second moments (optional)
    best/<layer path>        best-so-far parameters (optional)

Writing the same state twice yields byte-identical files.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "ugnn-checkpoint-1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    spec: dict
    params: dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0
    valid_loss: float | None = None
    adam_step: int = 0
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None
    best_params: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)
    kind: str = "network"


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    shapes = {k: list(v.shape) for k, v in ckpt.params.items()}
    manifest = {
        "format": FORMAT,
        "kind": ckpt.kind,
        "spec": ckpt.spec,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "valid_loss": ckpt.valid_loss,
        "dtype": "<f8",
        "params": shapes,
        "adam_step": ckpt.adam_step,
        "has_adam": ckpt.adam_m is not None,
        "has_best": ckpt.best_params is not None,
        "extra": ckpt.extra,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _put(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        groups = [("params", ckpt.params)]
        if ckpt.adam_m is not None:
            groups += [("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)]
        if ckpt.best_params is not None:
            groups.append(("best", ckpt.best_params))
        for group, arrays in groups:
            for name in shapes:
                _put(zf, f"{group}/{name}", np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} archive")
        shapes = manifest["params"]

        def group(g):
            return {k: np.frombuffer(zf.read(f"{g}/{k}"), dtype="<f8").reshape(s).copy()
                    for k, s in shapes.items()}

        return Checkpoint(
            spec=manifest["spec"],
            params=group("params"),
            seed=manifest["seed"],
            epoch=manifest["epoch"],
            valid_loss=manifest["valid_loss"],
            adam_step=manifest["adam_step"],
            adam_m=group("adam_m") if manifest["has_adam"] else None,
            adam_v=group("adam_v") if manifest["has_adam"] else None,
            best_params=group("best") if manifest["has_best"] else None,
            extra=manifest.get("extra", {}),
            kind=manifest.get("kind", "network"),
        )
