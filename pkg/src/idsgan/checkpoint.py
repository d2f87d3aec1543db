"""Versioned checkpoint container.

A checkpoint is an uncompressed zip of ``.npy`` members (readable with
``numpy.load``).  ``__meta__.npy`` holds UTF-8 JSON describing every model
(layer specs, role, class count, parameter keys), every GAN bundle (its two
models, config and history) and a free-form ``state`` dict for fitted
preprocessing.  Parameters are stored as float64 arrays named
``<group>/<name>/<layer index>/<param name>``.  Zip timestamps are fixed so
identical contents give identical bytes.
"""

import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError
from .gan import GanBundle, GanConfig, GanEpoch
from .nn import LayerSpec, Model

FORMAT = "idsgan-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    models: dict = field(default_factory=dict)
    gans: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    config_digest: str = ""


def _model_meta(model):
    return {
        "layers": [s.to_dict() for s in model.layers],
        "class_count": model.class_count,
        "role": model.role,
        "params": [[i, name, list(p.shape)] for (i, name), p in model.params.items()],
    }


def _write_array(zf, name, arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, buf.getvalue())


def save_checkpoint(ckpt, path):
    meta = {"format": FORMAT, "version": VERSION, "config_digest": ckpt.config_digest,
            "state": ckpt.state, "models": {}, "gans": {}}
    arrays = {}

    def put(prefix, model):
        for (i, name), p in model.params.items():
            arrays[f"{prefix}/{i}/{name}"] = p.data

    for key, model in ckpt.models.items():
        meta["models"][key] = _model_meta(model)
        put(f"models/{key}", model)
    for key, bundle in ckpt.gans.items():
        meta["gans"][key] = {
            "generator": _model_meta(bundle.generator),
            "discriminator": _model_meta(bundle.discriminator),
            "config": asdict(bundle.config),
            "history": bundle.history_rows(),
        }
        put(f"gans/{key}/generator", bundle.generator)
        put(f"gans/{key}/discriminator", bundle.discriminator)

    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_array(zf, "__meta__", blob)
        for name in sorted(arrays):
            _write_array(zf, name, arrays[name])
    os.replace(tmp, path)


def _model_from(meta, arrays, prefix):
    layers = [LayerSpec.from_dict(d) for d in meta["layers"]]
    params = {}
    for i, name, shape in meta["params"]:
        arr = arrays[f"{prefix}/{i}/{name}"]
        if list(arr.shape) != list(shape) or arr.dtype != np.float64:
            raise CheckpointError(f"parameter {prefix}/{i}/{name} has the wrong shape or dtype")
        params[(i, name)] = T.Tensor(arr, requires_grad=True)
    return Model(layers, params, class_count=meta["class_count"], role=meta["role"])


def load_checkpoint(path):
    """Read a checkpoint; any defect raises :class:`CheckpointError` and nothing is returned."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    try:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except Exception as exc:
        raise CheckpointError(f"{path}: missing or corrupt metadata") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} != supported {VERSION}")
    try:
        models = {k: _model_from(m, arrays, f"models/{k}") for k, m in meta["models"].items()}
        gans = {}
        for k, g in meta["gans"].items():
            gans[k] = GanBundle(
                _model_from(g["generator"], arrays, f"gans/{k}/generator"),
                _model_from(g["discriminator"], arrays, f"gans/{k}/discriminator"),
                GanConfig(**g["config"]),
                [GanEpoch(**h) for h in g["history"]],
            )
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint contents ({exc})") from exc
    return Checkpoint(models, gans, meta["state"], meta["config_digest"])
