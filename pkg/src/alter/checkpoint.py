"""Self-describing ``.npz`` checkpoints.

A checkpoint is a zip archive holding ``header.json`` plus one ``.npy`` entry
per named array. Entries carry a fixed timestamp so that identical contents
give identical bytes. Nested state (optimiser moments, RNG state) is packed
into the JSON header with placeholders pointing at array entries.
"""
from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import torch

from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule
from .hypernet import MaskSet

FORMAT = "alter-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _pack(obj, prefix, arrays):
    if torch.is_tensor(obj):
        key = f"{prefix}.t{len(arrays)}"
        arrays[key] = obj.detach().cpu().numpy()
        return {"__tensor__": key, "dtype": str(obj.dtype).removeprefix("torch.")}
    if isinstance(obj, np.ndarray):
        key = f"{prefix}.a{len(arrays)}"
        arrays[key] = obj
        return {"__array__": key}
    if isinstance(obj, dict):
        return {"__dict__": [[_pack(k, prefix, arrays), _pack(v, prefix, arrays)]
                             for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_pack(v, prefix, arrays) for v in obj]}
    if isinstance(obj, list):
        return [_pack(v, prefix, arrays) for v in obj]
    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        return obj.item()
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _unpack(obj, arrays):
    if isinstance(obj, list):
        return [_unpack(v, arrays) for v in obj]
    if not isinstance(obj, dict):
        return obj
    if "__tensor__" in obj:
        return torch.from_numpy(np.array(arrays[obj["__tensor__"]]))
    if "__array__" in obj:
        return np.array(arrays[obj["__array__"]])
    if "__tuple__" in obj:
        return tuple(_unpack(v, arrays) for v in obj["__tuple__"])
    if "__dict__" in obj:
        return {_unpack(k, arrays): _unpack(v, arrays) for k, v in obj["__dict__"]}
    raise CheckpointError(f"unrecognised header node {sorted(obj)}")


def save(path, kind: str, arrays: dict, meta: dict | None = None, state=None):
    """Write ``arrays`` (name -> ndarray) and JSON-able ``meta``.

    ``state`` is an arbitrary nest of dicts/lists/tensors packed into extra
    ``state.*`` entries.
    """
    arrays = {k: np.asarray(v) for k, v in arrays.items()}
    packed = None
    if state is not None:
        extra = {}
        packed = _pack(state, "state", extra)
        arrays.update(extra)
    header = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta or {},
              "arrays": sorted(arrays), "state": packed}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        _write_entry(zf, "header.json", json.dumps(header, indent=1, sort_keys=True).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _write_entry(zf, name + ".npy", buf.getvalue())


def _write_entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def load(path, kind: str | None = None):
    """Returns ``(header, arrays, state)``."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing header") from exc
        if header.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        if kind is not None and header["kind"] != kind:
            raise CheckpointError(f"{path}: expected a {kind} checkpoint, got {header['kind']}")
        arrays = {}
        for name in header["arrays"]:
            with zf.open(name + ".npy") as fh:
                arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    state = None if header.get("state") is None else _unpack(header["state"], arrays)
    plain = {k: v for k, v in arrays.items() if not k.startswith("state.")}
    return header, plain, state


def model_arrays(model: Denoiser, prefix="params/"):
    return {prefix + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def model_from_arrays(config: DenoiserConfig, arrays, prefix="params/") -> Denoiser:
    model = Denoiser(config)
    sd = model.state_dict()
    missing = [k for k in sd if prefix + k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing}")
    model.load_state_dict({k: torch.from_numpy(np.array(arrays[prefix + k])) for k in sd})
    return model


def mask_arrays(mask_set: MaskSet, prefix="masks/"):
    return {prefix + "expert_logits": mask_set.expert_logits,
            prefix + "expert_masks": mask_set.expert_masks,
            prefix + "routing_logits": mask_set.routing_logits,
            prefix + "routing_table": mask_set.routing_table}


def mask_set_from_arrays(arrays, prefix="masks/") -> MaskSet | None:
    if prefix + "expert_masks" not in arrays:
        return None
    return MaskSet(*(np.array(arrays[prefix + k]) for k in
                     ("expert_logits", "expert_masks", "routing_logits", "routing_table")))


def save_model(path, model: Denoiser, schedule: NoiseSchedule, config: dict | None = None,
               mask_set: MaskSet | None = None):
    arrays = model_arrays(model)
    arrays["schedule/alpha_bar"] = schedule.alpha_bar
    if mask_set is not None:
        arrays.update(mask_arrays(mask_set))
    meta = {"denoiser": vars(model.config).copy(), "schedule_kind": schedule.kind,
            "config": config or {}}
    save(path, "model", arrays, meta)


def load_model(path):
    """Returns ``(model, schedule, mask_set_or_None, meta)``."""
    header, arrays, _ = load(path, "model")
    meta = header["meta"]
    model = model_from_arrays(DenoiserConfig(**meta["denoiser"]), arrays)
    schedule = NoiseSchedule(arrays["schedule/alpha_bar"], meta.get("schedule_kind", "linear"))
    return model, schedule, mask_set_from_arrays(arrays), meta


def save_trainer(path, trainer):
    """Full resumable training state (config echoed in the header)."""
    save(path, "train_state", {"schedule/alpha_bar": trainer.schedule.alpha_bar},
         {"config": trainer.config.to_dict()}, state=trainer.state_dict())


def load_trainer(path, data=None):
    from .trainer import TrainConfig, Trainer

    header, _, state = load(path, "train_state")
    config = TrainConfig.from_dict(header["meta"]["config"])
    return Trainer.from_state(config, state, data)
