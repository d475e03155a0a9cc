"""Model checkpoints as ``.npz`` archives.

The archive holds a JSON ``meta`` record (format name, schema version, layer
specs) next to the raw float64 arrays, so a save/load round trip is
bit-exact. Worker sub-model masks may ride along.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import LayerSpec, NetworkModel, WeightStore
from .neuron import NeuronKind
from .partition import SubModelMask

FORMAT = "neuronsim-checkpoint"
SCHEMA_VERSION = 1


def _layer_record(spec: LayerSpec):
    return {"units": spec.units, "activation": spec.activation.value,
            "neuron": spec.neuron_kind.tag, "retention": spec.neuron_kind.retention,
            "normalize": spec.normalize}


def save_checkpoint(path, model: NetworkModel, masks=None, extra=None):
    meta = {"format": FORMAT, "schema_version": SCHEMA_VERSION, "seed": model.seed,
            "use_bias": model.use_bias, "layers": [_layer_record(s) for s in model.layers],
            "masks": 0, "extra": extra or {}}
    arrays = {}
    st = model.store
    for l in range(len(st.weights)):
        arrays[f"w{l}"] = st.weights[l]
        arrays[f"b{l}"] = st.biases[l]
        arrays[f"vw{l}"] = st.vel_weights[l]
        arrays[f"vb{l}"] = st.vel_biases[l]
    masks = [m for m in (masks or []) if m is not None]
    meta["masks"] = len(masks)
    for k, mask in enumerate(masks):
        for l, r in enumerate(mask.retain):
            arrays[f"m{k}_{l}"] = r
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Returns ``(model, masks, meta)``."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from exc
    if "meta" not in arrays:
        raise FormatError(f"{path}: checkpoint has no meta record")
    meta = json.loads(arrays["meta"].tobytes().decode())
    if meta.get("format") != FORMAT:
        raise FormatError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema version {meta.get('schema_version')}")
    model = NetworkModel(seed=meta["seed"], use_bias=meta["use_bias"])
    model.layers = [
        LayerSpec(r["units"], r["activation"],
                  NeuronKind(r["neuron"], r["retention"]), r["normalize"])
        for r in meta["layers"]]
    n_pairs = len(model.layers) - 1
    try:
        model.store = WeightStore([arrays[f"w{l}"] for l in range(n_pairs)],
                                  [arrays[f"b{l}"] for l in range(n_pairs)],
                                  [arrays[f"vw{l}"] for l in range(n_pairs)],
                                  [arrays[f"vb{l}"] for l in range(n_pairs)])
        masks = [SubModelMask([arrays[f"m{k}_{l}"] for l in range(n_pairs)])
                 for k in range(meta["masks"])]
    except KeyError as exc:
        raise FormatError(f"{path}: missing array {exc}") from None
    return model, masks, meta
