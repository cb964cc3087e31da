"""Versioned parameter checkpoints (``.npz`` with a JSON header)."""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .gnn import FeatureScaler, GnnParams, Slp

FORMAT = "fxarb-gnn/1"


def to_bytes(params: GnnParams) -> bytes:
    meta = {
        "format": FORMAT,
        "mode": params.mode,
        "node_dim": params.node_dim,
        "edge_dim": params.edge_dim,
        "hidden": params.hidden,
        "layers": params.layers,
        "n_edge_convs": len(params.edge_convs),
        "target_scale": repr(float(params.target_scale)),
        "seed": params.seed,
        "degenerate": list(params.scaler.degenerate),
    }
    arrays = dict(params.tensors())
    s = params.scaler
    arrays.update(
        {"scaler.node_mean": s.node_mean, "scaler.node_std": s.node_std,
         "scaler.edge_mean": s.edge_mean, "scaler.edge_std": s.edge_std}
    )
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # fixed entry timestamps keep the bytes reproducible (np.savez stamps the clock)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), entry.getvalue())
    return buf.getvalue()


def from_bytes(blob: bytes) -> GnnParams:
    with np.load(io.BytesIO(blob)) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        a = {k: z[k].copy() for k in z.files if k != "__meta__"}
    scaler = FeatureScaler(a["scaler.node_mean"], a["scaler.node_std"], a["scaler.edge_mean"], a["scaler.edge_std"],
                           tuple(meta["degenerate"]))
    nodes = [Slp(a[f"node{k}.weight"], a[f"node{k}.bias"]) for k in range(1, meta["layers"] + 1)]
    edges = [Slp(a[f"edge{k}.weight"], a[f"edge{k}.bias"]) for k in range(1, meta["n_edge_convs"] + 1)]
    return GnnParams(meta["mode"], meta["node_dim"], meta["edge_dim"], meta["hidden"], nodes, edges,
                     Slp(a["head.weight"], a["head.bias"], "none"), scaler, float(meta["target_scale"]), meta["seed"])


def save(params: GnnParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def load(path) -> GnnParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
