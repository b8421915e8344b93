"""Flat named-tensor files for checkpoints and datasets.

Binary layout (all integers and floats little-endian):

    magic   4 bytes  b"FGT1"
    count   uint32
    per tensor, in order:
        name_len  uint32
        name      utf-8 bytes
        ndim      uint32
        shape     ndim x uint64
        data      float64 x prod(shape), C order

Checkpoints store model parameters under ``model/<name>`` and the clustering
state under ``cluster/<field>``; non-numeric state fields (algorithm kind,
covariance layout) travel as single-element code tensors.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .clustering import ClusterState

MAGIC = b"FGT1"

KIND_CODES = {"kmeans": 0, "fuzzy": 1, "gmm": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
COV_CODES = {"spherical": 0, "diagonal": 1, "full": 2, "tied": 3}
COV_NAMES = {v: k for k, v in COV_CODES.items()}


def write_tensors(path, tensors: dict[str, np.ndarray]):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            array = np.ascontiguousarray(array, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", array.ndim))
            for dim in array.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(array.tobytes(order="C"))


def read_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a named-tensor file (bad magic)")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            n_values = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_values), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
        return out


def cluster_state_tensors(state: ClusterState) -> dict[str, np.ndarray]:
    out = {
        "cluster/kind_code": np.array([KIND_CODES[state.kind]], dtype=np.float64),
        "cluster/centroids": state.centroids,
    }
    if state.kind == "gmm":
        out["cluster/covtype_code"] = np.array([COV_CODES[state.covariance_type]], dtype=np.float64)
        out["cluster/covariances"] = state.covariances
        out["cluster/weights"] = state.weights
    if state.kind == "fuzzy":
        out["cluster/fuzzifier"] = np.array([state.fuzzifier], dtype=np.float64)
    if state.membership is not None:
        out["cluster/membership"] = state.membership
    return out


def cluster_state_from_tensors(tensors: dict[str, np.ndarray]) -> ClusterState:
    kind = KIND_NAMES[int(tensors["cluster/kind_code"][0])]
    state = ClusterState(
        kind=kind,
        centroids=tensors["cluster/centroids"],
        covariances=tensors.get("cluster/covariances"),
        weights=tensors.get("cluster/weights"),
        fuzzifier=float(tensors["cluster/fuzzifier"][0]) if kind == "fuzzy" else None,
        covariance_type=COV_NAMES[int(tensors["cluster/covtype_code"][0])] if kind == "gmm" else "full",
    )
    if "cluster/membership" in tensors:
        state.membership = tensors["cluster/membership"].copy()
    return state


def write_checkpoint(path, model_state: dict[str, np.ndarray], cluster_state: ClusterState):
    tensors = {f"model/{name}": value for name, value in model_state.items()}
    tensors.update(cluster_state_tensors(cluster_state))
    write_tensors(path, tensors)


def read_checkpoint(path):
    tensors = read_tensors(path)
    model_state = {
        name[len("model/") :]: value for name, value in tensors.items() if name.startswith("model/")
    }
    return model_state, cluster_state_from_tensors(tensors)
