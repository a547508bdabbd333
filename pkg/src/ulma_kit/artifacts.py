"""Versioned JSON artifact files: codebooks, checkpoints, features, heads.

Every artifact is a JSON object carrying ``"version": 1``; loaders reject
any other version.  Serialization uses sorted keys and repr-exact floats,
so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import VersionMismatchError
from .model import EncoderConfig, EncoderModel, FineTuneHead
from .signal import FeatureMatrix
from .units import Codebook

ARTIFACT_VERSION = 1
CSV_HEADER = "# ulma-csv v1"


def _dump(path, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _load(path, kind: str) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("version") != ARTIFACT_VERSION:
        raise VersionMismatchError(
            f"{path}: version {obj.get('version')!r}, expected {ARTIFACT_VERSION}"
        )
    if obj.get("kind") != kind:
        raise VersionMismatchError(
            f"{path}: kind {obj.get('kind')!r}, expected {kind!r}"
        )
    return obj


def save_codebook(path, cb: Codebook) -> None:
    _dump(path, {
        "version": ARTIFACT_VERSION,
        "kind": "codebook",
        "stage": cb.stage,
        "k": cb.k,
        "dim": cb.dim,
        "seed": cb.seed,
        "centroids": cb.centroids.ravel().tolist(),
    })


def load_codebook(path) -> Codebook:
    obj = _load(path, "codebook")
    centroids = np.array(obj["centroids"], dtype=np.float64).reshape(
        obj["k"], obj["dim"]
    )
    return Codebook(centroids=centroids, k=obj["k"], dim=obj["dim"],
                    stage=obj["stage"], seed=obj["seed"])


def save_checkpoint(path, model: EncoderModel) -> None:
    cfg = model.config
    _dump(path, {
        "version": ARTIFACT_VERSION,
        "kind": "checkpoint",
        "config": {
            "sample_rate": cfg.sample_rate,
            "conv_layers": [list(layer) for layer in cfg.conv_layers],
            "d_model": cfg.d_model,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "d_ff": cfg.d_ff,
            "k_units": cfg.k_units,
            "proj_dim": cfg.proj_dim,
            "temperature": cfg.temperature,
            "mask_span": cfg.mask_span,
            "mask_start_prob": cfg.mask_start_prob,
            "max_pos": cfg.max_pos,
        },
        "rng_seed": model.rng_seed,
        "params": {
            name: {"shape": list(tensor.shape), "data": tensor.ravel().tolist()}
            for name, tensor in model.params.items()
        },
    })


def load_checkpoint(path) -> EncoderModel:
    obj = _load(path, "checkpoint")
    cfg_obj = dict(obj["config"])
    cfg_obj["conv_layers"] = tuple(tuple(l) for l in cfg_obj["conv_layers"])
    cfg = EncoderConfig(**cfg_obj)
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in obj["params"].items()
    }
    return EncoderModel(config=cfg, params=params, rng_seed=obj["rng_seed"])


def save_features(path, entries: list[tuple[str, FeatureMatrix]]) -> None:
    _dump(path, {
        "version": ARTIFACT_VERSION,
        "kind": "features",
        "entries": [
            {
                "id": clip_id,
                "hop_s": fm.hop_s,
                "rows": fm.values.shape[0],
                "cols": fm.values.shape[1],
                "data": fm.values.ravel().tolist(),
            }
            for clip_id, fm in entries
        ],
    })


def load_features(path) -> list[tuple[str, FeatureMatrix]]:
    obj = _load(path, "features")
    out = []
    for entry in obj["entries"]:
        values = np.array(entry["data"], dtype=np.float64).reshape(
            entry["rows"], entry["cols"]
        )
        out.append((entry["id"], FeatureMatrix(values, hop_s=entry["hop_s"])))
    return out


def save_head(path, head: FineTuneHead, classes: list[str]) -> None:
    _dump(path, {
        "version": ARTIFACT_VERSION,
        "kind": "head",
        "head_kind": head.kind,
        "classes": classes,
        "weights": {"shape": list(head.weights.shape),
                    "data": head.weights.ravel().tolist()},
        "bias": head.bias.tolist(),
    })


def load_head(path) -> tuple[FineTuneHead, list[str]]:
    obj = _load(path, "head")
    weights = np.array(obj["weights"]["data"], dtype=np.float64).reshape(
        obj["weights"]["shape"]
    )
    head = FineTuneHead(kind=obj["head_kind"], weights=weights,
                        bias=np.array(obj["bias"], dtype=np.float64))
    return head, list(obj["classes"])


def save_reward_head(path, weights: np.ndarray, bias: float, report: dict) -> None:
    _dump(path, {
        "version": ARTIFACT_VERSION,
        "kind": "reward-head",
        "weights": np.asarray(weights).ravel().tolist(),
        "bias": float(bias),
        "report": report,
    })


def load_reward_head(path) -> tuple[np.ndarray, float, dict]:
    obj = _load(path, "reward-head")
    return (np.array(obj["weights"], dtype=np.float64), obj["bias"],
            obj["report"])
