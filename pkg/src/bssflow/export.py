"""Delimited-text and GeoJSON exports of factor models."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .efa import EfaModel
from .ingest import StationRegistry

LOADING_THRESHOLD = 0.2


def factor_labels(k: int) -> list[str]:
    return [f"F{i + 1}" for i in range(k)]


def loading_map(
    model: EfaModel,
    registry: StationRegistry,
    factor: int,
    threshold: float = LOADING_THRESHOLD,
) -> dict:
    """GeoJSON FeatureCollection of stations with ``|loading| > threshold`` on ``factor``.

    ``factor`` is 0-based. Coordinates follow RFC 7946 order (longitude,
    latitude).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if not 0 <= factor < model.n_factors:
        raise IndexError(f"factor {factor} out of range for K={model.n_factors}")
    features = []
    for sid, value in zip(model.station_ids, model.loadings[:, factor]):
        if abs(value) <= threshold:
            continue
        st = registry[sid]
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [st.longitude, st.latitude]},
            "properties": {"station_id": sid, "loading": float(value)},
        })
    return {"type": "FeatureCollection", "features": features}


def write_loading_maps(model: EfaModel, registry: StationRegistry, out_dir,
                       threshold: float = LOADING_THRESHOLD) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(model.n_factors):
        path = out / f"loading_map_F{k + 1}.geojson"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(loading_map(model, registry, k, threshold), fh, indent=1)
            fh.write("\n")
        paths.append(path)
    return paths


def validate_feature_collection(doc: dict) -> None:
    """Raise ``ValueError`` unless ``doc`` is a FeatureCollection of WGS84 points."""
    if doc.get("type") != "FeatureCollection" or not isinstance(doc.get("features"), list):
        raise ValueError("not a FeatureCollection")
    for feat in doc["features"]:
        if feat.get("type") != "Feature":
            raise ValueError("member is not a Feature")
        geom = feat.get("geometry") or {}
        coords = geom.get("coordinates")
        if geom.get("type") != "Point" or not isinstance(coords, list) or len(coords) != 2:
            raise ValueError("feature geometry is not a Point")
        lon, lat = coords
        if not (-180 <= lon <= 180 and -90 <= lat <= 90):
            raise ValueError(f"coordinates out of range: {coords}")
        if not isinstance(feat.get("properties"), dict):
            raise ValueError("feature lacks properties")


def write_efa(model: EfaModel, out_dir) -> dict[str, Path]:
    """Write loadings, uniqueness, scores, PA curves and a metadata JSON block."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = factor_labels(model.n_factors)
    paths = {name: out / fname for name, fname in [
        ("loadings", "loadings.csv"), ("uniqueness", "uniqueness.csv"), ("scores", "scores.csv"),
        ("parallel", "pa_eigenvalues.csv"), ("meta", "efa_meta.json"),
    ]}
    kw = {"index": False, "lineterminator": "\n"}

    loadings = pd.DataFrame(model.loadings, columns=labels)
    loadings.insert(0, "station_id", list(model.station_ids))
    loadings.to_csv(paths["loadings"], **kw)
    pd.DataFrame({"station_id": list(model.station_ids), "uniqueness": model.uniqueness}).to_csv(
        paths["uniqueness"], **kw)
    scores = pd.DataFrame(model.scores, columns=labels)
    scores.insert(0, "bin_start", pd.DatetimeIndex(model.bin_start).strftime("%Y-%m-%dT%H:%M"))
    scores.to_csv(paths["scores"], **kw)
    pa = model.parallel
    pd.DataFrame({
        "rank": np.arange(1, pa.data_eigenvalues.size + 1),
        "data": pa.data_eigenvalues,
        "reference": pa.reference_eigenvalues,
    }).to_csv(paths["parallel"], **kw)

    cfg = model.config
    meta = {
        "n_factors": model.n_factors,
        "n_variables": len(model.station_ids),
        "n_observations": int(model.scores.shape[0]),
        "explained_variance": model.explained_variance.tolist(),
        "total_variance_share": model.total_variance_share,
        "config": {
            "n_factors": cfg.n_factors, "pa_replicates": cfg.pa_replicates,
            "pa_quantile": cfg.pa_quantile, "seed": cfg.seed,
            "kaiser_normalize": cfg.kaiser_normalize,
        },
        "parallel_analysis": {"retained": pa.retained, "replicates": pa.replicates,
                              "quantile": pa.quantile},
        "convergence": {
            "minres": None if model.minres is None else {
                "converged": model.minres.converged, "iterations": model.minres.n_iter,
                "objective": model.minres.objective, "heywood": list(model.minres.heywood),
            },
            "varimax": None if model.varimax is None else {
                "converged": model.varimax.converged, "sweeps": model.varimax.n_sweeps,
                "criterion": model.varimax.criterion,
            },
        },
    }
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
