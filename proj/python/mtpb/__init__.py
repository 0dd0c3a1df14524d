"""Few-shot traffic forecasting with pretrained pattern banks and meta-learned transfer."""

import json as _json

from . import _mtpb
from ._mtpb import (
    City,
    StageError,
    adjusted_rand_index,
    historical_average,
    kmeans_cosine,
    load_city,
    reconstruct_graph,
    resample,
    row_stochastic,
    save_city,
    silhouette,
)

__all__ = [
    "City",
    "StageError",
    "adjusted_rand_index",
    "compute_metrics",
    "config",
    "config_hash",
    "generate_synthetic",
    "historical_average",
    "kmeans_cosine",
    "load_city",
    "reconstruct_graph",
    "resample",
    "row_stochastic",
    "run",
    "run_ablations",
    "run_ha_baseline",
    "save_city",
    "silhouette",
]


def _merge(base, patch):
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def config(profile="default", **sections):
    """Full configuration dict: a profile ("default" or "desk") patched with
    nested overrides, e.g. config("desk", meta={"alpha": 0.05})."""
    if profile == "desk":
        base = _json.loads(_mtpb.desk_config())
    elif profile == "default":
        base = _json.loads(_mtpb.default_config())
    else:
        raise ValueError(f"unknown profile {profile!r}")
    return _json.loads(_mtpb.normalize_config(_json.dumps(_merge(base, sections))))


def config_hash(cfg):
    return _mtpb.config_hash(_json.dumps(cfg))


def generate_synthetic(**spec):
    """Returns (cities, planted profile labels per city)."""
    return _mtpb.generate_synthetic(**spec)


def run(cfg, out_dir, until="evaluate", cache_dir="", verbose=False):
    """Runs the pipeline up to `until` and returns stage records and metrics."""
    return _mtpb.run_experiment(_json.dumps(cfg), str(out_dir), until, str(cache_dir), verbose)


def run_ha_baseline(cfg, out_dir):
    return _mtpb.run_ha_baseline(_json.dumps(cfg), str(out_dir))


def run_ablations(cfg, out_dir):
    return _mtpb.run_ablations(_json.dumps(cfg), str(out_dir))


def compute_metrics(predictions, truths, horizons_min, interval_minutes=5):
    return _mtpb.compute_metrics(list(predictions), list(truths), list(horizons_min), interval_minutes)
