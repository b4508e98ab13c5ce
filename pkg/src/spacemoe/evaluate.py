"""Inference passes over a dataset: predictions, correlation metrics and routing exports."""
from __future__ import annotations

import json
import os

import numpy as np

from .decoder import export_profile_routing
from .encoder import export_routing_frequencies
from .metrics import pearson_per_track, summarize_pearson
from .objectives import poisson_nll, rate


def predict(model, dataset, batch_size=16, traces=None, record=None):
    """Eval-mode Poisson rates per species, each [n, C_m, L]."""
    out = []
    for m in range(dataset.schema.n_species):
        xs = dataset.x[m]
        chunks = []
        for i in range(0, xs.shape[0], batch_size):
            o, traces = model.forward(xs[i:i + batch_size], m, train=False, traces=traces, record=record)
            chunks.append(rate(o).data)
        out.append(np.concatenate(chunks))
    return out


def dataset_poisson(model, dataset, batch_size=16):
    """Poisson NLL averaged over every prediction in the dataset (all species pooled)."""
    preds = predict(model, dataset, batch_size)
    total = sum(poisson_nll(p.astype(np.float64), t).data.item() * p.size
                for p, t in zip(preds, dataset.targets))
    return total / sum(p.size for p in preds)


def correlation_metrics(preds, dataset):
    per_track, entries = [], []
    for m, sp in enumerate(dataset.schema.species):
        rs = pearson_per_track(preds[m], dataset.targets[m])
        for t, r in zip(dataset.schema.tracks[sp], rs):
            per_track.append(r)
            entries.append({"track_id": t.track_id, "species": sp,
                            "assay_type": t.assay_type, "pearson": r})
    summary = summarize_pearson(per_track, [e["assay_type"] for e in entries])
    return {"per_track": entries, **summary}


def mean_baseline(dataset, reference=None):
    """Constant per-track predictions equal to the track mean of ``reference`` (default: the dataset)."""
    ref = reference or dataset
    return [np.broadcast_to(ref.targets[m].mean(axis=(0, 2))[None, :, None], dataset.targets[m].shape).copy()
            for m in range(dataset.schema.n_species)]


def write_metrics(path, metrics):
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def routing_pass(model, dataset, batch_size=16):
    """Encoder traces and decoder gate records over ``dataset`` in eval mode."""
    traces = model.new_traces()
    record = []
    predict(model, dataset, batch_size, traces=traces, record=record)
    return traces, record


def export_routing(model, dataset, out_dir, batch_size=16):
    os.makedirs(out_dir, exist_ok=True)
    traces, record = routing_pass(model, dataset, batch_size)
    enc = export_routing_frequencies(traces, os.path.join(out_dir, "routing_frequencies.csv"),
                                     dataset.schema.species)
    dec = export_profile_routing(record, dataset.schema, model.cfg.K,
                                 os.path.join(out_dir, "profile_routing.csv"))
    return enc, dec
