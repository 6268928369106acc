"""Fit directories: hyperparameter points, raw draws, summaries and provenance.

Layout::

    hyper.csv        point, one column per theta, weight, log_marginal
    draws.bin        little-endian float64, C order, shape (n_draws, n_latent)
    draws.json       shape, dtype, latent index map, grid dims, draw_point
    summaries.csv    cell keys and log-rate quantiles (overdispersion excluded)
    provenance.json  versions, seed, tolerances, Newton diagnostics, wall time
    data.csv         copy of the fitted data
    spec.toml        the model spec used
"""

from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np
import scipy

from .data import TabulatedDataset, load_dataset, write_dataset
from .engine import QUANTILES, LatentGaussianModel, PosteriorResult, predict_log_rates
from .modelspec import ModelSpec, load_spec, spec_to_toml

DRAWS_DTYPE = "<f8"


class CorruptFitError(OSError):
    pass


def fmt(v) -> str:
    """Round-trippable text for CSV cells."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def cell_labels(dataset: TabulatedDataset, cells):
    keys = np.stack(np.unravel_index(np.asarray(cells), dataset.dims), axis=1)
    lab = [dataset.labels[d] for d in ("region", "age", "year", "cause")]
    return [[lab[j][k[j]] for j in range(4)] for k in keys]


def quantile_header(probs):
    return [f"q{p:g}" for p in probs]


def versions() -> dict:
    from . import __version__
    return {"srsmort": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def write_fit(result: PosteriorResult, out_dir, provenance: dict | None = None, probs=QUANTILES) -> Path:
    model = result.model
    if model.dataset is None or model.spec is None:
        raise ValueError("only fits built from a dataset and spec can be written")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = model.dataset
    write_dataset(ds, out / "data.csv")
    (out / "spec.toml").write_text(spec_to_toml(model.spec))

    write_csv(out / "hyper.csv", ["point", *model.hyper_names, "weight", "log_marginal"],
              [[i, *result.thetas[i], result.weights[i], result.log_marginals[i]] for i in range(len(result.weights))])

    draws = np.ascontiguousarray(result.draws, dtype=DRAWS_DTYPE)
    (out / "draws.bin").write_bytes(draws.tobytes(order="C"))
    header = {
        "dtype": "float64",
        "byteorder": "little",
        "order": "C",
        "shape": list(draws.shape),
        "dims": list(ds.dims),
        "latent_index": {k: [s.start, s.stop] for k, s in model.realization.latent_index.items()},
        "hyper_names": model.hyper_names,
        "draw_point": result.draw_point.tolist(),
    }
    (out / "draws.json").write_text(json.dumps(header, indent=1) + "\n")

    pred = predict_log_rates(result, include_epsilon=False, probs=probs)
    labels = cell_labels(ds, pred.cells)
    write_csv(out / "summaries.csv", ["region", "age", "year", "cause", *quantile_header(probs)],
              [[*labels[i], *pred.quantiles[:, i]] for i in range(len(pred.cells))])

    prov = dict(result.provenance)
    prov["versions"] = versions()
    prov.update(provenance or {})
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, default=str) + "\n")
    return out


def read_draws(fit_dir):
    """Draw matrix and header; validates the byte length against the header."""
    d = Path(fit_dir)
    try:
        header = json.loads((d / "draws.json").read_text())
    except FileNotFoundError:
        raise CorruptFitError(f"{d}: missing draws.json") from None
    except json.JSONDecodeError as exc:
        raise CorruptFitError(f"{d / 'draws.json'}: invalid JSON ({exc})") from None
    try:
        shape = tuple(int(v) for v in header["shape"])
    except (KeyError, TypeError, ValueError):
        raise CorruptFitError(f"{d / 'draws.json'}: no valid 'shape' entry") from None
    path = d / "draws.bin"
    if not path.exists():
        raise CorruptFitError(f"{path}: missing")
    expected = 8 * shape[0] * shape[1]
    size = path.stat().st_size
    if size != expected:
        raise CorruptFitError(f"{path}: corrupt draw file, expected {expected} bytes for shape {shape}, found {size}")
    draws = np.fromfile(path, dtype=DRAWS_DTYPE).reshape(shape)
    return draws, header


def load_fit(fit_dir) -> PosteriorResult:
    """Rebuild a :class:`PosteriorResult` (without per-point modes) from a fit directory."""
    d = Path(fit_dir)
    if not d.is_dir():
        raise CorruptFitError(f"{d}: fit directory not found")
    for name in ("data.csv", "spec.toml", "hyper.csv", "draws.json", "draws.bin"):
        if not (d / name).exists():
            raise CorruptFitError(f"{d}: missing {name}")
    ds = load_dataset(d / "data.csv")
    spec: ModelSpec = load_spec(d / "spec.toml")
    model = LatentGaussianModel.from_spec(ds, spec)
    draws, header = read_draws(d)
    if draws.shape[1] != model.n_latent:
        raise CorruptFitError(f"{d}: draws have {draws.shape[1]} latent columns, the model has {model.n_latent}")
    with (d / "hyper.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:-2]
    if names != model.hyper_names:
        raise CorruptFitError(f"{d}: hyper.csv columns {names} do not match the model {model.hyper_names}")
    body = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))
    thetas = body[:, 1:-2]
    weights = body[:, -2]
    draw_point = np.asarray(header.get("draw_point", np.zeros(draws.shape[0])), dtype=np.int64)
    prov = {}
    if (d / "provenance.json").exists():
        prov = json.loads((d / "provenance.json").read_text())
    return PosteriorResult(model, thetas, weights, body[:, -1], np.zeros((0, model.n_latent)), draws,
                           draw_point, prov)
