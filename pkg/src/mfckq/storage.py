"""On-disk formats: versioned JSON for tables and sample stores, CSV for results.

Table and store files are JSON objects whose ``"magic"`` field is ``"MFCQ1"``;
the net itself is not stored, only the parameters that rebuild it
deterministically.  CSV files use LF line endings and ``%.17g`` floats so
reruns compare byte for byte.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .errors import MfcError
from .geometry import build_epsilon_net, EpsilonNet
from .kernels import KernelSpec
from .solver import QTable, SampleStore

MAGIC = "MFCQ1"
FORMAT_VERSION = 1


class LoadError(MfcError, ValueError):
    pass


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path, payload) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def net_params(net: EpsilonNet) -> dict:
    return {
        "num_states": net.num_states,
        "num_actions": net.num_actions,
        "epsilon": net.epsilon,
        "grid": net.grid,
        "support_mask": net.support_mask.astype(int).tolist(),
        "size": len(net),
        "covering_radius": net.covering_radius,
    }


def kernel_params(spec: KernelSpec) -> dict:
    return {"family": spec.family, "bandwidth": spec.bandwidth, "k": spec.k, "metric": spec.metric}


def rebuild_net(params: dict, max_points: int | None = None) -> EpsilonNet:
    kwargs = {} if max_points is None else {"max_points": max_points}
    net = build_epsilon_net(
        params["num_states"],
        params["num_actions"],
        params["epsilon"],
        np.array(params["support_mask"], dtype=bool),
        grid=params["grid"],
        certify_samples=0,
        **kwargs,
    )
    net.covering_radius = params.get("covering_radius", float("nan"))
    if len(net) != params["size"]:
        raise LoadError(f"rebuilt net has {len(net)} points, file says {params['size']}")
    return net


def _load(path, kind: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC or payload.get("kind") != kind:
        raise LoadError(f"{path} is not an {MAGIC} {kind} file")
    if payload.get("version") != FORMAT_VERSION:
        raise LoadError(f"unsupported {kind} format version {payload.get('version')}")
    return payload


def save_qtable(path, table: QTable) -> Path:
    return write_json(path, {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "kind": "qtable",
        "net": net_params(table.net),
        "kernel": kernel_params(table.kernel),
        "gamma": table.gamma,
        "deltas": [float(d) for d in table.deltas],
        "values": [float(v) for v in table.values],
    })


def load_qtable(path, net: EpsilonNet | None = None) -> QTable:
    payload = _load(path, "qtable")
    try:
        net = net if net is not None else rebuild_net(payload["net"])
        values = np.array(payload["values"], dtype=float)
        kernel = KernelSpec(**payload["kernel"])
        gamma, deltas = float(payload["gamma"]), list(payload["deltas"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{path}: malformed table ({exc})") from exc
    if values.shape != (len(net),):
        raise LoadError(f"{path}: {values.size} values for a net of {len(net)} points")
    return QTable(values, net, kernel, gamma, deltas)


def save_store(path, store: SampleStore, net: EpsilonNet) -> Path:
    return write_json(path, {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "kind": "samplestore",
        "net": net_params(net),
        "steps": store.steps,
        "covering_step": store.covering_step,
        "counts": store.counts.tolist(),
        "r_hat": [float(v) for v in store.r_hat],
        "phi_hat": store.phi_hat.tolist(),
    })


def load_store(path) -> tuple[SampleStore, dict]:
    payload = _load(path, "samplestore")
    try:
        store = SampleStore(
            np.array(payload["counts"], dtype=np.int64),
            np.array(payload["r_hat"], dtype=float),
            np.array(payload["phi_hat"], dtype=float).reshape(len(payload["counts"]), -1),
            payload["steps"],
            payload["covering_step"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{path}: malformed sample store ({exc})") from exc
    return store, payload["net"]
