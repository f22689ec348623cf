"""Relation files.

Binary form: one ``.npz`` holding the lattice arrays, the explicit event
arrays and a JSON header (spec hash, provenance, tolerances, sampling
parameters).  CSV form: ``#``-prefixed header lines followed by one event per
row with columns ``x[n], xi[n], y[n], zeta[n], t``; lattice events are
enumerated.  Imports reject files written for another manifold.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .manifold import ManifoldSpec
from .relation import BrokenRelation, Tolerances

CSV_EVENT_LIMIT = 5_000_000


def _header(rel: BrokenRelation) -> dict:
    return {"spec_hash": rel.spec_hash, "provenance": rel.provenance, "params": rel.params,
            "tol": [rel.tol.space, rel.tol.angle, rel.tol.time], "dimension": rel.dimension}


def _check_header(head: dict, spec: ManifoldSpec):
    if head.get("spec_hash") != spec.spec_hash:
        raise DataError(f"relation file was written for spec {head.get('spec_hash')}, "
                        f"not {spec.spec_hash}")
    if int(head.get("dimension", spec.dimension)) != spec.dimension:
        raise DataError("dimension mismatch")


def save_relation(rel: BrokenRelation, path) -> Path:
    path = Path(path)
    arrays = {"mesh_points": rel.mesh_points, "node_pos": rel.node_pos, "node_base": rel.node_base,
              "node_depth": rel.node_depth, "leg_indptr": rel.leg_indptr, "leg_mesh": rel.leg_mesh,
              "leg_len": rel.leg_len, "leg_dir": rel.leg_dir, "ev_x": rel.ev_x, "ev_xi": rel.ev_xi,
              "ev_y": rel.ev_y, "ev_zeta": rel.ev_zeta, "ev_t": rel.ev_t}
    if rel.ev_scatter is not None:
        arrays["ev_scatter"] = np.asarray(rel.ev_scatter, float)
    if rel.ev_s1 is not None:
        arrays["ev_s1"] = np.asarray(rel.ev_s1, float)
    with open(path, "wb") as f:
        np.savez(f, header=np.array(json.dumps(_header(rel), sort_keys=True, default=float)), **arrays)
    return path


def load_relation(path, spec: ManifoldSpec) -> BrokenRelation:
    with np.load(path, allow_pickle=False) as z:
        head = json.loads(str(z["header"]))
        _check_header(head, spec)
        a = {k: z[k] for k in z.files if k != "header"}
    events = {"x": a["ev_x"], "xi": a["ev_xi"], "y": a["ev_y"], "zeta": a["ev_zeta"], "t": a["ev_t"],
              "scatter": a.get("ev_scatter"), "s1": a.get("ev_s1")}
    _validate(spec, events)
    return BrokenRelation(spec, Tolerances(*head["tol"]), provenance=head["provenance"],
                          params=head["params"], mesh_points=a["mesh_points"], node_pos=a["node_pos"],
                          node_base=a["node_base"], node_depth=a["node_depth"],
                          leg_indptr=a["leg_indptr"], leg_mesh=a["leg_mesh"], leg_len=a["leg_len"],
                          leg_dir=a["leg_dir"], events=events)


def _validate(spec: ManifoldSpec, ev: dict):
    """Entry inward, exit outward, positive times."""
    if len(ev["t"]) == 0:
        return
    cin = spec.inner(ev["x"], ev["xi"], spec.normal_field(ev["x"]))
    cout = spec.inner(ev["y"], ev["zeta"], spec.normal_field(ev["y"]))
    bad = (cin <= 0) | (cout >= 0) | (ev["t"] <= 0) | ~np.isfinite(ev["t"])
    if np.any(bad):
        raise DataError(f"{int(bad.sum())} events violate relation invariants")


def export_events_csv(rel: BrokenRelation, path, limit: int = CSV_EVENT_LIMIT) -> Path:
    """Write all events (lattice pairs enumerated) as CSV rows."""
    if rel.n_events == 0:
        raise DataError("empty relation")
    if rel.n_events > limit:
        raise DataError(f"{rel.n_events} events exceed the CSV limit {limit}; use the binary form")
    x, xi, y, zeta, t = rel.explicit_arrays()
    n = rel.dimension
    path = Path(path)
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(_header(rel), sort_keys=True, default=float) + "\n")
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(n)] + [f"xi{i}" for i in range(n)]
                   + [f"y{i}" for i in range(n)] + [f"zeta{i}" for i in range(n)] + ["t"])
        for row in np.column_stack([x, xi, y, zeta, t]):
            w.writerow([repr(float(v)) for v in row])
    return path


def read_events_csv(path):
    """``(header, array)`` from an event CSV."""
    with open(path) as f:
        first = f.readline()
        if not first.startswith("#"):
            raise DataError("missing header line")
        head = json.loads(first[1:])
        f.readline()
        data = np.loadtxt(f, delimiter=",", ndmin=2)
    return head, data


def import_events_csv(path, spec: ManifoldSpec) -> BrokenRelation:
    head, data = read_events_csv(path)
    _check_header(head, spec)
    n = spec.dimension
    if data.size and data.shape[1] != 4 * n + 1:
        raise DataError(f"expected {4 * n + 1} columns, found {data.shape[1]}")
    data = data.reshape(-1, 4 * n + 1)
    ev = {"x": data[:, :n], "xi": data[:, n:2 * n], "y": data[:, 2 * n:3 * n],
          "zeta": data[:, 3 * n:4 * n], "t": data[:, 4 * n]}
    _validate(spec, ev)
    return BrokenRelation(spec, Tolerances(*head["tol"]), provenance=head["provenance"],
                          params=head["params"], events=ev)


def file_digest(path) -> str:
    import hashlib
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
