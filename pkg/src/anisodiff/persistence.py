"""File formats: schedule/mixture/model JSON and provenance-stamped CSV.

Every output file starts with a provenance line
``# anisodiff <version> config=<sha256 prefix> seed=<seed>`` so runs can
be traced back to their configuration.  Numeric CSV cells use 17
significant digits for exact float round-tripping.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .flow_model import FlowModel
from .gmm import GaussianMixture
from .schedule import KnotSchedule, MatrixSchedule
from .subspaces import (
    Projector,
    ProjectorFamily,
    axis_family,
    build_dct_projectors,
    isotropic_family,
)

FORMAT_VERSION = "1"


def fmt(x) -> str:
    return f"{float(x):.17g}"


def config_hash(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def provenance_line(config_obj, seed) -> str:
    return f"# anisodiff {__version__} config={config_hash(config_obj)} seed={seed}"


def write_csv(path, columns, rows, header_lines=()):
    """Write a CSV with optional leading comment lines and 17-digit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(line.rstrip("\n") + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = [fmt(c) if isinstance(c, (int, float, np.floating)) else str(c) for c in row]
            fh.write(",".join(cells) + "\n")


def read_csv(path):
    """Read a CSV written by write_csv; returns (header_lines, columns, array of str cells)."""
    header, columns, rows = [], None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                header.append(line)
            elif columns is None:
                columns = line.split(",")
            elif line:
                rows.append(line.split(","))
    return header, columns, rows


def load_points_csv(path) -> np.ndarray:
    _, _, rows = read_csv(path)
    return np.array([[float(c) for c in row] for row in rows])


# ---------------------------------------------------------------------------
# projector families
# ---------------------------------------------------------------------------

def family_to_json(family: ProjectorFamily) -> dict:
    meta = dict(family.meta)
    kind = meta.get("kind", "explicit")
    if kind == "dct":
        return {"kind": "dct", "side": meta["side"], "low_side": meta["low_side"]}
    if kind == "isotropic":
        return {"kind": "isotropic", "dim": family.ambient_dim}
    if kind == "axis":
        return {"kind": "axis", "dim": family.ambient_dim, "split": meta["split"]}
    payload = {
        "kind": "explicit",
        "dim": family.ambient_dim,
        "blocks": [m.basis.tolist() for m in family.members],
    }
    if kind == "pca":
        payload["pca_meta"] = {
            "eigenvalues": meta.get("eigenvalues"),
            "tie_at_cut": meta.get("tie_at_cut"),
        }
    return payload


def family_from_json(payload: dict) -> ProjectorFamily:
    kind = payload["kind"]
    if kind == "dct":
        return build_dct_projectors(payload["side"], payload["low_side"])
    if kind == "isotropic":
        fam = isotropic_family(payload["dim"])
        return ProjectorFamily(fam.members, fam.ambient_dim, meta={"kind": "isotropic"})
    if kind == "axis":
        fam = axis_family(payload["dim"], payload["split"])
        return ProjectorFamily(fam.members, fam.ambient_dim, meta={"kind": "axis", "split": payload["split"]})
    if kind == "explicit":
        members = tuple(Projector(np.array(b)) for b in payload["blocks"])
        meta = {"kind": "explicit"}
        if "pca_meta" in payload:
            meta = {"kind": "pca", **payload["pca_meta"]}
        return ProjectorFamily(members, payload["dim"], meta=meta)
    raise ValueError(f"unknown family kind {kind!r}")


def build_family(spec: dict) -> ProjectorFamily:
    """Construct a family from a config section (same schema as family_to_json)."""
    return family_from_json(spec)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def _knots_to_lists(schedules) -> list:
    return [s.theta.tolist() for s in schedules]


def save_schedule(ms: MatrixSchedule, path, seed=0):
    payload = {
        "format_version": FORMAT_VERSION,
        "family_kind": ms.family.meta.get("kind", "explicit"),
        "family": family_to_json(ms.family),
        "ambient_dim": ms.family.ambient_dim,
        "horizon": ms.horizon,
        "floor": ms.per_subspace[0].floor,
        "nodes": ms.per_subspace[0].nodes.tolist(),
        "t_floor_fraction": ms.t_floor_fraction,
        "theta": {
            "default": _knots_to_lists(ms.per_subspace),
            "classes": (
                {str(k): _knots_to_lists(v) for k, v in ms.class_table.items()}
                if ms.class_table is not None
                else None
            ),
        },
        "provenance": {"tool": f"anisodiff {__version__}", "seed": seed},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))


def load_schedule(path) -> MatrixSchedule:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported schedule file version")
    family = family_from_json(payload["family"])
    nodes = np.array(payload["nodes"])
    floor = payload["floor"]
    horizon = payload["horizon"]

    def make(theta_list):
        return tuple(
            KnotSchedule(np.array(th), nodes, floor, horizon) for th in theta_list
        )

    class_table = None
    if payload["theta"]["classes"] is not None:
        class_table = {k: make(v) for k, v in payload["theta"]["classes"].items()}
    return MatrixSchedule(
        family,
        make(payload["theta"]["default"]),
        class_table=class_table,
        t_floor_fraction=payload.get("t_floor_fraction", 1e-4),
    )


# ---------------------------------------------------------------------------
# mixtures and models
# ---------------------------------------------------------------------------

def save_gmm(gm: GaussianMixture, path):
    payload = {
        "format_version": FORMAT_VERSION,
        "weights": gm.weights.tolist(),
        "means": gm.means.tolist(),
        "covariances": gm.covs.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_gmm(path) -> GaussianMixture:
    payload = json.loads(Path(path).read_text())
    return GaussianMixture(
        np.array(payload["weights"]),
        np.array(payload["means"]),
        np.array(payload["covariances"]),
    )


def save_model(model: FlowModel, path):
    payload = {
        "format_version": FORMAT_VERSION,
        "dim": model.dim,
        "horizon": model.horizon,
        "widths": list(model.widths),
        "params": model.params.tolist(),  # row-major per layer: W then b
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path) -> FlowModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported model file version")
    return FlowModel(
        dim=payload["dim"],
        horizon=payload["horizon"],
        widths=tuple(payload["widths"]),
        params=np.array(payload["params"]),
    )
