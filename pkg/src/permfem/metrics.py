"""Reconstruction metrics: normalised-signal MSE, centred Chamfer-L2, BadEdge%."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

CSV_HEADER = "case,signal_mse,cd_l2,bad_edge_pct,n_faces,n_active_edges"


class EmptyInterfaceError(ValueError):
    pass


def signal_mse(signals, target):
    """Mean of ``|S/S0 - S*/S0*|^2`` over the b>0 acquisitions."""
    mask = np.array([a.b > 0 for a in signals.protocol])
    if not mask.any():
        raise ValueError("no diffusion-weighted acquisitions")
    if np.any(signals.references == 0) or np.any(target.references == 0):
        raise ZeroDivisionError("zero b=0 reference")
    r = signals.normalized()[mask] - target.normalized()[mask]
    return float(np.mean(r.real ** 2 + r.imag ** 2))


def sample_interface_points(mesh, interface):
    faces = np.asarray(interface.faces if hasattr(interface, "faces") else interface)
    if len(faces) == 0:
        raise EmptyInterfaceError("empty interface")
    return mesh.face_centroids(np.sort(faces))


def _directed(src, dst):
    _, idx = cKDTree(dst).query(src)
    diff = src - dst[idx]
    return np.sum(diff * diff, axis=1)


def chamfer_l2(x, y):
    """Symmetric Chamfer distance with squared distances, after centring each set."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0 or len(y) == 0:
        raise EmptyInterfaceError("empty point set")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    return float(np.mean(_directed(x, y)) + np.mean(_directed(y, x)))


def edge_degrees(mesh, interface):
    """Number of interface faces on each edge that touches the interface."""
    faces = np.asarray(interface.faces if hasattr(interface, "faces") else interface, dtype=np.int64)
    fv = mesh.face_vertices[faces]
    pairs = np.concatenate([fv[:, [0, 1]], fv[:, [0, 2]], fv[:, [1, 2]]])
    if len(pairs) == 0:
        return np.zeros(0, dtype=np.int64)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    return counts


def bad_edge_pct(mesh, interface):
    """Percent of active edges whose interface-face count is not 2.

    Returns ``(percent, n_active_edges)``; with no active edge the percent is 0.
    """
    deg = edge_degrees(mesh, interface)
    if len(deg) == 0:
        return 0.0, 0
    return 100.0 * np.count_nonzero(deg != 2) / len(deg), len(deg)


@dataclass(frozen=True)
class MetricsReport:
    case: str
    signal_mse: float
    chamfer_l2: float  # nan when the reconstruction is empty
    bad_edge_pct: float
    n_faces: int
    n_active_edges: int
    cd_convention: str = "sum of directed means, centroid samples"

    @property
    def cd_status(self):
        return "undefined" if np.isnan(self.chamfer_l2) else "ok"

    def _fields(self):
        cd = "undefined" if np.isnan(self.chamfer_l2) else repr(float(self.chamfer_l2))
        return repr(float(self.signal_mse)), cd, repr(float(self.bad_edge_pct))

    def to_text(self):
        mse, cd, be = self._fields()
        return (f"case={self.case}\nsignal_mse={mse}\ncd_l2={cd}\n"
                f"cd_status={self.cd_status}\ncd_convention={self.cd_convention}\n"
                f"bad_edge_pct={be}\nn_faces={self.n_faces}\n"
                f"n_active_edges={self.n_active_edges}\n")

    def csv_row(self):
        mse, cd, be = self._fields()
        return f"{self.case},{mse},{cd},{be},{self.n_faces},{self.n_active_edges}"


def evaluate(mesh, interface, reference, signals=None, target=None, case="case"):
    mse = signal_mse(signals, target) if signals is not None else float("nan")
    try:
        cd = chamfer_l2(sample_interface_points(mesh, interface),
                        sample_interface_points(mesh, reference))
    except EmptyInterfaceError:
        cd = float("nan")
    be, active = bad_edge_pct(mesh, interface)
    return MetricsReport(case, mse, cd, be, len(interface.faces), active)
