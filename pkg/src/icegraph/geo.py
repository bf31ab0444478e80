"""Haversine-weighted graph construction and collective normalization.

Every echogram record becomes a fully connected undirected graph over its
columns, with edge weights inversely proportional to great-circle distance
on the unit sphere. Two weighting modes exist: ``standard`` applies the
textbook haversine distance (square root inside the arcsin), while
``paper_verbatim`` evaluates 1 / (2 arcsin(hav_sum)) with no square root.
The standard form is the default because only it is a metric; the verbatim
form is kept selectable for exact reproducibility of the printed variant.

No Earth radius appears anywhere: weights feed a collective min-max
normalization, which cancels any constant scale factor.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, GeoDomainError, RecordRejected

DISTANCE_MODES = ("standard", "paper_verbatim")
DEFAULT_WEIGHT_CAP = 1e9

FEATURE_YEARS = tuple(range(1998, 2003))  # deepest feature layer first
TARGET_YEARS = tuple(range(2003, 2013))  # column j of the target matrix
FEATURE_NAMES = ("latitude", "longitude", "elevation", "thickness_px")

N_FEATURE_LAYERS = len(FEATURE_YEARS)
N_TARGET_LAYERS = len(TARGET_YEARS)
MIN_LAYERS = N_FEATURE_LAYERS + N_TARGET_LAYERS


@dataclass(frozen=True)
class GeoCoordinate:
    latitude: float
    longitude: float
    elevation: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ConfigError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ConfigError(f"longitude {self.longitude} outside [-180, 180]")


@dataclass
class AdjacencyMatrix:
    """Symmetric nonnegative edge weights with a zero diagonal."""

    weights: np.ndarray
    normalization: str = "raw"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ConfigError(f"adjacency must be square, got shape {w.shape}")
        self.weights = w

    @property
    def n_nodes(self):
        return self.weights.shape[0]


@dataclass
class FeatureGraph:
    """One year's node features over the shared flight-track adjacency."""

    year: int
    features: np.ndarray  # (N, 4): latitude, longitude, elevation, thickness_px
    adjacency: AdjacencyMatrix

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(FEATURE_NAMES):
            raise ConfigError(f"features must be (N, 4), got shape {x.shape}")
        if x.shape[0] != self.adjacency.n_nodes:
            raise ConfigError(
                f"{x.shape[0]} feature rows vs {self.adjacency.n_nodes} graph nodes"
            )
        self.features = x

    @property
    def n_nodes(self):
        return self.features.shape[0]


@dataclass
class TemporalGraphSequence:
    """Five chronological feature graphs plus the ten-year target matrix.

    All five graphs reference one AdjacencyMatrix (same flight columns).
    Targets stay in raw pixels; feature normalization never touches them.
    """

    record_id: str
    graphs: list[FeatureGraph] = field(repr=False)
    targets: np.ndarray = field(repr=False)  # (N, 10), year 2003 + j in column j

    def __post_init__(self):
        if len(self.graphs) != N_FEATURE_LAYERS:
            raise ConfigError(f"expected {N_FEATURE_LAYERS} graphs, got {len(self.graphs)}")
        years = tuple(g.year for g in self.graphs)
        if years != FEATURE_YEARS:
            raise ConfigError(f"graphs must be ordered {FEATURE_YEARS}, got {years}")
        shared = self.graphs[0].adjacency
        if any(g.adjacency is not shared for g in self.graphs):
            raise ConfigError("all graphs in a sequence must share one adjacency")
        y = np.asarray(self.targets, dtype=np.float64)
        if y.shape != (shared.n_nodes, N_TARGET_LAYERS):
            raise ConfigError(
                f"targets must be ({shared.n_nodes}, {N_TARGET_LAYERS}), got {y.shape}"
            )
        self.targets = y

    @property
    def adjacency(self):
        return self.graphs[0].adjacency

    @property
    def n_nodes(self):
        return self.graphs[0].n_nodes


# ---------------------------------------------------------------------------
# distances and edge weights


def _hav(theta):
    return np.sin(theta / 2.0) ** 2


def haversine_central_angle(a: GeoCoordinate, b: GeoCoordinate) -> float:
    """Central angle between two coordinates on the unit sphere, in [0, pi]."""
    phi_a, phi_b = math.radians(a.latitude), math.radians(b.latitude)
    lam_a, lam_b = math.radians(a.longitude), math.radians(b.longitude)
    h = _hav(phi_b - phi_a) + math.cos(phi_a) * math.cos(phi_b) * _hav(lam_b - lam_a)
    return 2.0 * math.asin(math.sqrt(min(max(h, 0.0), 1.0)))


def _check_mode(mode):
    if mode not in DISTANCE_MODES:
        raise ConfigError(f"distance mode must be one of {DISTANCE_MODES}, got {mode!r}")


def edge_weight(
    a: GeoCoordinate,
    b: GeoCoordinate,
    mode: str = "standard",
    cap: float = DEFAULT_WEIGHT_CAP,
) -> float:
    """Inverse great-circle weight of the edge between two coordinates.

    Coincident coordinates would divide by zero; the weight is clamped to
    `cap` and a warning recorded so the graph stays fully connected.
    """
    _check_mode(mode)
    if mode == "standard":
        denom = haversine_central_angle(a, b)
    else:
        phi_a, phi_b = math.radians(a.latitude), math.radians(b.latitude)
        lam_a, lam_b = math.radians(a.longitude), math.radians(b.longitude)
        h = _hav(phi_b - phi_a) + math.cos(phi_a) * math.cos(phi_b) * _hav(lam_b - lam_a)
        if h > 1.0:
            raise GeoDomainError(
                f"verbatim-mode arcsin argument {h} > 1 for coordinates {a} and {b}"
            )
        denom = 2.0 * math.asin(h)
    if denom == 0.0:
        warnings.warn(
            f"coincident coordinates {a} and {b}: edge weight capped at {cap:g}",
            RuntimeWarning,
            stacklevel=2,
        )
        return cap
    return 1.0 / denom


def build_adjacency(
    coords,
    mode: str = "standard",
    cap: float = DEFAULT_WEIGHT_CAP,
) -> AdjacencyMatrix:
    """Fully connected symmetric adjacency over a coordinate track.

    `coords` is an (N, >=2) array of latitude, longitude[, elevation] rows
    or a sequence of GeoCoordinate. All pairwise weights are edge weights
    in the requested mode; the diagonal stays zero (no self-edges).
    """
    _check_mode(mode)
    arr = _coords_array(coords)
    n = arr.shape[0]
    lat = np.radians(arr[:, 0])
    lon = np.radians(arr[:, 1])
    h = (
        _hav(lat[None, :] - lat[:, None])
        + np.cos(lat)[:, None] * np.cos(lat)[None, :] * _hav(lon[None, :] - lon[:, None])
    )
    off = ~np.eye(n, dtype=bool)
    if mode == "standard":
        denom = 2.0 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    else:
        bad = off & (h > 1.0)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise GeoDomainError(
                f"verbatim-mode arcsin argument {h[i, j]} > 1 for node pair ({i}, {j})"
            )
        denom = 2.0 * np.arcsin(np.clip(h, None, 1.0))
    weights = np.zeros((n, n))
    coincident = off & (denom == 0.0)
    if coincident.any():
        pairs = np.argwhere(coincident)
        warnings.warn(
            f"{len(pairs) // 2} coincident column pair(s) (first: "
            f"{tuple(pairs[0])}): edge weight capped at {cap:g}",
            RuntimeWarning,
            stacklevel=2,
        )
        weights[coincident] = cap
    ok = off & (denom > 0.0)
    weights[ok] = 1.0 / denom[ok]
    # force exact symmetry against floating-point asymmetry in the trig path
    weights = (weights + weights.T) / 2.0
    np.fill_diagonal(weights, 0.0)
    return AdjacencyMatrix(weights=weights, normalization="raw")


def _coords_array(coords):
    if isinstance(coords, np.ndarray):
        arr = np.asarray(coords, dtype=np.float64)
    else:
        coords = list(coords)
        if coords and isinstance(coords[0], GeoCoordinate):
            arr = np.array(
                [[c.latitude, c.longitude, c.elevation] for c in coords], dtype=np.float64
            )
        else:
            arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ConfigError(f"coordinates must be (N, >=2), got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# collective normalization


def normalize_adjacency_collection(matrices) -> tuple[float, float]:
    """Min-max normalize every off-diagonal weight across a whole collection.

    The min and max are global over all matrices, so a matrix that does not
    contain the global extremes will not span [0, 1] on its own. Returns the
    (min, max) used, for audit. Matrices are updated in place.
    """
    matrices = list(matrices)
    if not matrices:
        raise ConfigError("cannot normalize an empty adjacency collection")
    for m in matrices:
        if m.normalization != "raw":
            raise ContractError("adjacency collection already normalized")
    lo = math.inf
    hi = -math.inf
    for m in matrices:
        off = ~np.eye(m.n_nodes, dtype=bool)
        vals = m.weights[off]
        if vals.size:
            lo = min(lo, float(vals.min()))
            hi = max(hi, float(vals.max()))
    if not math.isfinite(lo):
        raise ConfigError("adjacency collection has no off-diagonal entries")
    for m in matrices:
        off = ~np.eye(m.n_nodes, dtype=bool)
        if hi == lo:
            m.weights[off] = 1.0
        else:
            m.weights[off] = (m.weights[off] - lo) / (hi - lo)
        np.fill_diagonal(m.weights, 0.0)
        m.normalization = "minmax"
    if hi == lo:
        warnings.warn(
            "degenerate adjacency collection (max == min): all weights set to 1",
            RuntimeWarning,
            stacklevel=2,
        )
    return lo, hi


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension mean and population sigma used for z-scoring, kept for audit."""

    mean: np.ndarray
    std: np.ndarray
    degenerate_dims: tuple[int, ...] = ()


def normalize_features_collection(sequences) -> FeatureStats:
    """Z-score the four node-feature dimensions over every graph of every sequence.

    Statistics pool all nodes of all five yearly graphs of all sequences
    (population sigma). A dimension with zero spread is set to zero with a
    warning. Targets are never touched. Sequences are updated in place.
    """
    sequences = list(sequences)
    if not sequences:
        raise ConfigError("cannot normalize an empty sequence collection")
    stacked = np.concatenate(
        [g.features for s in sequences for g in s.graphs], axis=0
    )
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)  # population sigma
    degenerate = tuple(int(d) for d in np.nonzero(std == 0.0)[0])
    if degenerate:
        names = ", ".join(FEATURE_NAMES[d] for d in degenerate)
        warnings.warn(
            f"feature dimension(s) with zero spread set to 0: {names}",
            RuntimeWarning,
            stacklevel=2,
        )
    safe_std = np.where(std == 0.0, 1.0, std)
    for s in sequences:
        for g in s.graphs:
            g.features = (g.features - mean) / safe_std
            if degenerate:
                g.features[:, list(degenerate)] = 0.0
    return FeatureStats(mean=mean, std=std, degenerate_dims=degenerate)


# ---------------------------------------------------------------------------
# sequence assembly


def assemble_sequence(
    record,
    layer_thicknesses: np.ndarray,
    mode: str = "standard",
    cap: float = DEFAULT_WEIGHT_CAP,
) -> TemporalGraphSequence:
    """Turn one record's layer thicknesses into a temporal graph sequence.

    `layer_thicknesses` is (n_layers, n_columns) ordered surface-first.
    Layers 1-10 (shallowest) become targets: the deepest of the ten maps to
    2003 and the shallowest to 2012, so target column j holds year 2003+j.
    Layers 11-15 become the five feature graphs, deepest (15) = 1998.
    Any layers beyond the fifteenth are ignored.
    """
    table = np.asarray(layer_thicknesses, dtype=np.float64)
    if table.ndim != 2:
        raise ConfigError(f"layer thicknesses must be 2-D, got shape {table.shape}")
    n_layers, n_cols = table.shape
    if n_layers < MIN_LAYERS:
        raise RecordRejected(
            record.id, f"needs >= {MIN_LAYERS} layers, found {n_layers}"
        )
    coords = _coords_array(record.geo)
    if coords.shape[1] < 3:
        raise RecordRejected(record.id, "coordinates lack an elevation column")
    if coords.shape[0] != n_cols:
        raise RecordRejected(
            record.id,
            f"{coords.shape[0]} coordinates vs {n_cols} thickness columns",
        )
    adjacency = build_adjacency(coords, mode=mode, cap=cap)

    targets = np.empty((n_cols, N_TARGET_LAYERS))
    for j in range(N_TARGET_LAYERS):
        targets[:, j] = table[N_TARGET_LAYERS - 1 - j]  # 2003 <- layer 10 ... 2012 <- layer 1

    graphs = []
    for i, year in enumerate(FEATURE_YEARS):
        layer_idx = MIN_LAYERS - 1 - i  # 1998 <- layer 15 ... 2002 <- layer 11
        features = np.column_stack(
            [coords[:, 0], coords[:, 1], coords[:, 2], table[layer_idx]]
        )
        graphs.append(FeatureGraph(year=year, features=features, adjacency=adjacency))
    return TemporalGraphSequence(record_id=record.id, graphs=graphs, targets=targets)
