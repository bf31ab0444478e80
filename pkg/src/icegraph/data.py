"""Echogram corpus ingestion, layer extraction, splits, and synthetic data.

A corpus on disk is a manifest JSON next to per-record mask PNGs (8-bit,
0/255, white = layer-top pixel) and geo CSVs (`lat,lon,elev` header, one
row per column). Real Snow Radar frames are 256 columns wide; synthetic
corpora may use fewer columns so that desk-scale runs stay fast, and the
loader only enforces internal consistency.

Thickness is defined between consecutive layer-top rows in a column: the
deepest marked top has no lower boundary and therefore contributes no
thickness. Records whose columns disagree on layer count are rejected
whole, which keeps every graph at the full column count.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geo
from .errors import ConfigError, DataError, RecordRejected
from .flatfile import read_flat, write_flat

STANDARD_COLUMNS = 256  # real Snow Radar frame width
VERTICAL_CM_PER_PIXEL = 4.0
FOOTPRINT_M_PER_COLUMN = 14.5
MIN_USABLE_LAYERS = geo.MIN_LAYERS  # ten target years + five feature years

_EARTH_RADIUS_M = 6_371_000.0


@dataclass
class EchogramRecord:
    """One labeled radar frame: binary layer-top mask plus per-column geodata."""

    id: str
    mask: np.ndarray  # (H, W), nonzero = layer-top pixel
    geo: np.ndarray  # (W, 3): latitude, longitude, elevation

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 2:
            raise DataError(f"record {self.id!r}: mask must be 2-D, got {mask.ndim}-D")
        coords = np.asarray(self.geo, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DataError(
                f"record {self.id!r}: geo must be (columns, 3), got {coords.shape}"
            )
        if coords.shape[0] != mask.shape[1]:
            raise DataError(
                f"record {self.id!r}: {coords.shape[0]} geo rows vs "
                f"{mask.shape[1]} mask columns"
            )
        self.mask = (mask != 0).astype(np.uint8)
        self.geo = coords

    @property
    def n_columns(self):
        return self.mask.shape[1]


@dataclass
class ThicknessTable:
    """Per-column layer thicknesses in pixels, surface-first."""

    record_id: str
    layers: np.ndarray  # (n_layers, n_columns)

    def __post_init__(self):
        arr = np.asarray(self.layers, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(
                f"record {self.record_id!r}: thickness table must be 2-D"
            )
        if arr.size and arr.min() < 1.0:
            raise DataError(
                f"record {self.record_id!r}: thickness below 1 pixel"
            )
        self.layers = arr

    @property
    def n_layers(self):
        return self.layers.shape[0]

    @property
    def n_columns(self):
        return self.layers.shape[1]


@dataclass(frozen=True)
class SplitPlan:
    trial: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def all_ids(self):
        return self.train + self.val + self.test


def extract_thicknesses(record: EchogramRecord) -> ThicknessTable:
    """Read layer thicknesses off the binary mask, column by column.

    Rejects the record if any column has fewer than two layer tops or if
    columns disagree on how many layers they contain.
    """
    n_cols = record.n_columns
    if n_cols == 0:
        raise RecordRejected(record.id, "mask has no columns")
    tops = [np.nonzero(record.mask[:, c])[0] for c in range(n_cols)]
    counts = np.array([len(t) for t in tops])
    if counts.min() < 2:
        short = int(np.argmin(counts))
        raise RecordRejected(
            record.id,
            f"column {short} has {counts[short]} layer tops; "
            "need at least 2 to bound one layer",
        )
    if len(set(counts.tolist())) != 1:
        report = {int(c): int(n) for c, n in enumerate(counts)}
        raise RecordRejected(
            record.id,
            f"inconsistent layer counts across columns: {report}",
        )
    layers = np.diff(np.stack(tops, axis=1), axis=0).astype(np.float64)
    return ThicknessTable(record_id=record.id, layers=layers)


def filter_usable(tables, min_layers: int = MIN_USABLE_LAYERS):
    """Keep exactly the tables with at least `min_layers` layers."""
    return [t for t in tables if t.n_layers >= min_layers]


def _split_side_size(n: int) -> int:
    # round-half-up of n/5 reproduces the published 752/251/251 at n=1254
    return int(math.floor(n / 5 + 0.5))


def make_splits(usable_ids, master_seed: int, n_trials: int = 5):
    """Five train/val/test permutation splits at the 3:1:1 ratio.

    Trial t permutes the ids with seed `master_seed + t`, then takes the
    train block first, validation next, test last.
    """
    ids = list(usable_ids)
    n = len(ids)
    if n < 5:
        raise ConfigError(f"need at least 5 usable records to split 3:1:1, got {n}")
    side = _split_side_size(n)
    train_n = n - 2 * side
    plans = []
    for t in range(n_trials):
        rng = np.random.default_rng(master_seed + t)
        perm = rng.permutation(n)
        shuffled = [ids[i] for i in perm]
        plans.append(
            SplitPlan(
                trial=t,
                train=tuple(shuffled[:train_n]),
                val=tuple(shuffled[train_n : train_n + side]),
                test=tuple(shuffled[train_n + side :]),
            )
        )
    return plans


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticConfig:
    """Deterministic synthetic corpus: smooth along-track field, AR(1) years.

    `n_layers` counts thickness layers, so each mask carries n_layers + 1
    layer-top rows. Values below 15 produce records the usability filter
    drops, which is occasionally the point.
    """

    n_records: int
    n_layers: int = 16
    n_columns: int = STANDARD_COLUMNS
    seed: int = 0
    origin_latitude: float = 67.0
    origin_longitude: float = -48.0
    heading_degrees: float = 90.0
    base_thickness_px: float = 22.0
    spatial_amplitude_px: float = 1.5
    spatial_wavelength_columns: float = 1.0  # fraction of the track length
    record_offset_sigma_px: float = 4.0  # per-record accumulation-rate level
    track_scatter_deg: float = 0.02  # how far record tracks stray from the origin
    year_persistence: float = 0.9
    year_sigma_px: float = 4.0
    elevation_gain_px: float = 1.5
    noise_sigma_px: float = 0.8  # shallow (target) layers: crisp returns
    deep_noise_sigma_px: float = 3.5  # deep (feature) layers: weak returns
    surface_row: int = 12

    def __post_init__(self):
        if self.n_records < 1:
            raise ConfigError("n_records must be >= 1")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.n_columns < 2:
            raise ConfigError("n_columns must be >= 2")
        if not 0.0 <= self.year_persistence < 1.0:
            raise ConfigError("year_persistence must be in [0, 1)")
        if self.base_thickness_px <= 0:
            raise ConfigError("base_thickness_px must be positive")


def _great_circle_track(lat0_deg, lon0_deg, heading_deg, n_points, spacing_m):
    lat0 = math.radians(lat0_deg)
    lon0 = math.radians(lon0_deg)
    theta = math.radians(heading_deg)
    delta = np.arange(n_points) * (spacing_m / _EARTH_RADIUS_M)
    sin_lat = math.sin(lat0) * np.cos(delta) + math.cos(lat0) * np.sin(delta) * math.cos(theta)
    lat = np.arcsin(sin_lat)
    lon = lon0 + np.arctan2(
        math.sin(theta) * np.sin(delta) * math.cos(lat0),
        np.cos(delta) - math.sin(lat0) * sin_lat,
    )
    lon = (lon + math.pi) % (2.0 * math.pi) - math.pi
    return np.degrees(lat), np.degrees(lon)


def render_mask(layer_table: np.ndarray, surface_rows, margin: int = 8) -> np.ndarray:
    """Rasterize integer layer thicknesses into a binary layer-top mask."""
    table = np.asarray(layer_table)
    if not np.issubdtype(table.dtype, np.integer):
        as_int = np.rint(table).astype(np.int64)
        if not np.array_equal(as_int, table):
            raise ConfigError("render_mask needs integer pixel thicknesses")
        table = as_int
    n_layers, n_cols = table.shape
    surface = np.broadcast_to(np.asarray(surface_rows, dtype=np.int64), (n_cols,))
    tops = np.vstack([surface, surface + np.cumsum(table, axis=0)])
    height = int(tops.max()) + 1 + margin
    mask = np.zeros((height, n_cols), dtype=np.uint8)
    mask[tops, np.arange(n_cols)] = 1
    return mask


def generate_synthetic(config: SyntheticConfig):
    """Build a deterministic corpus of EchogramRecords from the config.

    Per record the thickness field is a low-frequency sinusoid along the
    track, plus an AR(1) persistence component shared by all columns of a
    year, plus an elevation-correlated trend, plus white noise, quantized
    to at least one pixel. Coordinates run along a great circle at the
    14.5 m column footprint.
    """
    records = []
    for r in range(config.n_records):
        rng = np.random.default_rng([config.seed, r])
        scatter = config.track_scatter_deg
        lat0 = config.origin_latitude + rng.uniform(-scatter, scatter)
        lon0 = config.origin_longitude + rng.uniform(-2.0 * scatter, 2.0 * scatter)
        heading = config.heading_degrees + rng.uniform(-45.0, 45.0)
        lat, lon = _great_circle_track(
            lat0, lon0, heading, config.n_columns, FOOTPRINT_M_PER_COLUMN
        )

        # shared terrain: overlapping tracks sample one surface, so elevation
        # must not fingerprint individual records
        cols = np.arange(config.n_columns)
        elevation = (
            1200.0
            + rng.uniform(-10.0, 10.0)
            + 36.0 * (cols / max(config.n_columns - 1, 1))
            + 15.0 * np.sin(2.0 * math.pi * cols / max(config.n_columns, 2))
        )

        wavelength = max(config.spatial_wavelength_columns * config.n_columns, 2.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        spatial = config.spatial_amplitude_px * np.sin(2.0 * math.pi * cols / wavelength + phase)
        record_offset = rng.normal(0.0, config.record_offset_sigma_px)

        rho = config.year_persistence
        innovation = config.year_sigma_px * math.sqrt(1.0 - rho * rho)
        year_effect = np.empty(config.n_layers)
        year_effect[0] = rng.normal(0.0, config.year_sigma_px)
        for t in range(1, config.n_layers):
            year_effect[t] = rho * year_effect[t - 1] + rng.normal(0.0, innovation)

        elev_term = config.elevation_gain_px * (elevation - elevation.mean()) / 100.0
        # deep layers return weaker signal and label noisier than shallow ones;
        # rows run oldest (deepest) first, the shallowest ten are the targets
        sigma = np.full(config.n_layers, config.deep_noise_sigma_px)
        n_shallow = min(geo.N_TARGET_LAYERS, config.n_layers)
        sigma[config.n_layers - n_shallow :] = config.noise_sigma_px
        noise = sigma[:, None] * rng.standard_normal((config.n_layers, config.n_columns))

        # oldest year first, then flipped so the table reads surface-first
        raw = (
            config.base_thickness_px
            + record_offset
            + spatial[None, :]
            + elev_term[None, :]
            + year_effect[:, None]
            + noise
        )
        table = np.maximum(1.0, np.rint(raw))[::-1]

        surface_rows = config.surface_row + np.rint(
            3.0 * np.sin(2.0 * math.pi * cols / max(config.n_columns, 2))
        ).astype(np.int64)
        mask = render_mask(table, surface_rows)
        coords = np.column_stack([lat, lon, elevation])
        records.append(EchogramRecord(id=f"synth-{r:04d}", mask=mask, geo=coords))
    return records


# ---------------------------------------------------------------------------
# corpus files


def write_corpus(records, out_dir) -> Path:
    """Write manifest + per-record mask PNG and geo CSV; returns manifest path."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "geo").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        mask_rel = f"masks/{rec.id}.png"
        geo_rel = f"geo/{rec.id}.csv"
        Image.fromarray(rec.mask * np.uint8(255), mode="L").save(out / mask_rel)
        lines = ["lat,lon,elev"]
        for row in rec.geo:
            lines.append(f"{float(row[0])!r},{float(row[1])!r},{float(row[2])!r}")
        (out / geo_rel).write_text("\n".join(lines) + "\n")
        entries.append({"id": rec.id, "mask": mask_rel, "geo": geo_rel})
    manifest = {"format": "icegraph-corpus-v1", "records": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_corpus(manifest_path):
    """Load a corpus; collects every per-file problem before failing."""
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read manifest: {exc}") from exc
    if manifest.get("format") != "icegraph-corpus-v1":
        raise DataError(f"{path}: unknown corpus format {manifest.get('format')!r}")
    base = path.parent
    records = []
    problems = []
    for entry in manifest.get("records", []):
        rid = entry.get("id", "<missing id>")
        try:
            mask = np.asarray(Image.open(base / entry["mask"]).convert("L"))
            mask = (mask >= 128).astype(np.uint8)
            coords = _read_geo_csv(base / entry["geo"])
            records.append(EchogramRecord(id=rid, mask=mask, geo=coords))
        except (OSError, KeyError, DataError) as exc:
            problems.append(f"{rid}: {exc}")
    if problems:
        raise DataError(
            f"{len(problems)} corpus file problem(s):\n" + "\n".join(problems)
        )
    return records


def _read_geo_csv(path) -> np.ndarray:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip().lower() != "lat,lon,elev":
        raise DataError(f"{path}: expected header 'lat,lon,elev'")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 3:
            raise DataError(f"{path}: line {i}: expected 3 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataError(f"{path}: line {i}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# prepared trial datasets


@dataclass
class PreparedTrial:
    """Everything one training trial needs, already normalized."""

    trial: int
    split: SplitPlan
    sequences: dict  # record id -> TemporalGraphSequence
    feature_stats: geo.FeatureStats
    adjacency_range: tuple[float, float]
    distance_mode: str
    norm_scope: str
    master_seed: int


@dataclass
class PrepareReport:
    total_records: int
    usable: int
    rejected: dict = field(default_factory=dict)  # record id -> reason

    def to_json(self):
        return {
            "total_records": self.total_records,
            "usable": self.usable,
            "rejected": dict(sorted(self.rejected.items())),
        }


def prepare_trials(
    records,
    master_seed: int,
    distance_mode: str = "standard",
    norm_scope: str = "all",
    n_trials: int = 5,
    min_layers: int = MIN_USABLE_LAYERS,
):
    """Full dataset protocol: extract, filter, split, assemble, normalize.

    `norm_scope` selects which sequences contribute normalization
    statistics: "all" pools every usable record (train, validation, and
    test together); "train" restricts statistics to each trial's training
    split before applying them everywhere.
    """
    if norm_scope not in ("all", "train"):
        raise ConfigError(f"norm_scope must be 'all' or 'train', got {norm_scope!r}")
    report = PrepareReport(total_records=len(records), usable=0)
    tables = {}
    for rec in records:
        try:
            tables[rec.id] = extract_thicknesses(rec)
        except RecordRejected as exc:
            report.rejected[rec.id] = exc.reason
    usable_tables = filter_usable(tables.values(), min_layers=min_layers)
    usable_ids = [t.record_id for t in usable_tables]
    report.usable = len(usable_ids)
    if len(usable_ids) < 5:
        raise DataError(
            f"only {len(usable_ids)} of {len(records)} records usable; "
            "need at least 5 to make 3:1:1 splits"
        )
    by_id = {rec.id: rec for rec in records}
    raw_sequences = {
        rid: geo.assemble_sequence(by_id[rid], tables[rid].layers, mode=distance_mode)
        for rid in usable_ids
    }
    splits = make_splits(usable_ids, master_seed, n_trials=n_trials)

    trials = []
    for plan in splits:
        seqs = copy.deepcopy(raw_sequences)
        scope_ids = list(plan.train) if norm_scope == "train" else list(seqs)
        stat_seqs = [seqs[rid] for rid in scope_ids]
        adj_range = geo.normalize_adjacency_collection(
            _unique_adjacencies(stat_seqs)
        )
        feature_stats = geo.normalize_features_collection(stat_seqs)
        if norm_scope == "train":
            _apply_stats_outside_scope(seqs, scope_ids, feature_stats, adj_range)
        trials.append(
            PreparedTrial(
                trial=plan.trial,
                split=plan,
                sequences=seqs,
                feature_stats=feature_stats,
                adjacency_range=adj_range,
                distance_mode=distance_mode,
                norm_scope=norm_scope,
                master_seed=master_seed,
            )
        )
    return trials, report


def _unique_adjacencies(sequences):
    seen = {}
    for s in sequences:
        seen[id(s.adjacency)] = s.adjacency
    return list(seen.values())


def _apply_stats_outside_scope(seqs, scope_ids, feature_stats, adj_range):
    scope = set(scope_ids)
    lo, hi = adj_range
    safe_std = np.where(feature_stats.std == 0.0, 1.0, feature_stats.std)
    for rid, s in seqs.items():
        if rid in scope:
            continue
        adj = s.adjacency
        off = ~np.eye(adj.n_nodes, dtype=bool)
        if hi == lo:
            adj.weights[off] = 1.0
        else:
            adj.weights[off] = (adj.weights[off] - lo) / (hi - lo)
        np.fill_diagonal(adj.weights, 0.0)
        adj.normalization = "minmax"
        for g in s.graphs:
            g.features = (g.features - feature_stats.mean) / safe_std
            if feature_stats.degenerate_dims:
                g.features[:, list(feature_stats.degenerate_dims)] = 0.0


# ---------------------------------------------------------------------------
# prepared file round trip

PREPARED_FORMAT = "icegraph-prepared-v1"


def save_prepared_trial(pt: PreparedTrial, path, fmt: str = "json") -> None:
    meta = {
        "format": PREPARED_FORMAT,
        "trial": pt.trial,
        "master_seed": pt.master_seed,
        "distance_mode": pt.distance_mode,
        "norm_scope": pt.norm_scope,
        "split": {
            "train": list(pt.split.train),
            "val": list(pt.split.val),
            "test": list(pt.split.test),
        },
        "normalization": {
            "feature_mean": pt.feature_stats.mean.tolist(),
            "feature_std": pt.feature_stats.std.tolist(),
            "degenerate_dims": list(pt.feature_stats.degenerate_dims),
            "adjacency_min": pt.adjacency_range[0],
            "adjacency_max": pt.adjacency_range[1],
        },
        "record_ids": sorted(pt.sequences),
    }
    if fmt == "json":
        payload = dict(meta)
        payload["records"] = {
            rid: {
                "features": [g.features.tolist() for g in s.graphs],
                "adjacency": s.adjacency.weights.tolist(),
                "targets": s.targets.tolist(),
            }
            for rid, s in sorted(pt.sequences.items())
        }
        Path(path).write_text(
            json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
        )
    elif fmt == "flat":
        arrays = {}
        for rid, s in pt.sequences.items():
            arrays[f"{rid}/features"] = np.stack([g.features for g in s.graphs])
            arrays[f"{rid}/adjacency"] = s.adjacency.weights
            arrays[f"{rid}/targets"] = s.targets
        write_flat(path, meta, arrays)
    else:
        raise ConfigError(f"prepared format must be 'json' or 'flat', got {fmt!r}")


def load_prepared_trial(path) -> PreparedTrial:
    path = Path(path)
    if path.read_bytes()[: len(b"ICEGFLAT1")] == b"ICEGFLAT1":
        meta, arrays = read_flat(path)
        record_data = {
            rid: (
                arrays[f"{rid}/features"],
                arrays[f"{rid}/adjacency"],
                arrays[f"{rid}/targets"],
            )
            for rid in meta["record_ids"]
        }
    else:
        payload = json.loads(path.read_text())
        if payload.get("format") != PREPARED_FORMAT:
            raise DataError(f"{path}: unknown prepared format {payload.get('format')!r}")
        meta = payload
        record_data = {
            rid: (
                np.asarray(rec["features"], dtype=np.float64),
                np.asarray(rec["adjacency"], dtype=np.float64),
                np.asarray(rec["targets"], dtype=np.float64),
            )
            for rid, rec in payload["records"].items()
        }
    sequences = {}
    for rid, (features, weights, targets) in record_data.items():
        adj = geo.AdjacencyMatrix(weights=weights, normalization="minmax")
        graphs = [
            geo.FeatureGraph(year=y, features=features[i], adjacency=adj)
            for i, y in enumerate(geo.FEATURE_YEARS)
        ]
        sequences[rid] = geo.TemporalGraphSequence(
            record_id=rid, graphs=graphs, targets=targets
        )
    norm = meta["normalization"]
    split = SplitPlan(
        trial=meta["trial"],
        train=tuple(meta["split"]["train"]),
        val=tuple(meta["split"]["val"]),
        test=tuple(meta["split"]["test"]),
    )
    return PreparedTrial(
        trial=meta["trial"],
        split=split,
        sequences=sequences,
        feature_stats=geo.FeatureStats(
            mean=np.asarray(norm["feature_mean"]),
            std=np.asarray(norm["feature_std"]),
            degenerate_dims=tuple(norm["degenerate_dims"]),
        ),
        adjacency_range=(norm["adjacency_min"], norm["adjacency_max"]),
        distance_mode=meta["distance_mode"],
        norm_scope=meta["norm_scope"],
        master_seed=meta["master_seed"],
    )
