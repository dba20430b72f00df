"""Synthetic scene generation, cube I/O, splitting, and separability.

Scenes are region-structured rasters: a seeded Voronoi partition gives
contiguous regions, each region carries one class per categorical
variable, and continuous variables are smooth fields driven by those
labels.  The reflectance cube is a deterministic function of the labels
and the normalized continuous values plus band-correlated noise, so
every target is recoverable from the spectra by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.linalg import hadamard

IGNORE = 255
SPLIT_NAMES = ("train", "val", "test", "buffer")

# cube signal composition
_CAT_AMPLITUDE = 1.0
_CONT_AMPLITUDE = 1.0
_NOISE_AMPLITUDE = 0.05


class CubeFormatError(ValueError):
    """Raised when a cube file violates the container format."""


@dataclass(frozen=True)
class VariableSchema:
    name: str
    kind: str
    classes: int = 0
    vrange: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise ValueError(f"kind must be categorical or continuous, got {self.kind!r}")
        if self.kind == "categorical":
            if not 2 <= self.classes < IGNORE:
                raise ValueError(f"class count {self.classes} out of range for {self.name!r}")
        else:
            lo, hi = self.vrange
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"range {self.vrange} invalid for {self.name!r}")


def default_schema() -> list[VariableSchema]:
    """The thirteen forest variables: three categorical, ten continuous."""
    cat = [
        VariableSchema("fertility_class", "categorical", classes=4),
        VariableSchema("soil_class", "categorical", classes=2),
        VariableSchema("main_species", "categorical", classes=3),
    ]
    cont = [
        VariableSchema("basal_area", "continuous", vrange=(0.0, 35.51)),
        VariableSchema("mean_dbh", "continuous", vrange=(0.0, 30.89)),
        VariableSchema("stem_density", "continuous", vrange=(0.0, 6240.0)),
        VariableSchema("mean_height", "continuous", vrange=(0.0, 24.16)),
        VariableSchema("pct_pine", "continuous", vrange=(0.0, 100.0)),
        VariableSchema("pct_spruce", "continuous", vrange=(0.0, 84.0)),
        VariableSchema("pct_birch", "continuous", vrange=(0.0, 58.0)),
        VariableSchema("woody_biomass", "continuous", vrange=(0.0, 180.0)),
        VariableSchema("lai", "continuous", vrange=(0.0, 9.66)),
        VariableSchema("effective_lai", "continuous", vrange=(0.0, 6.45)),
    ]
    return cat + cont


def benchmark_schema() -> list[VariableSchema]:
    """Reduced seven-variable schema used by the desk-scale benchmark."""
    keep = {"fertility_class", "soil_class", "main_species",
            "basal_area", "mean_height", "woody_biomass", "lai"}
    return [v for v in default_schema() if v.name in keep]


@dataclass
class Scene:
    cube: np.ndarray
    categorical: dict[str, np.ndarray]
    continuous: dict[str, np.ndarray]
    valid_mask: np.ndarray
    schema: list[VariableSchema]

    @property
    def bands(self) -> int:
        return self.cube.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.cube.shape[1], self.cube.shape[2]

    def schema_for(self, name: str) -> VariableSchema:
        for v in self.schema:
            if v.name == name:
                return v
        raise KeyError(name)


# ---------------------------------------------------------------------------
# generation


def _smooth_curve(rng, n: int) -> np.ndarray:
    """Zero-mean unit-std curve over the band axis, smooth at scale n/4."""
    v = rng.normal(size=n)
    k = max(3, n // 4)
    kernel = np.ones(k) / k
    for _ in range(2):
        v = np.convolve(v, kernel, mode="same")
    sd = v.std()
    return (v - v.mean()) / (sd if sd > 1e-9 else 1.0)


def _orthonormal_bands(rng, bands: int) -> np.ndarray:
    """Orthonormal band basis whose columns are coding directions.

    Power-of-two sizes use a permuted, sign-flipped Hadamard basis so every
    column weights every band equally; other sizes fall back to a QR basis.
    The constant column, whose std is zero, is ordered last so value-coding
    columns can be std-normalized.
    """
    p2 = 1
    while p2 < bands:
        p2 *= 2
    if p2 == bands:
        q = hadamard(bands).astype(np.float64) / np.sqrt(bands)
        q = q[rng.permutation(bands)]
        q = q[:, rng.permutation(bands)]
        q = q * rng.choice([-1.0, 1.0], size=bands)[None, :]
    else:
        m = rng.normal(size=(bands, bands))
        q, r = np.linalg.qr(m)
        sign = np.sign(np.diag(r))
        q = q * np.where(sign == 0, 1.0, sign)
    keys = np.array([1.0 if c.std() > 1e-12 else 0.0 for c in q.T])
    return q[:, np.argsort(-keys, kind="stable")]


def _smooth_field(rng, h: int, w: int, coarse: int = 6) -> np.ndarray:
    """Zero-mean unit-std low-frequency field."""
    g = rng.normal(size=(coarse, coarse))
    f = ndimage.zoom(g, (h / coarse, w / coarse), order=1, mode="nearest", grid_mode=True)
    f = f[:h, :w]
    sd = f.std()
    return (f - f.mean()) / (sd if sd > 1e-9 else 1.0)


def _region_partition(rng, h: int, w: int):
    n_regions = max(8, (h * w) // 72)
    idx = rng.choice(h * w, size=n_regions, replace=False)
    sy, sx = idx // w, idx % w
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (ys[:, :, None] - sy) ** 2 + (xs[:, :, None] - sx) ** 2
    return d2.argmin(axis=2), n_regions


def _assign_region_classes(rng, areas: np.ndarray, n_classes: int,
                           priors: Optional[np.ndarray]) -> np.ndarray:
    if priors is None:
        return rng.integers(0, n_classes, size=areas.size)
    priors = np.asarray(priors, dtype=np.float64)
    if priors.size != n_classes or np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
        raise ValueError(f"priors must be {n_classes} non-negative fractions summing to 1")
    # greedy area matching: biggest regions claim the most-deficient class
    deficit = priors * areas.sum()
    labels = np.zeros(areas.size, dtype=np.int64)
    for r in np.argsort(-areas, kind="stable"):
        c = int(deficit.argmax())
        labels[r] = c
        deficit[c] -= areas[r]
    return labels


def generate_scene(schema: Sequence[VariableSchema], size: tuple[int, int], bands: int,
                   seed: int, class_priors: Optional[dict] = None) -> Scene:
    """Deterministic synthetic scene; same arguments give bit-identical output.

    ``class_priors`` optionally maps a categorical variable name to target
    class fractions, matched greedily by region area (used to build
    imbalanced scenes).
    """
    h, w = int(size[0]), int(size[1])
    if h < 32 or w < 32:
        raise ValueError(f"scene extent {(h, w)} too small; minimum is 32x32")
    if bands < 4:
        raise ValueError(f"need at least 4 bands, got {bands}")
    schema = list(schema)
    cat_vars = [v for v in schema if v.kind == "categorical"]
    cont_vars = [v for v in schema if v.kind == "continuous"]
    rng = np.random.Generator(np.random.PCG64(seed))
    class_priors = class_priors or {}
    for name in class_priors:
        if name not in {v.name for v in cat_vars}:
            raise ValueError(f"priors given for unknown categorical variable {name!r}")

    region_map, n_regions = _region_partition(rng, h, w)
    areas = np.bincount(region_map.ravel(), minlength=n_regions).astype(np.float64)

    region_labels = {}
    label_maps = {}
    for v in cat_vars:
        priors = class_priors.get(v.name)
        labels = _assign_region_classes(
            rng, areas, v.classes, None if priors is None else np.asarray(priors))
        region_labels[v.name] = labels
        label_maps[v.name] = labels[region_map].astype(np.uint8)

    species = next((v for v in cat_vars if v.name == "main_species"), None)
    pct_names = [v.name for v in cont_vars if v.name.startswith("pct_")]

    norm_fields = {}
    continuous = {}

    if pct_names:
        # per-region species shares: dominant species boosted, total under 100
        shares = np.zeros((n_regions, len(pct_names)))
        for r in range(n_regions):
            alpha = np.full(len(pct_names), 1.5)
            if species is not None:
                dom = region_labels[species.name][r] % len(pct_names)
                alpha[dom] = 6.0
            total = 100.0 * rng.uniform(0.55, 0.95)
            shares[r] = rng.dirichlet(alpha) * total
        damp = _smooth_field(rng, h, w)
        factor = 0.925 + 0.075 * np.tanh(damp)  # stays in (0.85, 1.0)
        for j, name in enumerate(pct_names):
            v = next(s for s in cont_vars if s.name == name)
            vals = shares[region_map, j] * factor
            vals = np.clip(vals, v.vrange[0], v.vrange[1])
            continuous[name] = vals
            norm_fields[name] = minmax_normalize(vals, v.vrange)

    for v in cont_vars:
        if v.name in pct_names:
            continue
        mix = rng.uniform(0.4, 1.0, size=len(cat_vars))
        levels = [rng.uniform(0.1, 0.9, size=c.classes) for c in cat_vars]
        region_base = np.zeros(n_regions)
        for c, lv, m in zip(cat_vars, levels, mix):
            region_base += m * lv[region_labels[c.name]]
        region_base /= mix.sum()
        norm = region_base[region_map] + 0.35 * _smooth_field(rng, h, w)
        norm = np.clip(norm, 0.02, 0.98)
        norm_fields[v.name] = norm
        continuous[v.name] = denormalize(norm, v.vrange)

    # Band directions come from one orthonormal basis: continuous fields own
    # the leading columns and each categorical variable places its classes on
    # a centred lattice over its own trailing columns.  Random smooth curves
    # for everything are nearly collinear, which makes the continuous readout
    # ill-posed and lets class signatures collide; a flat-spread basis also
    # keeps every direction's per-band energy equal so no task is harder to
    # read than another.
    cube = np.zeros((bands, h, w))
    d_cont = min(len(cont_vars), bands // 2)
    q = _orthonormal_bands(rng, bands)

    free_cols = list(range(d_cont, bands))
    col_cursor = 0
    for v in cat_vars:
        d_v = 1 if v.classes <= 3 else 2
        cols = [free_cols[(col_cursor + j) % len(free_cols)] for j in range(d_v)]
        col_cursor += d_v
        side = int(np.ceil(v.classes ** (1.0 / d_v)))
        sigs = np.zeros((v.classes, bands))
        for c in range(v.classes):
            coords = (c % side, c // side)[:d_v]
            for j, col in enumerate(cols):
                # lattice spacing 2 guarantees unit separation per axis
                sigs[c] += (2.0 * coords[j] - (side - 1)) * q[:, col]
        cube += _CAT_AMPLITUDE * sigs[label_maps[v.name].astype(np.int64)].transpose(2, 0, 1)
    for j, v in enumerate(cont_vars):
        direction = q[:, j % d_cont] if d_cont else _smooth_curve(rng, bands)
        direction = direction / direction.std()
        cube += _CONT_AMPLITUDE * direction[:, None, None] * norm_fields[v.name][None]
    noise = ndimage.gaussian_filter1d(rng.normal(size=(bands, h, w)), sigma=1.0, axis=0)
    cube += _NOISE_AMPLITUDE * noise

    # one invalid blob marks unlabeled ground
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    radius = rng.uniform(min(h, w) / 12, min(h, w) / 8)
    ys, xs = np.mgrid[0:h, 0:w]
    valid = (ys - cy) ** 2 + (xs - cx) ** 2 >= radius ** 2
    for name in label_maps:
        label_maps[name] = np.where(valid, label_maps[name], IGNORE).astype(np.uint8)

    return Scene(cube=cube, categorical=label_maps, continuous=continuous,
                 valid_mask=valid, schema=schema)


# ---------------------------------------------------------------------------
# cube container I/O

_MAGIC = b"HSC1"
_VERSION = 1
_KIND_CAT, _KIND_CONT, _KIND_MASK = 0, 1, 2


def write_cube(scene: Scene, path) -> None:
    parts = [_MAGIC, struct.pack("<I", _VERSION)]
    b, (h, w) = scene.bands, scene.size
    parts.append(struct.pack("<III", b, h, w))
    parts.append(np.ascontiguousarray(scene.cube, dtype="<f8").tobytes())
    sections = []
    for v in scene.schema:
        if v.kind == "categorical":
            data = np.ascontiguousarray(scene.categorical[v.name], dtype=np.uint8)
            head = struct.pack("<B I", _KIND_CAT, v.classes)
            sections.append((v.name, head, data.tobytes()))
        else:
            data = np.ascontiguousarray(scene.continuous[v.name], dtype="<f8")
            head = struct.pack("<B dd", _KIND_CONT, v.vrange[0], v.vrange[1])
            sections.append((v.name, head, data.tobytes()))
    mask = np.ascontiguousarray(scene.valid_mask, dtype=np.uint8)
    sections.append(("valid", struct.pack("<B", _KIND_MASK), mask.tobytes()))
    parts.append(struct.pack("<I", len(sections)))
    for name, head, payload in sections:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(head)
        parts.append(payload)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise CubeFormatError(
                f"truncated file: {what} at offset {self.off} needs {n} bytes, "
                f"only {len(self.buf) - self.off} of {len(self.buf)} remain")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_cube(path) -> Scene:
    with open(path, "rb") as f:
        rd = _Reader(f.read())
    magic = rd.take(4, "magic")
    if magic != _MAGIC:
        raise CubeFormatError(f"bad magic at offset 0: expected {_MAGIC!r}, got {magic!r}")
    version = rd.u32("version")
    if version != _VERSION:
        raise CubeFormatError(f"unsupported version {version}, expected {_VERSION}")
    b = rd.u32("band count")
    h = rd.u32("height")
    w = rd.u32("width")
    cube = np.frombuffer(rd.take(8 * b * h * w, f"cube payload ({b}x{h}x{w} float64)"),
                         dtype="<f8").reshape(b, h, w).copy()
    n_sections = rd.u32("section count")
    schema, categorical, continuous = [], {}, {}
    valid = np.ones((h, w), dtype=bool)
    for i in range(n_sections):
        nlen = rd.u32(f"section {i} name length")
        name = rd.take(nlen, f"section {i} name").decode("utf-8")
        kind = rd.take(1, f"section {name!r} kind")[0]
        if kind == _KIND_CAT:
            classes = rd.u32(f"section {name!r} class count")
            data = np.frombuffer(rd.take(h * w, f"section {name!r} labels"),
                                 dtype=np.uint8).reshape(h, w).copy()
            schema.append(VariableSchema(name, "categorical", classes=classes))
            categorical[name] = data
        elif kind == _KIND_CONT:
            lo, hi = struct.unpack("<dd", rd.take(16, f"section {name!r} range"))
            data = np.frombuffer(rd.take(8 * h * w, f"section {name!r} values"),
                                 dtype="<f8").reshape(h, w).copy()
            schema.append(VariableSchema(name, "continuous", vrange=(lo, hi)))
            continuous[name] = data
        elif kind == _KIND_MASK:
            valid = np.frombuffer(rd.take(h * w, f"section {name!r} mask"),
                                  dtype=np.uint8).reshape(h, w).astype(bool)
        else:
            raise CubeFormatError(f"unknown section kind {kind} for {name!r}")
    if rd.off != len(rd.buf):
        raise CubeFormatError(
            f"trailing garbage: {len(rd.buf) - rd.off} bytes past offset {rd.off}")
    return Scene(cube=cube, categorical=categorical, continuous=continuous,
                 valid_mask=valid, schema=schema)


# ---------------------------------------------------------------------------
# normalization and filtering


def _check_range(vrange) -> tuple[float, float]:
    lo, hi = float(vrange[0]), float(vrange[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError(f"degenerate range {vrange}")
    return lo, hi


def minmax_normalize(values, vrange):
    lo, hi = _check_range(vrange)
    return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)


def denormalize(values, vrange):
    lo, hi = _check_range(vrange)
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def filter_rare_classes(labels: np.ndarray, threshold: float = 0.001,
                        ignore: int = IGNORE):
    """Remap classes rarer than ``threshold`` to ignore; densify survivors.

    Returns (new labels, remap dict old id -> new id).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    labels = np.asarray(labels)
    valid = labels != ignore
    total = int(np.count_nonzero(valid))
    if total == 0:
        raise ValueError("no valid pixels to filter")
    ids, counts = np.unique(labels[valid], return_counts=True)
    keep = ids[counts / total >= threshold]
    if keep.size == 0:
        raise ValueError("every class falls below the rarity threshold")
    remap = {int(old): new for new, old in enumerate(sorted(keep))}
    out = np.full_like(labels, ignore)
    for old, new in remap.items():
        out[labels == old] = new
    return out, remap


# ---------------------------------------------------------------------------
# spatial split


@dataclass
class SplitPlan:
    shape: tuple[int, int]
    tile: int
    buffer: int
    assignment: np.ndarray  # (tile rows, tile cols) codes 0 train / 1 val / 2 test

    def pixel_map(self) -> np.ndarray:
        """Per-pixel split codes with buffer pixels marked 3.

        A pixel becomes buffer when a differently-assigned pixel lies
        within Chebyshev distance ``buffer``, so surviving train and test
        pixels are always strictly further apart than the buffer width.
        """
        h, w = self.shape
        th, tw = self.assignment.shape
        rows = np.minimum(np.arange(h) // self.tile, th - 1)
        cols = np.minimum(np.arange(w) // self.tile, tw - 1)
        pix = self.assignment[np.ix_(rows, cols)].astype(np.int8)
        if self.buffer > 0:
            size = 2 * self.buffer + 1
            near = [ndimage.maximum_filter((pix == s).astype(np.uint8), size=size)
                    for s in range(3)]
            out = pix.copy()
            for s in range(3):
                others = np.zeros_like(pix, dtype=bool)
                for o in range(3):
                    if o != s:
                        others |= near[o].astype(bool)
                out[(pix == s) & others] = 3
            return out
        return pix

    def split_mask(self, name: str) -> np.ndarray:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        return self.pixel_map() == SPLIT_NAMES.index(name)

    def to_csv(self, path) -> None:
        lines = ["tile_size,buffer,scene_h,scene_w,tile_row,tile_col,assignment"]
        th, tw = self.assignment.shape
        for r in range(th):
            for c in range(tw):
                lines.append(f"{self.tile},{self.buffer},{self.shape[0]},{self.shape[1]},"
                             f"{r},{c},{SPLIT_NAMES[self.assignment[r, c]]}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "SplitPlan":
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        if not lines or lines[0] != "tile_size,buffer,scene_h,scene_w,tile_row,tile_col,assignment":
            raise ValueError(f"unrecognized split plan header in {path}")
        rows = [ln.split(",") for ln in lines[1:]]
        tile, buf, h, w = (int(rows[0][i]) for i in range(4))
        th = max(int(r[4]) for r in rows) + 1
        tw = max(int(r[5]) for r in rows) + 1
        assignment = np.zeros((th, tw), dtype=np.int8)
        for r in rows:
            assignment[int(r[4]), int(r[5])] = SPLIT_NAMES.index(r[6])
        return cls(shape=(h, w), tile=tile, buffer=buf, assignment=assignment)


def spatial_split(shape, tile: int, fractions=(0.6, 0.2, 0.2), buffer: int = 4,
                  seed: int = 0) -> SplitPlan:
    """Assign whole tiles to train/val/test by seeded largest-remainder draw."""
    if hasattr(shape, "cube"):
        shape = shape.size
    h, w = int(shape[0]), int(shape[1])
    if tile < 1:
        raise ValueError(f"tile size must be >= 1, got {tile}")
    if buffer < 0:
        raise ValueError(f"buffer must be >= 0, got {buffer}")
    if buffer >= tile:
        raise ValueError(f"buffer {buffer} must be smaller than tile {tile}")
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.size != 3 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be 3 non-negative values summing to 1, got {fractions}")
    th = -(-h // tile)
    tw = -(-w // tile)
    total = th * tw
    ideal = fr * total
    counts = np.floor(ideal).astype(np.int64)
    frac_part = ideal - counts
    for i in np.argsort(-frac_part, kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(total)
    flat = np.empty(total, dtype=np.int8)
    start = 0
    for code, n in enumerate(counts):
        flat[order[start:start + n]] = code
        start += n
    return SplitPlan(shape=(h, w), tile=tile, buffer=buffer,
                     assignment=flat.reshape(th, tw))


# ---------------------------------------------------------------------------
# separability


@dataclass(frozen=True)
class ClassStats:
    mean: np.ndarray
    cov: np.ndarray


def estimate_class_stats(cube: np.ndarray, labels: np.ndarray,
                         ignore: int = IGNORE) -> dict[int, ClassStats]:
    """Per-class band mean and covariance over that class's pixels."""
    stats = {}
    for cid in np.unique(labels[labels != ignore]):
        pix = cube[:, labels == cid].T
        if pix.shape[0] < 2:
            continue
        stats[int(cid)] = ClassStats(mean=pix.mean(axis=0), cov=np.cov(pix, rowvar=False))
    return stats


def _ridge(cov: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    cov = (cov + cov.T) / 2
    eps = 1e-6 * float(np.trace(cov)) / cov.shape[0]
    return cov + eps * np.eye(cov.shape[0])


def separability(stats_a: ClassStats, stats_b: ClassStats) -> dict[str, float]:
    """Jeffries-Matusita and transformed divergence, both in [0, 2]."""
    mu_a = np.atleast_1d(np.asarray(stats_a.mean, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(stats_b.mean, dtype=np.float64))
    if not (np.all(np.isfinite(mu_a)) and np.all(np.isfinite(mu_b))
            and np.all(np.isfinite(stats_a.cov)) and np.all(np.isfinite(stats_b.cov))):
        raise ValueError("non-finite class statistics")
    s_a = _ridge(stats_a.cov)
    s_b = _ridge(stats_b.cov)
    dm = mu_a - mu_b
    mid = (s_a + s_b) / 2
    sign, logdet_mid = np.linalg.slogdet(mid)
    if sign <= 0:
        raise ValueError("pooled covariance is not positive definite")
    _, logdet_a = np.linalg.slogdet(s_a)
    _, logdet_b = np.linalg.slogdet(s_b)
    bhat = dm @ np.linalg.solve(mid, dm) / 8 + 0.5 * (logdet_mid - 0.5 * (logdet_a + logdet_b))
    inv_a = np.linalg.inv(s_a)
    inv_b = np.linalg.inv(s_b)
    div = 0.5 * np.trace((s_a - s_b) @ (inv_b - inv_a)) + 0.5 * dm @ (inv_a + inv_b) @ dm
    return {"jm": float(2 * (1 - np.exp(-bhat))), "td": float(2 * (1 - np.exp(-div / 8)))}


def class_distribution(labels: np.ndarray, ignore: int = IGNORE):
    """(ids, counts, fractions) over non-ignored pixels."""
    labels = np.asarray(labels)
    valid = labels[labels != ignore]
    ids, counts = np.unique(valid, return_counts=True)
    fractions = counts / counts.sum() if counts.size else counts.astype(np.float64)
    return ids.astype(np.int64), counts.astype(np.int64), fractions


# ---------------------------------------------------------------------------
# augmentation


def augment(patch: dict[str, np.ndarray], seed) -> dict[str, np.ndarray]:
    """Random horizontal/vertical flips applied jointly to every array.

    Each flip fires independently with probability 0.5; arrays flip on
    their trailing two axes so cubes and maps stay aligned.
    """
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.Generator(np.random.PCG64(seed))
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    out = {}
    for name, arr in patch.items():
        a = arr
        if flip_v:
            a = np.flip(a, axis=-2)
        if flip_h:
            a = np.flip(a, axis=-1)
        out[name] = np.ascontiguousarray(a)
    return out
