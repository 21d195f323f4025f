"""DEM rasters, tiling, pairing, statistics, normalisation and synthetic terrain."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import (
    DegenerateDataError,
    DimensionError,
    FormatError,
    PairingError,
    ParseError,
)

DEFAULT_NODATA = -9999.0
SCALE_FACTOR = 16


@dataclass
class Grid:
    """Georeferenced elevation raster.

    ``values`` is row-major with row 0 at the north edge.  ``origin`` is the
    lower-left corner ``(x, y)`` as in the ESRI ASCII convention.
    """

    values: np.ndarray
    cell_size: float = 1.0
    origin: tuple = (0.0, 0.0)
    nodata: float = DEFAULT_NODATA
    cell_unit: str = "m"
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.size == 0:
            raise DimensionError(f"grid values must be a non-empty 2-D array, got shape {self.values.shape}")
        if not self.cell_size > 0:
            raise DimensionError(f"cell_size must be positive, got {self.cell_size}")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def nrows(self):
        return self.values.shape[0]

    @property
    def ncols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def nodata_mask(self):
        return (self.values == self.nodata) | ~np.isfinite(self.values)

    def has_nodata(self):
        return bool(self.nodata_mask().any())


@dataclass
class TilePair:
    """Matched low/high resolution tiles covering the same footprint."""

    id: str
    lr: Grid
    hr: Grid


@dataclass
class DatasetStats:
    avg: float
    min: float
    max: float
    count: int
    std: float = field(default=0.0)

    @property
    def mean(self):
        return self.avg

    def as_dict(self):
        return {"avg": self.avg, "min": self.min, "max": self.max, "count": self.count, "std": self.std}


# ---------------------------------------------------------------------------
# ESRI ASCII grid

_ASCII_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
_REQUIRED_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def read_ascii_grid(path, cell_unit="m"):
    header = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key in _ASCII_KEYS:
            if len(parts) != 2:
                raise ParseError(f"header entry {parts[0]!r} needs exactly one value", line=i + 1)
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise ParseError(f"bad header value {parts[1]!r} for {parts[0]}", line=i + 1) from None
            i += 1
            continue
        try:
            float(parts[0])
        except ValueError:
            raise ParseError(f"unknown header key {parts[0]!r}", line=i + 1) from None
        break
    missing = [k for k in _REQUIRED_KEYS if k not in header]
    if missing:
        raise ParseError(f"missing header keys: {', '.join(missing)}", line=i + 1)
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise ParseError(f"ncols/nrows must be positive integers, got {ncols}/{nrows}")
    ncols, nrows = int(ncols), int(nrows)

    bad_line = None
    for lineno in range(i, len(lines)):
        parts = lines[lineno].split()
        if not parts:
            continue
        if len(parts) != ncols and bad_line is None:
            bad_line = lineno + 1
        try:
            rows.extend(float(p) for p in parts)
        except ValueError as exc:
            raise ParseError(f"non-numeric value: {exc}", line=lineno + 1) from None
    expected = nrows * ncols
    if len(rows) != expected:
        line = bad_line if bad_line is not None else len(lines)
        raise ParseError(f"expected {expected} values ({nrows}x{ncols}), found {len(rows)}", line=line)
    values = np.array(rows, dtype=np.float64).reshape(nrows, ncols)
    return Grid(
        values=values,
        cell_size=header["cellsize"],
        origin=(header["xllcorner"], header["yllcorner"]),
        nodata=header.get("nodata_value", DEFAULT_NODATA),
        cell_unit=cell_unit,
        name=Path(path).stem,
    )


def write_ascii_grid(grid, path):
    fmt = "{:.9g}".format
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"ncols {grid.ncols}\n")
        fh.write(f"nrows {grid.nrows}\n")
        fh.write(f"xllcorner {fmt(grid.origin[0])}\n")
        fh.write(f"yllcorner {fmt(grid.origin[1])}\n")
        fh.write(f"cellsize {fmt(grid.cell_size)}\n")
        fh.write(f"NODATA_value {fmt(grid.nodata)}\n")
        for row in grid.values:
            fh.write(" ".join(fmt(float(v)) for v in row))
            fh.write("\n")


# ---------------------------------------------------------------------------
# DEMR binary raster

DEMR_MAGIC = b"DEMR"
DEMR_VERSION = 1
_DEMR_HEADER = struct.Struct("<4sIIIdddf")


def write_raw_raster(grid, path):
    payload = np.ascontiguousarray(grid.values, dtype="<f4")
    header = _DEMR_HEADER.pack(
        DEMR_MAGIC,
        DEMR_VERSION,
        grid.nrows,
        grid.ncols,
        float(grid.cell_size),
        grid.origin[0],
        grid.origin[1],
        float(grid.nodata),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_raw_raster(path, cell_unit="m"):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _DEMR_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, nrows, ncols, cell_size, ox, oy, nodata = _DEMR_HEADER.unpack_from(blob)
    if magic != DEMR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DEMR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if nrows < 1 or ncols < 1:
        raise FormatError(f"{path}: empty raster {nrows}x{ncols}")
    n_bytes = nrows * ncols * 4
    body = blob[_DEMR_HEADER.size:]
    if len(body) != n_bytes:
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {n_bytes}")
    values = np.frombuffer(body, dtype="<f4").reshape(nrows, ncols).astype(np.float32)
    return Grid(
        values=values,
        cell_size=cell_size,
        origin=(ox, oy),
        nodata=float(np.float32(nodata)),
        cell_unit=cell_unit,
        name=Path(path).stem,
    )


def read_raster(path):
    """Read a raster, choosing the format from the file extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".demr":
        return read_raw_raster(path)
    if suffix in (".asc", ".txt"):
        return read_ascii_grid(path)
    raise FormatError(f"{path}: unknown raster extension {suffix!r} (expected .asc or .demr)")


def write_raster(grid, path):
    suffix = Path(path).suffix.lower()
    if suffix == ".demr":
        write_raw_raster(grid, path)
    elif suffix in (".asc", ".txt"):
        write_ascii_grid(grid, path)
    else:
        raise FormatError(f"{path}: unknown raster extension {suffix!r} (expected .asc or .demr)")


# ---------------------------------------------------------------------------
# Tiling and pairing


def tile_grid(grid, tile):
    """Split ``grid`` into ``tile x tile`` pieces in row-major tile order."""
    if tile < 1:
        raise DimensionError(f"tile size must be positive, got {tile}")
    if grid.nrows % tile or grid.ncols % tile:
        raise DimensionError(f"grid {grid.nrows}x{grid.ncols} is not divisible into {tile}x{tile} tiles")
    n_tr, n_tc = grid.nrows // tile, grid.ncols // tile
    x0, y0 = grid.origin
    cs = grid.cell_size
    tiles = []
    for ti in range(n_tr):
        for tj in range(n_tc):
            values = grid.values[ti * tile:(ti + 1) * tile, tj * tile:(tj + 1) * tile].copy()
            origin = (x0 + tj * tile * cs, y0 + (grid.nrows - (ti + 1) * tile) * cs)
            name = f"{grid.name}_r{ti:02d}c{tj:02d}" if grid.name else f"r{ti:02d}c{tj:02d}"
            tiles.append(replace(grid, values=values, origin=origin, name=name))
    return tiles


def assemble_tiles(tiles, n_tile_rows, n_tile_cols):
    """Inverse of :func:`tile_grid` for the values array."""
    if len(tiles) != n_tile_rows * n_tile_cols:
        raise DimensionError(f"need {n_tile_rows * n_tile_cols} tiles, got {len(tiles)}")
    rows = [np.hstack([t.values for t in tiles[r * n_tile_cols:(r + 1) * n_tile_cols]]) for r in range(n_tile_rows)]
    return np.vstack(rows)


def pair_and_filter(lr_tiles, hr_tiles, ratio=SCALE_FACTOR):
    """Zip aligned tile lists into pairs, dropping any pair that touches nodata."""
    lr_tiles, hr_tiles = list(lr_tiles), list(hr_tiles)
    if len(lr_tiles) != len(hr_tiles):
        raise PairingError(f"tile counts differ: {len(lr_tiles)} low-res vs {len(hr_tiles)} high-res")
    pairs = []
    for idx, (lr, hr) in enumerate(zip(lr_tiles, hr_tiles)):
        if hr.nrows != ratio * lr.nrows or hr.ncols != ratio * lr.ncols:
            raise PairingError(
                f"tile {idx}: high-res {hr.nrows}x{hr.ncols} is not {ratio}x low-res {lr.nrows}x{lr.ncols}"
            )
        if lr.has_nodata() or hr.has_nodata():
            continue
        pairs.append(TilePair(id=hr.name or f"tile{idx:04d}", lr=lr, hr=hr))
    return pairs


def dataset_stats(tiles):
    """Elevation summary over all pixels of all tiles.

    Per-tile partial sums are combined with ``math.fsum`` so the result does
    not depend on tile order.
    """
    arrays = [np.asarray(t.values if isinstance(t, Grid) else t, dtype=np.float64) for t in tiles]
    if not arrays:
        raise DegenerateDataError("no tiles to summarise")
    count = sum(a.size for a in arrays)
    mean = math.fsum(float(np.sum(a)) for a in arrays) / count
    var = math.fsum(float(np.sum((a - mean) ** 2)) for a in arrays) / count
    return DatasetStats(
        avg=mean,
        min=min(float(a.min()) for a in arrays),
        max=max(float(a.max()) for a in arrays),
        count=count,
        std=math.sqrt(var),
    )


def pair_stats(pairs):
    """Statistics of the high-resolution side of ``pairs``."""
    return dataset_stats([p.hr for p in pairs])


# ---------------------------------------------------------------------------
# Normalisation


def _check_scale(stats):
    if not stats.std > 1e-12:
        raise DegenerateDataError(f"standard deviation {stats.std!r} is too small to normalise by")


def normalize_array(values, stats):
    _check_scale(stats)
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def denormalize(values, stats):
    _check_scale(stats)
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


def normalize(pairs, stats):
    """Return new pairs with both tiles mapped to ``(v - mean) / std``."""
    _check_scale(stats)
    out = []
    for p in pairs:
        out.append(
            TilePair(
                id=p.id,
                lr=replace(p.lr, values=normalize_array(p.lr.values, stats)),
                hr=replace(p.hr, values=normalize_array(p.hr.values, stats)),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Synthetic terrain


def diamond_square(rng, n_levels, roughness):
    """Diamond-square heightfield of side ``2**n_levels + 1``.

    Corner heights are uniform in [-1, 1]; the displacement amplitude is
    multiplied by ``roughness`` at every level.
    """
    n = 2 ** n_levels + 1
    h = np.full((n, n), np.nan)
    h[0, 0], h[0, -1], h[-1, 0], h[-1, -1] = rng.uniform(-1.0, 1.0, 4)
    step = n - 1
    amp = 1.0
    while step > 1:
        half = step // 2
        amp *= roughness
        # diamond: centres of squares
        corners = (
            h[0:-1:step, 0:-1:step] + h[0:-1:step, step::step] + h[step::step, 0:-1:step] + h[step::step, step::step]
        )
        shape = corners.shape
        h[half::step, half::step] = corners / 4.0 + amp * rng.uniform(-1.0, 1.0, shape)
        # square: edge midpoints, averaging the 3 or 4 in-bounds neighbours
        p = np.pad(h, half, constant_values=np.nan)
        for r0, c0 in ((0, half), (half, 0)):
            rs = slice(r0 + half, n + half, step)
            cs = slice(c0 + half, n + half, step)
            rr = np.arange(n + 2 * half)[rs]
            cc = np.arange(n + 2 * half)[cs]
            nb = np.stack(
                [
                    p[np.ix_(rr - half, cc)],
                    p[np.ix_(rr + half, cc)],
                    p[np.ix_(rr, cc - half)],
                    p[np.ix_(rr, cc + half)],
                ]
            )
            valid = ~np.isnan(nb)
            mean = np.where(valid, nb, 0.0).sum(axis=0) / valid.sum(axis=0)
            h[r0::step, c0::step] = mean + amp * rng.uniform(-1.0, 1.0, mean.shape)
        step = half
    return h


def synthesize_terrain(seed, size, roughness=0.5, elevation_range=(205.0, 985.0), cell_size=1.0, cell_unit="m"):
    """Deterministic fractal DEM of ``size x size`` cells in meters.

    The heightfield is generated on the smallest ``2**k + 1`` lattice that
    covers ``size``, cropped, then rescaled linearly onto ``elevation_range``.
    """
    if isinstance(size, (tuple, list)):
        rows, cols = (int(s) for s in size)
    else:
        rows = cols = int(size)
    if rows < 1 or cols < 1:
        raise DimensionError(f"terrain size must be positive, got {rows}x{cols}")
    if not 0.0 <= roughness:
        raise ValueError(f"roughness must be non-negative, got {roughness}")
    lo, hi = elevation_range
    rng = np.random.default_rng(seed)
    n_levels = max(1, math.ceil(math.log2(max(rows, cols, 2) - 1)))
    h = diamond_square(rng, n_levels, roughness)[:rows, :cols]
    span = h.max() - h.min()
    if span > 0:
        h = lo + (h - h.min()) * ((hi - lo) / span)
    else:
        h = np.full_like(h, (lo + hi) / 2.0)
    h = np.clip(h, lo, hi)
    return Grid(values=h, cell_size=cell_size, cell_unit=cell_unit, name=f"synth{seed}")


def downsample_avg(grid, factor):
    """Block-average ``grid`` by an integer ``factor``."""
    if factor < 1:
        raise DimensionError(f"factor must be positive, got {factor}")
    if grid.nrows % factor or grid.ncols % factor:
        raise DimensionError(f"grid {grid.nrows}x{grid.ncols} not divisible by factor {factor}")
    v = np.asarray(grid.values, dtype=np.float64)
    out = v.reshape(grid.nrows // factor, factor, grid.ncols // factor, factor).mean(axis=(1, 3))
    return replace(grid, values=out, cell_size=grid.cell_size * factor)


def synthetic_pairs(seeds, size=400, roughness=0.5, factor=SCALE_FACTOR, tile=400, **terrain_kw):
    """Synthesise one terrain per seed, block-average it, tile and pair."""
    pairs = []
    for seed in seeds:
        hr = synthesize_terrain(seed, size, roughness, **terrain_kw)
        lr = downsample_avg(hr, factor)
        pairs.extend(pair_and_filter(tile_grid(lr, tile // factor), tile_grid(hr, tile), ratio=factor))
    return pairs


# ---------------------------------------------------------------------------
# Manifests


def write_manifest(entries, path):
    """Write ``(id, lr_path, hr_path)`` triples; paths are stored relative to the manifest."""
    base = Path(path).resolve().parent
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pid, lr_path, hr_path in entries:
            if "\t" in pid or "\n" in pid:
                raise ValueError(f"tile id {pid!r} contains a tab or newline")
            rel_lr = os.path.relpath(Path(lr_path).resolve(), base)
            rel_hr = os.path.relpath(Path(hr_path).resolve(), base)
            fh.write(f"{pid}\t{rel_lr}\t{rel_hr}\n")


def read_manifest(path):
    base = Path(path).resolve().parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            pid, lr, hr = parts
            entries.append((pid, base / lr, base / hr))
    return entries


def load_pairs(manifest_path, ratio=SCALE_FACTOR):
    """Load every pair listed in a manifest."""
    pairs = []
    for pid, lr_path, hr_path in read_manifest(manifest_path):
        lr, hr = read_raster(lr_path), read_raster(hr_path)
        if hr.nrows != ratio * lr.nrows or hr.ncols != ratio * lr.ncols:
            raise PairingError(f"{pid}: high-res {hr.shape} is not {ratio}x low-res {lr.shape}")
        pairs.append(TilePair(id=pid, lr=lr, hr=hr))
    return pairs
