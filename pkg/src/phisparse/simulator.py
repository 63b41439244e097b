"""Cycle-level model of the two-level sparse accelerator pipeline.

Schedule: n-tiles outermost, then m-tiles, then the reduction dimension in
groups of ``l1_scan_width`` partitions (one L1 scan width, one PWP bank per
partition). A tile is one (n-tile, m-tile, group) triple. Its stages are

* preprocessor: matcher arrays run once per (m-tile, group), on the first
  n-tile pass only; ``rows + q`` cycles per pass of ``matcher_arrays``
  partitions;
* L1: 1 or 2 cycles per 16-entry ID group of each row;
* L2: packs + pipeline depth;
* neuron: 1 cycle when the tile completes an output tile;
* dram: bytes moved for the tile divided by bandwidth.

Stages of one tile run concurrently. The first tile's preprocessing has
nothing to overlap with and is charged as pipeline fill; every tile then
costs the max over its stages.

Buffers use static partial residency. The first blocks that fit (in schedule
order) stay on chip once loaded; the rest are refetched on every use. This
is the best policy for the cyclic access of a K-first sweep, and it makes
traffic non-increasing in capacity.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .arch import ENERGY_KEYS, ArchConfig
from .binmat import BitMatrix, TileSpec
from .calibration import CalibrationConfig, PatternSet, calibrate
from .decompose import L1IndexMatrix, decompose, metrics
from .packing import PSUM, PackerConfig, compressed_rows, pack_stream

log = logging.getLogger(__name__)

SCHEMA = "phi_sim_report_v1"
STAGES = ("preprocessor", "l1", "l2", "neuron", "dram")


def sim_preprocessor(tile_rows: int, q: int) -> int:
    return tile_rows + q


def sim_l1(index_tile, scan_width: int = 16, max_per_cycle: int = 8) -> int:
    """Scan cycles for an (rows, g) block of pattern IDs, g <= scan_width.

    A 1-D input is treated as one row.
    """
    ids = np.atleast_2d(np.asarray(index_tile))
    if ids.shape[1] > scan_width:
        raise ValueError(f"group of {ids.shape[1]} IDs exceeds scan width {scan_width}")
    nnz = np.count_nonzero(ids, axis=1)
    return int(np.where(nnz > max_per_cycle, 2, 1).sum())


def sim_l2(packs: int, depth: int = 7) -> int:
    return packs + depth


def sim_prefetch(index_tile, pwp_bytes: int, q: int) -> tuple[int, int]:
    """(bytes with prefetch, bytes without) for one partition visit, no residency."""
    ids = np.asarray(index_tile)
    used = np.unique(ids[ids != 0]).size
    return used * pwp_bytes, q * pwp_bytes


class _Residency:
    """Static partial residency over fixed-size blocks.

    Blocks with rank < capacity // block_size stay resident after the first
    load; other blocks are fetched on every access.
    """

    def __init__(self, capacity: int, block_size: int):
        self.slots = capacity // block_size if block_size else 0
        self.block_size = block_size
        self.loaded: set = set()

    def access(self, key, rank: int) -> int:
        if rank < self.slots:
            if key in self.loaded:
                return 0
            self.loaded.add(key)
        return self.block_size


@dataclass
class TileRecord:
    n_tile: int
    m_tile: int
    group: int
    cycles: dict
    pwp_with: int
    pwp_without: int
    pwp_demand_with: int
    pwp_demand_without: int
    dram_bytes: int


@dataclass
class SimReport:
    shape: tuple[int, int, int]
    config: dict
    cycles: dict
    dram_bytes: dict
    energy_pj: dict
    ops: dict
    utilization: dict
    metrics: dict
    baselines: dict
    tiles: list = field(default_factory=list, repr=False)

    @property
    def total_cycles(self) -> int:
        return self.cycles["total"]

    def to_dict(self, include_tiles: bool = False) -> dict:
        d = {
            "schema": SCHEMA,
            "shape": {"M": self.shape[0], "K": self.shape[1], "N": self.shape[2]},
            "config": self.config,
            "cycles": self.cycles,
            "dram_bytes": self.dram_bytes,
            "energy_pj": self.energy_pj,
            "ops": self.ops,
            "utilization": self.utilization,
            "metrics": self.metrics,
            "baselines": self.baselines,
        }
        if include_tiles:
            d["tiles"] = [t.__dict__ for t in self.tiles]
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


@dataclass
class _GroupWork:
    """Per (m-tile, group) quantities shared by every n-tile pass."""

    rows: int
    partitions: list[int]
    pre_cycles: int
    l1_cycles: int
    l1_hits: int
    l1_busy_rows: int
    packs: int
    l2_units: int
    nz_units: int
    psum_units: int
    row_slots: int
    ids_used: dict
    l2_partitions: set
    compact_bytes: int


def _combine(tiles: list[TileRecord]) -> tuple[int, int]:
    """(total, fill) under per-tile max combining."""
    if not tiles:
        return 0, 0
    first = tiles[0].cycles
    fill = first["preprocessor"]
    total = fill + max(v for s, v in first.items() if s != "preprocessor")
    total += sum(max(t.cycles.values()) for t in tiles[1:])
    return total, fill


def _group_work(l1: L1IndexMatrix, l2, cfg: ArchConfig, lo: int, hi: int, parts: list[int],
                packer: PackerConfig) -> _GroupWork:
    ids = l1.ids[lo:hi, parts[0]:parts[-1] + 1]
    rows = hi - lo
    passes = -(-len(parts) // cfg.matcher_arrays)
    packs = pack_stream(compressed_rows(l2, cfg.k, lo, hi, parts), packer)
    psum = sum(1 for p in packs for u in p.units if u.label == PSUM)
    units = sum(p.size for p in packs)
    l2_parts = {p.partition for p in packs if any(u.label != PSUM for u in p.units)}
    return _GroupWork(
        rows=rows,
        partitions=parts,
        pre_cycles=passes * sim_preprocessor(rows, cfg.q),
        l1_cycles=sim_l1(ids, cfg.l1_scan_width, cfg.adder_channels),
        l1_hits=int(np.count_nonzero(ids)),
        l1_busy_rows=int(np.count_nonzero(np.any(ids, axis=1))),
        packs=len(packs),
        l2_units=units,
        nz_units=units - psum,
        psum_units=psum,
        row_slots=sum(len(p.row_meta) for p in packs),
        ids_used={j: np.unique(ids[:, c][ids[:, c] != 0]) for c, j in enumerate(parts)},
        l2_partitions=l2_parts,
        compact_bytes=rows * len(parts) * cfg.id_bytes + len(packs) * cfg.pack_bytes,
    )


def sim_layer(
    a: BitMatrix,
    w,
    sets: Sequence[PatternSet],
    cfg: ArchConfig | None = None,
    packer: PackerConfig | None = None,
    decomposition: tuple | None = None,
) -> SimReport:
    """Simulate one layer. ``w`` is the (K, N) weight array or just N."""
    cfg = cfg or ArchConfig()
    packer = packer or PackerConfig()
    n_out = int(w) if np.isscalar(w) else int(np.shape(w)[1])
    if not np.isscalar(w) and np.shape(w)[0] != a.cols:
        raise ValueError(f"weights have K={np.shape(w)[0]}, activations K={a.cols}")
    spec = TileSpec(cfg.k, cfg.m, cfg.n)
    l1, l2 = decomposition if decomposition is not None else decompose(a, sets, spec)
    m_rows, k_cols = a.shape
    parts = spec.partitions(k_cols)
    n_mt = -(-m_rows // cfg.m)
    n_nt = -(-n_out // cfg.n)
    groups = [list(range(g, min(g + cfg.l1_scan_width, parts)))
              for g in range(0, parts, cfg.l1_scan_width)]

    work = {}
    for mt in range(n_mt):
        lo, hi = mt * cfg.m, min((mt + 1) * cfg.m, m_rows)
        for g, gp in enumerate(groups):
            work[mt, g] = _group_work(l1, l2, cfg, lo, hi, gp, packer)

    # compact activations that fit in the index + pack buffers never leave the chip
    spill_cap = cfg.index_buffer + cfg.pack_buffer
    resident_compact = set()
    used = 0
    for key, gw in work.items():
        if used + gw.compact_bytes > spill_cap:
            break
        used += gw.compact_bytes
        resident_compact.add(key)

    pwp_block = cfg.n * cfg.weight_bytes
    w_block = cfg.k * cfg.n * cfg.weight_bytes
    q_of = [s.q for s in sets]
    pwp_rank = np.concatenate([[0], np.cumsum(q_of)]).astype(int)

    tiles: list[TileRecord] = []
    classes = dict.fromkeys(("activation", "weight", "pwp_with_prefetch",
                             "pwp_without_prefetch", "psum_spill", "output"), 0)
    for nt in range(n_nt):
        cols = min(cfg.n, n_out - nt * cfg.n)
        w_res = _Residency(cfg.weight_buffer, w_block)
        pwp_with = _Residency(cfg.pwp_buffer, pwp_block)
        pwp_without = _Residency(cfg.pwp_buffer, pwp_block)
        for mt in range(n_mt):
            for g, gp in enumerate(groups):
                gw = work[mt, g]
                act = 0
                if nt == 0:
                    act += gw.rows * len(gp) * cfg.k // 8
                    if (mt, g) not in resident_compact and n_nt > 1:
                        act += gw.compact_bytes
                elif (mt, g) not in resident_compact:
                    act += gw.compact_bytes
                wt = sum(w_res.access(j, j) for j in gp if j in gw.l2_partitions)
                with_b = without_b = dem_with = dem_without = 0
                for j in gp:
                    base = pwp_rank[j]
                    for pid in range(1, q_of[j] + 1):
                        without_b += pwp_without.access((j, pid), base + pid - 1)
                    for pid in gw.ids_used[j]:
                        with_b += pwp_with.access((j, int(pid)), base + int(pid) - 1)
                    dw, dwo = sim_prefetch(gw.ids_used[j], pwp_block, q_of[j])
                    dem_with += dw
                    dem_without += dwo
                footprint = gw.rows * cols * cfg.psum_bytes
                spill = 2 * max(0, footprint - cfg.psum_buffer) * len(gp)
                if g == 0:
                    spill -= 2 * max(0, footprint - cfg.psum_buffer)
                last = g == len(groups) - 1
                out = gw.rows * cols // 8 if last else 0
                pwp = with_b if cfg.prefetch else without_b
                moved = act + wt + pwp + spill + out
                classes["activation"] += act
                classes["weight"] += wt
                classes["pwp_with_prefetch"] += with_b
                classes["pwp_without_prefetch"] += without_b
                classes["psum_spill"] += spill
                classes["output"] += out
                cycles = {
                    "preprocessor": gw.pre_cycles if nt == 0 else 0,
                    "l1": gw.l1_cycles,
                    "l2": sim_l2(gw.packs, cfg.l2_pipeline_depth),
                    "neuron": 1 if last else 0,
                    "dram": math.ceil(moved / cfg.dram_bytes_per_cycle),
                }
                tiles.append(TileRecord(nt, mt, g, cycles, with_b, without_b,
                                        dem_with, dem_without, moved))

    total, fill = _combine(tiles)
    stage_totals = {s: sum(t.cycles[s] for t in tiles) for s in STAGES}
    compute = sum(max(t.cycles["l1"], t.cycles["l2"]) for t in tiles)
    cycles = dict(stage_totals, compute=compute, fill=fill, total=total,
                  serial=sum(stage_totals.values()))

    pwp_selected = classes["pwp_with_prefetch" if cfg.prefetch else "pwp_without_prefetch"]
    dram = dict(classes, pwp=pwp_selected)
    dram["total"] = sum(v for key, v in classes.items() if not key.startswith("pwp_")) + pwp_selected

    # counts per n-tile pass, scaled by the columns each pass covers
    col_sum = n_out
    l1_hits = sum(gw.l1_hits for gw in work.values())
    nz_units = sum(gw.nz_units for gw in work.values())
    psum_units = sum(gw.psum_units for gw in work.values())
    row_slots = sum(gw.row_slots for gw in work.values())
    packs = sum(gw.packs for gw in work.values())
    l1_busy = sum(gw.l1_busy_rows for gw in work.values())
    compact = sum(gw.compact_bytes for gw in work.values())
    popcount = a.popcount()

    counts = {
        "adder_op": (l1_hits + l1_busy + nz_units + psum_units) * col_sum,
        "matcher_compare": m_rows * parts * cfg.q,
        "buffer_read": (nz_units * cfg.weight_bytes + psum_units * cfg.psum_bytes
                        + l1_hits * cfg.psum_bytes + l1_busy * cfg.psum_bytes) * col_sum
                       + n_nt * (packs * cfg.pack_bytes + m_rows * parts * cfg.id_bytes),
        "buffer_write": dram["total"] + compact
                        + (row_slots + l1_busy) * cfg.psum_bytes * col_sum,
        "dram": dram["total"],
        "neuron_update": m_rows * n_out,
    }
    energy = {key: counts[key] * cfg.energy[key] for key in ENERGY_KEYS}
    energy["total"] = sum(energy[key] for key in ENERGY_KEYS)

    met = metrics(a, l1, sets, l2, tile_rows=cfg.m)
    ops = {
        "dense": m_rows * k_cols * n_out,
        "bit_sparse": popcount * n_out,
        "phi_l1": l1_hits * n_out,
        "phi_l2": l2.nnz() * n_out,
        "phi_psum": psum_units * n_out,
        "phi_total": (l1_hits + l2.nnz()) * n_out,
        "matcher_compares": counts["matcher_compare"],
        "counts": counts,
    }
    baselines = _baselines(m_rows, k_cols, n_out, popcount, n_nt, cfg)
    baselines["phi_speedup_vs_dense"] = _ratio(baselines["dense"]["cycles"], total)
    baselines["phi_speedup_vs_bit_sparse"] = _ratio(baselines["bit_sparse"]["cycles"], total)
    units_total = nz_units + psum_units
    util = {
        "pack": units_total / (packs * packer.pack_capacity) if packs else 0.0,
        "pwp": met.pwp_utilization,
        "index_density": met.index_density,
        "l2_units": units_total,
        "packs": packs,
    }
    return SimReport(
        shape=(m_rows, k_cols, n_out),
        config=cfg.to_dict(),
        cycles=cycles,
        dram_bytes=dram,
        energy_pj=energy,
        ops=ops,
        utilization=util,
        metrics=met.as_dict(),
        baselines=baselines,
        tiles=tiles,
    )


def _ratio(a: float, b: float) -> float:
    return math.inf if b == 0 else a / b


def _baselines(m_rows, k_cols, n_out, popcount, n_nt, cfg: ArchConfig) -> dict:
    """Operation-count machines with the same adder lanes, weight buffer and DRAM link.

    Both stream bit-packed activations once per n-tile; weights follow the
    same K-first schedule and residency rule as the Phi pipeline.
    """
    ch = cfg.baseline_channels
    n_mt = -(-m_rows // cfg.m)
    parts = -(-k_cols // cfg.k)
    block = cfg.k * cfg.n * cfg.weight_bytes
    pinned = min(parts, cfg.weight_buffer // block)
    weights = n_nt * block * (pinned + (parts - pinned) * n_mt)
    traffic = n_nt * (m_rows * k_cols // 8) + weights
    out = {}
    for name, accum in (("dense", m_rows * k_cols), ("bit_sparse", popcount)):
        compute = n_nt * math.ceil(accum / ch)
        cycles = max(compute, math.ceil(traffic / cfg.dram_bytes_per_cycle))
        energy = {
            "adder_op": accum * n_out * cfg.energy["adder_op"],
            "buffer_read": accum * n_out * cfg.weight_bytes * cfg.energy["buffer_read"],
            "dram": traffic * cfg.energy["dram"],
            "neuron_update": m_rows * n_out * cfg.energy["neuron_update"],
        }
        energy["total"] = sum(energy.values())
        out[name] = {"ops": accum * n_out, "cycles": cycles, "dram_bytes": traffic,
                     "energy_pj": energy}
    return out


# --- design-space sweeps ---------------------------------------------------

@dataclass(frozen=True)
class GridPoint:
    axis: str
    value: float


@dataclass
class SweepResult:
    point: GridPoint
    report: SimReport

    def row(self) -> dict:
        r = self.report
        return {
            "axis": self.point.axis,
            "value": self.point.value,
            "l2_density": r.metrics["l2_density"],
            "speedup_over_bit": r.metrics["speedup_over_bit"],
            "cycles_total": r.cycles["total"],
            "cycles_l1": r.cycles["l1"],
            "cycles_l2": r.cycles["l2"],
            "cycles_compute": r.cycles["compute"],
            "compute_ops": r.ops["phi_total"],
            "pwp_bytes": r.dram_bytes["pwp"],
            "dram_bytes": r.dram_bytes["total"],
            "energy_pj": r.energy_pj["total"],
        }


def sweep(
    calib: BitMatrix,
    evaluate: BitMatrix,
    n_out: int,
    base: ArchConfig | None = None,
    ks: Iterable[int] = (),
    qs: Iterable[int] = (),
    buffer_scales: Iterable[float] = (),
    cal: CalibrationConfig | None = None,
) -> list[SweepResult]:
    """One simulation per grid point, calibrating on ``calib`` and measuring on ``evaluate``.

    k and q points recalibrate; buffer points reuse the base calibration.
    """
    base = base or ArchConfig()
    cal = cal or CalibrationConfig(q=base.q)
    points = ([GridPoint("k", k) for k in ks] + [GridPoint("q", q) for q in qs]
              + [GridPoint("buffer", s) for s in buffer_scales])
    if not points:
        raise ValueError("empty sweep grid")
    cache: dict[tuple[int, int], tuple] = {}

    def prepared(k: int, q: int):
        if (k, q) not in cache:
            spec = TileSpec(k, base.m, base.n)
            sets = calibrate(calib, spec, replace(cal, q=q))
            cache[k, q] = (sets, decompose(evaluate, sets, spec))
        return cache[k, q]

    results = []
    for pt in points:
        if pt.axis == "k":
            cfg = replace(base, k=int(pt.value))
        elif pt.axis == "q":
            cfg = replace(base, q=int(pt.value))
        else:
            cfg = base.scaled_buffers(pt.value)
        sets, dec = prepared(cfg.k, cfg.q)
        log.info("sweep %s=%s", pt.axis, pt.value)
        results.append(SweepResult(pt, sim_layer(evaluate, n_out, sets, cfg, decomposition=dec)))
    return results


def plateau_start(values: Sequence[float], rel_tol: float = 0.0) -> int | None:
    """Index where a non-increasing series stops changing for good, or None."""
    if not values:
        return None
    last = values[-1]
    idx = len(values) - 1
    while idx > 0 and abs(values[idx - 1] - last) <= rel_tol * max(abs(last), 1):
        idx -= 1
    return idx if idx < len(values) - 1 else None
