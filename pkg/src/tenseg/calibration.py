"""Joint estimation of anchor positions and per-pair range offsets.

A moving robot ranges against a fixed anchor constellation. Each round gives
raw anchor-to-sensor distances; sensor positions change every round, anchor
positions and pairwise antenna offsets do not. With at least three surveyed
anchor positions pinning the frame, everything else is recovered by nonlinear
least squares over:

  * free anchor positions (3 each),
  * one additive offset per anchor/sensor pair,
  * one position per (sensor, round) that saw enough anchors.

Sensors sharing a rigid bar contribute a known-separation penalty per round,
which couples the per-round positions and stiffens the problem.

The remaining gauge freedom with exactly three priors is a mirror flip
through the prior plane; ``calibrate`` resolves it from a configured side
for one reference anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize
import scipy.sparse
import yaml

from .errors import GradientSingularityError, MissingPairError, ValidationError
from .geometry import multilaterate, reflect_through_plane, trilaterate3
from .ranging import OffsetTable, RangingMeasurement

MIN_TERM_DISTANCE = 1e-9


@dataclass
class CalibrationConfig:
    """Knobs for dataset screening, initialization, and the optimizer."""

    min_anchor_count: int = 4
    bar_weight: float = 1.0
    offset_init: float = 0.0
    hemisphere_sign: int = +1
    reference_anchor_id: int | None = None
    reference_side: int = +1
    method: str = "gauss-newton"
    max_iterations: int = 8000
    robust_width: float = 0.1
    robust_evals: int = 120
    polish_evals: int = 60
    z_bounds: tuple[float, float] | None = None
    gtol: float = 1e-10
    ftol: float = 1e-14
    xtol: float = 1e-13
    lbfgs_memory: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("gauss-newton", "lbfgs"):
            raise ValidationError(f"unknown optimizer method {self.method!r}")
        if self.min_anchor_count < 3:
            raise ValidationError("min_anchor_count must be at least 3")
        if self.hemisphere_sign not in (+1, -1):
            raise ValidationError("hemisphere_sign must be +1 or -1")
        if self.reference_side not in (+1, -1):
            raise ValidationError("reference_side must be +1 or -1")
        if self.robust_width <= 0:
            raise ValidationError("robust_width must be positive")
        if self.z_bounds is not None and self.z_bounds[0] >= self.z_bounds[1]:
            raise ValidationError("z_bounds must be an increasing (lo, hi) pair")


@dataclass
class CalibrationDataset:
    """Round-indexed raw ranges between fixed anchors and moving sensors.

    anchor_raw[i, j, t] is the raw anchor->sensor range (NaN if absent) and
    float_raw[p, q, t] the sensor->sensor range, averaged over direction.
    ``active`` marks (sensor, round) cells with enough anchor sightings to
    receive their own position parameters.
    """

    anchor_ids: list[int]
    float_ids: list[int]
    times: np.ndarray
    anchor_raw: np.ndarray
    float_raw: np.ndarray
    bars: list[tuple[int, int]]
    bar_span: float
    active: np.ndarray = field(init=False)
    min_anchor_count: int = 4

    def __post_init__(self):
        A, F, T = len(self.anchor_ids), len(self.float_ids), len(self.times)
        if self.anchor_raw.shape != (A, F, T):
            raise ValidationError("anchor_raw shape mismatch")
        if self.float_raw.shape != (F, F, T):
            raise ValidationError("float_raw shape mismatch")
        counts = np.sum(~np.isnan(self.anchor_raw), axis=0)
        self.active = counts >= self.min_anchor_count

    @classmethod
    def from_measurements(
        cls,
        measurements: list[RangingMeasurement],
        *,
        anchor_ids: list[int],
        float_ids: list[int],
        bars: list[tuple[int, int]],
        bar_span: float,
        min_anchor_count: int = 4,
    ) -> "CalibrationDataset":
        anchor_ids = sorted(anchor_ids)
        float_ids = sorted(float_ids)
        a_idx = {m: k for k, m in enumerate(anchor_ids)}
        f_idx = {m: k for k, m in enumerate(float_ids)}
        times = np.unique([m.t for m in measurements])
        t_idx = {t: k for k, t in enumerate(times)}
        A, F, T = len(anchor_ids), len(float_ids), len(times)
        anchor_raw = np.full((A, F, T), np.nan)
        float_sum = np.zeros((F, F, T))
        float_cnt = np.zeros((F, F, T), dtype=int)
        for m in measurements:
            if not m.accepted:
                continue
            k = t_idx[m.t]
            if m.i in a_idx and m.j in f_idx:
                anchor_raw[a_idx[m.i], f_idx[m.j], k] = m.raw
            elif m.i in f_idx and m.j in f_idx:
                p, q = f_idx[m.i], f_idx[m.j]
                float_sum[p, q, k] += m.raw
                float_cnt[p, q, k] += 1
                float_sum[q, p, k] += m.raw
                float_cnt[q, p, k] += 1
        with np.errstate(invalid="ignore"):
            float_raw = np.where(float_cnt > 0, float_sum / np.maximum(float_cnt, 1), np.nan)
        for i, j in bars:
            if i not in f_idx or j not in f_idx:
                raise ValidationError(f"bar pair ({i}, {j}) not among sensor ids")
        return cls(
            anchor_ids=anchor_ids,
            float_ids=float_ids,
            times=times,
            anchor_raw=anchor_raw,
            float_raw=float_raw,
            bars=list(bars),
            bar_span=float(bar_span),
            min_anchor_count=min_anchor_count,
        )

    def subsample(self, n_rounds: int, seed: int = 0) -> "CalibrationDataset":
        """Random (sorted) subset of rounds, for quick fits on long logs."""
        if n_rounds >= len(self.times):
            return self
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(self.times), size=n_rounds, replace=False))
        return CalibrationDataset(
            anchor_ids=self.anchor_ids,
            float_ids=self.float_ids,
            times=self.times[keep],
            anchor_raw=self.anchor_raw[:, :, keep],
            float_raw=self.float_raw[:, :, keep],
            bars=self.bars,
            bar_span=self.bar_span,
            min_anchor_count=self.min_anchor_count,
        )


def residual(anchor_pos, float_pos, offset, raw):
    """Model mismatch for one range: |a - f| + offset - raw (vectorized)."""
    diff = np.asarray(anchor_pos, dtype=float) - np.asarray(float_pos, dtype=float)
    dist = np.linalg.norm(diff, axis=-1)
    return dist + np.asarray(offset) - np.asarray(raw)


class CalibrationProblem:
    """Flattens the estimation unknowns into one vector and evaluates the
    weighted sum-of-squares loss and its analytic gradient."""

    def __init__(self, dataset: CalibrationDataset, priors: dict[int, np.ndarray],
                 config: CalibrationConfig | None = None):
        self.dataset = dataset
        self.config = config or CalibrationConfig()
        self.priors = {int(k): np.asarray(v, dtype=float) for k, v in priors.items()}
        for pid in self.priors:
            if pid not in dataset.anchor_ids:
                raise ValidationError(f"prior for unknown anchor id {pid}")

        A = len(dataset.anchor_ids)
        self.prior_mask = np.array([aid in self.priors for aid in dataset.anchor_ids])
        self.free_anchor_rows = np.flatnonzero(~self.prior_mask)

        # Active (sensor, round) cells each own three position parameters.
        f_grid, t_grid = np.nonzero(dataset.active)
        self.active_f = f_grid
        self.active_t = t_grid
        self.cell_row = np.full(dataset.active.shape, -1, dtype=int)
        self.cell_row[f_grid, t_grid] = np.arange(len(f_grid))

        # Anchor-range terms restricted to active cells.
        valid = ~np.isnan(dataset.anchor_raw) & dataset.active[None, :, :]
        ai, fj, tk = np.nonzero(valid)
        self.term_anchor = ai
        self.term_float = fj
        self.term_cell = self.cell_row[fj, tk]
        self.term_raw = dataset.anchor_raw[ai, fj, tk]

        # One offset parameter per (anchor, sensor) pair seen at least once.
        pair_seen = valid.any(axis=2)
        self.offset_rows = np.full((A, len(dataset.float_ids)), -1, dtype=int)
        pa, pf = np.nonzero(pair_seen)
        self.offset_rows[pa, pf] = np.arange(len(pa))
        self.offset_pairs = [
            (dataset.anchor_ids[a], dataset.float_ids[f]) for a, f in zip(pa, pf)
        ]
        self.term_offset = self.offset_rows[ai, fj]

        # Rigid-bar terms where both endpoint cells are active in a round.
        f_index = {m: k for k, m in enumerate(dataset.float_ids)}
        pa_list, pb_list = [], []
        for fa, fb in dataset.bars:
            ka, kb = f_index[fa], f_index[fb]
            both = dataset.active[ka] & dataset.active[kb]
            for tk2 in np.flatnonzero(both):
                pa_list.append(self.cell_row[ka, tk2])
                pb_list.append(self.cell_row[kb, tk2])
        self.bar_a = np.array(pa_list, dtype=int)
        self.bar_b = np.array(pb_list, dtype=int)

        self.n_free = len(self.free_anchor_rows)
        self.n_offsets = len(self.offset_pairs)
        self.n_cells = len(self.active_f)
        self.n_params = 3 * self.n_free + self.n_offsets + 3 * self.n_cells

        counts = np.bincount(self.term_anchor, minlength=A)
        silent = [dataset.anchor_ids[k] for k in np.flatnonzero(counts == 0)]
        if silent:
            raise ValidationError(f"anchors with no usable ranges: {silent}")

        self._build_jacobian_pattern()

    def _build_jacobian_pattern(self):
        """Static row/column indices of the sparse residual Jacobian.

        Row order: anchor-range terms then bar terms. Column order matches
        pack(): free anchor coords, offsets, cell coords. Only the data
        vector changes between evaluations.
        """
        nt = len(self.term_anchor)
        nb = len(self.bar_a)
        self.n_residuals = nt + nb
        base_off = 3 * self.n_free
        base_cell = base_off + self.n_offsets
        A = len(self.dataset.anchor_ids)
        free_col = np.full(A, -1, dtype=int)
        free_col[self.free_anchor_rows] = np.arange(self.n_free)
        term_free = free_col[self.term_anchor]
        self._jac_free_terms = term_free >= 0
        xyz = np.arange(3)

        r_all = np.arange(nt)
        rows = [np.repeat(r_all, 3)]
        cols = [(base_cell + 3 * self.term_cell[:, None] + xyz).ravel()]
        rows.append(r_all)
        cols.append(base_off + self.term_offset)
        sel = self._jac_free_terms
        rows.append(np.repeat(r_all[sel], 3))
        cols.append((3 * term_free[sel, None] + xyz).ravel())
        rb = nt + np.arange(nb)
        rows.append(np.repeat(rb, 3))
        cols.append((base_cell + 3 * self.bar_a[:, None] + xyz).ravel())
        rows.append(np.repeat(rb, 3))
        cols.append((base_cell + 3 * self.bar_b[:, None] + xyz).ravel())
        self._jac_rows = np.concatenate(rows)
        self._jac_cols = np.concatenate(cols)

    # -- packing ---------------------------------------------------------

    def pack(self, anchors: np.ndarray, offsets: np.ndarray, cells: np.ndarray) -> np.ndarray:
        return np.concatenate([
            anchors[self.free_anchor_rows].ravel(),
            np.asarray(offsets, dtype=float),
            np.asarray(cells, dtype=float).ravel(),
        ])

    def unpack(self, params: np.ndarray):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ValidationError(
                f"expected {self.n_params} parameters, got {params.shape}")
        k = 3 * self.n_free
        anchors = np.zeros((len(self.dataset.anchor_ids), 3))
        for row, aid in enumerate(self.dataset.anchor_ids):
            if aid in self.priors:
                anchors[row] = self.priors[aid]
        anchors[self.free_anchor_rows] = params[:k].reshape(-1, 3)
        offsets = params[k:k + self.n_offsets]
        cells = params[k + self.n_offsets:].reshape(-1, 3)
        return anchors, offsets, cells

    # -- loss and gradient -------------------------------------------------

    def _terms(self, anchors, offsets, cells):
        a = anchors[self.term_anchor]
        f = cells[self.term_cell]
        diff = a - f
        dist = np.linalg.norm(diff, axis=1)
        res = dist + offsets[self.term_offset] - self.term_raw
        bdiff = cells[self.bar_a] - cells[self.bar_b]
        bdist = np.linalg.norm(bdiff, axis=1)
        bres = bdist - self.dataset.bar_span
        return diff, dist, res, bdiff, bdist, bres

    def loss(self, params: np.ndarray) -> float:
        anchors, offsets, cells = self.unpack(params)
        _, _, res, _, _, bres = self._terms(anchors, offsets, cells)
        return float(res @ res + self.config.bar_weight * (bres @ bres))

    def residual_vector(self, params: np.ndarray) -> np.ndarray:
        """Stacked residuals (bar rows pre-scaled) so loss = r . r."""
        anchors, offsets, cells = self.unpack(params)
        _, _, res, _, _, bres = self._terms(anchors, offsets, cells)
        return np.concatenate([res, np.sqrt(self.config.bar_weight) * bres])

    def jacobian(self, params: np.ndarray) -> scipy.sparse.csr_matrix:
        """Sparse Jacobian of residual_vector (7 or 6 entries per row)."""
        anchors, offsets, cells = self.unpack(params)
        diff, dist, _, bdiff, bdist, _ = self._terms(anchors, offsets, cells)
        if np.any(dist < MIN_TERM_DISTANCE) or (len(bdist) and np.any(bdist < MIN_TERM_DISTANCE)):
            raise GradientSingularityError(
                "coincident points make a range direction undefined")
        unit = diff / dist[:, None]
        sw = np.sqrt(self.config.bar_weight)
        if len(bdist):
            bunit = sw * bdiff / bdist[:, None]
        else:
            bunit = np.empty((0, 3))
        data = np.concatenate([
            (-unit).ravel(),
            np.ones(len(self.term_anchor)),
            unit[self._jac_free_terms].ravel(),
            bunit.ravel(),
            (-bunit).ravel(),
        ])
        return scipy.sparse.coo_matrix(
            (data, (self._jac_rows, self._jac_cols)),
            shape=(self.n_residuals, self.n_params)).tocsr()

    def loss_and_gradient(self, params: np.ndarray):
        anchors, offsets, cells = self.unpack(params)
        diff, dist, res, bdiff, bdist, bres = self._terms(anchors, offsets, cells)
        if np.any(dist < MIN_TERM_DISTANCE) or (len(bdist) and np.any(bdist < MIN_TERM_DISTANCE)):
            raise GradientSingularityError(
                "coincident points make a range direction undefined")
        w = self.config.bar_weight
        value = float(res @ res + w * (bres @ bres))

        unit = diff / dist[:, None]
        g = 2.0 * res
        grad_anchor = np.zeros_like(anchors)
        np.add.at(grad_anchor, self.term_anchor, g[:, None] * unit)
        grad_cell = np.zeros_like(cells)
        np.add.at(grad_cell, self.term_cell, -g[:, None] * unit)
        grad_off = np.bincount(self.term_offset, weights=g, minlength=self.n_offsets)

        if len(bres):
            bunit = bdiff / bdist[:, None]
            bg = 2.0 * w * bres
            np.add.at(grad_cell, self.bar_a, bg[:, None] * bunit)
            np.add.at(grad_cell, self.bar_b, -bg[:, None] * bunit)

        grad = np.concatenate([
            grad_anchor[self.free_anchor_rows].ravel(),
            grad_off,
            grad_cell.ravel(),
        ])
        return value, grad


def total_loss(problem: CalibrationProblem, params: np.ndarray) -> float:
    return problem.loss(params)


def loss_gradient(problem: CalibrationProblem, params: np.ndarray) -> np.ndarray:
    return problem.loss_and_gradient(params)[1]


@dataclass
class CalibrationResult:
    anchor_ids: list[int]
    anchors: np.ndarray
    offsets: OffsetTable
    float_ids: list[int]
    times: np.ndarray
    cells: np.ndarray
    cell_sensor: np.ndarray
    cell_round: np.ndarray
    loss: float
    loss_history: np.ndarray
    iterations: int
    converged: bool
    gauge_fixed: bool
    reflected: bool

    def anchor_map(self) -> dict[int, np.ndarray]:
        return {aid: self.anchors[k].copy() for k, aid in enumerate(self.anchor_ids)}

    def float_track(self, float_id: int) -> np.ndarray:
        """(T, 3) track for one sensor, NaN rows where it was inactive."""
        k = self.float_ids.index(float_id)
        out = np.full((len(self.times), 3), np.nan)
        mask = self.cell_sensor == k
        out[self.cell_round[mask]] = self.cells[mask]
        return out


def _prior_frame(problem: CalibrationProblem):
    """Origin and unit normal of the plane through the first three priors."""
    prior_ids = sorted(problem.priors)[:3]
    p0, p1, p2 = (np.asarray(problem.priors[k], dtype=float) for k in prior_ids)
    normal = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(normal)
    if norm < 1e-9:
        raise ValidationError("the three prior anchors are collinear")
    return p0, normal / norm


def _init_cells(problem: CalibrationProblem) -> np.ndarray:
    """Bootstrap per-round sensor positions from the prior anchors only.

    Three known spheres intersect in two points mirrored through the prior
    plane, and the true track crosses that plane, so taking a fixed side
    mirror-traps whole stretches of the track; the joint fit cannot climb
    back out of that basin. Disambiguation uses data the loss does not:

      * per round, each bar keeps the two sign pairs whose cap separation
        matches the bar span (a config and its mirror),
      * the per-bar choices are enumerated jointly and scored against the
        measured sensor-to-sensor ranges of that round,
      * the remaining whole-body mirror per round goes to whichever side
        continues the previous round's cell positions.

    A whole-body flip can still slip in while the entire robot hugs the
    prior plane, but exactly there the mirror displacement is small, and the
    later full-constellation re-triangulation erases it.
    """
    ds = problem.dataset
    cfg = problem.config
    prior_rows = np.flatnonzero(problem.prior_mask)
    prior_pos = np.array([problem.priors[ds.anchor_ids[r]] for r in prior_rows])
    origin, normal = _prior_frame(problem)
    T = len(ds.times)
    F = len(ds.float_ids)
    cells = np.full((problem.n_cells, 3), np.nan)
    f_index = {m: k for k, m in enumerate(ds.float_ids)}
    bar_caps = [(f_index[a], f_index[b]) for a, b in ds.bars]
    in_bar = {f for pair in bar_caps for f in pair}
    singles = [f for f in range(F) if f not in in_bar]
    prev = np.full((F, 3), np.nan)

    for t in range(T):
        roots = [None] * F
        for f in range(F):
            raws = ds.anchor_raw[prior_rows, f, t]
            have = ~np.isnan(raws)
            if have.sum() < 3:
                continue
            pos = prior_pos[have][:3]
            rng_est = raws[have][:3] - cfg.offset_init
            roots[f] = np.stack([
                trilaterate3(pos, rng_est, sign=+1),
                trilaterate3(pos, rng_est, sign=-1),
            ])

        # Two span-feasible sign pairs per bar (mirror images of each other).
        groups = []
        for fa, fb in bar_caps:
            if roots[fa] is None and roots[fb] is None:
                continue
            if roots[fa] is None or roots[fb] is None:
                f = fa if roots[fa] is not None else fb
                groups.append(([f], [(0,), (1,)]))
                continue
            combos = [(sa, sb) for sa in (0, 1) for sb in (0, 1)]
            combos.sort(key=lambda c: abs(
                np.linalg.norm(roots[fa][c[0]] - roots[fb][c[1]]) - ds.bar_span))
            groups.append(([fa, fb], combos[:2]))
        for f in singles:
            if roots[f] is not None:
                groups.append(([f], [(0,), (1,)]))
        if not groups:
            continue

        n_groups = len(groups)
        codes = np.arange(2 ** n_groups)
        bits = (codes[:, None] >> np.arange(n_groups)) & 1
        pts_all = np.full((len(codes), F, 3), np.nan)
        for g, (members, options) in enumerate(groups):
            opt = np.array(options)          # (2, len(members))
            sel = opt[bits[:, g]]            # (codes, len(members))
            for k, f in enumerate(members):
                pts_all[:, f] = roots[f][sel[:, k]]

        placed = ~np.isnan(pts_all[0, :, 0])
        pp, qq = np.nonzero(
            np.triu(~np.isnan(ds.float_raw[:, :, t]), k=1)
            & placed[:, None] & placed[None, :])
        if pp.size:
            d = np.linalg.norm(pts_all[:, pp] - pts_all[:, qq], axis=2)
            scores = np.sum(
                (d + cfg.offset_init - ds.float_raw[pp, qq, t]) ** 2, axis=1)
            pts = pts_all[int(np.argmin(scores))]
        else:
            pts = pts_all[0]

        # Whole-body mirror: internally identical, so break the tie by
        # continuity with the previous round.
        have_prev = ~np.isnan(prev[:, 0]) & ~np.isnan(pts[:, 0])
        if np.any(have_prev):
            mirrored = pts.copy()
            mirrored[~np.isnan(pts[:, 0])] = reflect_through_plane(
                pts[~np.isnan(pts[:, 0])], origin, normal)
            d_keep = np.nansum((pts[have_prev] - prev[have_prev]) ** 2)
            d_flip = np.nansum((mirrored[have_prev] - prev[have_prev]) ** 2)
            if d_flip < d_keep:
                pts = mirrored
        prev = np.where(np.isnan(pts), prev, pts)

        for f in range(F):
            row = problem.cell_row[f, t]
            if row >= 0 and not np.isnan(pts[f, 0]):
                cells[row] = pts[f]
    return cells


def _refix_cells(problem: CalibrationProblem, anchors: np.ndarray,
                 offset_grid: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Re-triangulate every cell against the full anchor estimate.

    With four or more anchors the linear stage of `multilaterate` has a
    unique solution, so this pass erases any leftover mirror placement and
    fills cells the priors alone could not fix.
    """
    ds = problem.dataset
    out = cells.copy()
    for row in range(problem.n_cells):
        f, t = problem.active_f[row], problem.active_t[row]
        raws = ds.anchor_raw[:, f, t]
        have = ~np.isnan(raws)
        if have.sum() < 4:
            continue
        out[row] = multilaterate(
            anchors[have], raws[have] - offset_grid[have, f])
    bad = np.isnan(out[:, 0])
    if np.any(bad):
        out[bad] = anchors.mean(axis=0)
    return out


def _fit_anchors(problem: CalibrationProblem, cells: np.ndarray,
                 offset_grid: np.ndarray) -> np.ndarray:
    """Free anchors multilaterated against the current sensor tracks."""
    ds = problem.dataset
    anchors = np.zeros((len(ds.anchor_ids), 3))
    for row, aid in enumerate(ds.anchor_ids):
        if aid in problem.priors:
            anchors[row] = problem.priors[aid]
            continue
        sel = problem.term_anchor == row
        pts = cells[problem.term_cell[sel]]
        corrected = problem.term_raw[sel] - offset_grid[row, problem.term_float[sel]]
        ok = ~np.isnan(pts[:, 0])
        if ok.sum() < 4:
            raise ValidationError(
                f"anchor {aid} lacks ranges to bootstrapped sensor positions")
        step = max(1, int(ok.sum()) // 400)
        anchors[row] = multilaterate(pts[ok][::step], corrected[ok][::step])
    return anchors


def _estimate_offset_grid(problem: CalibrationProblem, anchors: np.ndarray,
                          cells: np.ndarray) -> np.ndarray:
    """Closed-form per-pair offsets: mean(raw - current distance)."""
    dist = np.linalg.norm(
        anchors[problem.term_anchor] - cells[problem.term_cell], axis=1)
    val = problem.term_raw - dist
    ok = ~np.isnan(val)
    sums = np.bincount(problem.term_offset[ok], weights=val[ok],
                       minlength=problem.n_offsets)
    counts = np.bincount(problem.term_offset[ok], minlength=problem.n_offsets)
    values = np.where(counts > 0, sums / np.maximum(counts, 1),
                      problem.config.offset_init)
    grid = np.full(problem.offset_rows.shape, problem.config.offset_init)
    pa, pf = np.nonzero(problem.offset_rows >= 0)
    grid[pa, pf] = values[problem.offset_rows[pa, pf]]
    return grid


def _initial_guess(problem: CalibrationProblem):
    """Mirror-aware seeding: consensus cells, then anchors fixed from them.

    Offsets start at offset_init; the bias they leave in the geometric fixes
    is handled by the robust refinement stages, not here.
    """
    cells = _init_cells(problem)
    grid = np.full(problem.offset_rows.shape, problem.config.offset_init)
    anchors = _fit_anchors(problem, cells, grid)
    gap = np.isnan(cells[:, 0])
    if np.any(gap):
        cells[gap] = anchors.mean(axis=0)
    offsets = np.full(problem.n_offsets, problem.config.offset_init)
    return anchors, offsets, cells


def _cell_z_box(problem: CalibrationProblem):
    """Optimizer bounds: free except sensor z clamped to config.z_bounds."""
    lo = np.full(problem.n_params, -np.inf)
    hi = np.full(problem.n_params, np.inf)
    if problem.config.z_bounds is not None:
        zidx = 3 * problem.n_free + problem.n_offsets + 3 * np.arange(problem.n_cells) + 2
        lo[zidx], hi[zidx] = problem.config.z_bounds
    return lo, hi


def calibrate(
    dataset: CalibrationDataset,
    priors: dict[int, np.ndarray],
    config: CalibrationConfig | None = None,
) -> CalibrationResult:
    """Seed from geometry, then refine in stages to a joint least-squares fit.

    The staged schedule exists because the seeding leaves two kinds of gross
    error the plain fit cannot absorb: sensor fixes mirror-trapped behind the
    prior plane, and the bias the unknown offsets leave in every closed-form
    position. A soft-L1 pass shrinks anchors and offsets while tolerating the
    trapped cells, a re-triangulation against the full anchor set then snaps
    those cells to the right side, and a second soft-L1 pass plus a plain
    polish finish the job. The recorded history is the best total squared
    residual seen so far, appended at each improvement, so it is monotone by
    construction; the returned parameters are the best end-of-stage iterate.

    With fewer than three priors the frame is underdetermined; the fit still
    runs from a randomized start but the result carries gauge_fixed=False.
    """
    config = config or CalibrationConfig()
    if dataset.min_anchor_count != config.min_anchor_count:
        dataset = replace(dataset, min_anchor_count=config.min_anchor_count)
    problem = CalibrationProblem(dataset, priors, config)
    gauge_fixed = len(priors) >= 3

    if gauge_fixed:
        anchors0, offsets0, cells0 = _initial_guess(problem)
    else:
        rng = np.random.default_rng(config.seed)
        offsets0 = np.full(problem.n_offsets, config.offset_init)
        cells0 = rng.normal(0.0, 2.0, size=(problem.n_cells, 3))
        anchors0 = rng.normal(0.0, 2.0, size=(len(dataset.anchor_ids), 3))
    x0 = problem.pack(anchors0, offsets0, cells0)

    if config.method == "gauss-newton":
        lo, hi = _cell_z_box(problem)
        evals = []

        def fun(x):
            r = problem.residual_vector(x)
            evals.append(float(r @ r))
            return r

        def solve(x_start, robust: bool, max_nfev: int):
            kwargs = dict(
                jac=problem.jacobian, method="trf", tr_solver="lsmr",
                ftol=config.ftol, xtol=config.xtol, gtol=config.gtol,
                max_nfev=max_nfev,
            )
            if robust:
                kwargs.update(loss="soft_l1", f_scale=config.robust_width)
            if np.isfinite(lo).any() or np.isfinite(hi).any():
                kwargs["bounds"] = (lo, hi)
                x_start = np.clip(x_start, lo, hi)
            return scipy.optimize.least_squares(fun, x_start, **kwargs)

        res = solve(x0, robust=True, max_nfev=config.robust_evals)
        iterations = int(res.nfev)
        best_x, best_f = res.x, problem.loss(res.x)
        if gauge_fixed:
            a1, _, c1 = problem.unpack(res.x)
            grid = _estimate_offset_grid(problem, a1, c1)
            c2 = _refix_cells(problem, a1, grid, c1)
            o2 = np.empty(problem.n_offsets)
            pa, pf = np.nonzero(problem.offset_rows >= 0)
            o2[problem.offset_rows[pa, pf]] = grid[pa, pf]
            res = solve(problem.pack(a1, o2, c2), robust=True,
                        max_nfev=config.robust_evals)
            iterations += int(res.nfev)
            f = problem.loss(res.x)
            if f < best_f:
                best_x, best_f = res.x, f
        res = solve(best_x, robust=False, max_nfev=config.polish_evals)
        iterations += int(res.nfev)
        f = problem.loss(res.x)
        if f < best_f:
            best_x, best_f = res.x, f
        # A trust-region step is accepted exactly when the cost drops, so the
        # running minimum of evaluations is the accepted-iterate loss history.
        history = [evals[0]]
        for v in evals[1:]:
            if v < history[-1]:
                history.append(v)
        if best_f < history[-1]:
            history.append(best_f)
        converged = bool(res.success)
        final_x = best_x
    else:
        history = [problem.loss(x0)]
        last = {"x": x0, "f": history[0]}

        def fun(x):
            f, g = problem.loss_and_gradient(x)
            last["x"], last["f"] = x, f
            return f, g

        def record(xk):
            if np.array_equal(xk, last["x"]):
                history.append(last["f"])
            else:
                history.append(problem.loss(xk))

        res = scipy.optimize.minimize(
            fun, x0, jac=True, method="L-BFGS-B", callback=record,
            options={
                "maxiter": config.max_iterations,
                "maxfun": 4 * config.max_iterations,
                "maxcor": config.lbfgs_memory,
                "ftol": config.ftol,
                "gtol": config.gtol,
            },
        )
        iterations = int(res.nit)
        converged = bool(res.success)
        final_x = res.x
    anchors, offsets, cells = problem.unpack(final_x)

    reflected = False
    if gauge_fixed and config.reference_anchor_id is not None:
        prior_ids = sorted(priors)[:3]
        p0, p1, p2 = (np.asarray(priors[k], dtype=float) for k in prior_ids)
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm > 1e-9 and config.reference_anchor_id in dataset.anchor_ids:
            normal = normal / norm
            ref_row = dataset.anchor_ids.index(config.reference_anchor_id)
            side = np.sign((anchors[ref_row] - p0) @ normal)
            if side != 0 and side != config.reference_side:
                free = problem.free_anchor_rows
                anchors[free] = reflect_through_plane(anchors[free], p0, normal)
                cells = reflect_through_plane(cells, p0, normal)
                reflected = True

    table = OffsetTable()
    for (i, j), value in zip(problem.offset_pairs, offsets):
        table[i, j] = float(value)

    return CalibrationResult(
        anchor_ids=list(dataset.anchor_ids),
        anchors=anchors,
        offsets=table,
        float_ids=list(dataset.float_ids),
        times=dataset.times.copy(),
        cells=cells,
        cell_sensor=problem.active_f.copy(),
        cell_round=problem.active_t.copy(),
        loss=float(history[-1]),
        loss_history=np.asarray(history),
        iterations=iterations,
        converged=converged,
        gauge_fixed=gauge_fixed,
        reflected=reflected,
    )


def internal_offsets(
    result: CalibrationResult,
    dataset: CalibrationDataset,
    min_samples: int = 5,
) -> OffsetTable:
    """Sensor-to-sensor offsets from fitted tracks: mean(raw - fitted dist).

    Runs after ``calibrate`` because both endpoint positions must be known.
    Pairs with too few co-active rounds are skipped.
    """
    table = OffsetTable()
    F = len(result.float_ids)
    tracks = np.stack([result.float_track(fid) for fid in result.float_ids])
    for p in range(F):
        for q in range(p + 1, F):
            raws = dataset.float_raw[p, q]
            dist = np.linalg.norm(tracks[p] - tracks[q], axis=1)
            ok = ~np.isnan(raws) & ~np.isnan(dist)
            if ok.sum() < min_samples:
                continue
            table[result.float_ids[p], result.float_ids[q]] = float(
                np.mean(raws[ok] - dist[ok]))
    return table


def merged_offsets(result: CalibrationResult, internal: OffsetTable) -> OffsetTable:
    """Anchor-sensor offsets from the fit plus sensor-sensor internals."""
    table = OffsetTable()
    for (i, j), v in result.offsets.items():
        table[i, j] = v
    for (i, j), v in internal.items():
        table[i, j] = v
    return table


def write_calibration(path, result: CalibrationResult,
                      internal: OffsetTable | None = None) -> None:
    offsets = merged_offsets(result, internal) if internal else result.offsets
    payload = {
        "anchors": {int(aid): [float(x) for x in pos]
                    for aid, pos in result.anchor_map().items()},
        "offsets": offsets.to_dict(),
        "diagnostics": {
            "loss": float(result.loss),
            "iterations": int(result.iterations),
            "converged": bool(result.converged),
            "gauge_fixed": bool(result.gauge_fixed),
            "reflected": bool(result.reflected),
            "rounds": int(len(result.times)),
        },
    }
    with open(path, "w") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)


def read_calibration(path):
    """Returns (anchors dict, OffsetTable, diagnostics dict)."""
    with open(path) as fh:
        payload = yaml.safe_load(fh)
    if not isinstance(payload, dict) or "anchors" not in payload:
        raise MissingPairError(f"{path} is not a calibration file")
    anchors = {int(k): np.asarray(v, dtype=float)
               for k, v in payload["anchors"].items()}
    offsets = OffsetTable.from_dict(payload.get("offsets", {}))
    return anchors, offsets, payload.get("diagnostics", {})
