//! Foreground masks from cross-attention maps.
//!
//! Cross-attention maps recorded at the 16×16 resolution are averaged over
//! heads and layers into an aggregate `A_c ∈ R^{16×16×N}`; the channel of
//! the token tied to the foreground object is min-max normalized and
//! thresholded into a binary foreground/background mask.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::real::Real;

/// Side length of the aggregation grid for mask extraction.
pub const MASK_GRID: usize = 16;

/// Binary foreground mask on the 16×16 grid. `degenerate` marks extraction
/// from a constant map (no foreground found); the grid is then all zeros
/// and consumers fall back to unmasked attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub grid: Array2<bool>,
    pub degenerate: bool,
}

impl ForegroundMask {
    pub fn all_ones() -> Self {
        ForegroundMask {
            grid: Array2::from_elem((MASK_GRID, MASK_GRID), true),
            degenerate: false,
        }
    }

    pub fn all_zeros() -> Self {
        ForegroundMask {
            grid: Array2::from_elem((MASK_GRID, MASK_GRID), false),
            degenerate: true,
        }
    }

    pub fn from_grid(grid: Array2<bool>) -> Self {
        ForegroundMask {
            degenerate: !grid.iter().any(|&b| b),
            grid,
        }
    }

    pub fn foreground_cells(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    /// Complement on the same grid (degenerate flag recomputed).
    pub fn inverted(&self) -> Self {
        ForegroundMask::from_grid(self.grid.mapv(|b| !b))
    }
}

#[derive(Debug, Clone)]
struct StoredMap<F> {
    layer_index: usize,
    resolution: usize,
    /// `[heads, n_q, N]`, rows stochastic.
    map: Array3<F>,
}

/// Per-step record of cross-attention maps from one branch, plus the
/// 16×16 aggregated view used for mask extraction.
#[derive(Debug, Clone)]
pub struct CrossMapStore<F> {
    steps: BTreeMap<usize, Vec<StoredMap<F>>>,
    n_tokens: usize,
}

impl<F: Real> CrossMapStore<F> {
    pub fn new(n_tokens: usize) -> Self {
        CrossMapStore {
            steps: BTreeMap::new(),
            n_tokens,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Record one cross-attention map. Rows must be stochastic; a repeated
    /// (step, layer) write is a contract violation.
    pub fn record(
        &mut self,
        step_index: usize,
        layer_index: usize,
        resolution: usize,
        map: Array3<F>,
    ) -> Result<()> {
        let (_, n_q, n) = map.dim();
        if n != self.n_tokens {
            return Err(Error::contract(format!(
                "cross map has {n} token columns, store expects {}",
                self.n_tokens
            )));
        }
        if n_q != resolution * resolution {
            return Err(Error::contract(format!(
                "cross map has {n_q} queries but claims resolution {resolution}"
            )));
        }
        for row in map.rows() {
            let s: f64 = row.iter().map(|v| v.to_f64c()).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::contract(format!(
                    "cross map row does not sum to 1 (got {s})"
                )));
            }
        }
        let maps = self.steps.entry(step_index).or_default();
        if maps.iter().any(|m| m.layer_index == layer_index) {
            return Err(Error::contract(format!(
                "cross map for (step {step_index}, layer {layer_index}) recorded twice"
            )));
        }
        maps.push(StoredMap {
            layer_index,
            resolution,
            map,
        });
        Ok(())
    }

    pub fn recorded_steps(&self) -> Vec<usize> {
        self.steps.keys().copied().collect()
    }

    pub fn layers_at(&self, step_index: usize) -> Vec<(usize, usize)> {
        self.steps
            .get(&step_index)
            .map(|v| v.iter().map(|m| (m.layer_index, m.resolution)).collect())
            .unwrap_or_default()
    }

    pub fn map_at(&self, step_index: usize, layer_index: usize) -> Option<&Array3<F>> {
        self.steps
            .get(&step_index)?
            .iter()
            .find(|m| m.layer_index == layer_index)
            .map(|m| &m.map)
    }

    /// Number of maps that enter the 16×16 aggregation at a step.
    pub fn aggregation_count(&self, step_index: usize) -> usize {
        self.steps
            .get(&step_index)
            .map(|v| {
                v.iter()
                    .filter(|m| m.resolution == MASK_GRID)
                    .count()
            })
            .unwrap_or(0)
    }

    /// `A_c`: average over heads and over every recorded 16×16 layer,
    /// shape `[16, 16, N]`.
    pub fn aggregated(&self, step_index: usize) -> Result<Array3<f64>> {
        let maps = self.steps.get(&step_index).ok_or_else(|| {
            Error::contract(format!("no cross maps recorded at step {step_index}"))
        })?;
        let sixteens: Vec<&StoredMap<F>> = maps
            .iter()
            .filter(|m| m.resolution == MASK_GRID)
            .collect();
        if sixteens.is_empty() {
            return Err(Error::contract(format!(
                "no 16x16 cross maps recorded at step {step_index}"
            )));
        }
        let n = self.n_tokens;
        let mut acc = Array3::<f64>::zeros((MASK_GRID, MASK_GRID, n));
        let mut count = 0usize;
        for sm in &sixteens {
            let heads = sm.map.dim().0;
            for h in 0..heads {
                for qy in 0..MASK_GRID {
                    for qx in 0..MASK_GRID {
                        let qi = qy * MASK_GRID + qx;
                        for tok in 0..n {
                            acc[(qy, qx, tok)] += sm.map[(h, qi, tok)].to_f64c();
                        }
                    }
                }
            }
            count += heads;
        }
        acc.mapv_inplace(|v| v / count as f64);
        Ok(acc)
    }
}

/// Thresholds the token channel of the aggregated cross-attention map into
/// a foreground mask. The channel is min-max normalized first, so any
/// positive rescaling of the map yields the same mask; a constant channel
/// has no foreground and comes back degenerate.
pub fn extract_mask<F: Real>(
    store: &CrossMapStore<F>,
    step_index: usize,
    token_index: usize,
    tau: f64,
) -> Result<ForegroundMask> {
    if token_index >= store.n_tokens() {
        return Err(Error::contract(format!(
            "token index {token_index} out of range (N = {})",
            store.n_tokens()
        )));
    }
    let agg = store.aggregated(step_index)?;
    extract_mask_from_aggregated(&agg, token_index, tau)
}

/// [`extract_mask`] on an already-aggregated `[16, 16, N]` map.
pub fn extract_mask_from_aggregated(
    agg: &Array3<f64>,
    token_index: usize,
    tau: f64,
) -> Result<ForegroundMask> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for qy in 0..MASK_GRID {
        for qx in 0..MASK_GRID {
            let v = agg[(qy, qx, token_index)];
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi <= lo {
        return Ok(ForegroundMask::all_zeros());
    }
    let scale = 1.0 / (hi - lo);
    let mut grid = Array2::from_elem((MASK_GRID, MASK_GRID), false);
    for qy in 0..MASK_GRID {
        for qx in 0..MASK_GRID {
            let norm = (agg[(qy, qx, token_index)] - lo) * scale;
            grid[(qy, qx)] = norm >= tau;
        }
    }
    Ok(ForegroundMask::from_grid(grid))
}

/// Nearest-neighbor resample of the 16×16 mask onto a `target_side` grid,
/// flattened row-major to match the attention layers' token ordering.
pub fn upsample_mask(mask: &ForegroundMask, target_side: usize) -> Vec<bool> {
    let src = mask.grid.dim().0;
    let mut out = Vec::with_capacity(target_side * target_side);
    for i in 0..target_side {
        let sy = i * src / target_side;
        for j in 0..target_side {
            let sx = j * src / target_side;
            out.push(mask.grid[(sy, sx)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Map with uniform rows: every query attends equally to all tokens.
    fn uniform_map(heads: usize, res: usize, n: usize) -> Array3<f64> {
        Array3::from_elem((heads, res * res, n), 1.0 / n as f64)
    }

    #[test]
    fn record_rejects_duplicates_and_bad_rows() {
        let mut store = CrossMapStore::<f64>::new(4);
        store.record(0, 1, 16, uniform_map(2, 16, 4)).unwrap();
        assert!(store.record(0, 1, 16, uniform_map(2, 16, 4)).is_err());
        let bad = Array3::from_elem((1, 256, 4), 0.3);
        assert!(store.record(0, 3, 16, bad).is_err());
        assert!(store.record(1, 0, 16, uniform_map(1, 8, 4)).is_err()); // res mismatch
    }

    #[test]
    fn aggregation_counts_only_sixteen_res_layers() {
        let mut store = CrossMapStore::<f64>::new(4);
        store.record(2, 1, 16, uniform_map(2, 16, 4)).unwrap();
        store.record(2, 5, 8, uniform_map(2, 8, 4)).unwrap();
        store.record(2, 15, 16, uniform_map(4, 16, 4)).unwrap();
        assert_eq!(store.aggregation_count(2), 2);
        let agg = store.aggregated(2).unwrap();
        assert_eq!(agg.dim(), (16, 16, 4));
        // Uniform inputs aggregate to the uniform value.
        assert!((agg[(3, 7, 2)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn single_peak_yields_single_cell() {
        let mut store = CrossMapStore::<f64>::new(2);
        // Token 0 column: 1.0 at query (4, 9), 0.0 elsewhere; token 1 takes
        // the complement so rows stay stochastic.
        let mut map = Array3::zeros((1, 256, 2));
        for q in 0..256 {
            map[(0, q, 1)] = 1.0;
        }
        let peak_q = 4 * 16 + 9;
        map[(0, peak_q, 0)] = 1.0;
        map[(0, peak_q, 1)] = 0.0;
        store.record(0, 1, 16, map).unwrap();
        let mask = extract_mask(&store, 0, 0, 0.35).unwrap();
        assert!(!mask.degenerate);
        assert_eq!(mask.foreground_cells(), 1);
        assert!(mask.grid[(4, 9)]);
    }

    #[test]
    fn constant_map_is_degenerate() {
        let mut store = CrossMapStore::<f64>::new(4);
        store.record(0, 1, 16, uniform_map(2, 16, 4)).unwrap();
        let mask = extract_mask(&store, 0, 2, 0.35).unwrap();
        assert!(mask.degenerate);
        assert_eq!(mask.foreground_cells(), 0);
    }

    #[test]
    fn extraction_is_scale_invariant() {
        let mut agg = Array3::zeros((16, 16, 1));
        let vals = [0.13, 0.7, 0.02, 0.55, 0.91];
        for qy in 0..16 {
            for qx in 0..16 {
                agg[(qy, qx, 0)] = vals[(qy * 16 + qx) % vals.len()];
            }
        }
        let base = extract_mask_from_aggregated(&agg, 0, 0.35).unwrap();
        for c in [1e-6, 0.5, 3.0, 1e6] {
            let scaled = agg.mapv(|v| v * c);
            let m = extract_mask_from_aggregated(&scaled, 0, 0.35).unwrap();
            assert_eq!(m, base, "scale {c} changed the mask");
        }
    }

    #[test]
    fn token_index_out_of_range() {
        let mut store = CrossMapStore::<f64>::new(2);
        store.record(0, 1, 16, uniform_map(1, 16, 2)).unwrap();
        assert!(extract_mask(&store, 0, 2, 0.35).is_err());
        assert!(extract_mask(&store, 7, 0, 0.35).is_err()); // no such step
    }

    #[test]
    fn upsample_identity_and_all_ones() {
        let m = ForegroundMask::all_ones();
        assert!(upsample_mask(&m, 16).iter().all(|&b| b));
        assert!(upsample_mask(&m, 8).iter().all(|&b| b));
        assert!(upsample_mask(&m, 32).iter().all(|&b| b));
        assert_eq!(upsample_mask(&m, 32).len(), 1024);

        let mut grid = Array2::from_elem((16, 16), false);
        grid[(3, 5)] = true;
        let m = ForegroundMask::from_grid(grid);
        let flat = upsample_mask(&m, 16);
        assert_eq!(
            flat.iter().filter(|&&b| b).count(),
            1,
            "16→16 is the identity"
        );
        assert!(flat[3 * 16 + 5]);
    }

    #[test]
    fn checkerboard_downsample_matches_stencil() {
        // Checkerboard: cell (i, j) on iff (i + j) even. Nearest 16→8 picks
        // source (2i, 2j), whose parity is always even → all true.
        let grid = Array2::from_shape_fn((16, 16), |(i, j)| (i + j) % 2 == 0);
        let m = ForegroundMask::from_grid(grid);
        let down = upsample_mask(&m, 8);
        assert_eq!(down.len(), 64);
        assert!(down.iter().all(|&b| b));

        // The complementary board samples odd parity → all false.
        let grid = Array2::from_shape_fn((16, 16), |(i, j)| (i + j) % 2 == 1);
        let m = ForegroundMask::from_grid(grid);
        let down = upsample_mask(&m, 8);
        assert!(down.iter().all(|&b| !b));

        // 16→32 duplicates each cell into a 2×2 block.
        let grid = Array2::from_shape_fn((16, 16), |(i, j)| (i + j) % 2 == 0);
        let m = ForegroundMask::from_grid(grid);
        let up = upsample_mask(&m, 32);
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(up[i * 32 + j], (i / 2 + j / 2) % 2 == 0);
            }
        }
    }
}
