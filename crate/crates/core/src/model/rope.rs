//! Axial 2D rotary tables over the patch grid.
//!
//! Dimension pairs alternate between the two axes: even pairs rotate by the
//! token's grid-row angle, odd pairs by its grid-column angle, so any even
//! head dimension splits evenly. Within an axis with k pairs, frequency j
//! uses theta_j = base^(-2j / (2k)).

use std::rc::Rc;

use crate::tensor::RopeTables;
use crate::Scalar;

/// Tables for a `grid x grid` token layout (row-major token order) and one
/// attention head of dimension `head_dim`.
pub fn build_axial_tables<T: Scalar>(grid: usize, head_dim: usize, base: f64) -> Rc<RopeTables<T>> {
    assert!(head_dim % 2 == 0, "rope head dim {head_dim} must be even");
    let half = head_dim / 2;
    let positions = grid * grid;
    let row_pairs = half - half / 2; // even pair indices
    let col_pairs = half / 2;
    let theta = |j: usize, k: usize| -> f64 {
        if k == 0 {
            0.0
        } else {
            base.powf(-(j as f64) / k as f64)
        }
    };
    let mut cos = vec![T::zero(); positions * half];
    let mut sin = vec![T::zero(); positions * half];
    for t in 0..positions {
        let (row, col) = (t / grid, t % grid);
        for pair in 0..half {
            let (pos, j, k) = if pair % 2 == 0 {
                (row as f64, pair / 2, row_pairs)
            } else {
                (col as f64, pair / 2, col_pairs)
            };
            let angle = pos * theta(j, k);
            cos[t * half + pair] = T::from_f64(angle.cos());
            sin[t * half + pair] = T::from_f64(angle.sin());
        }
    }
    Rc::new(RopeTables { positions, half, cos, sin })
}
