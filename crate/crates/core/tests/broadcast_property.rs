//! Broadcasting semantics against explicit tiling, property-tested over all
//! shape pairs up to rank 4 with extents <= 5.

use crt_core::tensor::Graph;
use proptest::prelude::*;

/// Tile `data` of `shape` up to `target` (numpy semantics) by explicit
/// coordinate mapping. Independent of the graph's stride walking.
fn tile_to(data: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    let rank = target.len();
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let numel: usize = target.iter().product();
    let mut out = Vec::with_capacity(numel);
    for flat in 0..numel {
        let mut rem = flat;
        let mut coords = vec![0usize; rank];
        for d in (0..rank).rev() {
            coords[d] = rem % target[d];
            rem /= target[d];
        }
        let mut src = 0usize;
        let mut stride = 1usize;
        for d in (0..rank).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            src += c * stride;
            stride *= padded[d];
        }
        out.push(data[src]);
    }
    out
}

fn broadcast_target(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = da.max(db);
    }
    out
}

/// Shape pairs that are broadcast-compatible: per aligned axis the extents
/// are equal or one of them is 1.
fn compatible_shapes() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    let axis = (1usize..=5, 0u8..3); // (extent, mode: equal / a=1 / b=1)
    proptest::collection::vec(axis, 1..=4).prop_flat_map(|axes| {
        let a: Vec<usize> = axes
            .iter()
            .map(|&(e, m)| if m == 1 { 1 } else { e })
            .collect();
        let b: Vec<usize> = axes
            .iter()
            .map(|&(e, m)| if m == 2 { 1 } else { e })
            .collect();
        // Optionally trim leading axes from one side.
        (0..=a.len().saturating_sub(1), Just(a), Just(b), proptest::bool::ANY).prop_map(
            |(trim, a, b, trim_a)| {
                if trim_a {
                    (a[trim..].to_vec(), b)
                } else {
                    (a, b[trim..].to_vec())
                }
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn broadcast_add_and_mul_match_explicit_tiling(
        (sa, sb) in compatible_shapes(),
        seed in 0u64..1000,
    ) {
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let da: Vec<f64> = (0..na).map(|i| ((seed + i as u64) % 97) as f64 / 7.0 - 5.0).collect();
        let db: Vec<f64> = (0..nb).map(|i| ((seed * 3 + i as u64) % 89) as f64 / 5.0 - 7.0).collect();
        let target = broadcast_target(&sa, &sb);
        let ta = tile_to(&da, &sa, &target);
        let tb = tile_to(&db, &sb, &target);

        let g: Graph<f64> = Graph::inference();
        let a = g.constant(da, &sa);
        let b = g.constant(db, &sb);
        let sum = g.data(g.add(a, b));
        let prod = g.data(g.mul(a, b));
        for i in 0..ta.len() {
            prop_assert_eq!(sum[i], ta[i] + tb[i]);
            prop_assert_eq!(prod[i], ta[i] * tb[i]);
        }
    }
}
