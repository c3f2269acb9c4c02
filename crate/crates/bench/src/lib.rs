//! Fixtures shared by the criterion benchmarks.

use obsw_core::instances::desk2;
use obsw_core::rng::PathNormals;
use obsw_core::{simulate_forward, PathBundle, ProblemSpec, SwitchingCostMatrix, TimeGrid};

pub const SEED: u64 = 42;

/// The two-mode desk problem with a bundle on its 10-step grid.
pub fn desk_bundle(n_paths: usize) -> (ProblemSpec, PathBundle) {
    let spec = desk2();
    let grid = TimeGrid::from_horizon(&spec.horizon);
    let bundle = simulate_forward(&spec, &grid, n_paths, SEED).expect("desk bundle");
    (spec, bundle)
}

/// `count` random vectors of length `d` with a uniform cost matrix.
pub fn reflection_inputs(d: usize, count: usize) -> (SwitchingCostMatrix, Vec<Vec<f64>>) {
    let costs = SwitchingCostMatrix::uniform(d, 0.25, true);
    let ys = (0..count as u64)
        .map(|p| {
            let mut rng = PathNormals::new(SEED, p, 0);
            (0..d).map(|_| rng.next_normal()).collect()
        })
        .collect();
    (costs, ys)
}
