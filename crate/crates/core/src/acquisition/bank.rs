use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::acquisition::spec::AcquisitionSpec;
use crate::funcnet::InnerDraws;
use crate::optim::ld_points;

/// Frozen standard-normal draws and start points for one acquisition
/// maximization. Regenerated each iteration from the run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseSampleBank {
    pub n_nodes: usize,
    /// `k x n_nodes`.
    pub outer: Vec<f64>,
    /// Inner draws shared by the current posterior and every fantasy, so
    /// their sample-average errors cancel in the difference.
    pub inner: InnerDraws,
    /// Low-discrepancy candidates for the outer search (unit cube).
    pub raw_starts: Vec<Vec<f64>>,
    /// Low-discrepancy starts of the inner searches (unit cube).
    pub inner_starts: Vec<Vec<f64>>,
}

/// Mixes a run seed and an iteration index into a stream seed.
pub fn iteration_seed(seed: u64, iteration: u64) -> u64 {
    let mut z = seed ^ iteration.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl BaseSampleBank {
    /// `keep_draws` retains the full inner draw tensors; moment-only
    /// evaluation needs just their first two moments.
    pub fn new(spec: &AcquisitionSpec, n_nodes: usize, dim: usize, keep_draws: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let outer = normals(spec.k * n_nodes);
        let inner = InnerDraws::from_draws(normals(spec.l * n_nodes), spec.l, n_nodes, keep_draws);
        let ld_seed = (seed ^ (seed >> 32)) as u32;
        let raw_starts = ld_points(spec.raw_samples, dim, ld_seed);
        let inner_starts = ld_points(spec.inner_restarts, dim, ld_seed.wrapping_add(0x5bd1_e995));
        Self { n_nodes, outer, inner, raw_starts, inner_starts }
    }

    pub fn k(&self) -> usize {
        self.outer.len() / self.n_nodes
    }

    pub fn outer_sample(&self, k: usize) -> &[f64] {
        &self.outer[k * self.n_nodes..(k + 1) * self.n_nodes]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_is_deterministic_and_sized() {
        let spec = AcquisitionSpec { k: 3, l: 5, raw_samples: 7, inner_restarts: 2, ..Default::default() };
        let a = BaseSampleBank::new(&spec, 4, 2, true, 11);
        let b = BaseSampleBank::new(&spec, 4, 2, true, 11);
        assert_eq!(a, b);
        assert_eq!(a.outer.len(), 12);
        assert_eq!(a.k(), 3);
        assert_eq!(a.inner.draws.len(), 20);
        assert_eq!(a.raw_starts.len(), 7);
        assert_eq!(a.inner_starts.len(), 2);
        assert_ne!(a, BaseSampleBank::new(&spec, 4, 2, true, 12));
        assert_ne!(iteration_seed(1, 0), iteration_seed(1, 1));
    }
}
