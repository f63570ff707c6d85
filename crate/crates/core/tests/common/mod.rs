#![allow(dead_code)]

use cmr::cme::CmeParams;
use cmr::sme::SmeParams;
use cmr::tensor::{rng, Tape, Tensor};
use cmr::{Result, Var};

pub fn rand(seed: u64, shape: &[usize]) -> Tensor {
    rng::normal(&mut rng::stream(seed, "tests"), shape, 1.0)
}

/// CME parameters with every tensor random, including the gate projection.
pub fn random_cme(channels: usize, r: usize, seed: u64) -> CmeParams {
    let mut p = CmeParams::new(channels, r, r, seed, "cme").unwrap();
    let c1 = channels / r;
    p.w3 = rng::normal(&mut rng::stream(seed, "w3"), &[channels, c1], 0.7);
    p.b1 = rng::normal(&mut rng::stream(seed, "b1"), &[c1], 0.3);
    p.b2 = rng::normal(&mut rng::stream(seed, "b2"), &[c1], 0.3);
    p.b3 = rng::normal(&mut rng::stream(seed, "b3"), &[channels], 0.3);
    p
}

/// SME parameters with a non-zero normalisation branch.
pub fn random_sme(channels: usize, seed: u64) -> SmeParams {
    let mut p = SmeParams::new(channels, seed, "sme");
    p.bn.gamma = rng::uniform(&mut rng::stream(seed, "gamma"), &[channels], 0.5, 1.5);
    p.bn.beta = rng::normal(&mut rng::stream(seed, "beta"), &[channels], 0.2);
    p
}

/// Scalarises `y` with fixed random weights.
pub fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = rng::normal(&mut rng::stream(seed, "probe"), t.shape(y), 1.0);
    t.weighted_sum(y, &w)
}
