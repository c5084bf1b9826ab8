//! Shared fixtures for unit tests.

use crate::config::RunConfig;

/// A model small enough to run many forward passes in a test.
pub(crate) fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.channels = 8;
    c.model.layers = 2;
    c.model.modalities = 3;
    c.model.ref_heights = vec![0.0, 1.0];
    c.model.samples_per_ref = 2;
    c.model.ffn_hidden = 16;
    c.model.tau_hidden = 8;
    c
}

/// Overwrites every parameter with uniform noise in `[-scale, scale)`.
pub(crate) fn randomize(store: &mut crate::numerics::ParamStore, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().filter(|(_, _, e)| e.trainable).map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}
