//! Uniform random streams.
//!
//! Every stochastic operation in the crate draws through [`UniformStream`], one
//! `f64` in `[0, 1)` at a time. Any `rand` generator is a stream; tests can
//! substitute [`ScriptedUniforms`] to pin exact draws.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub trait UniformStream {
    fn next_uniform(&mut self) -> f64;
}

impl<R: RngCore> UniformStream for R {
    fn next_uniform(&mut self) -> f64 {
        self.gen::<f64>()
    }
}

/// Replays a fixed list of draws. Panics when exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedUniforms {
    draws: Vec<f64>,
    pos: usize,
}

impl ScriptedUniforms {
    pub fn new(draws: impl Into<Vec<f64>>) -> Self {
        Self {
            draws: draws.into(),
            pos: 0,
        }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl UniformStream for ScriptedUniforms {
    fn next_uniform(&mut self) -> f64 {
        let u = *self
            .draws
            .get(self.pos)
            .expect("scripted uniform stream exhausted");
        self.pos += 1;
        u
    }
}

/// The generator used for seeded runs. Stream 0 drives decoding, stream 1 the
/// network simulator, so the two never share draws.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
