//! Seeded RNG streams.
//!
//! One run seed fans out into independent ChaCha streams (same key,
//! distinct stream ids), so adding draws to one component never shifts
//! another component's sequence.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the components of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Demos,
    AgentInit,
    Env,
    Exploration,
    Sampling,
    PolicyNoise,
    Eval,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Demos => 1,
            Stream::AgentInit => 2,
            Stream::Env => 3,
            Stream::Exploration => 4,
            Stream::Sampling => 5,
            Stream::PolicyNoise => 6,
            Stream::Eval => 7,
        }
    }
}

/// Deterministic per-component RNG for a given run seed.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Standard normal draw via Box-Muller.
///
/// Two uniform draws are consumed per call regardless of the result, which
/// keeps the stream layout independent of floating-point edge cases.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Avoid ln(0) by sampling u1 from the half-open (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
