//! Deterministic correlated Brownian increments.
//!
//! Every random number is addressed, never drawn from shared mutable state:
//! a 32-byte ChaCha8 key encodes (seed, stream_id, domain), the cipher
//! stream index encodes the step counter, and the word position within a
//! stream encodes the site. Replaying any (seed, stream_id) therefore
//! reproduces identical bytes regardless of thread count or call order.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SimError};

/// Domain tag for the per-step field increments consumed by the Euler
/// scheme.
pub const DOMAIN_FIELD: u64 = 1;
/// Domain tag for boundary-resolution walks inside an infinite-rate step.
pub const DOMAIN_RESOLUTION: u64 = 2;
/// Domain tag for dual particle-system event clocks.
pub const DOMAIN_DUAL: u64 = 3;
/// Domain tag for planar exit-time walks.
pub const DOMAIN_EXIT: u64 = 4;

/// Words of cipher output consumed per site and step (two u64 draws).
const WORDS_PER_SITE: u128 = 4;

fn chacha_key(seed: u64, stream_id: u64, domain: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream_id.to_le_bytes());
    key[16..24].copy_from_slice(&domain.to_le_bytes());
    key
}

/// A fresh sequential generator for (seed, stream_id, domain, ctr).
///
/// Used for walks whose draw count is data-dependent (event clocks,
/// exit-time sampling): each walk gets its own cipher stream and consumes
/// it sequentially.
pub fn substream(seed: u64, stream_id: u64, domain: u64, ctr: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(chacha_key(seed, stream_id, domain));
    rng.set_stream(ctr);
    rng
}

/// Maps a u64 draw to (0, 1]; the open lower end keeps log transforms
/// finite.
#[inline]
fn unit_open(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
}

/// Correlated per-site increment source for one field-pair replica.
///
/// `sample_increments` yields, for each site i, a pair (dB¹, dB²) of
/// Gaussian increments with variance dt and correlation `rho`, addressed by
/// (seed, stream_id, site, counter). The counter advances once per call.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    stream_id: u64,
    rho: f64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64, rho: f64) -> Result<Self> {
        if !(rho.is_finite() && (-1.0..=1.0).contains(&rho)) {
            return Err(SimError::domain(format!("rho {rho} must lie in [-1, 1]")));
        }
        Ok(NoiseStream {
            seed,
            stream_id,
            rho,
            counter: 0,
            rng: ChaCha8Rng::from_seed(chacha_key(seed, stream_id, DOMAIN_FIELD)),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Step index consumed by the next `sample_increments` call.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Repositions the stream at an arbitrary step, e.g. to replay a
    /// window.
    pub fn set_counter(&mut self, counter: u64) {
        self.counter = counter;
    }

    /// Draws one standard-normal pair from the current cipher position.
    /// Consumes exactly `WORDS_PER_SITE` words (Box–Muller on two u64s), so
    /// sequential site draws land on a fixed word grid.
    #[inline]
    fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
        let u1 = unit_open(rng.next_u64());
        let u2 = unit_open(rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Fills per-site increments for the current step and advances the
    /// counter. Both driving noises have variance dt per site;
    /// corr(dB¹(i), dB²(i)) = rho, distinct sites are independent.
    pub fn fill_increments(&mut self, dt: f64, db1: &mut [f64], db2: &mut [f64]) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::domain(format!("dt {dt} must be positive and finite")));
        }
        if db1.len() != db2.len() {
            return Err(SimError::precondition("increment buffers differ in length"));
        }
        let sqrt_dt = dt.sqrt();
        let cross = (1.0 - self.rho * self.rho).sqrt();
        self.rng.set_stream(self.counter);
        self.rng.set_word_pos(0);
        for (b1, b2) in db1.iter_mut().zip(db2.iter_mut()) {
            let (z1, z2) = Self::normal_pair(&mut self.rng);
            let d1 = sqrt_dt * z1;
            // Exact at rho = ±1: cross is 0.0, so dB² = ±dB¹ bitwise.
            *b1 = d1;
            *b2 = self.rho * d1 + cross * sqrt_dt * z2;
        }
        self.counter += 1;
        Ok(())
    }

    /// Allocating convenience wrapper around `fill_increments`.
    pub fn sample_increments(&mut self, dt: f64, n_sites: usize) -> Result<Vec<(f64, f64)>> {
        let mut db1 = vec![0.0; n_sites];
        let mut db2 = vec![0.0; n_sites];
        self.fill_increments(dt, &mut db1, &mut db2)?;
        Ok(db1.into_iter().zip(db2).collect())
    }

    /// Random-access probe: the increment pair a fill at `step` assigns to
    /// `site`, without touching the counter.
    pub fn increments_at(&self, dt: f64, step: u64, site: usize) -> Result<(f64, f64)> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::domain(format!("dt {dt} must be positive and finite")));
        }
        let mut rng = self.rng.clone();
        rng.set_stream(step);
        rng.set_word_pos(site as u128 * WORDS_PER_SITE);
        let (z1, z2) = Self::normal_pair(&mut rng);
        let sqrt_dt = dt.sqrt();
        let cross = (1.0 - self.rho * self.rho).sqrt();
        let d1 = sqrt_dt * z1;
        Ok((d1, self.rho * d1 + cross * sqrt_dt * z2))
    }

    /// Sequential generator for data-dependent draws tied to this replica.
    pub fn substream(&self, domain: u64, ctr: u64) -> ChaCha8Rng {
        substream(self.seed, self.stream_id, domain, ctr)
    }
}
