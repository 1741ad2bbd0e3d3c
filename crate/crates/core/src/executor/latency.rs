use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::stable_hash;
use crate::pilot::LatencyModel;
use crate::time::Micros;

/// Independent stream seed for `label` under a session seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // splitmix64 finaliser over the combined value
    let mut z = seed ^ stable_hash(label);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws clamped normal launcher latencies.
#[derive(Debug, Clone)]
pub struct LatencySampler {
    model: LatencyModel,
    rng: ChaCha8Rng,
}

impl LatencySampler {
    pub fn new(model: LatencyModel, seed: u64) -> Self {
        LatencySampler {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn prepare(&mut self) -> Micros {
        let (m, s) = (self.model.prepare_mean_s, self.model.prepare_std_s);
        Micros::from_secs_f64(normal_clamped(&mut self.rng, m, s))
    }

    /// Ack latency with `inflight` other tasks running on the same DVM.
    pub fn ack(&mut self, inflight: u64) -> Micros {
        let m = self.model.ack_mean_at(inflight);
        let s = self.model.ack_std_s;
        Micros::from_secs_f64(normal_clamped(&mut self.rng, m, s))
    }
}

/// N(mean, std) clamped at zero; exactly `mean` when std is zero.
pub fn normal_clamped(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    if std <= 0.0 {
        return mean.max(0.0);
    }
    match Normal::new(mean, std) {
        Ok(d) => d.sample(rng).max(0.0),
        Err(_) => mean.max(0.0),
    }
}
