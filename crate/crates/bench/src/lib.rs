//! Fixtures shared by the training benchmarks.

use cossl_core::train::{TrainData, TrainState, Trainer};
use cossl_core::{Mode, TrainConfig};

/// Default-sized problem with the state advanced to the co-learning phase.
pub struct Fixture {
    pub cfg: TrainConfig,
    pub data: TrainData,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let mut cfg = TrainConfig::default();
        cfg.cossl.seed = seed;
        cfg.cossl.mode = Mode::Cossl;
        cfg.cossl.total_steps = 1000;
        let data = TrainData::synthetic(&cfg).expect("default config builds");
        Self { cfg, data }
    }

    pub fn trainer(&self) -> Trainer<'_> {
        Trainer::new(&self.cfg, &self.data).expect("default config trains")
    }

    /// A state whose next step is a co-learning step.
    pub fn cossl_state(&self, trainer: &Trainer<'_>) -> TrainState {
        let mut state = trainer.init_state().expect("state");
        while !trainer.is_cossl_step(state.step) {
            trainer.step(&mut state).expect("warm-up step");
        }
        state
    }

    /// First `n` labeled rows as a flat batch.
    pub fn input_batch(&self, n: usize) -> (Vec<f64>, usize) {
        let n = n.min(self.data.labeled.len());
        let d = self.data.labeled.dim();
        (self.data.labeled.features()[..n * d].to_vec(), n)
    }
}
