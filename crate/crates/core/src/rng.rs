//! Seeded random streams.
//!
//! Every stochastic role in a run draws from its own ChaCha stream derived
//! from the master seed, so changing how often one role draws never shifts
//! the numbers another role sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// The independent stochastic roles of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Role {
    Pool = 1,
    Split = 2,
    TestSet = 3,
    Init = 4,
    LabeledSampler = 5,
    UnlabeledSampler = 6,
    Augment = 7,
    Tfe = 8,
    ClassifierInit = 9,
    Sweep = 10,
}

/// Builds the stream for `role` under `seed`.
pub fn stream(seed: u64, role: Role) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role as u64);
    rng
}

/// A plain stream for callers that only have a seed.
pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The per-role streams a training run owns.
#[derive(Debug, Clone)]
pub struct RunRngs {
    pub labeled: Rng,
    pub unlabeled: Rng,
    pub augment: Rng,
    pub tfe: Rng,
    pub init: Rng,
    pub classifier_init: Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            labeled: stream(seed, Role::LabeledSampler),
            unlabeled: stream(seed, Role::UnlabeledSampler),
            augment: stream(seed, Role::Augment),
            tfe: stream(seed, Role::Tfe),
            init: stream(seed, Role::Init),
            classifier_init: stream(seed, Role::ClassifierInit),
        }
    }
}
