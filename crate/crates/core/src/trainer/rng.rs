use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams derived from one run seed. Changing the consumption of
/// one stream never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Task = 1,
    Rollout = 2,
    Eval = 3,
    Init = 4,
    Sft = 5,
    Kd = 6,
    SeqKd = 7,
    Verify = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
