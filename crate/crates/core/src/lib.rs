//! KEHNN: a knowledge-enhanced hybrid neural network for text matching.
//!
//! Scores how well two pieces of text match by fusing prior knowledge
//! (categories or topics) into word representations through a learned gate,
//! building three similarity-matrix channels (words, BiGRU states,
//! knowledge-enhanced BiGRU states), and extracting matching features with a
//! small 2D CNN followed by an MLP scorer. Ships with its own reverse-mode
//! differentiation tape, an Adam training loop with early stopping, and
//! evaluation tooling (accuracy, recall@k, length buckets, channel
//! ablations).

pub mod channels;
pub mod checkpoint;
pub mod encoder;
pub mod eval;
pub mod knowledge;
pub mod matcher;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use tensor::{Activation, Real, Tensor, TensorError};

/// Environment variable that overrides the config seed.
pub const ENV_SEED: &str = "KEHNN_SEED";
/// Environment variable that caps worker parallelism.
pub const ENV_THREADS: &str = "KEHNN_THREADS";

/// Applies `KEHNN_THREADS` to the global worker pool. Call once at startup;
/// later calls are ignored. Results do not depend on the thread count.
pub fn configure_threads() {
    if let Ok(v) = std::env::var(ENV_THREADS) {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

/// Seed from the environment override, if present and parseable.
pub fn env_seed() -> Option<u64> {
    std::env::var(ENV_SEED).ok()?.trim().parse().ok()
}
