//! Contexts with a controlled share of gold sections.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;

/// Number of gold slots for `ratio` of `slots`, rounded half away from zero.
pub fn gold_slots(ratio: f64, slots: usize) -> usize {
    (ratio * slots as f64).round() as usize
}

/// `round(ratio * slots)` gold sections plus distractors for the remaining
/// slots, drawn and shuffled with `seed`.
pub fn mix_snr_context<T: Clone>(
    gold: &[T],
    distractors: &[T],
    ratio: f64,
    slots: usize,
    seed: u64,
) -> Result<Vec<T>, EvalError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(EvalError::InvalidParameter(format!(
            "ratio {ratio} is outside [0, 1]"
        )));
    }
    let n_gold = gold_slots(ratio, slots);
    let n_noise = slots - n_gold;
    if gold.len() < n_gold {
        return Err(EvalError::InsufficientPool {
            pool: "gold",
            needed: n_gold,
            available: gold.len(),
        });
    }
    if distractors.len() < n_noise {
        return Err(EvalError::InsufficientPool {
            pool: "distractor",
            needed: n_noise,
            available: distractors.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<T> = gold
        .choose_multiple(&mut rng, n_gold)
        .cloned()
        .chain(distractors.choose_multiple(&mut rng, n_noise).cloned())
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}
