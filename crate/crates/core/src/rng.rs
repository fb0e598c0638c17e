use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Stream ids keep the independent randomness sources of a run from aliasing
/// even when they share a seed: parameter init, data order/masking, fixed
/// evaluation masking, and dropout each get their own counter stream.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_DATA: u64 = 1;
pub const STREAM_EVAL: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal truncated to +-2 sigma by rejection, scaled by `std`.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return std * z;
        }
    }
}

/// Serialize the full generator state as `seedhex:stream:word_pos`; the
/// word position is enough to restore mid-stream for bitwise resume.
pub fn state_string(rng: &ChaCha8Rng) -> String {
    let hex: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    format!("{hex}:{}:{}", rng.get_stream(), rng.get_word_pos())
}

pub fn from_state_string(s: &str) -> Result<ChaCha8Rng> {
    let bad = || Error::CkptManifest(format!("malformed rng state {s:?}"));
    let mut parts = s.split(':');
    let hex = parts.next().ok_or_else(bad)?;
    let stream: u64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let word_pos: u128 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if parts.next().is_some() || hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.iter_mut().enumerate() {
        *chunk = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}
