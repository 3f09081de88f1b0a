//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Independent generator for stream `name` under `root`.
pub fn stream(root: u64, name: &str) -> Rng {
    indexed(root, name, 0)
}

/// Generator for element `index` of stream `name`, e.g. one bootstrap resample.
pub fn indexed(root: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
