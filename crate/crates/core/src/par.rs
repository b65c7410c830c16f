//! Data-parallel map with a sequential fallback.
//!
//! Both modes return results in index order, and seeded Monte Carlo work is
//! split into fixed chunks with one RNG stream per chunk, so the parallel and
//! sequential paths produce bit-identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for independent work items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is on, otherwise runs
    /// sequentially.
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this mode actually fans out in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Map `f` over `0..n`, preserving order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fallible ordered map; the first error in index order is returned.
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }

    /// Seeded Monte Carlo over `samples` draws split into chunks of `chunk`.
    ///
    /// `f(rng, count)` handles one chunk; chunk results are returned in order
    /// for the caller to merge.
    pub fn monte_carlo<T, F>(self, seed: u64, samples: usize, chunk: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut ChaCha8Rng, usize) -> T + Sync + Send,
    {
        let chunk = chunk.max(1);
        let n_chunks = samples.div_ceil(chunk);
        self.map(n_chunks, |i| {
            let mut rng = chunk_rng(seed, i as u64);
            let count = chunk.min(samples - i * chunk);
            f(&mut rng, count)
        })
    }
}

/// Independent RNG stream `stream` derived from `seed`.
pub fn chunk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
