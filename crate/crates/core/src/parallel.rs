//! Thread-pool configuration.
//!
//! Parallel sections only ever use gather-style loops (each output element is
//! computed independently), so results are bit-identical for any thread
//! count.

use std::env;

/// Environment variable that caps worker threads (default: all cores).
pub const THREADS_ENV: &str = "MOE_DEPTH_THREADS";

/// Applies `MOE_DEPTH_THREADS` to the global rayon pool. Call once at
/// startup; later calls (or an already-built pool) are ignored.
pub fn configure_threads_from_env() {
    if let Ok(v) = env::var(THREADS_ENV) {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
