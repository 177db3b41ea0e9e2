//! Thread control for the numeric kernels.
//!
//! Kernels split work by output plane, so every element is produced by one
//! thread with a fixed accumulation order. Results are therefore identical for
//! any thread count, including serial mode.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

pub const THREADS_ENV: &str = "HAZEFORGE_THREADS";

static SERIAL: AtomicBool = AtomicBool::new(false);

pub fn set_serial(serial: bool) {
    SERIAL.store(serial, Ordering::Relaxed);
}

pub fn is_serial() -> bool {
    SERIAL.load(Ordering::Relaxed)
}

/// Reads `HAZEFORGE_THREADS`: `0` selects serial mode, `n > 0` caps the
/// global pool at `n` workers. Returns the resulting worker count.
pub fn configure_from_env() -> usize {
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(0) => {
            set_serial(true);
            1
        }
        Some(n) => {
            // A second call keeps the pool that already exists.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
            set_serial(false);
            rayon::current_num_threads()
        }
        None => rayon::current_num_threads(),
    }
}

pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if is_serial() || data.len() / chunk < 2 {
        data.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
