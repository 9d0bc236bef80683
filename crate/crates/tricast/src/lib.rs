//! A self-contained stock-price forecasting engine.
//!
//! The pipeline runs end to end in this crate: OHLCV ingestion and cleaning
//! ([`market_data`]), technical-indicator feature construction
//! ([`indicators`]), three small neural forecasters (a VAE with a regression
//! head, a transformer encoder, and a stacked bidirectional LSTM in
//! [`models`]) trained through an in-crate reverse-mode autodiff tape
//! ([`tensor`]), a dynamically re-weighted prediction ensemble
//! ([`ensemble`]), the chronological training protocol ([`trainer`]), and a
//! metric/baseline evaluation suite ([`evaluation`]).

pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod indicators;
pub mod market_data;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

/// Keeps large freed buffers on the process heap instead of returning them
/// to the kernel. Every training step allocates and frees tape arenas tens
/// of megabytes large; above glibc's default mmap threshold each of those
/// rounds through mmap/munmap and page faults. Call once before a training
/// or evaluation run. No-op outside Linux.
#[cfg(target_os = "linux")]
pub fn retain_freed_buffers() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
    }
}

#[cfg(not(target_os = "linux"))]
pub fn retain_freed_buffers() {}
