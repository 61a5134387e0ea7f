//! Identity-aware GAN with channel-graph reasoning and a capsule-enhanced
//! multi-task discriminator, built on a from-scratch reverse-mode autodiff
//! tape. Includes the full loss stack, alternating training loop,
//! leave-one-subject-out evaluation, and a procedural toy face corpus.

pub mod capsule;
pub mod config;
pub mod data;
pub mod error;
pub mod gemm;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pgm;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Keeps large allocations on the heap instead of per-allocation mmap.
/// Training rebuilds multi-hundred-megabyte tapes every step; without this
/// glibc hands them back to the kernel and every step repays the page
/// faults.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
