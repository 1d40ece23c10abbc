// Training graphs allocate and drop many multi-megabyte buffers per batch;
// the system allocator serves those through mmap/munmap, which costs a page
// fault per touched page on every batch. An arena allocator keeps the pages.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod operators;
pub mod prox;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod unroll;
pub mod wavelet;

pub use error::{Error, Result};
