//! Wall-clock and peak-allocation comparison of the two attention kernels.
//!
//! Peak bytes are only measured when the running binary installs
//! [`TrackingAllocator`] as its global allocator; otherwise they read 0.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{exact_softmax_attention, linear_attention, AttentionKernel, RandomFeatureMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BENCH_CSV_HEADER: &str = "kernel,n_atoms,m_nodes,median_ms,peak_bytes";

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live and peak heap bytes.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        // SAFETY: forwarded verbatim to the system allocator.
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        // SAFETY: `ptr` came from `alloc` above with the same layout.
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

impl TrackingAllocator {
    pub fn is_active() -> bool {
        ACTIVE.load(Ordering::Relaxed)
    }

    /// Restarts peak tracking from the current live size.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    /// Peak live bytes above `baseline` since the last reset.
    pub fn peak_above(baseline: usize) -> usize {
        PEAK.load(Ordering::Relaxed).saturating_sub(baseline)
    }

    pub fn current() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: AttentionKernel,
    pub n_atoms: usize,
    pub m_nodes: usize,
    /// `None` when the kernel could not run at this size.
    pub median_ms: Option<f64>,
    pub peak_bytes: Option<usize>,
    pub error: Option<String>,
}

/// Times one attention call over the `M = N(N-1)/2` line nodes per size.
/// Inputs are `M x d_head` with `R` features for the linear kernel.
pub fn bench_attention(
    n_atoms: &[usize],
    kernels: &[AttentionKernel],
    repeats: usize,
    d_head: usize,
    n_features: usize,
    memory_budget: usize,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    let rf = RandomFeatureMap::new(n_features, d_head, 0)?;
    let mut rows = Vec::new();
    for &n in n_atoms {
        let m = n * n.saturating_sub(1) / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let q = Tensor::randn(&[m, d_head], 1.0, &mut rng);
        let k = Tensor::randn(&[m, d_head], 1.0, &mut rng);
        let v = Tensor::randn(&[m, d_head], 1.0, &mut rng);
        for &kernel in kernels {
            // The exact kernel holds two M x M score buffers at its peak.
            let estimate = match kernel {
                AttentionKernel::Exact => 2 * m * m * 8,
                AttentionKernel::Linear => 4 * m * n_features * 8,
            };
            if estimate > memory_budget {
                rows.push(BenchRow {
                    kernel,
                    n_atoms: n,
                    m_nodes: m,
                    median_ms: None,
                    peak_bytes: None,
                    error: Some(format!("estimated {estimate} bytes exceeds budget")),
                });
                continue;
            }
            let mut times = Vec::with_capacity(repeats);
            let mut peak = 0usize;
            let mut failure = None;
            for _ in 0..repeats {
                let base = TrackingAllocator::current();
                TrackingAllocator::reset_peak();
                let start = Instant::now();
                let out = match kernel {
                    AttentionKernel::Exact => exact_softmax_attention(&q, &k, &v),
                    AttentionKernel::Linear => linear_attention(&q, &k, &v, &rf),
                };
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                peak = peak.max(TrackingAllocator::peak_above(base));
                match out {
                    Ok(t) => {
                        std::hint::black_box(t);
                        times.push(elapsed);
                    }
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                kernel,
                n_atoms: n,
                m_nodes: m,
                median_ms: failure.is_none().then(|| times[times.len() / 2]),
                peak_bytes: failure.is_none().then_some(peak),
                error: failure,
            });
        }
    }
    Ok(rows)
}

/// `kernel,n_atoms,m_nodes,median_ms,peak_bytes`; failed rows leave the
/// measurements empty.
pub fn write_bench_csv<W: Write>(mut out: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for r in rows {
        let ms = r.median_ms.map(|x| format!("{x:.4}")).unwrap_or_default();
        let bytes = r.peak_bytes.map(|x| x.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.kernel, r.n_atoms, r.m_nodes, ms, bytes)?;
    }
    Ok(())
}
