//! Memory accounting: an analytic element-count estimator per loss, and a
//! counting meter that tracks live/peak elements of tape-managed buffers.
//!
//! Byte figures use 4 bytes per element regardless of the compute precision,
//! so element counts convert to the same numbers a single-precision GPU
//! implementation would report.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Accounting width: logit tensors are costed at single precision.
pub const BYTES_PER_ELEMENT: u64 = 4;

/// Tracks live and peak element counts for tensor buffers.
///
/// The meter is shared by a tape and any scratch allocations that should be
/// charged to the same budget (bucket projections, for example). A window
/// isolates one measurement: `begin_window` re-bases the peak at the current
/// live count, and `window_peak_elements` reports the maximum growth above
/// that base until now.
#[derive(Debug, Clone, Default)]
pub struct MemMeter {
    inner: Arc<MeterInner>,
}

#[derive(Debug, Default)]
struct MeterInner {
    live: AtomicI64,
    peak: AtomicI64,
    window_base: AtomicI64,
}

impl MemMeter {
    pub fn new() -> Self {
        MemMeter::default()
    }

    pub fn on_alloc(&self, elements: usize) {
        let live = self.inner.live.fetch_add(elements as i64, Ordering::SeqCst) + elements as i64;
        self.inner.peak.fetch_max(live, Ordering::SeqCst);
    }

    pub fn on_free(&self, elements: usize) {
        self.inner.live.fetch_sub(elements as i64, Ordering::SeqCst);
    }

    pub fn live_elements(&self) -> i64 {
        self.inner.live.load(Ordering::SeqCst)
    }

    /// Start a measurement window at the current live count.
    pub fn begin_window(&self) {
        let live = self.inner.live.load(Ordering::SeqCst);
        self.inner.window_base.store(live, Ordering::SeqCst);
        self.inner.peak.store(live, Ordering::SeqCst);
    }

    /// Peak growth in elements above the window base.
    pub fn window_peak_elements(&self) -> u64 {
        let peak = self.inner.peak.load(Ordering::SeqCst);
        let base = self.inner.window_base.load(Ordering::SeqCst);
        (peak - base).max(0) as u64
    }

    pub fn window_peak_bytes(&self) -> u64 {
        self.window_peak_elements() * BYTES_PER_ELEMENT
    }
}

/// A buffer whose element count is charged to a meter for its lifetime.
/// Used for gradient-free scratch (bucket projection matrices) so measured
/// peaks include them.
pub struct TrackedBuf {
    data: Vec<f64>,
    meter: MemMeter,
}

impl TrackedBuf {
    pub fn zeros(len: usize, meter: &MemMeter) -> Self {
        meter.on_alloc(len);
        TrackedBuf { data: vec![0.0; len], meter: meter.clone() }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Drop for TrackedBuf {
    fn drop(&mut self) {
        self.meter.on_free(self.data.len());
    }
}

/// Which loss a memory estimate or training run refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    Bce,
    BcePlus,
    CeMinus,
    Sce,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Bce => "bce",
            LossKind::BcePlus => "bce+",
            LossKind::CeMinus => "ce-",
            LossKind::Sce => "sce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "bce" => Ok(LossKind::Bce),
            "bce+" | "bce_plus" | "bceplus" => Ok(LossKind::BcePlus),
            "ce-" | "ce_minus" | "ceminus" => Ok(LossKind::CeMinus),
            "sce" => Ok(LossKind::Sce),
            other => Err(format!("unknown loss '{other}' (expected ce|bce|bce+|ce-|sce)")),
        }
    }
}

/// Loss-specific knobs that drive the logit-tensor size.
#[derive(Debug, Clone, Copy)]
pub enum LossShape {
    /// Full cross-entropy over the whole catalog.
    Ce,
    /// Sampled losses with `k` negatives per position (BCE has k = 1).
    Sampled { k: usize },
    /// Bucketed loss with `n_b` buckets of `b_x` outputs by `b_y` items.
    Bucketed { n_b: usize, b_x: usize, b_y: usize },
}

/// Analytic per-step element counts for the loss stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MemoryEstimate {
    /// Elements of the logit tensor itself: `s*l*C` for CE, `s*l*(k+1)` for
    /// sampled losses, `n_b*b_x*b_y` for the bucketed loss.
    pub logits_elements: u64,
    pub logits_bytes: u64,
    /// Positive-logit vectors plus projection rows (bucketed loss only).
    pub auxiliary_elements: u64,
    /// Measured peak in bytes, filled in when instrumentation ran.
    pub total_peak_bytes: Option<u64>,
}

impl MemoryEstimate {
    pub fn total_elements(&self) -> u64 {
        self.logits_elements + self.auxiliary_elements
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_elements() * BYTES_PER_ELEMENT
    }

    pub fn logits_gb(&self) -> f64 {
        self.logits_bytes as f64 / 1e9
    }
}

/// Element count of the loss-stage tensors for one training step.
pub fn estimate_memory(shape: LossShape, s: usize, l: usize, catalog: usize) -> MemoryEstimate {
    let positions = (s * l) as u64;
    let (logits, aux) = match shape {
        LossShape::Ce => (positions * catalog as u64, 0),
        LossShape::Sampled { k } => (positions * (k as u64 + 1), 0),
        LossShape::Bucketed { n_b, b_x, b_y } => {
            let n_b = n_b as u64;
            let logits = n_b * b_x as u64 * b_y as u64;
            let positives = n_b * b_x as u64;
            let projections = n_b * (positions + catalog as u64);
            (logits, positives + projections)
        }
    };
    MemoryEstimate {
        logits_elements: logits,
        logits_bytes: logits * BYTES_PER_ELEMENT,
        auxiliary_elements: aux,
        total_peak_bytes: None,
    }
}
