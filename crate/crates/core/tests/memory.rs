//! Peak heap accounting for the matrix-free sketch and the layerwise capture.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cglora::curvature::{subspace, SubspaceParams};
use cglora::harness::commands::capture_signals_to;
use cglora::harness::pipeline::teacher_batch;
use cglora::harness::ExperimentConfig;
use cglora::model::{Activation, LayerSpec, LossKind, Network};
use cglora::random::{gaussian_matrix, stream};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static SERIAL: Mutex<()> = Mutex::new(());

thread_local! {
    static TRACK: Cell<bool> = const { Cell::new(false) };
}

fn tracking() -> bool {
    TRACK.try_with(|t| t.get()).unwrap_or(false)
}

fn grow(n: usize) {
    let now = CURRENT.fetch_add(n, Ordering::SeqCst) + n;
    PEAK.fetch_max(now, Ordering::SeqCst);
}

fn shrink(n: usize) {
    // Frees of blocks allocated before tracking started are clamped at zero.
    let _ = CURRENT.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| Some(c.saturating_sub(n)));
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if tracking() {
            grow(layout.size());
        }
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        if tracking() {
            shrink(layout.size());
        }
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if tracking() {
            grow(new_size);
            shrink(layout.size());
        }
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak bytes allocated (net of frees) while `f` runs on this thread.
fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    CURRENT.store(0, Ordering::SeqCst);
    PEAK.store(0, Ordering::SeqCst);
    TRACK.with(|t| t.set(true));
    let out = f();
    TRACK.with(|t| t.set(false));
    (out, PEAK.load(Ordering::SeqCst))
}

#[test]
fn sketch_never_forms_the_gram() {
    let f64s = std::mem::size_of::<f64>();
    for d in [300usize, 600, 1200] {
        let cols = 40;
        let m = 8;
        let block = gaussian_matrix(d, cols, &mut stream(1, &[d as u64]));
        let params = SubspaceParams::new(m, 2, 3).unwrap();
        let (eig, peak) = peak_during(|| subspace(&block, &params).unwrap());
        assert_eq!(eig.rank(), m);
        assert!(peak >= d * m * f64s, "the sketch itself was not counted");
        let budget = 12 * (d * m + cols * m + m * m) * f64s;
        assert!(peak <= budget, "d={d}: peak {peak} bytes exceeds O(d m) budget {budget}");
        assert!(peak < d * d * f64s / 4, "d={d}: peak {peak} is comparable to a d x d matrix");
    }
}

fn deep_network(layers: usize) -> Network {
    let mut specs = vec![LayerSpec::new(10, 24, Activation::Tanh)];
    for _ in 1..layers - 1 {
        specs.push(LayerSpec::new(24, 24, Activation::Tanh));
    }
    specs.push(LayerSpec::new(24, 3, Activation::Identity));
    Network::new(&specs, 4).unwrap()
}

#[test]
fn signal_capture_peak_is_one_layer() {
    let cfg = ExperimentConfig {
        loss: LossKind::Ce,
        probes: Some(4),
        batch_size: 16,
        ..ExperimentConfig::default()
    };
    let mut peaks = Vec::new();
    for layers in [3usize, 9] {
        let net = deep_network(layers);
        let batch = teacher_batch(&net, LossKind::Ce, 256, 1, 5).unwrap();
        let mut sink = std::io::sink();
        let (summary, peak) = peak_during(|| capture_signals_to(&net, &batch, &cfg, 0, &mut sink).unwrap());
        // Largest single record: inputs (≤24), output and weighted (24 x 4 probes)
        // and loss (24) per sample.
        let record = 256 * (24 + 2 * 24 * 4 + 24) * std::mem::size_of::<f64>();
        assert!(summary.bytes > (layers - 1) * record / 2, "{layers} layers wrote {} bytes", summary.bytes);
        assert!(peak <= 4 * record, "{layers} layers: peak {peak} bytes vs one record {record}");
        assert!(peak >= record / 2, "capture was not counted");
        peaks.push(peak);
    }
    assert!(
        (peaks[1] as f64) < 1.25 * peaks[0] as f64,
        "peak grew with depth: {peaks:?}"
    );
}
