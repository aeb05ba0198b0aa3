//! Wall-clock helpers. Timed sections run on a dedicated rayon pool so the
//! thread count is explicit.

use std::hint::black_box;
use std::time::{Duration, Instant};

/// Runs `f` inside a rayon pool of exactly `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("building rayon pool")
        .install(f)
}

/// Median of a non-empty sample (mean of the two middle values for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64())
}

/// Mean seconds per call of a fast operation, repeating it until the
/// measured window reaches `min_window`.
pub fn per_call_seconds<R>(mut f: impl FnMut() -> R, min_window: Duration) -> f64 {
    black_box(f());
    let mut reps: u64 = 1;
    loop {
        let start = Instant::now();
        for _ in 0..reps {
            black_box(f());
        }
        let elapsed = start.elapsed();
        if elapsed >= min_window {
            return elapsed.as_secs_f64() / reps as f64;
        }
        let scale = if elapsed.is_zero() { 16 } else { (min_window.as_secs_f64() / elapsed.as_secs_f64() * 1.2).ceil() as u64 };
        reps = reps.saturating_mul(scale.clamp(2, 1 << 20));
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "need at least two points for a slope");
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
