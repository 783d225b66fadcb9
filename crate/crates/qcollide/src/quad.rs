//! Gauss-Legendre quadrature over threshold-split segments.
//!
//! Integrands here are smooth between channel thresholds but pick up
//! square-root kinks at them (and at points where an outgoing momentum
//! vanishes). Each segment is therefore mapped through `p = a + (b-a) sin^2
//! theta`, which absorbs sqrt-type endpoint behavior on both ends, and then
//! integrated with composite Gauss-Legendre panels in theta.

use num_complex::Complex64;

use crate::error::Result;

/// Nodes and weights of the n-point Gauss-Legendre rule on (-1, 1),
/// by Newton iteration on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x.abs();
        weights[i] = w;
        nodes[n - 1 - i] = x.abs();
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, d) = legendre_and_derivative(n, 0.0);
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Splits `[lo, hi]` at the interior breakpoints, dropping degenerate pieces.
pub fn split_segments(lo: f64, hi: f64, breakpoints: &[f64]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&b| b > lo && b < hi)
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * hi.abs().max(1.0));
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(lo);
    edges.extend(cuts);
    edges.push(hi);
    edges
        .windows(2)
        .filter(|w| w[1] - w[0] > 1e-300)
        .map(|w| (w[0], w[1]))
        .collect()
}

/// Integrates `f` over the given segments with `panels` theta-panels in
/// total (distributed by width, at least one per segment) and `nodes`
/// Gauss-Legendre points per panel. Summation order is fixed, so results
/// are bit-reproducible.
pub fn integrate_segmented<F>(
    segments: &[(f64, f64)],
    panels: usize,
    nodes: usize,
    mut f: F,
) -> Result<Complex64>
where
    F: FnMut(f64) -> Result<Complex64>,
{
    let (gx, gw) = gauss_legendre(nodes);
    let total: f64 = segments.iter().map(|(a, b)| b - a).sum();
    if total <= 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let mut sum = Complex64::new(0.0, 0.0);
    for &(a, b) in segments {
        let width = b - a;
        let n_panels = ((panels as f64 * width / total).round() as usize).max(1);
        let dtheta = std::f64::consts::FRAC_PI_2 / n_panels as f64;
        for ip in 0..n_panels {
            let t0 = ip as f64 * dtheta;
            let mid = t0 + 0.5 * dtheta;
            let half = 0.5 * dtheta;
            for (x, w) in gx.iter().zip(&gw) {
                let theta = mid + half * x;
                let s = theta.sin();
                let p = a + width * s * s;
                let jac = width * (2.0 * theta).sin() * half * w;
                sum += f(p)? * jac;
            }
        }
    }
    Ok(sum)
}

/// Real-valued convenience wrapper around [`integrate_segmented`].
pub fn integrate_segmented_real<F>(
    segments: &[(f64, f64)],
    panels: usize,
    nodes: usize,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    integrate_segmented(segments, panels, nodes, |p| {
        Ok(Complex64::new(f(p)?, 0.0))
    })
    .map(|z| z.re)
}
