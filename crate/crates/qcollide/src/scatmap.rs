//! Collision superoperators for the fixed system: exact quadrature for pure
//! packets, the narrow-packet closed form, ensemble mixtures, population-level
//! stochastic matrices, and detailed-balance / complete-positivity
//! diagnostics.
//!
//! Index convention: the N^2 x N^2 matrix `M` stores the map entry for
//! `rho'_{j'k'} = sum_{jk} S^{jk}_{j'k'} rho_{jk}` at row `j'*N + k'`,
//! column `j*N + k` (0-based).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quad;
use crate::scatterer::{
    scattering_matrix, ScatteringMatrixAtE, Side, SystemSpec, THRESHOLD_REL_TOL,
};
use crate::wavepacket::{
    amplitude, broad_coherence_params, broad_ensemble_diagonal, GaussianPacket, MomentumEnsemble,
    PACKET_WINDOW_SIGMAS,
};

/// Relative tolerance deciding when two Bohr gaps count as equal.
pub const GAP_REL_TOL: f64 = 1e-9;

/// Column sums of a population map may deviate from one by at most this.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// Momentum quadrature parameters for pure-packet maps.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureConfig {
    /// Panels per entry integral (the convergence estimate doubles them).
    pub panels: usize,
    /// Gauss-Legendre nodes per panel.
    pub nodes: usize,
    /// Accepted per-entry panel-halving error.
    pub tol: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            panels: 64,
            nodes: 16,
            tol: 1e-6,
        }
    }
}

/// The N^2 x N^2 collision map acting on vectorized density matrices.
#[derive(Debug, Clone)]
pub struct Superoperator {
    dim: usize,
    m: DMatrix<Complex64>,
    quad_error: f64,
}

impl Superoperator {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            m: DMatrix::identity(dim * dim, dim * dim),
            quad_error: 0.0,
        }
    }

    pub fn from_matrix(dim: usize, m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != dim * dim || m.ncols() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: m.nrows(),
            });
        }
        Ok(Self {
            dim,
            m,
            quad_error: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.m
    }

    /// Worst per-entry quadrature error estimate carried by this map
    /// (zero for closed-form builders).
    pub fn quadrature_error(&self) -> f64 {
        self.quad_error
    }

    /// `S^{jk}_{j'k'}`.
    pub fn entry(&self, jp: usize, kp: usize, j: usize, k: usize) -> Complex64 {
        self.m[(jp * self.dim + kp, j * self.dim + k)]
    }

    /// Max deviation of `sum_j' S^{jk}_{j'j'}` from `delta_jk`.
    pub fn trace_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for j in 0..n {
            for k in 0..n {
                let mut tr = Complex64::new(0.0, 0.0);
                for jp in 0..n {
                    tr += self.entry(jp, jp, j, k);
                }
                let expect = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((tr - Complex64::from(expect)).norm());
            }
        }
        worst
    }

    /// Max violation of `S^{jk}_{j'k'} = conj(S^{kj}_{k'j'})`; the map sends
    /// Hermitian matrices to Hermitian matrices iff this vanishes.
    pub fn hermiticity_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for jp in 0..n {
            for kp in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let a = self.entry(jp, kp, j, k);
                        let b = self.entry(kp, jp, k, j).conj();
                        worst = worst.max((a - b).norm());
                    }
                }
            }
        }
        worst
    }

    /// Largest entry magnitude; bounded by one for physical collision maps.
    pub fn max_entry_magnitude(&self) -> f64 {
        self.m.iter().fold(0.0f64, |a, z| a.max(z.norm()))
    }
}

/// A scattering-matrix evaluation that steps off channel thresholds instead
/// of failing: quadrature nodes that land on a threshold are shifted by
/// `1e-12 * scale` in energy.
fn smat_avoiding_thresholds(spec: &SystemSpec, energy: f64) -> Result<ScatteringMatrixAtE> {
    match scattering_matrix(spec, energy) {
        Err(Error::ThresholdEnergy { .. }) | Err(Error::NoOpenChannel { .. }) => {
            let shift = 2.0 * THRESHOLD_REL_TOL * spec.energy_scale().max(energy.abs());
            scattering_matrix(spec, energy + shift)
        }
        other => other,
    }
}

/// Momenta at which a new channel opens for packets incident on level `j`,
/// i.e. kinks of `E -> s(E_p + e_j)` in the momentum variable; used as panel
/// breakpoints. With `j = None`, the union over all source levels.
pub fn channel_opening_momenta(spec: &SystemSpec, source: Option<usize>) -> Vec<f64> {
    let e = spec.energies();
    let mut out = Vec::new();
    for (j, &ej) in e.iter().enumerate() {
        if source.is_some_and(|s| s != j) {
            continue;
        }
        for &el in e {
            if el > ej {
                out.push((2.0 * spec.mass() * (el - ej)).sqrt());
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup();
    out
}

struct EntryGeometry {
    lo: f64,
    hi: f64,
    breakpoints: Vec<f64>,
    dj: f64,
    dd: f64,
}

fn entry_geometry(
    spec: &SystemSpec,
    q0: f64,
    sigma: f64,
    jp: usize,
    kp: usize,
    j: usize,
    k: usize,
) -> Option<EntryGeometry> {
    let m = spec.mass();
    let dj = spec.bohr_gap(jp, j);
    let dk = spec.bohr_gap(kp, k);
    let dd = dj - dk;
    let p_inf = (2.0 * m * dj.max(dd).max(0.0)).sqrt();
    let lo = p_inf.max(q0 - PACKET_WINDOW_SIGMAS * sigma).max(0.0);
    let hi = q0 + PACKET_WINDOW_SIGMAS * sigma;
    if lo >= hi {
        return None;
    }
    let mut breakpoints = Vec::new();
    for &el in spec.energies() {
        // first factor: E_p + e_j crosses e_l
        let kin = el - spec.energies()[j];
        if kin > 0.0 {
            breakpoints.push((2.0 * m * kin).sqrt());
        }
        // second factor: E_p - dj + e_kp crosses e_l
        let kin2 = dj + el - spec.energies()[kp];
        if kin2 > 0.0 {
            breakpoints.push((2.0 * m * kin2).sqrt());
        }
    }
    if dd > 0.0 {
        // outgoing companion momentum pi(p) vanishes here
        breakpoints.push((2.0 * m * dd).sqrt());
    }
    Some(EntryGeometry {
        lo,
        hi,
        breakpoints,
        dj,
        dd,
    })
}

fn pure_entry(
    spec: &SystemSpec,
    side: Side,
    packet_folded: &GaussianPacket,
    inv_mass: f64,
    quad_cfg: &QuadratureConfig,
    jp: usize,
    kp: usize,
    j: usize,
    k: usize,
) -> Result<(Complex64, f64)> {
    let q0 = packet_folded.p0();
    let sigma = packet_folded.sigma();
    let Some(geo) = entry_geometry(spec, q0, sigma, jp, kp, j, k) else {
        return Ok((Complex64::new(0.0, 0.0), 0.0));
    };
    let m = spec.mass();
    let hbar = spec.hbar();
    let e = spec.energies();
    let two_m_dd = 2.0 * m * geo.dd;
    let integrand = |p: f64| -> Result<Complex64> {
        let pi2 = p * p - two_m_dd;
        if pi2 <= 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let pip = pi2.sqrt();
        let ep = p * p / (2.0 * m);
        let s1 = smat_avoiding_thresholds(spec, ep + e[j])?;
        let s2 = smat_avoiding_thresholds(spec, ep - geo.dj + e[kp])?;
        let (Some(t1), Some(r1)) = (s1.t_hat(side, jp, j), s1.r_hat(side, jp, j)) else {
            return Ok(Complex64::new(0.0, 0.0));
        };
        let (Some(t2), Some(r2)) = (s2.t_hat(side, kp, k), s2.r_hat(side, kp, k)) else {
            return Ok(Complex64::new(0.0, 0.0));
        };
        let overlap = amplitude(packet_folded, p, hbar) * amplitude(packet_folded, pip, hbar).conj();
        Ok(overlap * (p / pip).sqrt() * (t1 * t2.conj() + r1 * r2.conj()))
    };
    let segments = quad::split_segments(geo.lo, geo.hi, &geo.breakpoints);
    let coarse = quad::integrate_segmented(&segments, quad_cfg.panels, quad_cfg.nodes, integrand)?;
    let fine =
        quad::integrate_segmented(&segments, 2 * quad_cfg.panels, quad_cfg.nodes, integrand)?;
    let estimate = (fine - coarse).norm() * inv_mass;
    Ok((fine * Complex64::from(inv_mass), estimate))
}

/// Collision map induced by one pure Gaussian packet, by direct momentum
/// quadrature. Incidence side follows the sign of `p0`; the packet is
/// conditioned on that side (an exact no-op for one-sided packets).
///
/// Each entry is integrated twice (panels doubled) and the difference is the
/// per-entry error estimate; the worst one must pass `quad.tol`.
pub fn pure_packet_map(
    spec: &SystemSpec,
    packet: &GaussianPacket,
    quad_cfg: &QuadratureConfig,
) -> Result<Superoperator> {
    let n = spec.dim();
    let side = if packet.p0() >= 0.0 {
        Side::Left
    } else {
        Side::Right
    };
    // fold right incidence onto positive momenta: mirror flips x0
    let folded = GaussianPacket::unchecked(
        packet.p0().abs(),
        if side == Side::Left {
            packet.x0()
        } else {
            -packet.x0()
        },
        packet.sigma(),
    );
    let inv_mass = 1.0 / packet.incidence_side_mass();
    let results: Vec<(Complex64, f64)> = (0..n * n * n * n)
        .into_par_iter()
        .map(|idx| {
            let jp = idx / (n * n * n);
            let kp = (idx / (n * n)) % n;
            let j = (idx / n) % n;
            let k = idx % n;
            pure_entry(spec, side, &folded, inv_mass, quad_cfg, jp, kp, j, k)
        })
        .collect::<Result<_>>()?;
    let mut m = DMatrix::<Complex64>::zeros(n * n, n * n);
    let mut worst = 0.0f64;
    for (idx, (value, est)) in results.into_iter().enumerate() {
        let jp = idx / (n * n * n);
        let kp = (idx / (n * n)) % n;
        let j = (idx / n) % n;
        let k = idx % n;
        m[(jp * n + kp, j * n + k)] = value;
        worst = worst.max(est);
    }
    if worst > quad_cfg.tol {
        return Err(Error::QuadratureNotConverged {
            estimate: worst,
            tol: quad_cfg.tol,
        });
    }
    Ok(Superoperator {
        dim: n,
        m,
        quad_error: worst,
    })
}

/// Closed-form map in the zero-width limit: entries couple only transitions
/// with equal Bohr gaps and are built from the scattering amplitudes at the
/// packet's mean energy. `p0` is the incident momentum magnitude.
pub fn narrow_map(spec: &SystemSpec, p0: f64, side: Side) -> Result<Superoperator> {
    narrow_map_with_gap_tol(spec, p0, side, None)
}

/// [`narrow_map`] with an explicit absolute tolerance for the equal-gap test
/// (defaults to `GAP_REL_TOL * max |Delta|`).
pub fn narrow_map_with_gap_tol(
    spec: &SystemSpec,
    p0: f64,
    side: Side,
    gap_tol: Option<f64>,
) -> Result<Superoperator> {
    if !(p0 > 0.0 && p0.is_finite()) {
        return Err(Error::InvalidArgument(
            "narrow_map expects a positive momentum magnitude".into(),
        ));
    }
    let n = spec.dim();
    let ep0 = p0 * p0 / (2.0 * spec.mass());
    let smats: Vec<ScatteringMatrixAtE> = (0..n)
        .map(|j| scattering_matrix(spec, ep0 + spec.energies()[j]))
        .collect::<Result<_>>()?;
    let max_gap = (0..n)
        .flat_map(|j| (0..n).map(move |k| (j, k)))
        .fold(0.0f64, |a, (j, k)| a.max(spec.bohr_gap(j, k).abs()));
    let eps = gap_tol.unwrap_or(GAP_REL_TOL * max_gap);
    let mut m = DMatrix::<Complex64>::zeros(n * n, n * n);
    for jp in 0..n {
        for kp in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if (spec.bohr_gap(jp, j) - spec.bohr_gap(kp, k)).abs() > eps {
                        continue;
                    }
                    let s1 = &smats[j];
                    let s2 = &smats[k];
                    let (Some(t1), Some(r1)) = (s1.t_hat(side, jp, j), s1.r_hat(side, jp, j))
                    else {
                        continue;
                    };
                    let (Some(t2), Some(r2)) = (s2.t_hat(side, kp, k), s2.r_hat(side, kp, k))
                    else {
                        continue;
                    };
                    m[(jp * n + kp, j * n + k)] = t1 * t2.conj() + r1 * r2.conj();
                }
            }
        }
    }
    Ok(Superoperator {
        dim: n,
        m,
        quad_error: 0.0,
    })
}

fn narrow_map_avoiding_thresholds(spec: &SystemSpec, p0: f64, side: Side) -> Result<Superoperator> {
    match narrow_map(spec, p0, side) {
        Err(Error::ThresholdEnergy { .. }) => {
            let shift = 2.0 * THRESHOLD_REL_TOL * spec.energy_scale();
            let p0_shifted = (p0 * p0 + 2.0 * spec.mass() * shift).sqrt();
            narrow_map(spec, p0_shifted, side)
        }
        other => other,
    }
}

/// How ensemble members are turned into maps.
#[derive(Debug, Clone, Copy)]
pub enum EnsembleBuilder {
    /// Zero-width closed form per momentum node.
    NarrowLimit,
    /// Full packet quadrature with width `sigma` per node.
    FullQuadrature {
        sigma: f64,
        quad: QuadratureConfig,
    },
}

/// Mixture map of a symmetric ensemble: for every node `p0`, members come in
/// from both sides with weight `mu(p0)/2` each, and the member maps are
/// averaged with the grid weights. Linearity of the collision map in the
/// particle state justifies mixing superoperators directly.
pub fn ensemble_map(
    spec: &SystemSpec,
    ensemble: &MomentumEnsemble,
    builder: &EnsembleBuilder,
) -> Result<Superoperator> {
    let n = spec.dim();
    let weights = ensemble.mixture_weights();
    let members: Vec<(f64, Superoperator, Superoperator)> = weights
        .par_iter()
        .map(|&(p0, w)| -> Result<_> {
            let (left, right) = match builder {
                EnsembleBuilder::NarrowLimit => (
                    narrow_map_avoiding_thresholds(spec, p0, Side::Left)?,
                    narrow_map_avoiding_thresholds(spec, p0, Side::Right)?,
                ),
                EnsembleBuilder::FullQuadrature { sigma, quad } => {
                    let pl = GaussianPacket::unchecked(p0, 0.0, *sigma);
                    let pr = GaussianPacket::unchecked(-p0, 0.0, *sigma);
                    (
                        pure_packet_map(spec, &pl, quad)?,
                        pure_packet_map(spec, &pr, quad)?,
                    )
                }
            };
            Ok((w, left, right))
        })
        .collect::<Result<_>>()?;
    let mut m = DMatrix::<Complex64>::zeros(n * n, n * n);
    let mut worst = 0.0f64;
    for (w, left, right) in &members {
        let half = Complex64::from(0.5 * w);
        m += (left.matrix() + right.matrix()) * half;
        worst = worst.max(left.quad_error).max(right.quad_error);
    }
    Ok(Superoperator {
        dim: n,
        m,
        quad_error: worst,
    })
}

/// The population sector `W_jk = S^{kk}_{jj}` as a column-stochastic matrix.
#[derive(Debug, Clone)]
pub struct PopulationMap {
    w: DMatrix<f64>,
}

impl PopulationMap {
    /// Validates entries and column sums.
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: w.ncols(),
            });
        }
        for j in 0..n {
            for k in 0..n {
                if w[(j, k)] < -1e-10 {
                    return Err(Error::NotStochastic(format!(
                        "negative entry {} at ({j},{k})",
                        w[(j, k)]
                    )));
                }
            }
        }
        for k in 0..n {
            let sum: f64 = w.column(k).sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NotStochastic(format!(
                    "column {k} sums to {sum}",
                )));
            }
        }
        Ok(Self { w })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            w: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        self.w[(j, k)]
    }

    /// `p' = W p`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        for j in 0..n {
            for k in 0..n {
                out[j] += self.w[(j, k)] * p[k];
            }
        }
        out
    }

    /// Stationary probability vector, from the bordered linear system
    /// `(W - I) pi = 0`, `sum pi = 1`.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut a = self.w.clone() - DMatrix::<f64>::identity(n, n);
        for k in 0..n {
            a[(n - 1, k)] = 1.0;
        }
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::NotStochastic("stationary solve failed".into()))?;
        Ok(pi.iter().copied().collect())
    }
}

/// Extracts the population map from a superoperator, checking that the
/// population sector is real, nonnegative and column-stochastic.
pub fn population_map(s: &Superoperator) -> Result<PopulationMap> {
    let n = s.dim();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let v = s.entry(j, j, k, k);
            if v.im.abs() > 1e-10 {
                return Err(Error::NotStochastic(format!(
                    "imaginary residue {} at ({j},{k})",
                    v.im
                )));
            }
            w[(j, k)] = v.re;
        }
    }
    PopulationMap::from_matrix(w)
}

/// Max relative violation of `W_j'j e^(-beta e_j) = W_jj' e^(-beta e_j')`
/// over ordered pairs. Pairs whose forward flux is negligible against the
/// largest one are floored so they cannot dominate the ratio.
pub fn detailed_balance_residual(w: &PopulationMap, beta: f64, energies: &[f64]) -> f64 {
    let n = w.dim();
    let mut max_flux = 0.0f64;
    for j in 0..n {
        for jp in 0..n {
            if jp != j {
                max_flux = max_flux.max(w.entry(jp, j) * (-beta * energies[j]).exp());
            }
        }
    }
    let floor = (1e-12 * max_flux).max(1e-300);
    let mut worst = 0.0f64;
    for j in 0..n {
        for jp in 0..n {
            if jp == j {
                continue;
            }
            let forward = w.entry(jp, j) * (-beta * energies[j]).exp();
            let backward = w.entry(j, jp) * (-beta * energies[jp]).exp();
            worst = worst.max((forward - backward).abs() / forward.max(floor));
        }
    }
    worst
}

/// Choi matrix `C[(j'N+j),(k'N+k)] = S^{jk}_{j'k'}`; positive semidefinite
/// iff the map is completely positive.
pub fn choi_matrix(s: &Superoperator) -> DMatrix<Complex64> {
    let n = s.dim();
    DMatrix::from_fn(n * n, n * n, |row, col| {
        let (jp, j) = (row / n, row % n);
        let (kp, k) = (col / n, col % n);
        s.entry(jp, kp, j, k)
    })
}

/// Smallest eigenvalue of the (Hermitized) Choi matrix.
pub fn choi_min_eigenvalue(s: &Superoperator) -> f64 {
    let c = choi_matrix(s);
    let h = (&c + c.adjoint()) * Complex64::from(0.5);
    let eig = h.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Population map of the effusion-weighted broad-packet mixture, using the
/// closed-form momentum diagonal: `W_j'j = int dp 2 rho_X(p,p) P_j'j(E_p + e_j)`
/// over positive momenta.
pub fn broad_population_map(
    spec: &SystemSpec,
    beta: f64,
    sigma: f64,
    grid: &crate::wavepacket::GridConfig,
) -> Result<PopulationMap> {
    let n = spec.dim();
    let m = spec.mass();
    let (_, beta_c) = broad_coherence_params(beta, m, sigma);
    let breakpoints = channel_opening_momenta(spec, None);
    let thermal = (2.0 * m * (1.0 / grid.tail_tol).ln() / beta_c).sqrt();
    let spread = 6.0 * (m / beta_c).sqrt();
    let max_break = breakpoints.iter().copied().fold(0.0f64, f64::max);
    let p_cut = thermal
        .max(max_break + spread)
        .max(12.0 * sigma);
    let segments = quad::split_segments(0.0, p_cut, &breakpoints);
    let panels = segments.len().max(grid.nodes.div_ceil(16));
    let mut w = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for jp in 0..n {
            let val = quad::integrate_segmented_real(&segments, panels, 16, |p| {
                let energy = p * p / (2.0 * m) + spec.energies()[j];
                let smat = smat_avoiding_thresholds(spec, energy)?;
                let p_avg = match (smat.t_hat(Side::Left, jp, j), smat.r_hat(Side::Left, jp, j)) {
                    (Some(t), Some(r)) => {
                        let pl = t.norm_sqr() + r.norm_sqr();
                        // delta potential: right blocks coincide, but keep the average honest
                        let tr = smat.t_hat(Side::Right, jp, j).unwrap();
                        let rr = smat.r_hat(Side::Right, jp, j).unwrap();
                        0.5 * (pl + tr.norm_sqr() + rr.norm_sqr())
                    }
                    _ => 0.0,
                };
                Ok(2.0 * broad_ensemble_diagonal(beta, m, sigma, p) * p_avg)
            })?;
            w[(jp, j)] = val;
        }
    }
    PopulationMap::from_matrix(w)
}

/// Population block of the narrow-limit symmetric ensemble map, computed
/// directly from transition probabilities without building the full
/// superoperator. Validated against the full path in tests.
pub fn narrow_ensemble_population_map(
    spec: &SystemSpec,
    ensemble: &MomentumEnsemble,
) -> Result<PopulationMap> {
    let n = spec.dim();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for (p0, wmu) in ensemble.mixture_weights() {
        for j in 0..n {
            let energy = p0 * p0 / (2.0 * spec.mass()) + spec.energies()[j];
            let smat = smat_avoiding_thresholds(spec, energy)?;
            for jp in 0..n {
                let (Some(tl), Some(rl)) = (
                    smat.t_hat(Side::Left, jp, j),
                    smat.r_hat(Side::Left, jp, j),
                ) else {
                    continue;
                };
                let tr = smat.t_hat(Side::Right, jp, j).unwrap();
                let rr = smat.r_hat(Side::Right, jp, j).unwrap();
                let p_avg = 0.5
                    * (tl.norm_sqr() + rl.norm_sqr() + tr.norm_sqr() + rr.norm_sqr());
                w[(jp, j)] += wmu * p_avg;
            }
        }
    }
    PopulationMap::from_matrix(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_level() -> SystemSpec {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        SystemSpec::new(vec![0.0, 1.0], v, 1.0, 1.0, 1.0).unwrap()
    }

    fn fig4_spec() -> SystemSpec {
        let v = DMatrix::from_row_slice(
            5,
            5,
            &[
                0.0, 1.0, 0.0, 1.0, 0.0, //
                1.0, 0.0, 1.0, 0.0, 1.0, //
                0.0, 1.0, 0.0, 1.0, 0.0, //
                1.0, 0.0, 1.0, 0.0, 1.0, //
                0.0, 1.0, 0.0, 1.0, 0.0,
            ],
        );
        SystemSpec::new(vec![1.0, 4.0, 9.0, 16.0, 25.0], v, 1.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn zero_coupling_pure_map_is_identity() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let spec = SystemSpec::new(vec![0.0, 1.0], v, 0.0, 1.0, 1.0).unwrap();
        let packet = GaussianPacket::new(10.0, 0.0, 0.5).unwrap();
        let s = pure_packet_map(&spec, &packet, &QuadratureConfig::default()).unwrap();
        let id = Superoperator::identity(2);
        assert!((s.matrix() - id.matrix()).norm() < 1e-9);
    }

    #[test]
    fn narrow_map_population_block_is_transition_matrix() {
        let spec = two_level();
        let s = narrow_map(&spec, 10.0, Side::Left).unwrap();
        let smat = scattering_matrix(&spec, 50.0 + 0.0).unwrap();
        let (pl, _, _) = crate::scatterer::transition_probabilities(&smat);
        // columns of the population block evaluated at E_p0 + e_j
        assert_relative_eq!(s.entry(0, 0, 0, 0).re, pl[(0, 0)], epsilon = 1e-12);
        assert_relative_eq!(s.entry(1, 1, 0, 0).re, pl[(1, 0)], epsilon = 1e-12);
        let w = population_map(&s).unwrap();
        for k in 0..2 {
            assert_relative_eq!(w.matrix().column(k).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn narrow_map_is_trace_preserving_and_cp() {
        let spec = fig4_spec();
        let s = narrow_map(&spec, 6.0, Side::Left).unwrap();
        assert!(s.trace_residual() < 1e-12);
        assert!(s.hermiticity_residual() < 1e-12);
        assert!(s.max_entry_magnitude() <= 1.0 + 1e-9);
        assert!(choi_min_eigenvalue(&s) >= -1e-12);
    }

    #[test]
    fn narrow_map_closed_channels_zeroed() {
        // E_p0 + e_1 opens only three channels: transitions into 4,5 vanish
        let spec = fig4_spec();
        let s = narrow_map(&spec, 3.0, Side::Left).unwrap();
        // E = 9 + 1 = 10 -> channels 1..3 open from the ground level
        assert_eq!(s.entry(3, 3, 0, 0).norm(), 0.0);
        assert_eq!(s.entry(4, 4, 0, 0).norm(), 0.0);
        assert!(s.entry(1, 1, 0, 0).norm() > 0.0);
        // columns still stochastic over the open sector
        let w = population_map(&s).unwrap();
        for k in 0..5 {
            assert_relative_eq!(w.matrix().column(k).sum(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn identity_superoperator_diagnostics() {
        let s = Superoperator::identity(3);
        assert_eq!(s.trace_residual(), 0.0);
        assert_eq!(s.hermiticity_residual(), 0.0);
        let w = population_map(&s).unwrap();
        assert!((w.matrix() - DMatrix::<f64>::identity(3, 3)).norm() < 1e-15);
        assert_eq!(detailed_balance_residual(&w, 3.0, &[0.0, 1.0, 2.0]), 0.0);
        // Choi of the identity map: rank one, eigenvalues {N, 0, ...}
        let eigs = {
            let c = choi_matrix(&s);
            let mut v: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().cloned().collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        assert_relative_eq!(eigs[eigs.len() - 1], 3.0, epsilon = 1e-12);
        assert!(eigs[..eigs.len() - 1].iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn ensemble_map_is_weighted_sum_of_members() {
        let spec = two_level();
        let ens = MomentumEnsemble::new(
            crate::wavepacket::EnsembleKind::Effusion,
            2.0,
            1.0,
            crate::wavepacket::GridConfig {
                nodes: 32,
                tail_tol: 1e-8,
            },
            &channel_opening_momenta(&spec, None),
        )
        .unwrap();
        let full = ensemble_map(&spec, &ens, &EnsembleBuilder::NarrowLimit).unwrap();
        let mut acc = DMatrix::<Complex64>::zeros(4, 4);
        for (p0, w) in ens.mixture_weights() {
            let l = narrow_map(&spec, p0, Side::Left).unwrap();
            let r = narrow_map(&spec, p0, Side::Right).unwrap();
            acc += (l.matrix() + r.matrix()) * Complex64::from(0.5 * w);
        }
        assert!((full.matrix() - acc).norm() < 1e-14);
    }

    #[test]
    fn population_shortcut_matches_full_narrow_path() {
        let spec = fig4_spec();
        let ens = MomentumEnsemble::new(
            crate::wavepacket::EnsembleKind::Effusion,
            3.0,
            0.5,
            crate::wavepacket::GridConfig::default(),
            &channel_opening_momenta(&spec, None),
        )
        .unwrap();
        let full = population_map(&ensemble_map(&spec, &ens, &EnsembleBuilder::NarrowLimit).unwrap())
            .unwrap();
        let fast = narrow_ensemble_population_map(&spec, &ens).unwrap();
        assert!((full.matrix() - fast.matrix()).norm() < 1e-12);
    }

    #[test]
    fn stationary_distribution_of_identity_variants() {
        let w = PopulationMap::from_matrix(DMatrix::from_row_slice(
            2,
            2,
            &[0.9, 0.3, 0.1, 0.7],
        ))
        .unwrap();
        let pi = w.stationary_distribution().unwrap();
        assert_relative_eq!(pi[0], 0.75, epsilon = 1e-12);
        assert_relative_eq!(pi[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn not_stochastic_detected() {
        let w = DMatrix::from_row_slice(2, 2, &[0.9, 0.3, 0.2, 0.7]);
        assert!(matches!(
            PopulationMap::from_matrix(w),
            Err(Error::NotStochastic(_))
        ));
        let neg = DMatrix::from_row_slice(2, 2, &[1.1, 0.3, -0.1, 0.7]);
        assert!(PopulationMap::from_matrix(neg).is_err());
    }
}
