//! Incident-particle states: Gaussian momentum packets, narrowness
//! diagnostics, and the momentum distributions that weight ensembles.

use num_complex::Complex64;
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::quad;
use crate::scatterer::SystemSpec;

/// Gaussian mass kept outside `p0 +/- 8 sigma` is below 1e-15; every
/// downstream quadrature inherits this window.
pub const PACKET_WINDOW_SIGMAS: f64 = 8.0;

/// One-sidedness requirement: `|p0| >= 6 sigma` keeps the wrong-sign
/// momentum tail negligible.
pub const ONE_SIDED_SIGMAS: f64 = 6.0;

/// A pure Gaussian wave-packet in momentum representation. Negative `p0`
/// means incidence from the right.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPacket {
    p0: f64,
    x0: f64,
    sigma: f64,
}

impl GaussianPacket {
    pub fn new(p0: f64, x0: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        if !p0.is_finite() || !x0.is_finite() {
            return Err(Error::InvalidArgument("p0 and x0 must be finite".into()));
        }
        if p0.abs() < ONE_SIDED_SIGMAS * sigma {
            return Err(Error::PacketNotOneSided {
                p0_abs: p0.abs(),
                required: ONE_SIDED_SIGMAS * sigma,
            });
        }
        Ok(Self { p0, x0, sigma })
    }

    /// Skips the one-sidedness check. Ensemble members are conditioned on
    /// the incidence sign instead (see the map builders), so mean momenta
    /// close to zero are allowed here.
    pub(crate) fn unchecked(p0: f64, x0: f64, sigma: f64) -> Self {
        Self { p0, x0, sigma }
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Truncation window `p0 +/- 8 sigma`.
    pub fn momentum_window(&self) -> (f64, f64) {
        (
            self.p0 - PACKET_WINDOW_SIGMAS * self.sigma,
            self.p0 + PACKET_WINDOW_SIGMAS * self.sigma,
        )
    }

    /// `|phi|^2` mass inside the window clipped to the incidence side.
    /// Equals one up to 1e-9 for packets passing the one-sidedness check;
    /// map builders divide by it so conditioned packets stay normalized.
    pub fn incidence_side_mass(&self) -> f64 {
        let q0 = self.p0.abs();
        let lo = (q0 - PACKET_WINDOW_SIGMAS * self.sigma).max(0.0);
        let hi = q0 + PACKET_WINDOW_SIGMAS * self.sigma;
        let z = |x: f64| (x - q0) / (self.sigma * std::f64::consts::SQRT_2);
        0.5 * (erf(z(hi)) - erf(z(lo)))
    }
}

/// Momentum amplitude `phi(p)` of a Gaussian packet.
pub fn amplitude(packet: &GaussianPacket, p: f64, hbar: f64) -> Complex64 {
    let s2 = packet.sigma * packet.sigma;
    let norm = (2.0 * std::f64::consts::PI * s2).powf(-0.25);
    let arg = -(p - packet.p0).powi(2) / (4.0 * s2);
    let phase = -p * packet.x0 / hbar;
    Complex64::from_polar(norm * arg.exp(), phase)
}

/// Ratio of the packet width to the narrow-packet bound
/// `m * delta_min / (2 |p0|)`, where `delta_min` is the smallest nonzero
/// difference between two Bohr gaps. Much less than one means narrow.
pub fn narrowness_ratio(packet: &GaussianPacket, spec: &SystemSpec) -> Result<f64> {
    let n = spec.dim();
    let mut gaps = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            gaps.push(spec.bohr_gap(j, k));
        }
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let scale = spec.energy_scale();
    let mut delta_min = f64::INFINITY;
    for w in gaps.windows(2) {
        let d = w[1] - w[0];
        if d > 1e-12 * scale {
            delta_min = delta_min.min(d);
        }
    }
    if !delta_min.is_finite() {
        return Err(Error::AllGapsDegenerate);
    }
    Ok(2.0 * packet.sigma * packet.p0.abs() / (spec.mass() * delta_min))
}

/// Effusion distribution `beta p / m * exp(-beta p^2 / 2m)` on `[0, inf)`.
pub fn effusion_pdf(beta: f64, mass: f64, p: f64) -> f64 {
    if p < 0.0 {
        return 0.0;
    }
    beta * p / mass * (-beta * p * p / (2.0 * mass)).exp()
}

/// Maxwell-Boltzmann distribution folded onto the half line `[0, inf)`.
pub fn maxwell_boltzmann_pdf(beta: f64, mass: f64, p: f64) -> f64 {
    if p < 0.0 {
        return 0.0;
    }
    2.0 * (beta / (2.0 * mass * std::f64::consts::PI)).sqrt()
        * (-beta * p * p / (2.0 * mass)).exp()
}

/// `(r, beta_C)` with `r = 1 + beta sigma^2 / m` and `beta_C = beta / r`:
/// the effective inverse temperature seen through broad packets of width
/// `sigma` drawn from an effusion ensemble at `beta`.
pub fn broad_coherence_params(beta: f64, mass: f64, sigma: f64) -> (f64, f64) {
    let r = 1.0 + beta * sigma * sigma / mass;
    (r, beta / r)
}

/// Momentum diagonal `rho_X(p, p)` of the symmetric effusion-weighted
/// mixture of broad Gaussian packets (closed form; normalized on the whole
/// real line).
pub fn broad_ensemble_diagonal(beta: f64, mass: f64, sigma: f64, p: f64) -> f64 {
    let (r, beta_c) = broad_coherence_params(beta, mass, sigma);
    let gauss = sigma / (2.0 * std::f64::consts::PI).sqrt() * (-p * p / (2.0 * sigma * sigma)).exp();
    let tail =
        p / (2.0 * r.sqrt()) * erf(p / ((2.0 * r).sqrt() * sigma)) * (-beta_c * p * p / (2.0 * mass)).exp();
    beta_c / mass * (gauss + tail)
}

/// Which momentum law weights the ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnsembleKind {
    Effusion,
    MaxwellBoltzmann,
    /// Effusion-weighted mixture of broad packets of width `sigma`.
    BroadEffusionMixture { sigma: f64 },
}

/// Quadrature grid parameters for ensembles.
#[derive(Debug, Clone, Copy)]
pub struct GridConfig {
    /// Approximate total number of momentum nodes.
    pub nodes: usize,
    /// Weight mass allowed beyond the grid cutoff.
    pub tail_tol: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nodes: 129,
            tail_tol: 1e-8,
        }
    }
}

const NODES_PER_PANEL: usize = 16;

/// A statistical ensemble of incident packets: a momentum law `mu` together
/// with quadrature nodes/weights over `p0 in (0, p_cut]`.
///
/// Panels are aligned with the channel-opening momenta passed as
/// `breakpoints`, so integrals of transition probabilities against `mu`
/// converge fast despite the sqrt kinks at thresholds.
#[derive(Debug, Clone)]
pub struct MomentumEnsemble {
    kind: EnsembleKind,
    beta: f64,
    mass: f64,
    nodes: Vec<(f64, f64)>,
}

impl MomentumEnsemble {
    pub fn new(
        kind: EnsembleKind,
        beta: f64,
        mass: f64,
        grid: GridConfig,
        breakpoints: &[f64],
    ) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidEnsemble("beta must be positive".into()));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidEnsemble("mass must be positive".into()));
        }
        if let EnsembleKind::BroadEffusionMixture { sigma } = kind {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidEnsemble("sigma must be positive".into()));
            }
        }
        if grid.nodes == 0 || !(grid.tail_tol > 0.0 && grid.tail_tol < 1.0) {
            return Err(Error::InvalidEnsemble("bad grid config".into()));
        }
        // cutoff: thermal tail below tail_tol, extended past the last
        // channel-opening momentum so tiny inter-level fluxes stay resolved
        let thermal = (2.0 * mass * (1.0 / grid.tail_tol).ln() / beta).sqrt();
        let spread = 6.0 * (mass / beta).sqrt();
        let max_break = breakpoints.iter().copied().fold(0.0f64, f64::max);
        let p_cut = thermal.max(max_break + spread);
        let segments = quad::split_segments(0.0, p_cut, breakpoints);
        let n_panels = segments.len().max(grid.nodes.div_ceil(NODES_PER_PANEL));
        let (gx, gw) = quad::gauss_legendre(NODES_PER_PANEL);
        let total: f64 = segments.iter().map(|(a, b)| b - a).sum();
        let mut nodes = Vec::new();
        for (a, b) in segments {
            let width = b - a;
            let k = ((n_panels as f64 * width / total).round() as usize).max(1);
            let dtheta = std::f64::consts::FRAC_PI_2 / k as f64;
            for ip in 0..k {
                let mid = (ip as f64 + 0.5) * dtheta;
                for (x, w) in gx.iter().zip(&gw) {
                    let theta = mid + 0.5 * dtheta * x;
                    let s = theta.sin();
                    nodes.push((a + width * s * s, width * (2.0 * theta).sin() * 0.5 * dtheta * w));
                }
            }
        }
        let ens = Self {
            kind,
            beta,
            mass,
            nodes,
        };
        let norm = ens.normalization();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidEnsemble(format!(
                "grid integrates mu to {norm}, expected 1 within 1e-8"
            )));
        }
        Ok(ens)
    }

    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// The momentum law weighting the mixture.
    pub fn density(&self, p: f64) -> f64 {
        match self.kind {
            EnsembleKind::Effusion | EnsembleKind::BroadEffusionMixture { .. } => {
                effusion_pdf(self.beta, self.mass, p)
            }
            EnsembleKind::MaxwellBoltzmann => maxwell_boltzmann_pdf(self.beta, self.mass, p),
        }
    }

    /// Quadrature nodes with plain weights (no density factor).
    pub fn grid(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    /// `(p0, weight * mu(p0))` pairs; these mixture weights sum to one
    /// within the grid truncation tolerance.
    pub fn mixture_weights(&self) -> Vec<(f64, f64)> {
        self.nodes
            .iter()
            .map(|&(p, w)| (p, w * self.density(p)))
            .collect()
    }

    pub fn normalization(&self) -> f64 {
        self.nodes.iter().map(|&(p, w)| w * self.density(p)).sum()
    }
}
