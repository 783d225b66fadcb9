//! The fixed N-level system and its exact multichannel scattering matrix
//! for a point (delta-shaped) coupling potential.
//!
//! The particle sees the potential `g * delta(x) * nu`, where `nu` acts on the
//! internal levels. At total energy `E` the transmission amplitudes solve a
//! dense complex linear system; reflection follows from continuity at x = 0.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative floor below which `|E - e_j|` counts as sitting on a channel threshold.
pub const THRESHOLD_REL_TOL: f64 = 1e-12;

/// Hard gate on `||s's - I||`; anything worse signals a numerics bug upstream.
const UNITARITY_HARD_TOL: f64 = 1e-8;

/// Incidence side of the particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// The fixed scatterer: level energies, coupling matrix and global constants.
///
/// Immutable after construction; all scattering quantities derive from it.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    energies: Vec<f64>,
    coupling: DMatrix<f64>,
    g: f64,
    mass: f64,
    hbar: f64,
}

impl SystemSpec {
    /// Validates and builds a spec. Energies must be sorted ascending and the
    /// coupling matrix symmetric (real `nu` with a real eigenbasis).
    pub fn new(
        energies: Vec<f64>,
        coupling: DMatrix<f64>,
        g: f64,
        mass: f64,
        hbar: f64,
    ) -> Result<Self> {
        let n = energies.len();
        if n == 0 {
            return Err(Error::InvalidSpec("at least one level required".into()));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidSpec("energies must be finite".into()));
        }
        if energies.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidSpec(
                "energies must be sorted in ascending order".into(),
            ));
        }
        if coupling.nrows() != n || coupling.ncols() != n {
            return Err(Error::InvalidSpec(format!(
                "coupling matrix must be {n}x{n}, got {}x{}",
                coupling.nrows(),
                coupling.ncols()
            )));
        }
        let vmax = coupling.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for j in 0..n {
            for k in 0..j {
                if (coupling[(j, k)] - coupling[(k, j)]).abs() > 1e-12 * vmax {
                    return Err(Error::InvalidSpec(format!(
                        "coupling matrix not symmetric at ({j},{k})"
                    )));
                }
            }
        }
        if coupling.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("coupling entries must be finite".into()));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidSpec("mass must be positive".into()));
        }
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::InvalidSpec("hbar must be positive".into()));
        }
        if !g.is_finite() {
            return Err(Error::InvalidSpec("g must be finite".into()));
        }
        Ok(Self {
            energies,
            coupling,
            g,
            mass,
            hbar,
        })
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    /// Bohr gap `Delta_jk = e_j - e_k` (0-based level indices).
    pub fn bohr_gap(&self, j: usize, k: usize) -> f64 {
        self.energies[j] - self.energies[k]
    }

    /// Characteristic energy magnitude used for relative tolerances.
    pub fn energy_scale(&self) -> f64 {
        self.energies
            .iter()
            .fold(1.0f64, |a, e| a.max(e.abs()))
    }

    /// True when `[H_Y, nu] = 0`, i.e. the coupling cannot move populations
    /// between non-degenerate levels. Thermalization experiments need `false`.
    pub fn coupling_commutes_with_hamiltonian(&self) -> bool {
        let scale = self.energy_scale();
        let vmax = self.coupling.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for j in 0..self.dim() {
            for k in 0..self.dim() {
                let c = self.bohr_gap(j, k) * self.coupling[(j, k)];
                if c.abs() > 1e-12 * scale * vmax {
                    return false;
                }
            }
        }
        true
    }

    /// Momenta `p_j` at total energy `E`: real for open channels, positive
    /// imaginary (decaying evanescent branch) for closed ones.
    pub(crate) fn channel_momenta(&self, energy: f64) -> Vec<Complex64> {
        self.energies
            .iter()
            .map(|&e| {
                if energy >= e {
                    Complex64::new((2.0 * self.mass * (energy - e)).sqrt(), 0.0)
                } else {
                    Complex64::new(0.0, (2.0 * self.mass * (e - energy)).sqrt())
                }
            })
            .collect()
    }

    fn check_thresholds(&self, energy: f64) -> Result<()> {
        let floor = THRESHOLD_REL_TOL * self.energy_scale().max(energy.abs());
        for (j, &e) in self.energies.iter().enumerate() {
            if (energy - e).abs() < floor {
                return Err(Error::ThresholdEnergy { energy, channel: j });
            }
        }
        Ok(())
    }
}

/// Indices of channels open at total energy `E` (levels with `e_j <= E`),
/// in level order.
pub fn open_channels(spec: &SystemSpec, energy: f64) -> Vec<usize> {
    spec.energies()
        .iter()
        .enumerate()
        .filter(|(_, &e)| e <= energy)
        .map(|(j, _)| j)
        .collect()
}

/// Full N x N transmission amplitude matrix at total energy `E`.
///
/// Solves `t = [I + i m g / hbar^2 * D^-1 V]^-1` with `D_jj = p_j / hbar`;
/// closed channels enter through the evanescent momentum branch. Reflection
/// amplitudes follow as `r = t - I`.
pub fn t_matrix(spec: &SystemSpec, energy: f64) -> Result<DMatrix<Complex64>> {
    let n = spec.dim();
    if energy <= spec.energies()[0] {
        return Err(Error::NoOpenChannel {
            energy,
            ground: spec.energies()[0],
        });
    }
    spec.check_thresholds(energy)?;
    let p = spec.channel_momenta(energy);
    let c = Complex64::new(0.0, spec.mass() * spec.g() / spec.hbar());
    let mut a = DMatrix::<Complex64>::identity(n, n);
    for j in 0..n {
        for k in 0..n {
            a[(j, k)] += c / p[j] * spec.coupling()[(j, k)];
        }
    }
    let norm_a = a.norm();
    let lu = a.lu();
    match lu.try_inverse() {
        Some(inv) if inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()) => Ok(inv),
        _ => Err(Error::SingularMatrix {
            energy,
            condition: f64::INFINITY.min(norm_a / f64::MIN_POSITIVE),
        }),
    }
}

/// The open-channel scattering matrix at one total energy, stored as the
/// four reflection/transmission blocks.
#[derive(Debug, Clone)]
pub struct ScatteringMatrixAtE {
    energy: f64,
    open: Vec<usize>,
    momenta: Vec<f64>,
    r_left: DMatrix<Complex64>,
    t_left: DMatrix<Complex64>,
    r_right: DMatrix<Complex64>,
    t_right: DMatrix<Complex64>,
}

impl ScatteringMatrixAtE {
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn n_open(&self) -> usize {
        self.open.len()
    }

    /// Level indices of the open channels.
    pub fn open(&self) -> &[usize] {
        &self.open
    }

    /// Open-channel momenta, aligned with `open()`.
    pub fn momenta(&self) -> &[f64] {
        &self.momenta
    }

    pub fn r_left(&self) -> &DMatrix<Complex64> {
        &self.r_left
    }

    pub fn t_left(&self) -> &DMatrix<Complex64> {
        &self.t_left
    }

    pub fn r_right(&self) -> &DMatrix<Complex64> {
        &self.r_right
    }

    pub fn t_right(&self) -> &DMatrix<Complex64> {
        &self.t_right
    }

    /// Position of a level in the open-channel ordering, if open.
    pub fn open_index(&self, level: usize) -> Option<usize> {
        self.open.iter().position(|&j| j == level)
    }

    /// Transmission amplitude for the level transition `j -> jp`, or `None`
    /// when either channel is closed.
    pub fn t_hat(&self, side: Side, jp: usize, j: usize) -> Option<Complex64> {
        let a = self.open_index(jp)?;
        let b = self.open_index(j)?;
        Some(match side {
            Side::Left => self.t_left[(a, b)],
            Side::Right => self.t_right[(a, b)],
        })
    }

    /// Reflection amplitude for the level transition `j -> jp`, or `None`
    /// when either channel is closed.
    pub fn r_hat(&self, side: Side, jp: usize, j: usize) -> Option<Complex64> {
        let a = self.open_index(jp)?;
        let b = self.open_index(j)?;
        Some(match side {
            Side::Left => self.r_left[(a, b)],
            Side::Right => self.r_right[(a, b)],
        })
    }

    /// The assembled 2n x 2n matrix `[[rL, tR], [tL, rR]]`.
    pub fn assembled(&self) -> DMatrix<Complex64> {
        let n = self.n_open();
        let mut s = DMatrix::<Complex64>::zeros(2 * n, 2 * n);
        for a in 0..n {
            for b in 0..n {
                s[(a, b)] = self.r_left[(a, b)];
                s[(a, n + b)] = self.t_right[(a, b)];
                s[(n + a, b)] = self.t_left[(a, b)];
                s[(n + a, n + b)] = self.r_right[(a, b)];
            }
        }
        s
    }

    /// `max(||s's - I||, ||ss' - I||)` in the Frobenius norm.
    pub fn unitarity_residual(&self) -> f64 {
        let s = self.assembled();
        let id = DMatrix::<Complex64>::identity(s.nrows(), s.ncols());
        let a = (s.adjoint() * &s - &id).norm();
        let b = (&s * s.adjoint() - &id).norm();
        a.max(b)
    }

    /// Max elementwise `|s - s^T|`; micro-reversibility makes this vanish.
    pub fn symmetry_residual(&self) -> f64 {
        let s = self.assembled();
        let mut worst = 0.0f64;
        for a in 0..s.nrows() {
            for b in 0..a {
                worst = worst.max((s[(a, b)] - s[(b, a)]).norm());
            }
        }
        worst
    }
}

/// Open-channel scattering matrix at total energy `E`.
///
/// Restricts the amplitude matrices to open channels and rescales by
/// `sqrt(p_jp / p_j)`. The delta potential is even, so the left and right
/// blocks coincide.
pub fn scattering_matrix(spec: &SystemSpec, energy: f64) -> Result<ScatteringMatrixAtE> {
    let t_full = t_matrix(spec, energy)?;
    let open = open_channels(spec, energy);
    let n = open.len();
    let momenta: Vec<f64> = open
        .iter()
        .map(|&j| (2.0 * spec.mass() * (energy - spec.energies()[j])).sqrt())
        .collect();
    let mut t_hat = DMatrix::<Complex64>::zeros(n, n);
    let mut r_hat = DMatrix::<Complex64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let scale = (momenta[a] / momenta[b]).sqrt();
            let t = t_full[(open[a], open[b])];
            let delta = if open[a] == open[b] {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
            t_hat[(a, b)] = t * scale;
            r_hat[(a, b)] = (t - delta) * scale;
        }
    }
    let smat = ScatteringMatrixAtE {
        energy,
        open,
        momenta,
        r_left: r_hat.clone(),
        t_left: t_hat.clone(),
        r_right: r_hat,
        t_right: t_hat,
    };
    let residual = smat.unitarity_residual();
    if residual > UNITARITY_HARD_TOL {
        return Err(Error::UnitarityViolation { energy, residual });
    }
    Ok(smat)
}

/// Conditional transition probabilities `(P_L, P_R, P)` with
/// `P_jp,j = |t_jp,j|^2 + |r_jp,j|^2` and `P = (P_L + P_R) / 2`,
/// in open-channel ordering. Columns sum to one by unitarity.
pub fn transition_probabilities(
    smat: &ScatteringMatrixAtE,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = smat.n_open();
    let mut pl = DMatrix::<f64>::zeros(n, n);
    let mut pr = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            pl[(a, b)] = smat.t_left[(a, b)].norm_sqr() + smat.r_left[(a, b)].norm_sqr();
            pr[(a, b)] = smat.t_right[(a, b)].norm_sqr() + smat.r_right[(a, b)].norm_sqr();
        }
    }
    let p = (&pl + &pr) * 0.5;
    (pl, pr, p)
}
