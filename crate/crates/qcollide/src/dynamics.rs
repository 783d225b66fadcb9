//! Repeated-collision dynamics: density matrices, schedules, trajectories,
//! and the observables read off them.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::scatmap::Superoperator;
use crate::scatterer::SystemSpec;

const HERMITICITY_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-10;
const PSD_TOL: f64 = -1e-9;
const TRACE_DRIFT_TOL: f64 = 1e-6;

/// Default floor under which populations make the inverse-temperature
/// estimators unreliable.
pub const POPULATION_FLOOR: f64 = 1e-12;

/// A validated state of the system: Hermitian, unit trace, positive
/// semidefinite within tolerance.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    m: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n || n == 0 {
            return Err(Error::InvalidDensityMatrix("must be square".into()));
        }
        for j in 0..n {
            for k in 0..=j {
                if (m[(j, k)] - m[(k, j)].conj()).norm() > HERMITICITY_TOL {
                    return Err(Error::InvalidDensityMatrix(format!(
                        "not Hermitian at ({j},{k})"
                    )));
                }
            }
        }
        let trace: Complex64 = (0..n).map(|j| m[(j, j)]).sum();
        if (trace - Complex64::from(1.0)).norm() > TRACE_TOL {
            return Err(Error::InvalidDensityMatrix(format!(
                "trace is {trace}, expected 1"
            )));
        }
        let h = (&m + m.adjoint()) * Complex64::from(0.5);
        let min_eig = h
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < PSD_TOL {
            return Err(Error::InvalidDensityMatrix(format!(
                "negative eigenvalue {min_eig}"
            )));
        }
        Ok(Self { m })
    }

    /// Pure state `|level><level|`.
    pub fn pure_level(dim: usize, level: usize) -> Result<Self> {
        if level >= dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: level,
            });
        }
        let mut m = DMatrix::<Complex64>::zeros(dim, dim);
        m[(level, level)] = Complex64::from(1.0);
        Ok(Self { m })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            m: DMatrix::<Complex64>::identity(dim, dim) * Complex64::from(1.0 / dim as f64),
        }
    }

    /// Thermal state `exp(-beta H_Y) / Z` in the energy eigenbasis.
    pub fn gibbs(energies: &[f64], beta: f64) -> Result<Self> {
        if energies.is_empty() || !beta.is_finite() {
            return Err(Error::InvalidArgument("bad gibbs parameters".into()));
        }
        // shift by the ground energy so the partition sum cannot underflow
        let e0 = energies[0];
        let weights: Vec<f64> = energies.iter().map(|&e| (-beta * (e - e0)).exp()).collect();
        let z: f64 = weights.iter().sum();
        let n = energies.len();
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for j in 0..n {
            m[(j, j)] = Complex64::from(weights[j] / z);
        }
        Ok(Self { m })
    }

    /// Diagonal state from a probability vector.
    pub fn from_populations(p: &[f64]) -> Result<Self> {
        let n = p.len();
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for j in 0..n {
            m[(j, j)] = Complex64::from(p[j]);
        }
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.m
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.m[(j, j)].re).collect()
    }

    pub fn coherence(&self, j: usize, k: usize) -> Complex64 {
        self.m[(j, k)]
    }

    /// `tr rho^2`.
    pub fn purity(&self) -> f64 {
        (&self.m * &self.m)
            .diagonal()
            .iter()
            .map(|z| z.re)
            .sum()
    }

    /// Trace distance `1/2 ||rho - other||_1`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> f64 {
        let d = (&self.m - &other.m) * Complex64::from(0.5);
        let h = (&d + d.adjoint()) * Complex64::from(0.5);
        h.symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|x| x.abs())
            .sum()
    }
}

/// Inter-collision time law.
#[derive(Debug, Clone, Copy)]
pub enum InterCollisionTimes {
    /// Collisions back to back; free evolution is skipped.
    Zero,
    Fixed(f64),
    /// Exponential waiting times with the given mean, reproducibly seeded.
    Poissonian { mean: f64, seed: u64 },
}

/// How many collisions to run and how they are spaced.
#[derive(Debug, Clone, Copy)]
pub struct CollisionSchedule {
    pub count: usize,
    pub times: InterCollisionTimes,
}

impl CollisionSchedule {
    pub fn new(count: usize, times: InterCollisionTimes) -> Result<Self> {
        match times {
            InterCollisionTimes::Fixed(tau) if !(tau >= 0.0 && tau.is_finite()) => {
                return Err(Error::InvalidArgument("fixed tau must be >= 0".into()))
            }
            InterCollisionTimes::Poissonian { mean, .. } if !(mean > 0.0 && mean.is_finite()) => {
                return Err(Error::InvalidArgument("poissonian mean must be > 0".into()))
            }
            _ => {}
        }
        Ok(Self { count, times })
    }

    /// The inter-collision times, deterministic for a given seed.
    pub fn generate(&self) -> Vec<f64> {
        match self.times {
            InterCollisionTimes::Zero => vec![0.0; self.count],
            InterCollisionTimes::Fixed(tau) => vec![tau; self.count],
            InterCollisionTimes::Poissonian { mean, seed } => {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                (0..self.count)
                    .map(|_| {
                        let u: f64 = rand::Rng::gen_range(&mut rng, 0.0..1.0);
                        -mean * (1.0 - u).ln()
                    })
                    .collect()
            }
        }
    }
}

/// One collision: vectorize, apply the map, re-Hermitize and renormalize.
/// A trace drift beyond 1e-6 signals a bad map and fails.
pub fn apply_map(s: &Superoperator, rho: &DensityMatrix) -> Result<DensityMatrix> {
    let n = rho.dim();
    if s.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            actual: n,
        });
    }
    let mut v = nalgebra::DVector::<Complex64>::zeros(n * n);
    for j in 0..n {
        for k in 0..n {
            v[j * n + k] = rho.m[(j, k)];
        }
    }
    let out = s.matrix() * v;
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            m[(j, k)] = out[j * n + k];
        }
    }
    let m = (&m + m.adjoint()) * Complex64::from(0.5);
    let trace: f64 = (0..n).map(|j| m[(j, j)].re).sum();
    let drift = (trace - 1.0).abs();
    if drift > TRACE_DRIFT_TOL {
        return Err(Error::TraceDrift { drift });
    }
    DensityMatrix::new(m * Complex64::from(1.0 / trace))
}

/// Free unitary evolution for a time `tau`: each coherence picks up the
/// phase `exp(-i Delta_jk tau / hbar)`; populations are untouched.
pub fn free_evolution(rho: &DensityMatrix, spec: &SystemSpec, tau: f64) -> DensityMatrix {
    let n = rho.dim();
    let mut m = rho.m.clone();
    for j in 0..n {
        for k in 0..n {
            if j != k {
                let phase = -spec.bohr_gap(j, k) * tau / spec.hbar();
                m[(j, k)] *= Complex64::from_polar(1.0, phase);
            }
        }
    }
    DensityMatrix { m }
}

/// Concatenated dynamics: n repetitions of collision followed by free
/// evolution. The returned trajectory includes the initial state, so it has
/// `count + 1` entries.
pub fn run_collisions(
    rho0: &DensityMatrix,
    s: &Superoperator,
    schedule: &CollisionSchedule,
    spec: &SystemSpec,
) -> Result<Vec<DensityMatrix>> {
    let taus = schedule.generate();
    let mut trajectory = Vec::with_capacity(schedule.count + 1);
    trajectory.push(rho0.clone());
    let mut rho = rho0.clone();
    for (step, &tau) in taus.iter().enumerate() {
        rho = apply_map(s, &rho).map_err(|e| e.at_step(step + 1))?;
        if tau > 0.0 {
            rho = free_evolution(&rho, spec, tau);
        }
        trajectory.push(rho.clone());
    }
    Ok(trajectory)
}

/// Bloch polarization vector `(Px, Py, Pz)` of a two-level state, with
/// `rho = (I + P . sigma) / 2` and level 0 the +z eigenstate.
pub fn bloch_vector(rho: &DensityMatrix) -> Result<[f64; 3]> {
    if rho.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            actual: rho.dim(),
        });
    }
    let c = rho.m[(0, 1)];
    Ok([2.0 * c.re, -2.0 * c.im, rho.m[(0, 0)].re - rho.m[(1, 1)].re])
}

/// Pairwise inverse-temperature estimate `B_jk = -ln(p_j / p_k) / (e_j - e_k)`.
#[derive(Debug, Clone, Copy)]
pub struct BetaEstimate {
    /// Higher level index (j > k).
    pub upper: usize,
    pub lower: usize,
    /// `None` when either population sits under the floor.
    pub value: Option<f64>,
}

/// Estimators for all pairs `j > k` with distinct energies. Pairs whose
/// populations fall under `floor` are reported as undefined rather than
/// +/- infinity.
pub fn beta_estimates_with_floor(
    rho: &DensityMatrix,
    spec: &SystemSpec,
    floor: f64,
) -> Vec<BetaEstimate> {
    let p = rho.populations();
    let mut out = Vec::new();
    for j in 0..spec.dim() {
        for k in 0..j {
            if spec.bohr_gap(j, k).abs() <= THRESH_EQUAL_ENERGY * spec.energy_scale() {
                continue;
            }
            let value = if p[j] > floor && p[k] > floor {
                Some(-(p[j] / p[k]).ln() / spec.bohr_gap(j, k))
            } else {
                None
            };
            out.push(BetaEstimate {
                upper: j,
                lower: k,
                value,
            });
        }
    }
    out
}

const THRESH_EQUAL_ENERGY: f64 = 1e-14;

/// Strict variant: errors with the offending level indices when any
/// reported pair has a population under the default floor.
pub fn inverse_temperature_estimators(
    rho: &DensityMatrix,
    spec: &SystemSpec,
) -> Result<Vec<(usize, usize, f64)>> {
    let p = rho.populations();
    let under: Vec<usize> = (0..spec.dim()).filter(|&j| p[j] <= POPULATION_FLOOR).collect();
    if !under.is_empty() {
        return Err(Error::PopulationUnderflow {
            floor: POPULATION_FLOOR,
            levels: under,
        });
    }
    Ok(beta_estimates_with_floor(rho, spec, POPULATION_FLOOR)
        .into_iter()
        .filter_map(|b| b.value.map(|v| (b.upper, b.lower, v)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scatmap::{narrow_map, Superoperator};
    use crate::scatterer::Side;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn two_level() -> SystemSpec {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        SystemSpec::new(vec![0.0, 1.0], v, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn identity_map_fixes_state() {
        let rho = DensityMatrix::from_populations(&[0.3, 0.7]).unwrap();
        let s = Superoperator::identity(2);
        let out = apply_map(&s, &rho).unwrap();
        assert!((out.matrix() - rho.matrix()).norm() < 1e-15);
    }

    #[test]
    fn density_matrix_validation() {
        let bad_trace = DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.6])
            .map(Complex64::from);
        assert!(DensityMatrix::new(bad_trace).is_err());
        let mut not_herm = DMatrix::<Complex64>::zeros(2, 2);
        not_herm[(0, 0)] = Complex64::from(0.5);
        not_herm[(1, 1)] = Complex64::from(0.5);
        not_herm[(0, 1)] = Complex64::new(0.0, 0.3);
        not_herm[(1, 0)] = Complex64::new(0.0, 0.3);
        assert!(DensityMatrix::new(not_herm).is_err());
        let mut neg = DMatrix::<Complex64>::zeros(2, 2);
        neg[(0, 0)] = Complex64::from(0.5);
        neg[(1, 1)] = Complex64::from(0.5);
        neg[(0, 1)] = Complex64::from(0.8);
        neg[(1, 0)] = Complex64::from(0.8);
        assert!(DensityMatrix::new(neg).is_err());
    }

    #[test]
    fn free_evolution_phases() {
        let spec = two_level();
        let mut m = DMatrix::<Complex64>::zeros(2, 2);
        m[(0, 0)] = Complex64::from(0.5);
        m[(1, 1)] = Complex64::from(0.5);
        m[(0, 1)] = Complex64::from(0.5);
        m[(1, 0)] = Complex64::from(0.5);
        let rho = DensityMatrix::new(m).unwrap();
        // tau = 0 is the identity
        let same = free_evolution(&rho, &spec, 0.0);
        assert!((same.matrix() - rho.matrix()).norm() < 1e-15);
        // two-level, Delta = 1, tau = pi: coherence flips sign
        let flipped = free_evolution(&rho, &spec, std::f64::consts::PI);
        assert_relative_eq!(flipped.coherence(0, 1).re, -0.5, epsilon = 1e-12);
        assert!(flipped.coherence(0, 1).im.abs() < 1e-12);
        // diagonal states are unchanged for any tau
        let diag = DensityMatrix::from_populations(&[0.2, 0.8]).unwrap();
        let evolved = free_evolution(&diag, &spec, 1.234);
        assert!((evolved.matrix() - diag.matrix()).norm() < 1e-15);
    }

    #[test]
    fn zero_collisions_returns_initial_state() {
        let spec = two_level();
        let rho = DensityMatrix::pure_level(2, 0).unwrap();
        let s = Superoperator::identity(2);
        let schedule = CollisionSchedule::new(0, InterCollisionTimes::Zero).unwrap();
        let traj = run_collisions(&rho, &s, &schedule, &spec).unwrap();
        assert_eq!(traj.len(), 1);
    }

    #[test]
    fn bloch_vector_examples() {
        let mixed = DensityMatrix::maximally_mixed(2);
        assert_eq!(bloch_vector(&mixed).unwrap(), [0.0, 0.0, 0.0]);
        let up = DensityMatrix::pure_level(2, 0).unwrap();
        assert_eq!(bloch_vector(&up).unwrap(), [0.0, 0.0, 1.0]);
        let mut m = DMatrix::<Complex64>::zeros(2, 2);
        m[(0, 0)] = Complex64::from(0.5);
        m[(1, 1)] = Complex64::from(0.5);
        m[(0, 1)] = Complex64::from(0.5);
        m[(1, 0)] = Complex64::from(0.5);
        let plus = DensityMatrix::new(m).unwrap();
        let b = bloch_vector(&plus).unwrap();
        assert_relative_eq!(b[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(b[1], 0.0, epsilon = 1e-14);
        assert_relative_eq!(b[2], 0.0, epsilon = 1e-14);
        assert!(bloch_vector(&DensityMatrix::maximally_mixed(3)).is_err());
    }

    #[test]
    fn beta_estimators_on_reference_states() {
        let spec = crate::scatterer::SystemSpec::new(
            vec![1.0, 4.0, 9.0],
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
            1.0,
            0.5,
            1.0,
        )
        .unwrap();
        let gibbs = DensityMatrix::gibbs(spec.energies(), 3.0).unwrap();
        for (_, _, b) in inverse_temperature_estimators(&gibbs, &spec).unwrap() {
            assert_relative_eq!(b, 3.0, epsilon = 1e-12);
        }
        let mixed = DensityMatrix::maximally_mixed(3);
        for (_, _, b) in inverse_temperature_estimators(&mixed, &spec).unwrap() {
            assert_relative_eq!(b, 0.0, epsilon = 1e-12);
        }
        // gibbs at beta' = 1 gives all pairs exactly 1
        let warm = DensityMatrix::gibbs(spec.energies(), 1.0).unwrap();
        for (_, _, b) in inverse_temperature_estimators(&warm, &spec).unwrap() {
            assert_relative_eq!(b, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn underflow_reported() {
        let spec = two_level();
        let rho = DensityMatrix::pure_level(2, 0).unwrap();
        match inverse_temperature_estimators(&rho, &spec) {
            Err(Error::PopulationUnderflow { levels, .. }) => assert_eq!(levels, vec![1]),
            other => panic!("expected underflow, got {other:?}"),
        }
        let lenient = beta_estimates_with_floor(&rho, &spec, POPULATION_FLOOR);
        assert_eq!(lenient.len(), 1);
        assert!(lenient[0].value.is_none());
    }

    #[test]
    fn poissonian_schedule_reproducible() {
        let s1 = CollisionSchedule::new(10, InterCollisionTimes::Poissonian { mean: 2.0, seed: 9 })
            .unwrap()
            .generate();
        let s2 = CollisionSchedule::new(10, InterCollisionTimes::Poissonian { mean: 2.0, seed: 9 })
            .unwrap()
            .generate();
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|&t| t >= 0.0));
        let s3 =
            CollisionSchedule::new(10, InterCollisionTimes::Poissonian { mean: 2.0, seed: 10 })
                .unwrap()
                .generate();
        assert_ne!(s1, s3);
    }

    #[test]
    fn narrow_trajectory_keeps_coherences_shrinking() {
        let spec = two_level();
        let s = narrow_map(&spec, 10.0, Side::Left).unwrap();
        let mut m = DMatrix::<Complex64>::zeros(2, 2);
        m[(0, 0)] = Complex64::from(0.5);
        m[(1, 1)] = Complex64::from(0.5);
        m[(0, 1)] = Complex64::from(0.5);
        m[(1, 0)] = Complex64::from(0.5);
        let rho0 = DensityMatrix::new(m).unwrap();
        let schedule = CollisionSchedule::new(
            50,
            InterCollisionTimes::Poissonian { mean: 1.0, seed: 4 },
        )
        .unwrap();
        let traj = run_collisions(&rho0, &s, &schedule, &spec).unwrap();
        let mut prev = f64::INFINITY;
        for state in &traj {
            let c = state.coherence(0, 1).norm();
            assert!(c <= prev + 1e-12);
            assert!(state.purity() <= 1.0 + 1e-9);
            prev = c;
        }
    }
}
