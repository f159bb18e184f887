//! Amplitude-level Monte Carlo estimate of g2, independent of the closed
//! forms.
//!
//! Each realization draws random emission phases (one per sub-source and
//! temporal mode, independently per particle and per source) and a random
//! frequency per mode from the rectangular band. Sub-source contributions are
//! propagated to each detector with the paraxial quadratic phase and summed
//! into per-particle path amplitudes. The two-particle coincidence amplitude
//! for the orderings "a to D1, b to D2" and "a to D2, b to D1" then composes
//! per exchange statistics: amplitudes add for bosons, subtract for fermions,
//! and probabilities add for classical particles. Ensemble averages are
//! normalized by the product of the measured single-detector averages.
//!
//! Realizations are generated from (seed, index) only and reduced in fixed
//! block order, so results are bit-identical for any worker count.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::Polarization;
use crate::error::{Error, Result};
use crate::model::{
    AxisKind, CoherenceCurve, CurveMeta, CurvePoint, DetectorSpec, Generator, GeometrySpec,
    ParticleStatistics, SourceSpec,
};

/// Realizations per reduction block. Fixed so the reduction order (and hence
/// every output bit) does not depend on the worker count.
const BLOCK: usize = 1024;

pub const MIN_REALIZATIONS: usize = 100;

/// How the second source's random draws relate to the first's. `Mirrored`
/// reuses the first source's phases and frequencies and exists as a negative
/// control: it breaks the premise that lets cross-source interference terms
/// vanish on average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePhaseMode {
    Independent,
    Mirrored,
}

/// One Monte Carlo configuration: what to simulate and how many realizations
/// to average. `polarization` is meaningful for HOM only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McRun {
    pub source: SourceSpec,
    pub geometry: GeometrySpec,
    pub polarization: Polarization,
    pub phase_mode: SourcePhaseMode,
    pub n_realizations: usize,
    pub seed: u64,
}

impl McRun {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.geometry.validate()?;
        if self.n_realizations < MIN_REALIZATIONS {
            return Err(Error::TooFewRealizations {
                min: MIN_REALIZATIONS,
                got: self.n_realizations,
            });
        }
        Ok(())
    }

    fn n_sources(&self) -> usize {
        if self.geometry.is_hom() {
            2
        } else {
            1
        }
    }

    /// Transverse centers of the effective sources. For HOM the two sources
    /// sit at `center_x +- d/2`.
    fn source_centers(&self) -> Vec<f64> {
        match self.geometry {
            GeometrySpec::Hbt { .. } => vec![self.source.center_x],
            GeometrySpec::Hom { d, .. } => {
                vec![self.source.center_x + 0.5 * d, self.source.center_x - 0.5 * d]
            }
        }
    }
}

/// Elementary paraxial propagation amplitude of one sub-source term:
///
/// ```text
/// (n_subsources * n_modes)^(-1/2) * exp(i [phi + 2 pi nu t + k (x_d - x_s)^2 / (2 z)])
/// ```
///
/// with `k = 2 pi / lambda`. The prefactor normalizes the summed per-particle
/// amplitude to unit mean intensity.
pub fn propagate(
    sub_source_x: f64,
    emission_phase: f64,
    mode_frequency: f64,
    detector: &DetectorSpec,
    geometry: &GeometrySpec,
    source: &SourceSpec,
) -> Complex64 {
    let k = 2.0 * std::f64::consts::PI / source.wavelength_lambda;
    let dx = detector.x - sub_source_x;
    let phase = emission_phase
        + 2.0 * std::f64::consts::PI * mode_frequency * detector.t
        + k * dx * dx / (2.0 * geometry.z());
    let norm = 1.0 / ((source.n_subsources * source.n_modes) as f64).sqrt();
    Complex64::from_polar(norm, phase)
}

/// Midpoint grid of sub-source positions across `[c - l/2, c + l/2]`.
pub fn sub_source_grid(center: f64, length: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| center + length * ((j as f64 + 0.5) / n as f64 - 0.5))
        .collect()
}

/// Random draws for one particle from one source: a phase per
/// (sub-source, mode) pair and a frequency per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleDraw {
    /// Row-major `[sub_source][mode]` emission phases in [0, 2 pi).
    pub phases: Vec<f64>,
    /// Mode frequencies, uniform over the band `[-dnu/2, dnu/2]`.
    pub mode_frequencies: Vec<f64>,
}

/// All random inputs of one realization. Fully determined by `seed_path`:
/// regenerating with the same (seed, index) is bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    /// Indexed `[source][particle]` with particles a = 0, b = 1.
    pub draws: Vec<[ParticleDraw; 2]>,
    pub seed_path: (u64, u64),
}

impl Realization {
    pub fn generate(run: &McRun, index: u64) -> Realization {
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(index);
        let n_sub = run.source.n_subsources;
        let n_modes = run.source.n_modes;
        let dnu = run.source.bandwidth_dnu;
        let draw_particle = |rng: &mut ChaCha8Rng| ParticleDraw {
            phases: (0..n_sub * n_modes)
                .map(|_| rng.gen::<f64>() * 2.0 * std::f64::consts::PI)
                .collect(),
            mode_frequencies: (0..n_modes)
                .map(|_| {
                    if dnu == 0.0 {
                        0.0
                    } else {
                        (rng.gen::<f64>() - 0.5) * dnu
                    }
                })
                .collect(),
        };
        let mut draws: Vec<[ParticleDraw; 2]> = Vec::with_capacity(run.n_sources());
        for s in 0..run.n_sources() {
            if s > 0 && run.phase_mode == SourcePhaseMode::Mirrored {
                draws.push(draws[0].clone());
            } else {
                draws.push([draw_particle(&mut rng), draw_particle(&mut rng)]);
            }
        }
        Realization { draws, seed_path: (run.seed, index) }
    }
}

/// Per-detector-pair geometry factors, precomputed once per scan point:
/// for each source and detector, the complex sub-source factor
/// `exp(i k (x_d - x_s)^2 / (2 z))` times the beam-splitter routing phase.
struct PointGeometry {
    /// `[source][detector] -> per-sub-source factor`
    geo: Vec<[Vec<Complex64>; 2]>,
    times: [f64; 2],
    norm: f64,
    n_modes: usize,
}

impl PointGeometry {
    fn new(run: &McRun, det1: &DetectorSpec, det2: &DetectorSpec) -> PointGeometry {
        let k = 2.0 * std::f64::consts::PI / run.source.wavelength_lambda;
        let z = run.geometry.z();
        let hom = run.geometry.is_hom();
        let centers = run.source_centers();
        let dets = [det1, det2];
        let geo = centers
            .iter()
            .enumerate()
            .map(|(m, &c)| {
                let xs = sub_source_grid(c, run.source.length_l, run.source.n_subsources);
                let per_det = [0usize, 1].map(|g| {
                    // A 50:50 splitter routes each source to one detector by
                    // transmission and to the other by reflection; reflection
                    // carries a quarter-wave (factor i) phase. The factor is
                    // common to every path in a single-source (HBT) layout and
                    // drops out there, but fixes the sign of the cross-source
                    // beat between two sources, so it is applied for HOM only.
                    let bs = if hom && m != g {
                        Complex64::new(0.0, 1.0)
                    } else {
                        Complex64::new(1.0, 0.0)
                    };
                    xs.iter()
                        .map(|&x_s| {
                            let dx = dets[g].x - x_s;
                            bs * Complex64::from_polar(1.0, k * dx * dx / (2.0 * z))
                        })
                        .collect::<Vec<_>>()
                });
                per_det
            })
            .collect();
        PointGeometry {
            geo,
            times: [det1.t, det2.t],
            norm: 1.0 / ((run.source.n_subsources * run.source.n_modes) as f64).sqrt(),
            n_modes: run.source.n_modes,
        }
    }

    /// Path amplitude of one particle from one source to both detectors.
    fn particle_amplitudes(&self, source: usize, draw: &ParticleDraw) -> [Complex64; 2] {
        let n_modes = self.n_modes;
        let mut out = [Complex64::new(0.0, 0.0); 2];
        for det in 0..2 {
            let tfac: Vec<Complex64> = draw
                .mode_frequencies
                .iter()
                .map(|&nu| {
                    Complex64::from_polar(
                        1.0,
                        2.0 * std::f64::consts::PI * nu * self.times[det],
                    )
                })
                .collect();
            let geo = &self.geo[source][det];
            let mut acc = Complex64::new(0.0, 0.0);
            for (s, &g) in geo.iter().enumerate() {
                let row = &draw.phases[s * n_modes..(s + 1) * n_modes];
                let mut inner = Complex64::new(0.0, 0.0);
                for (j, &phi) in row.iter().enumerate() {
                    inner += Complex64::from_polar(1.0, phi) * tfac[j];
                }
                acc += g * inner;
            }
            out[det] = acc * self.norm;
        }
        out
    }
}

/// The two-particle amplitude terms of one realization: for every source pair
/// (m, n), `u = A(m,a,D1) A(n,b,D2)` and `v = A(m,a,D2) A(n,b,D1)`. HBT has
/// the single pair (1,1); HOM has all four, i.e. eight coincidence paths.
#[derive(Debug, Clone)]
pub struct TwoParticleAmplitudes {
    /// (u, v, cross_source) per source pair, in (m, n) row-major order.
    pub pairs: Vec<(Complex64, Complex64, bool)>,
    /// Summed single-particle intensity per detector, averaged over the two
    /// particles; feeds the normalization.
    pub singles: [f64; 2],
}

impl TwoParticleAmplitudes {
    fn compute(geom: &PointGeometry, real: &Realization) -> TwoParticleAmplitudes {
        let n_sources = real.draws.len();
        // amp[m][particle][detector]
        let amp: Vec<[[Complex64; 2]; 2]> = (0..n_sources)
            .map(|m| {
                [
                    geom.particle_amplitudes(m, &real.draws[m][0]),
                    geom.particle_amplitudes(m, &real.draws[m][1]),
                ]
            })
            .collect();
        let mut pairs = Vec::with_capacity(n_sources * n_sources);
        for m in 0..n_sources {
            for n in 0..n_sources {
                let u = amp[m][0][0] * amp[n][1][1];
                let v = amp[m][0][1] * amp[n][1][0];
                pairs.push((u, v, m != n));
            }
        }
        let mut singles = [0.0; 2];
        for det in 0..2 {
            let mut total = 0.0;
            for m in 0..n_sources {
                for particle in 0..2 {
                    total += amp[m][particle][det].norm_sqr();
                }
            }
            singles[det] = 0.5 * total;
        }
        TwoParticleAmplitudes { pairs, singles }
    }

    /// Unnormalized coincidence weight for the given statistics. Orthogonal
    /// polarization makes cross-source pairs distinguishable, which routes
    /// them to the classical (probability-sum) composition.
    pub fn compose(&self, stat: ParticleStatistics, polarization: Polarization) -> f64 {
        let mut total = 0.0;
        for &(u, v, cross) in &self.pairs {
            let distinguishable = cross && polarization == Polarization::Orthogonal;
            let eff = if distinguishable { ParticleStatistics::Classical } else { stat };
            total += match eff {
                ParticleStatistics::Boson => (u + v).norm_sqr(),
                ParticleStatistics::Fermion => (u - v).norm_sqr(),
                ParticleStatistics::Classical => u.norm_sqr() + v.norm_sqr(),
            };
        }
        total
    }

    /// Coherent sum over all coincidence paths (no cross-term dropping):
    /// `|sum_(m,n) (u_mn +- v_mn)|^2`.
    pub fn coherent_sum(&self, stat: ParticleStatistics) -> f64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for &(u, v, _) in &self.pairs {
            acc += match stat {
                ParticleStatistics::Boson | ParticleStatistics::Classical => u + v,
                ParticleStatistics::Fermion => u - v,
            };
        }
        acc.norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub g2: f64,
    pub stderr: f64,
    pub n_realizations: usize,
}

/// Streaming moments for the ratio estimator: means, variances and
/// covariances of (G_boson, G_fermion, G_classical, S1, S2).
#[derive(Clone, Copy)]
struct Moments {
    n: f64,
    sum: [f64; 5],
    // Upper triangle of the 5x5 product-sum matrix, row-major.
    prod: [f64; 15],
}

impl Moments {
    fn zero() -> Moments {
        Moments { n: 0.0, sum: [0.0; 5], prod: [0.0; 15] }
    }

    fn push(&mut self, v: [f64; 5]) {
        self.n += 1.0;
        let mut k = 0;
        for i in 0..5 {
            self.sum[i] += v[i];
            for j in i..5 {
                self.prod[k] += v[i] * v[j];
                k += 1;
            }
        }
    }

    fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        for i in 0..5 {
            self.sum[i] += other.sum[i];
        }
        for k in 0..15 {
            self.prod[k] += other.prod[k];
        }
    }

    fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        let mut k = 0;
        for row in 0..a {
            k += 5 - row;
        }
        k += b - a;
        (self.prod[k] - self.sum[a] * self.sum[b] / self.n) / (self.n - 1.0)
    }

    /// Delta-method estimate and standard error of
    /// `g = mean(G_i) / (2 mean(S1) mean(S2))` for statistics channel `i`.
    fn ratio_estimate(&self, i: usize) -> Result<McEstimate> {
        let mg = self.mean(i);
        let m1 = self.mean(3);
        let m2 = self.mean(4);
        let norm = 2.0 * m1 * m2;
        if norm.abs() < 1e-30 {
            return Err(Error::DegenerateNormalization);
        }
        let g2 = mg / norm;
        let mut rel = 0.0;
        if mg != 0.0 {
            rel += self.cov(i, i) / (mg * mg);
            rel -= 2.0 * self.cov(i, 3) / (mg * m1);
            rel -= 2.0 * self.cov(i, 4) / (mg * m2);
        }
        rel += self.cov(3, 3) / (m1 * m1);
        rel += self.cov(4, 4) / (m2 * m2);
        rel += 2.0 * self.cov(3, 4) / (m1 * m2);
        let var = (g2 * g2 * rel / self.n).max(0.0);
        Ok(McEstimate { g2, stderr: var.sqrt(), n_realizations: self.n as usize })
    }
}

fn accumulate_moments(run: &McRun, det1: &DetectorSpec, det2: &DetectorSpec) -> Result<Moments> {
    run.validate()?;
    det1.validate()?;
    det2.validate()?;
    let geom = PointGeometry::new(run, det1, det2);
    let n = run.n_realizations;
    let n_blocks = n.div_ceil(BLOCK);
    let blocks: Vec<Moments> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut m = Moments::zero();
            let lo = b * BLOCK;
            let hi = ((b + 1) * BLOCK).min(n);
            for idx in lo..hi {
                let real = Realization::generate(run, idx as u64);
                let amps = TwoParticleAmplitudes::compute(&geom, &real);
                m.push([
                    amps.compose(ParticleStatistics::Boson, run.polarization),
                    amps.compose(ParticleStatistics::Fermion, run.polarization),
                    amps.compose(ParticleStatistics::Classical, run.polarization),
                    amps.singles[0],
                    amps.singles[1],
                ]);
            }
            m
        })
        .collect();
    let mut total = Moments::zero();
    for b in &blocks {
        total.merge(b);
    }
    Ok(total)
}

const STAT_CHANNEL: [(ParticleStatistics, usize); 3] = [
    (ParticleStatistics::Boson, 0),
    (ParticleStatistics::Fermion, 1),
    (ParticleStatistics::Classical, 2),
];

fn channel(stat: ParticleStatistics) -> usize {
    STAT_CHANNEL.iter().find(|(s, _)| *s == stat).map(|&(_, i)| i).unwrap()
}

/// Monte Carlo estimate of the normalized g2 for one detector pair.
pub fn g2_mc(
    stat: ParticleStatistics,
    run: &McRun,
    det1: &DetectorSpec,
    det2: &DetectorSpec,
) -> Result<McEstimate> {
    let m = accumulate_moments(run, det1, det2)?;
    m.ratio_estimate(channel(stat))
}

/// Same realizations, all three statistics at once (boson, fermion,
/// classical). Cheaper than three runs and guarantees the per-realization
/// half-sum identity across the returned estimates.
pub fn g2_mc_all(
    run: &McRun,
    det1: &DetectorSpec,
    det2: &DetectorSpec,
) -> Result<[McEstimate; 3]> {
    let m = accumulate_moments(run, det1, det2)?;
    Ok([m.ratio_estimate(0)?, m.ratio_estimate(1)?, m.ratio_estimate(2)?])
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn detectors_for(axis: AxisKind, coordinate: f64) -> (DetectorSpec, DetectorSpec) {
    match axis {
        // Scan D1 against a fixed D2, as in a transverse-scan measurement.
        AxisKind::PositionDifferenceM => {
            (DetectorSpec::at_position(coordinate), DetectorSpec::at_position(0.0))
        }
        AxisKind::TimeDifferenceS => (DetectorSpec::at_time(coordinate), DetectorSpec::at_time(0.0)),
    }
}

/// MC curve over a strictly increasing grid, one independent seeded run per
/// point (point seeds derive from the run seed and the point index).
pub fn g2_scan(
    stat: ParticleStatistics,
    run: &McRun,
    axis: AxisKind,
    grid: &[f64],
) -> Result<CoherenceCurve> {
    let curves = g2_scan_multi(&[stat], run, axis, grid)?;
    Ok(curves.into_iter().next().unwrap())
}

/// Scan emitting curves for several statistics from shared realizations.
pub fn g2_scan_multi(
    stats: &[ParticleStatistics],
    run: &McRun,
    axis: AxisKind,
    grid: &[f64],
) -> Result<Vec<CoherenceCurve>> {
    run.validate()?;
    if grid.is_empty() {
        return Err(Error::EmptyCurve);
    }
    let mut per_stat: Vec<Vec<CurvePoint>> = vec![Vec::with_capacity(grid.len()); stats.len()];
    for (i, &coord) in grid.iter().enumerate() {
        let mut point_run = *run;
        point_run.seed = splitmix64(run.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (det1, det2) = detectors_for(axis, coord);
        let m = accumulate_moments(&point_run, &det1, &det2)?;
        for (k, &stat) in stats.iter().enumerate() {
            let est = m.ratio_estimate(channel(stat))?;
            per_stat[k].push(CurvePoint {
                coordinate: coord,
                g2: est.g2,
                stderr: est.stderr,
                flagged: false,
            });
        }
    }
    stats
        .iter()
        .zip(per_stat)
        .map(|(&stat, points)| {
            CoherenceCurve::new(
                axis,
                points,
                CurveMeta {
                    statistics: stat,
                    geometry: run.geometry,
                    source: run.source,
                    generator: Generator::Mc,
                    seed: Some(run.seed),
                },
            )
        })
        .collect()
}

/// Result of the per-realization half-sum check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HalfSumReport {
    pub checked: usize,
    pub max_rel_deviation: f64,
    /// Index of the first realization violating the identity, if any.
    pub first_violation: Option<u64>,
    pub passed: bool,
}

/// Verifies, realization by realization on shared random inputs, the
/// parallelogram identity `|u+v|^2 + |u-v|^2 = 2(|u|^2 + |v|^2)` and hence
/// `G_C = (G_B + G_F)/2` before any averaging. Tolerance 1e-12 relative.
pub fn verify_half_sum(
    run: &McRun,
    det1: &DetectorSpec,
    det2: &DetectorSpec,
) -> Result<HalfSumReport> {
    run.validate()?;
    let geom = PointGeometry::new(run, det1, det2);
    let mut max_rel: f64 = 0.0;
    let mut first_violation = None;
    for idx in 0..run.n_realizations as u64 {
        let real = Realization::generate(run, idx);
        let amps = TwoParticleAmplitudes::compute(&geom, &real);
        let gb = amps.compose(ParticleStatistics::Boson, run.polarization);
        let gf = amps.compose(ParticleStatistics::Fermion, run.polarization);
        let gc = amps.compose(ParticleStatistics::Classical, run.polarization);
        let scale = gc.abs().max(1e-300);
        let rel = (gc - 0.5 * (gb + gf)).abs() / scale;
        max_rel = max_rel.max(rel);
        if rel > 1e-12 && first_violation.is_none() {
            first_violation = Some(idx);
        }
    }
    Ok(HalfSumReport {
        checked: run.n_realizations,
        max_rel_deviation: max_rel,
        first_violation,
        passed: first_violation.is_none(),
    })
}

/// Result of comparing the coherent (all-paths) sum against the reduced sum
/// that drops cross-source interference terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossTermReport {
    pub statistics: ParticleStatistics,
    pub n_realizations: usize,
    pub mean_full: f64,
    pub mean_reduced: f64,
    /// Mean and standard error of the per-realization difference.
    pub mean_difference: f64,
    pub difference_stderr: f64,
    /// |mean| and standard error of one single cross term (m != n).
    pub cross_term_mean_abs: f64,
    pub cross_term_stderr: f64,
    /// Difference consistent with zero at 3 sigma.
    pub within_3_sigma: bool,
    /// Failure is declared beyond 5 sigma.
    pub within_5_sigma: bool,
    pub cross_term_vanishes: bool,
}

/// Computes the full coherent sum and the reduced sum on the same
/// realizations of a HOM configuration and checks that their ensemble
/// averages agree statistically, i.e. that cross-source interference terms
/// vanish on average. With mirrored source phases (the negative control) the
/// check must fail.
pub fn verify_cross_term_cancellation(
    stat: ParticleStatistics,
    run: &McRun,
    det1: &DetectorSpec,
    det2: &DetectorSpec,
) -> Result<CrossTermReport> {
    run.validate()?;
    if !run.geometry.is_hom() {
        // Termwise identical for a single source: report exact agreement.
        let m = accumulate_moments(run, det1, det2)?;
        let mean = m.mean(channel(stat));
        return Ok(CrossTermReport {
            statistics: stat,
            n_realizations: run.n_realizations,
            mean_full: mean,
            mean_reduced: mean,
            mean_difference: 0.0,
            difference_stderr: 0.0,
            cross_term_mean_abs: 0.0,
            cross_term_stderr: 0.0,
            within_3_sigma: true,
            within_5_sigma: true,
            cross_term_vanishes: true,
        });
    }
    let geom = PointGeometry::new(run, det1, det2);
    let n = run.n_realizations;
    let n_blocks = n.div_ceil(BLOCK);
    // Per block: sums of full, reduced, diff, diff^2, cross re/im, |cross|^2 moments.
    #[derive(Clone, Copy)]
    struct Acc {
        full: f64,
        reduced: f64,
        diff: f64,
        diff2: f64,
        xre: f64,
        xim: f64,
        xre2: f64,
        xim2: f64,
    }
    let blocks: Vec<Acc> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut a = Acc {
                full: 0.0,
                reduced: 0.0,
                diff: 0.0,
                diff2: 0.0,
                xre: 0.0,
                xim: 0.0,
                xre2: 0.0,
                xim2: 0.0,
            };
            let lo = b * BLOCK;
            let hi = ((b + 1) * BLOCK).min(n);
            for idx in lo..hi {
                let real = Realization::generate(run, idx as u64);
                let amps = TwoParticleAmplitudes::compute(&geom, &real);
                let full = amps.coherent_sum(stat);
                let reduced = amps.compose(stat, Polarization::Parallel);
                let d = full - reduced;
                a.full += full;
                a.reduced += reduced;
                a.diff += d;
                a.diff2 += d * d;
                // One representative cross term of the full expansion: the
                // interference between "both particles from source 1" and
                // "both particles from source 2".
                let sign = if stat == ParticleStatistics::Fermion { -1.0 } else { 1.0 };
                let t11 = amps.pairs[0].0 + sign * amps.pairs[0].1;
                let t22 = amps.pairs[3].0 + sign * amps.pairs[3].1;
                let x = t11 * t22.conj();
                a.xre += x.re;
                a.xim += x.im;
                a.xre2 += x.re * x.re;
                a.xim2 += x.im * x.im;
            }
            a
        })
        .collect();
    let mut t = Acc {
        full: 0.0,
        reduced: 0.0,
        diff: 0.0,
        diff2: 0.0,
        xre: 0.0,
        xim: 0.0,
        xre2: 0.0,
        xim2: 0.0,
    };
    for b in &blocks {
        t.full += b.full;
        t.reduced += b.reduced;
        t.diff += b.diff;
        t.diff2 += b.diff2;
        t.xre += b.xre;
        t.xim += b.xim;
        t.xre2 += b.xre2;
        t.xim2 += b.xim2;
    }
    let nf = n as f64;
    let mean_diff = t.diff / nf;
    let var_diff = ((t.diff2 - t.diff * t.diff / nf) / (nf - 1.0)).max(0.0);
    let sem_diff = (var_diff / nf).sqrt();
    let mean_x = Complex64::new(t.xre / nf, t.xim / nf);
    let var_x = ((t.xre2 - t.xre * t.xre / nf) + (t.xim2 - t.xim * t.xim / nf)) / (nf - 1.0);
    let sem_x = (var_x.max(0.0) / nf).sqrt();
    Ok(CrossTermReport {
        statistics: stat,
        n_realizations: n,
        mean_full: t.full / nf,
        mean_reduced: t.reduced / nf,
        mean_difference: mean_diff,
        difference_stderr: sem_diff,
        cross_term_mean_abs: mean_x.norm(),
        cross_term_stderr: sem_x,
        within_3_sigma: mean_diff.abs() <= 3.0 * sem_diff,
        within_5_sigma: mean_diff.abs() <= 5.0 * sem_diff,
        cross_term_vanishes: mean_x.norm() <= 5.0 * sem_x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic;
    use approx::assert_abs_diff_eq;

    const LAMBDA: f64 = 780e-9;
    const Z: f64 = 0.910;
    const DNU: f64 = 3.378e6;

    fn source(l: f64, n_sub: usize, n_modes: usize) -> SourceSpec {
        SourceSpec {
            length_l: l,
            center_x: 0.0,
            wavelength_lambda: LAMBDA,
            bandwidth_dnu: DNU,
            n_subsources: n_sub,
            n_modes,
        }
    }

    fn hbt_run(n_realizations: usize, seed: u64) -> McRun {
        McRun {
            source: source(0.55e-3, 200, 1),
            geometry: GeometrySpec::Hbt { z: Z },
            polarization: Polarization::Parallel,
            phase_mode: SourcePhaseMode::Independent,
            n_realizations,
            seed,
        }
    }

    fn hom_run(d: f64, n_realizations: usize, seed: u64) -> McRun {
        McRun {
            source: source(0.59e-3, 64, 1),
            geometry: GeometrySpec::Hom { z: Z, d },
            polarization: Polarization::Parallel,
            phase_mode: SourcePhaseMode::Independent,
            n_realizations,
            seed,
        }
    }

    #[test]
    fn realizations_are_reproducible() {
        let run = hom_run(1e-3, 100, 7);
        let a = Realization::generate(&run, 3);
        let b = Realization::generate(&run, 3);
        assert_eq!(a, b);
        let c = Realization::generate(&run, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn propagate_reference_cases() {
        let src = source(0.55e-3, 4, 2);
        let geom = GeometrySpec::Hbt { z: Z };
        // Detector on top of the sub-source, zero phase and frequency: the
        // quadratic phase vanishes and the amplitude is purely real.
        let det = DetectorSpec::at_position(1e-4);
        let a = propagate(1e-4, 0.0, 0.0, &det, &geom, &src);
        assert_abs_diff_eq!(a.im, 0.0, epsilon = 1e-16);
        assert_abs_diff_eq!(a.re, 1.0 / (8f64).sqrt(), epsilon = 1e-15);
        // Two sub-sources symmetric about the detector have equal phases.
        let b = propagate(1e-4 + 3e-5, 0.5, 1e5, &det, &geom, &src);
        let c = propagate(1e-4 - 3e-5, 0.5, 1e5, &det, &geom, &src);
        assert_abs_diff_eq!(b.re, c.re, epsilon = 1e-15);
        assert_abs_diff_eq!(b.im, c.im, epsilon = 1e-15);
    }

    #[test]
    fn edge_phase_difference_matches_linear_expansion() {
        // The quadratic-phase difference between the slit edges at detector
        // offset dx reduces to 2 pi l dx / (lambda z).
        let src = source(0.55e-3, 2, 1);
        let l = src.length_l;
        let k = 2.0 * std::f64::consts::PI / LAMBDA;
        for dx in [0.2e-3, 1.0e-3, -0.7e-3] {
            let det = DetectorSpec::at_position(dx);
            let phase = |xs: f64| k * (det.x - xs) * (det.x - xs) / (2.0 * Z);
            let diff = phase(-l / 2.0) - phase(l / 2.0);
            let expected = 2.0 * std::f64::consts::PI * l * dx / (LAMBDA * Z);
            assert_abs_diff_eq!(diff, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn engine_amplitude_equals_summed_propagate() {
        // The factorized fast path must agree with the direct sum over the
        // elementary propagate terms.
        let run = McRun { source: source(0.4e-3, 5, 3), ..hbt_run(100, 11) };
        let det1 = DetectorSpec { x: 0.3e-3, t: 1e-7, jitter_sigma: 0.0 };
        let det2 = DetectorSpec { x: -0.2e-3, t: 0.0, jitter_sigma: 0.0 };
        let geom = PointGeometry::new(&run, &det1, &det2);
        let real = Realization::generate(&run, 42);
        let fast = geom.particle_amplitudes(0, &real.draws[0][0]);
        let xs = sub_source_grid(0.0, run.source.length_l, run.source.n_subsources);
        for (det_idx, det) in [det1, det2].iter().enumerate() {
            let mut direct = Complex64::new(0.0, 0.0);
            for (s, &x_s) in xs.iter().enumerate() {
                for j in 0..run.source.n_modes {
                    let phi = real.draws[0][0].phases[s * run.source.n_modes + j];
                    let nu = real.draws[0][0].mode_frequencies[j];
                    direct += propagate(x_s, phi, nu, det, &run.geometry, &run.source);
                }
            }
            assert_abs_diff_eq!(direct.re, fast[det_idx].re, epsilon = 1e-12);
            assert_abs_diff_eq!(direct.im, fast[det_idx].im, epsilon = 1e-12);
        }
    }

    #[test]
    fn classical_g2_is_one_everywhere() {
        let run = hbt_run(4000, 5);
        for dx in [0.0, 0.4e-3, 1.3e-3] {
            let est = g2_mc(
                ParticleStatistics::Classical,
                &run,
                &DetectorSpec::at_position(dx),
                &DetectorSpec::at_position(0.0),
            )
            .unwrap();
            assert!(
                (est.g2 - 1.0).abs() <= 3.0 * est.stderr.max(1e-3),
                "classical g2 = {} +- {} at dx = {dx}",
                est.g2,
                est.stderr
            );
        }
        let hom = hom_run(1e-3, 4000, 5);
        let est = g2_mc(
            ParticleStatistics::Classical,
            &hom,
            &DetectorSpec::at_position(0.2e-3),
            &DetectorSpec::at_position(0.0),
        )
        .unwrap();
        assert!((est.g2 - 1.0).abs() <= 3.0 * est.stderr.max(1e-3));
    }

    #[test]
    fn coincident_detectors_reproduce_bunching_and_antibunching() {
        let run = hbt_run(20_000, 9);
        let det = DetectorSpec::at_position(0.0);
        let [boson, fermion, _] = g2_mc_all(&run, &det, &det).unwrap();
        assert!(
            (boson.g2 - 2.0).abs() <= 3.0 * boson.stderr,
            "boson g2(0) = {} +- {}",
            boson.g2,
            boson.stderr
        );
        // The two coincidence orderings are identical at det1 = det2, so the
        // fermion weight vanishes per realization, not just on average.
        assert!(fermion.g2.abs() < 1e-12, "fermion g2(0) = {}", fermion.g2);
    }

    #[test]
    fn mc_matches_closed_form_on_a_coarse_spatial_scan() {
        let run = hbt_run(4000, 21);
        let grid = analytic::symmetric_grid(2e-3, 9);
        let curves = g2_scan_multi(
            &[ParticleStatistics::Boson, ParticleStatistics::Fermion],
            &run,
            AxisKind::PositionDifferenceM,
            &grid,
        )
        .unwrap();
        for curve in &curves {
            for p in &curve.points {
                let exact = analytic::g2_hbt_spatial(
                    curve.meta.statistics,
                    0.55e-3,
                    LAMBDA,
                    Z,
                    p.coordinate,
                    1.0,
                )
                .unwrap();
                assert!(
                    (p.g2 - exact).abs() <= 4.0 * p.stderr.max(5e-3),
                    "{} at {}: mc {} vs exact {} (stderr {})",
                    curve.meta.statistics,
                    p.coordinate,
                    p.g2,
                    exact,
                    p.stderr
                );
            }
        }
    }

    #[test]
    fn hom_parallel_matches_closed_form_including_beat_sign() {
        // The cross-source beat enters the fermion curve with +cos; getting
        // the splitter phase wrong flips it. Probe points where cos is near
        // -1 so a sign error would miss by ~sinc^2, far beyond 4 sigma.
        let run = hom_run(1e-3, 8000, 51);
        let grid = [-0.9e-3, -0.355e-3, 0.0, 0.21e-3, 0.355e-3, 0.71e-3, 1.2e-3];
        let curves = g2_scan_multi(
            &[ParticleStatistics::Boson, ParticleStatistics::Fermion],
            &run,
            AxisKind::PositionDifferenceM,
            &grid,
        )
        .unwrap();
        for curve in &curves {
            for p in &curve.points {
                let exact = analytic::g2_hom_spatial(
                    curve.meta.statistics,
                    0.59e-3,
                    LAMBDA,
                    Z,
                    1e-3,
                    p.coordinate,
                    Polarization::Parallel,
                    1.0,
                )
                .unwrap();
                assert!(
                    (p.g2 - exact).abs() <= 4.0 * p.stderr.max(5e-3),
                    "{} at {}: mc {} vs exact {} (stderr {})",
                    curve.meta.statistics,
                    p.coordinate,
                    p.g2,
                    exact,
                    p.stderr
                );
            }
        }
    }

    #[test]
    fn hom_orthogonal_center_is_half_dip() {
        let mut run = hom_run(1e-3, 20_000, 33);
        run.polarization = Polarization::Orthogonal;
        let det = DetectorSpec::at_position(0.0);
        let est = g2_mc(ParticleStatistics::Fermion, &run, &det, &det).unwrap();
        assert!(
            (est.g2 - 0.5).abs() <= 3.0 * est.stderr,
            "orthogonal fermion g2(0) = {} +- {}",
            est.g2,
            est.stderr
        );
    }

    #[test]
    fn half_sum_identity_holds_per_realization() {
        for run in [hbt_run(1000, 3), hom_run(2e-3, 1000, 3)] {
            let report = verify_half_sum(
                &run,
                &DetectorSpec::at_position(0.35e-3),
                &DetectorSpec::at_position(0.0),
            )
            .unwrap();
            assert!(report.passed, "max rel deviation {}", report.max_rel_deviation);
            assert_eq!(report.checked, 1000);
        }
    }

    #[test]
    fn parallelogram_identity_reference_cases() {
        let u = Complex64::new(1.0, 0.0);
        let v = Complex64::new(0.0, 0.0);
        assert_eq!((u + v).norm_sqr() + (u - v).norm_sqr(), 2.0 * (u.norm_sqr() + v.norm_sqr()));
        let u = Complex64::new(0.3, -0.8);
        let v = u;
        assert_abs_diff_eq!(
            (u + v).norm_sqr() + (u - v).norm_sqr(),
            2.0 * (u.norm_sqr() + v.norm_sqr()),
            epsilon = 1e-15
        );
    }

    #[test]
    fn cross_terms_cancel_for_independent_sources_only() {
        let run = hom_run(1e-3, 5000, 17);
        let det1 = DetectorSpec::at_position(0.15e-3);
        let det2 = DetectorSpec::at_position(0.0);
        let report =
            verify_cross_term_cancellation(ParticleStatistics::Boson, &run, &det1, &det2).unwrap();
        assert!(report.within_3_sigma, "diff {} +- {}", report.mean_difference, report.difference_stderr);
        assert!(report.cross_term_vanishes);

        // Negative control: mirrored phases on coincident sources make the
        // coherent and reduced sums differ by a factor, far beyond 5 sigma.
        let mut bad = hom_run(0.0, 5000, 17);
        bad.phase_mode = SourcePhaseMode::Mirrored;
        let report =
            verify_cross_term_cancellation(ParticleStatistics::Boson, &bad, &det1, &det2).unwrap();
        assert!(!report.within_5_sigma, "negative control unexpectedly passed");
    }

    #[test]
    fn estimates_are_bit_identical_across_worker_counts() {
        let run = hbt_run(2048, 123);
        let det1 = DetectorSpec::at_position(0.5e-3);
        let det2 = DetectorSpec::at_position(0.0);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let quad = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = single.install(|| g2_mc(ParticleStatistics::Boson, &run, &det1, &det2).unwrap());
        let b = quad.install(|| g2_mc(ParticleStatistics::Boson, &run, &det1, &det2).unwrap());
        assert_eq!(a.g2.to_bits(), b.g2.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn too_few_realizations_rejected() {
        let run = hbt_run(99, 1);
        let det = DetectorSpec::at_position(0.0);
        assert!(matches!(
            g2_mc(ParticleStatistics::Boson, &run, &det, &det),
            Err(Error::TooFewRealizations { min: 100, got: 99 })
        ));
    }
}
