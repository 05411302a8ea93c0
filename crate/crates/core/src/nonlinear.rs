//! The projected advection term `B(u, v) = P (u·∇) v`, its trilinear forms, and
//! sampling estimates of the trilinear constant `c`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::with_workspace;
use crate::field::{
    inner_product_h, leray_project, normalize_to, random_field, weighted_inner, NormKind, RawField,
    SpectralGrid, VelocityField,
};
use crate::stokes::{apply_a_inverse, inner_product_h1, norm_h1, RenormParams};

/// Sobolev order available on the truncation (fields are smooth, `k = 2` is what the estimates use).
pub const SOBOLEV_ORDER: f64 = 2.0;

pub fn bilinear_b(u: &VelocityField, v: &VelocityField) -> Result<VelocityField> {
    u.grid().check_same(v.grid())?;
    with_workspace(u.grid(), |ws| ws.bilinear(u, v))
}

/// `B(u, u)` and the largest pointwise speed of `u`.
pub fn advect_self(u: &VelocityField) -> Result<(VelocityField, f64)> {
    with_workspace(u.grid(), |ws| ws.advect_self(u))
}

/// `b(u, v, w) = <B(u, v), w>_H`.
pub fn trilinear_b(u: &VelocityField, v: &VelocityField, w: &VelocityField) -> Result<f64> {
    u.grid().check_same(w.grid())?;
    inner_product_h(&bilinear_b(u, v)?, w)
}

/// `<S B(u, v), S w>_H`.
pub fn trilinear_b_renormed(
    p: &RenormParams,
    u: &VelocityField,
    v: &VelocityField,
    w: &VelocityField,
) -> Result<f64> {
    u.grid().check_same(w.grid())?;
    inner_product_h1(p, &bilinear_b(u, v)?, w)
}

/// `‖A^{e/2} u‖_H`.
fn half_power_norm(e: f64, u: &VelocityField) -> f64 {
    if e == 0.0 {
        weighted_inner(u, u, |_| 1.0).max(0.0).sqrt()
    } else {
        weighted_inner(u, u, |lam| lam.powf(e)).max(0.0).sqrt()
    }
}

/// Exponents `(α₁, α₂, α₃)` of the trilinear estimate
/// `|b(u,v,w)| ≤ c ‖A^{α₁/2}u‖ ‖A^{(1+α₂)/2}v‖ ‖A^{α₃/2}w‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrilinearExponents {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl TrilinearExponents {
    /// The triple the certificate is built on.
    pub const CERTIFICATE: TrilinearExponents = TrilinearExponents {
        alpha1: 0.0,
        alpha2: 1.0,
        alpha3: 0.5,
    };

    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self> {
        let k = SOBOLEV_ORDER;
        let e = TrilinearExponents {
            alpha1,
            alpha2,
            alpha3,
        };
        let checks = [
            (
                alpha1.is_finite() && (0.0..=k).contains(&alpha1),
                "0 <= alpha1 <= k",
            ),
            (
                alpha2.is_finite() && (0.0..=k - 1.0).contains(&alpha2),
                "0 <= alpha2 <= k - 1",
            ),
            (
                alpha3.is_finite() && (0.0..=k).contains(&alpha3),
                "0 <= alpha3 <= k",
            ),
            (
                alpha1 + alpha2 + alpha3 >= 1.5,
                "alpha1 + alpha2 + alpha3 >= 3/2",
            ),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(Error::InvalidExponents(format!(
                    "({alpha1}, {alpha2}, {alpha3}) violates {what} (k = {k})"
                )));
            }
        }
        for (i, corner) in [(1.5, 0.0, 0.0), (0.0, 1.5, 0.0), (0.0, 0.0, 1.5)]
            .iter()
            .enumerate()
        {
            if (alpha1, alpha2, alpha3) == *corner {
                return Err(Error::InvalidExponents(format!(
                    "({alpha1}, {alpha2}, {alpha3}) is the excluded endpoint with alpha{} = 3/2",
                    i + 1
                )));
            }
        }
        Ok(e)
    }

    /// `‖A^{α₁/2}u‖ ‖A^{(1+α₂)/2}v‖ ‖A^{α₃/2}w‖`.
    pub fn denominator(&self, u: &VelocityField, v: &VelocityField, w: &VelocityField) -> f64 {
        half_power_norm(self.alpha1, u)
            * half_power_norm(1.0 + self.alpha2, v)
            * half_power_norm(self.alpha3, w)
    }

    /// `|b(u,v,w)| / denominator`, or `None` for degenerate triples
    /// (a zero factor, or `w = v` where the form vanishes identically).
    pub fn ratio(
        &self,
        u: &VelocityField,
        v: &VelocityField,
        w: &VelocityField,
    ) -> Result<Option<f64>> {
        if v.coeffs() == w.coeffs() {
            return Ok(None);
        }
        let den = self.denominator(u, v, w);
        if !(den > 0.0) {
            return Ok(None);
        }
        Ok(Some(trilinear_b(u, v, w)?.abs() / den))
    }
}

impl fmt::Display for TrilinearExponents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.alpha1, self.alpha2, self.alpha3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMethod {
    RandomScan,
    HillClimb,
}

impl EstimateMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimateMethod::RandomScan => "random-scan",
            EstimateMethod::HillClimb => "hill-climb",
        }
    }
}

impl fmt::Display for EstimateMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Enough to regenerate a sampled triple: the stream seed, the sample index
/// within it, and how many hill-climb steps were applied afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TripleDescriptor {
    pub seed: u64,
    pub index: u64,
    pub climb_steps: u32,
}

impl fmt::Display for TripleDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.seed, self.index, self.climb_steps)
    }
}

impl std::str::FromStr for TripleDescriptor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || {
            Error::parse(
                "triple descriptor",
                format!("expected seed:index:steps, got `{s}`"),
            )
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(TripleDescriptor {
            seed: parts[0].parse().map_err(|_| bad())?,
            index: parts[1].parse().map_err(|_| bad())?,
            climb_steps: parts[2].parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantEstimate {
    pub exponents: TrilinearExponents,
    pub value: f64,
    pub attaining_triple: TripleDescriptor,
    pub samples: usize,
    pub method: EstimateMethod,
}

const CLIMB_SALT: u64 = 0x5bd1_e995_c1ac_0001;

fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sparse_field(grid: &Arc<SpectralGrid>, rng: &mut ChaCha8Rng) -> Result<VelocityField> {
    let low: Vec<[i32; 3]> = grid
        .modes()
        .iter()
        .filter(|m| m.norm_sq_lattice() <= 6)
        .map(|m| m.k)
        .collect();
    loop {
        let count = rng.gen_range(1..=4);
        let mut raw = RawField::zero(grid);
        for _ in 0..count {
            let k = low[rng.gen_range(0..low.len())];
            let mut draw =
                || Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            raw.set_mode(k, [draw(), draw(), draw()])?;
        }
        let u = leray_project(&raw)?;
        if !u.is_zero() {
            return normalize_to(&u, 1.0, NormKind::H);
        }
    }
}

/// Regenerates the random triple with the given seed and index (no climbing).
/// Even indices are broadband with a random spectral slope, odd ones are sparse
/// combinations of a few low modes.
pub fn sample_triple(
    grid: &Arc<SpectralGrid>,
    seed: u64,
    index: u64,
) -> Result<[VelocityField; 3]> {
    let mut rng = stream_rng(seed, index);
    let one = |rng: &mut ChaCha8Rng| -> Result<VelocityField> {
        if index % 2 == 0 {
            let decay = rng.gen_range(0.0..3.0);
            random_field(grid, 1.0, NormKind::H, rng.gen(), decay)
        } else {
            sparse_field(grid, rng)
        }
    };
    Ok([one(&mut rng)?, one(&mut rng)?, one(&mut rng)?])
}

/// Coordinate hill-climb: random single-mode perturbations of one of the three
/// fields, kept when they increase the ratio.
fn climb(
    e: &TrilinearExponents,
    triple: [VelocityField; 3],
    start: f64,
    seed: u64,
    index: u64,
    steps: u32,
) -> Result<([VelocityField; 3], f64)> {
    let mut rng = stream_rng(seed ^ CLIMB_SALT, index);
    let grid = triple[0].grid().clone();
    let mut best = triple;
    let mut best_ratio = start;
    let mut eps = 0.5;
    for _ in 0..steps {
        let which = rng.gen_range(0..3);
        let j = rng.gen_range(0..grid.len());
        let mut draw = || Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let mut raw = RawField::zero(&grid);
        raw.coeffs[j] = [draw(), draw(), draw()];
        let kick = leray_project(&raw)?;
        if kick.is_zero() {
            continue;
        }
        let kick = normalize_to(&kick, eps, NormKind::H)?;
        let mut cand = best.clone();
        cand[which] = normalize_to(&cand[which].add(&kick)?, 1.0, NormKind::H)?;
        match e.ratio(&cand[0], &cand[1], &cand[2])? {
            Some(r) if r > best_ratio => {
                best = cand;
                best_ratio = r;
            }
            _ => eps = (eps * 0.9_f64).max(1e-3),
        }
    }
    Ok((best, best_ratio))
}

/// Regenerates a triple from its descriptor, with its ratio (0 if degenerate).
pub fn replay_triple(
    grid: &Arc<SpectralGrid>,
    e: &TrilinearExponents,
    d: &TripleDescriptor,
) -> Result<([VelocityField; 3], f64)> {
    let t = sample_triple(grid, d.seed, d.index)?;
    let r = e.ratio(&t[0], &t[1], &t[2])?.unwrap_or(0.0);
    if d.climb_steps == 0 {
        return Ok((t, r));
    }
    climb(e, t, r, d.seed, d.index, d.climb_steps)
}

/// Largest sampled value of the trilinear ratio: a random scan over
/// `n_samples` triples, then hill-climbing from the best one.
/// Deterministic per seed; a scan over a prefix of the same stream never
/// exceeds the scan over the whole.
pub fn estimate_c(
    grid: &Arc<SpectralGrid>,
    e: &TrilinearExponents,
    n_samples: usize,
    seed: u64,
    hill_climb_steps: u32,
) -> Result<ConstantEstimate> {
    let e = TrilinearExponents::new(e.alpha1, e.alpha2, e.alpha3)?;
    if n_samples == 0 {
        return Err(Error::param("samples", "need at least one sample"));
    }
    let ratios: Vec<Option<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let t = sample_triple(grid, seed, i)?;
            e.ratio(&t[0], &t[1], &t[2])
        })
        .collect::<Result<_>>()?;
    let mut best = TripleDescriptor {
        seed,
        index: 0,
        climb_steps: 0,
    };
    let mut value = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        if let Some(r) = *r {
            if r > value {
                value = r;
                best.index = i as u64;
            }
        }
    }
    let mut method = EstimateMethod::RandomScan;
    if hill_climb_steps > 0 {
        let t = sample_triple(grid, seed, best.index)?;
        let (_, climbed) = climb(&e, t, value, seed, best.index, hill_climb_steps)?;
        if climbed > value {
            value = climbed;
            best.climb_steps = hill_climb_steps;
            method = EstimateMethod::HillClimb;
        }
    }
    Ok(ConstantEstimate {
        exponents: e,
        value,
        attaining_triple: best,
        samples: n_samples,
        method,
    })
}

/// Result of checking a sampled inequality `measured ≤ bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundAudit {
    pub name: &'static str,
    pub samples: usize,
    pub violations: usize,
    /// Largest `measured / bound` seen.
    pub worst_ratio: f64,
    pub worst: TripleDescriptor,
    pub offending: Vec<TripleDescriptor>,
}

impl BoundAudit {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// The factor by which the constant must grow to absorb every sample.
    pub fn required_scaling(&self) -> f64 {
        self.worst_ratio.max(1.0)
    }
}

/// Default audit tolerance: absolute `1e-12` plus relative `1e-10` of the bound.
pub fn exceeds(measured: f64, bound: f64) -> bool {
    measured > bound + 1e-12 + 1e-10 * bound.abs()
}

fn run_audit(
    name: &'static str,
    grid: &Arc<SpectralGrid>,
    n_samples: usize,
    seed: u64,
    measure: impl Fn(&[VelocityField; 3]) -> Result<Option<(f64, f64)>> + Sync,
) -> Result<BoundAudit> {
    let results: Vec<Option<(f64, f64)>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| measure(&sample_triple(grid, seed, i)?))
        .collect::<Result<_>>()?;
    let mut audit = BoundAudit {
        name,
        samples: 0,
        violations: 0,
        worst_ratio: 0.0,
        worst: TripleDescriptor {
            seed,
            index: 0,
            climb_steps: 0,
        },
        offending: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        let Some((measured, bound)) = r else { continue };
        audit.samples += 1;
        let d = TripleDescriptor {
            seed,
            index: i as u64,
            climb_steps: 0,
        };
        let q = if bound > 0.0 {
            measured / bound
        } else {
            f64::INFINITY
        };
        if q > audit.worst_ratio {
            audit.worst_ratio = q;
            audit.worst = d;
        }
        if exceeds(measured, bound) {
            audit.violations += 1;
            audit.offending.push(d);
        }
    }
    Ok(audit)
}

/// `|b(u,v,w)| ≤ c ‖A^{α₁/2}u‖ ‖A^{(1+α₂)/2}v‖ ‖A^{α₃/2}w‖` on fresh samples.
pub fn audit_trilinear_bound(
    grid: &Arc<SpectralGrid>,
    e: &TrilinearExponents,
    c: f64,
    n_samples: usize,
    seed: u64,
) -> Result<BoundAudit> {
    run_audit("trilinear", grid, n_samples, seed, |t| {
        if t[1].coeffs() == t[2].coeffs() {
            return Ok(None);
        }
        let den = e.denominator(&t[0], &t[1], &t[2]);
        Ok(Some((trilinear_b(&t[0], &t[1], &t[2])?.abs(), c * den)))
    })
}

/// `M³ c c₁ / r^{1/4}`.
pub fn renormed_trilinear_constant(p: &RenormParams, c: f64, c1: f64) -> f64 {
    p.m.powi(3) * c * c1 / p.r.powf(0.25)
}

/// `M⁴ c c₁ c₂ / r^{5/4}`.
pub fn renormed_bilinear_constant(p: &RenormParams, c: f64, c1: f64, c2: f64) -> f64 {
    p.m.powi(4) * c * c1 * c2 / p.r.powf(1.25)
}

/// `|<A⁻¹B(u,v), w>_{H,1}| ≤ (M³cc₁/r^{1/4}) ‖u‖_{H,1}‖v‖_{H,1}‖w‖_{H,1}`.
pub fn audit_renormed_trilinear(
    grid: &Arc<SpectralGrid>,
    p: &RenormParams,
    c: f64,
    c1: f64,
    n_samples: usize,
    seed: u64,
) -> Result<BoundAudit> {
    let k = renormed_trilinear_constant(p, c, c1);
    run_audit("renormed-trilinear", grid, n_samples, seed, |t| {
        let lhs = inner_product_h1(p, &apply_a_inverse(&bilinear_b(&t[0], &t[1])?), &t[2])?.abs();
        let den = norm_h1(p, &t[0]) * norm_h1(p, &t[1]) * norm_h1(p, &t[2]);
        Ok(Some((lhs, k * den)))
    })
}

/// `max(‖B(u,v)‖_{H,1}, ‖B(v,u)‖_{H,1}) ≤ (M⁴cc₁c₂/r^{5/4}) ‖u‖_{H,1}‖v‖_{H,1}`.
pub fn audit_renormed_bilinear(
    grid: &Arc<SpectralGrid>,
    p: &RenormParams,
    c: f64,
    c1: f64,
    c2: f64,
    n_samples: usize,
    seed: u64,
) -> Result<BoundAudit> {
    let k = renormed_bilinear_constant(p, c, c1, c2);
    run_audit("renormed-bilinear", grid, n_samples, seed, |t| {
        let a = norm_h1(p, &bilinear_b(&t[0], &t[1])?);
        let b = norm_h1(p, &bilinear_b(&t[1], &t[0])?);
        Ok(Some((a.max(b), k * norm_h1(p, &t[0]) * norm_h1(p, &t[1]))))
    })
}
