//! Ornstein-Uhlenbeck testbed for the renorming idea, in an orthonormal
//! Hermite basis of `L²(ℝ³, dμ)`, `dμ = (2π)^{-3/2} e^{-|x|²/2} dx`.
//!
//! Convention: the generator is `D² = Δ - x·∇`, whose semigroup has the
//! Mehler form `T(t)f(x) = ∫ f(e^{-t}x + √(1-e^{-2t}) y) dμ(y)`. The kernel
//! written with `e^{-t/2}x` and `1-e^{-t}` belongs to `½(Δ - x·∇)` instead.
//!
//! Both operators are diagonal: `He_n` (normalized, `n ∈ ℕ³`) is an
//! eigenfunction with eigenvalue `-|n|`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::stokes::{smoothing_constant, RenormParams, SmoothingConstant, StokesSpectrum};

pub type MultiIndex = [u32; 3];

pub fn degree(n: &MultiIndex) -> u32 {
    n[0] + n[1] + n[2]
}

/// Multi-indices of total degree `≤ nh`, ordered by degree then lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteBasis {
    nh: u32,
    indices: Vec<MultiIndex>,
    lookup: HashMap<MultiIndex, usize>,
}

impl HermiteBasis {
    pub fn new(nh: u32) -> Arc<Self> {
        let mut indices = Vec::new();
        for d in 0..=nh {
            for a in (0..=d).rev() {
                for b in (0..=d - a).rev() {
                    indices.push([a, b, d - a - b]);
                }
            }
        }
        let lookup = indices.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        Arc::new(HermiteBasis {
            nh,
            indices,
            lookup,
        })
    }

    pub fn max_degree(&self) -> u32 {
        self.nh
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn index_of(&self, n: &MultiIndex) -> Option<usize> {
        self.lookup.get(n).copied()
    }

    /// The distinct degrees `0..=nh`, i.e. the spectrum of `-D²` on the truncation.
    pub fn spectrum(&self) -> StokesSpectrum {
        StokesSpectrum::from_levels((0..=self.nh).map(f64::from).collect())
            .expect("degrees are valid levels")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HermiteFunctionExpansion {
    basis: Arc<HermiteBasis>,
    coeffs: Vec<f64>,
}

impl HermiteFunctionExpansion {
    pub fn zero(basis: &Arc<HermiteBasis>) -> Self {
        HermiteFunctionExpansion {
            basis: basis.clone(),
            coeffs: vec![0.0; basis.len()],
        }
    }

    /// The constant function `𝟏`.
    pub fn one(basis: &Arc<HermiteBasis>) -> Self {
        Self::single(basis, [0, 0, 0], 1.0).expect("degree 0 is always present")
    }

    pub fn single(basis: &Arc<HermiteBasis>, n: MultiIndex, value: f64) -> Result<Self> {
        let j = basis.index_of(&n).ok_or_else(|| {
            Error::param("multi_index", format!("{n:?} exceeds degree {}", basis.nh))
        })?;
        let mut e = Self::zero(basis);
        e.coeffs[j] = value;
        Ok(e)
    }

    pub fn from_coeffs(basis: &Arc<HermiteBasis>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.len() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Structure(format!(
                "expected {} finite coefficients, got {}",
                basis.len(),
                coeffs.len()
            )));
        }
        Ok(HermiteFunctionExpansion {
            basis: basis.clone(),
            coeffs,
        })
    }

    /// Gaussian coefficients with `|c_n| ∝ (1 + |n|)^{-decay}`.
    pub fn random(basis: &Arc<HermiteBasis>, seed: u64, decay: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = basis
            .indices
            .iter()
            .map(|n| {
                let g: f64 = rng.sample(StandardNormal);
                g * (1.0 + degree(n) as f64).powf(-decay)
            })
            .collect();
        HermiteFunctionExpansion {
            basis: basis.clone(),
            coeffs,
        }
    }

    pub fn basis(&self) -> &Arc<HermiteBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn get(&self, n: &MultiIndex) -> Option<f64> {
        self.basis.index_of(n).map(|j| self.coeffs[j])
    }

    pub fn map_degree(&self, mult: impl Fn(u32) -> f64) -> Self {
        let coeffs = self
            .basis
            .indices
            .iter()
            .zip(&self.coeffs)
            .map(|(n, c)| c * mult(degree(n)))
            .collect();
        HermiteFunctionExpansion {
            basis: self.basis.clone(),
            coeffs,
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.basis != other.basis {
            return Err(Error::Structure("Hermite truncations differ".into()));
        }
        Ok(HermiteFunctionExpansion {
            basis: self.basis.clone(),
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map_degree(|_| s)
    }

    /// `L²(dμ)` norm by Parseval.
    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Renormed norm `‖S(γ)w‖ = ‖e^{ωγ}T(γ)w‖`.
    pub fn renormed_norm(&self, p: &RenormParams) -> f64 {
        self.map_degree(|d| p.multiplier(d as f64)).norm()
    }

    /// Point evaluation `Σ c_n Π_i He_{n_i}(x_i)/√n_i!`.
    pub fn evaluate(&self, x: [f64; 3]) -> f64 {
        let tables: Vec<Vec<f64>> = x
            .iter()
            .map(|&xi| hermite_values(xi, self.basis.nh as usize))
            .collect();
        self.basis
            .indices
            .iter()
            .zip(&self.coeffs)
            .map(|(n, c)| {
                c * tables[0][n[0] as usize] * tables[1][n[1] as usize] * tables[2][n[2] as usize]
            })
            .sum()
    }

    /// Monomial expansion `{(a, b, c) ↦ coefficient of x₁^a x₂^b x₃^c}`.
    pub fn to_polynomial(&self) -> HashMap<[u32; 3], f64> {
        let one_d: Vec<Vec<f64>> = (0..=self.basis.nh as usize)
            .map(hermite_monomials)
            .collect();
        let mut poly: HashMap<[u32; 3], f64> = HashMap::new();
        for (n, &c) in self.basis.indices.iter().zip(&self.coeffs) {
            if c == 0.0 {
                continue;
            }
            let [p, q, r] = [
                &one_d[n[0] as usize],
                &one_d[n[1] as usize],
                &one_d[n[2] as usize],
            ];
            for (a, pa) in p.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                for (b, qb) in q.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                    for (d, rd) in r.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                        *poly.entry([a as u32, b as u32, d as u32]).or_insert(0.0) +=
                            c * pa * qb * rd;
                    }
                }
            }
        }
        poly
    }
}

/// `He_k(x)/√k!` for `k = 0..=n`.
pub fn hermite_values(x: f64, n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n + 1];
    h[0] = 1.0;
    if n >= 1 {
        h[1] = x;
    }
    for k in 1..n {
        h[k + 1] = (x * h[k] - (k as f64).sqrt() * h[k - 1]) / ((k + 1) as f64).sqrt();
    }
    h
}

/// Monomial coefficients of `He_n(x)/√n!`, lowest degree first.
pub fn hermite_monomials(n: usize) -> Vec<f64> {
    // He_{k+1} = x He_k - k He_{k-1}, unnormalized
    let mut prev = vec![1.0];
    let mut cur = vec![0.0, 1.0];
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let mut next = vec![0.0; k + 2];
        for (i, c) in cur.iter().enumerate() {
            next[i + 1] += c;
        }
        for (i, c) in prev.iter().enumerate() {
            next[i] -= k as f64 * c;
        }
        prev = cur;
        cur = next;
    }
    let norm = (1..=n).map(|k| k as f64).product::<f64>().sqrt();
    cur.iter().map(|c| c / norm).collect()
}

/// `D² e`: multiplies the coefficient at `n` by `-|n|`.
pub fn ou_generator(e: &HermiteFunctionExpansion) -> HermiteFunctionExpansion {
    e.map_degree(|d| -(d as f64))
}

/// `T(t) e`: multiplies the coefficient at `n` by `e^{-|n|t}`.
pub fn ou_semigroup(t: f64, e: &HermiteFunctionExpansion) -> Result<HermiteFunctionExpansion> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::param(
            "t",
            format!("semigroup time must be >= 0, got {t}"),
        ));
    }
    Ok(e.map_degree(|d| (-(d as f64) * t).exp()))
}

/// Gauss quadrature for the standard Gaussian measure: nodes and weights
/// (summing to 1) from the eigen-decomposition of the Hermite Jacobi matrix.
pub fn gauss_hermite(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(Error::param("order", "quadrature needs at least one node"));
    }
    let mut j = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().unzip())
}

/// `∫ f(e^{-t}x + √(1-e^{-2t}) y) dμ(y)` in one dimension.
pub fn mehler_1d(f: impl Fn(f64) -> f64, x: f64, t: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let a = (-t).exp();
    let b = (-(2.0 * t)).exp_m1().abs().sqrt();
    nodes
        .iter()
        .zip(weights)
        .map(|(y, w)| w * f(a * x + b * y))
        .sum()
}

/// Mehler integral of a 3D expansion at `x`, by tensor Gauss quadrature.
pub fn mehler_quadrature(
    e: &HermiteFunctionExpansion,
    x: [f64; 3],
    t: f64,
    order: usize,
) -> Result<f64> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::param(
            "t",
            format!("semigroup time must be >= 0, got {t}"),
        ));
    }
    let (nodes, weights) = gauss_hermite(order)?;
    let a = (-t).exp();
    let b = (-(2.0 * t)).exp_m1().abs().sqrt();
    let mut sum = 0.0;
    for (y0, w0) in nodes.iter().zip(&weights) {
        for (y1, w1) in nodes.iter().zip(&weights) {
            for (y2, w2) in nodes.iter().zip(&weights) {
                let z = [a * x[0] + b * y0, a * x[1] + b * y1, a * x[2] + b * y2];
                sum += w0 * w1 * w2 * e.evaluate(z);
            }
        }
    }
    Ok(sum)
}

/// Hermite coefficients `∫ f He_k/√k! dμ`, `k = 0..=nh`, by quadrature.
pub fn hermite_coefficients_1d(
    f: impl Fn(f64) -> f64,
    nh: usize,
    nodes: &[f64],
    weights: &[f64],
) -> Vec<f64> {
    let mut c = vec![0.0; nh + 1];
    for (y, w) in nodes.iter().zip(weights) {
        let h = hermite_values(*y, nh);
        let fy = f(*y);
        for k in 0..=nh {
            c[k] += w * fy * h[k];
        }
    }
    c
}

/// `Σ_k c_k e^{-kt} He_k(x)/√k!`: the diagonal semigroup action in one dimension.
pub fn semigroup_1d(coeffs: &[f64], x: f64, t: f64) -> f64 {
    let h = hermite_values(x, coeffs.len().saturating_sub(1));
    coeffs
        .iter()
        .enumerate()
        .map(|(k, c)| c * (-(k as f64) * t).exp() * h[k])
        .sum()
}

pub type Polynomial = HashMap<[u32; 3], f64>;

/// `Δp - x·∇p` on a monomial expansion, independent of the Hermite basis.
pub fn ou_operator_on_polynomial(p: &Polynomial) -> Polynomial {
    let mut out: Polynomial = HashMap::new();
    for (e, c) in p {
        for i in 0..3 {
            let k = e[i] as f64;
            if e[i] >= 2 {
                let mut f = *e;
                f[i] -= 2;
                *out.entry(f).or_insert(0.0) += c * k * (k - 1.0);
            }
            *out.entry(*e).or_insert(0.0) -= c * k;
        }
    }
    out
}

/// Largest coefficient of `a - b`.
pub fn polynomial_distance(a: &Polynomial, b: &Polynomial) -> f64 {
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .fold(0.0, f64::max)
}

/// `max_{|n| ≤ max_degree} ‖(Δ - x·∇)He_n - D²He_n‖ / ‖He_n‖`, both sides as
/// monomial expansions with coefficient max-norms.
pub fn generator_residual(max_degree: u32) -> f64 {
    let basis = HermiteBasis::new(max_degree);
    let mut worst: f64 = 0.0;
    for n in basis.indices() {
        let e = HermiteFunctionExpansion::single(&basis, *n, 1.0).expect("index from the basis");
        let p = e.to_polynomial();
        let scale = p.values().fold(0.0f64, |m, c| m.max(c.abs()));
        let lhs = ou_operator_on_polynomial(&p);
        worst = worst.max(polynomial_distance(&lhs, &ou_generator(&e).to_polynomial()) / scale);
    }
    worst
}

/// `max_t ‖T(t)𝟏 - 𝟏‖`.
pub fn constant_invariance_residual(max_degree: u32, times: &[f64]) -> Result<f64> {
    let basis = HermiteBasis::new(max_degree);
    let one = HermiteFunctionExpansion::one(&basis);
    times.iter().try_fold(0.0f64, |m, &t| {
        Ok(m.max(ou_semigroup(t, &one)?.sub(&one)?.norm()))
    })
}

/// Largest gap between Mehler quadrature and the diagonal action on `x`, `x²`
/// and `e^{x/2}` in one dimension, and on `x₁` in three.
pub fn mehler_residual(max_degree_1d: usize) -> Result<f64> {
    let (y, w) = gauss_hermite(60)?;
    let fs: [fn(f64) -> f64; 3] = [|x| x, |x| x * x, |x| (0.5 * x).exp()];
    let mut worst: f64 = 0.0;
    for f in fs {
        let c = hermite_coefficients_1d(f, max_degree_1d, &y, &w);
        for t in [0.05, 0.5, 2.0] {
            for x in [-1.5, 0.0, 0.9] {
                worst = worst.max((mehler_1d(f, x, t, &y, &w) - semigroup_1d(&c, x, t)).abs());
            }
        }
    }
    let basis = HermiteBasis::new(1);
    let x1 = HermiteFunctionExpansion::single(&basis, [1, 0, 0], 1.0)?;
    for t in [0.1, 1.0] {
        let x = [0.4, -1.1, 0.7];
        let exact = ou_semigroup(t, &x1)?.evaluate(x);
        worst = worst.max((mehler_quadrature(&x1, x, t, 4)? - exact).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuRenormAudit {
    pub gamma: f64,
    pub max_degree: u32,
    pub m: f64,
    pub c: SmoothingConstant,
    /// `M c / γ`.
    pub bound: f64,
    pub worst_ratio: f64,
    pub samples: usize,
    pub skipped: usize,
    pub violations: usize,
}

impl OuRenormAudit {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Renorming parameters of the truncated OU generator: `ω = 0` (constants are
/// invariant, `T(t)𝟏 = 𝟏`), `r = γ`, `M = e^{N_h γ}`.
pub fn ou_renorm_params(
    basis: &HermiteBasis,
    gamma: f64,
) -> Result<(RenormParams, StokesSpectrum)> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param(
            "gamma",
            format!("must lie in (0, 1), got {gamma}"),
        ));
    }
    let spectrum = basis.spectrum();
    Ok((RenormParams::new(0.0, gamma, &spectrum)?, spectrum))
}

/// `‖D²w‖_{2,γ}/‖w‖_{2,γ}` for a single expansion, `None` when `D²w = 0`.
pub fn ou_renorm_ratio(w: &HermiteFunctionExpansion, p: &RenormParams) -> Option<f64> {
    let num = ou_generator(w).renormed_norm(p);
    let den = w.renormed_norm(p);
    if num == 0.0 || den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Checks `‖D²w‖_{2,γ} ≤ (Mc/γ)‖w‖_{2,γ}` on `w = 𝟏`, every single mode of
/// the top degree, and `samples` random expansions.
pub fn ou_renorm_bound_audit(
    gamma: f64,
    samples: usize,
    max_degree: u32,
    seed: u64,
) -> Result<OuRenormAudit> {
    let basis = HermiteBasis::new(max_degree);
    let (p, spectrum) = ou_renorm_params(&basis, gamma)?;
    let c = smoothing_constant(1.0, &p, &spectrum)?;
    let bound = c.operator_bound(&p);
    let mut audit = OuRenormAudit {
        gamma,
        max_degree,
        m: p.m,
        c,
        bound,
        worst_ratio: 0.0,
        samples: 0,
        skipped: 0,
        violations: 0,
    };
    let mut tested: Vec<HermiteFunctionExpansion> = vec![HermiteFunctionExpansion::one(&basis)];
    tested.push(HermiteFunctionExpansion::single(
        &basis,
        [max_degree, 0, 0],
        1.0,
    )?);
    for i in 0..samples as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        tested.push(HermiteFunctionExpansion::random(
            &basis,
            rng.gen(),
            rng.gen_range(0.0..3.0),
        ));
    }
    for w in &tested {
        match ou_renorm_ratio(w, &p) {
            None => audit.skipped += 1,
            Some(r) => {
                audit.samples += 1;
                audit.worst_ratio = audit.worst_ratio.max(r);
                if r > bound * (1.0 + 1e-12) {
                    audit.violations += 1;
                }
            }
        }
    }
    Ok(audit)
}
