//! Diagonal calculus for the Stokes operator on the torus.
//!
//! On divergence-free Fourier modes `A = -PΔ` acts as multiplication by
//! `λ_k = |kphys|²`, so powers, the analytic semigroup `T(t) = exp(-tA)` and the
//! renorming semigroup `S(r) = e^{ωr} T(r)` are all per-mode multipliers.
//!
//! The renormed norm is `‖u‖_{H,1} = ‖S(r)u‖_H`. On a truncation with largest
//! eigenvalue `λ_max` it satisfies
//!
//! ```text
//! ‖S(r)u‖_H <= ‖u‖_H <= M ‖S(r)u‖_H,     M = exp((λ_max - ω) r)
//! ```
//!
//! and `M` grows without bound as the truncation is refined.

use crate::error::{Error, Result};
use crate::field::{weighted_inner, SpectralGrid, VelocityField};

/// Distinct eigenvalues of a diagonal positive operator, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct StokesSpectrum {
    eigenvalues: Vec<f64>,
    multiplicities: Vec<usize>,
}

impl StokesSpectrum {
    /// Stokes spectrum of the divergence-free modes stored on `grid`. Each stored
    /// representative carries a two-dimensional transverse space, counted once per pair.
    pub fn from_grid(grid: &SpectralGrid) -> Self {
        let unit = grid.wavenumber_unit().powi(2);
        let mut levels: Vec<i64> = grid.modes().iter().map(|m| m.norm_sq_lattice()).collect();
        levels.sort_unstable();
        let mut eigenvalues = Vec::new();
        let mut multiplicities = Vec::new();
        for lvl in levels {
            let lam = unit * lvl as f64;
            match eigenvalues.last() {
                Some(&last) if last == lam => *multiplicities.last_mut().unwrap() += 1,
                _ => {
                    eigenvalues.push(lam);
                    multiplicities.push(1);
                }
            }
        }
        StokesSpectrum {
            eigenvalues,
            multiplicities,
        }
    }

    /// Arbitrary diagonal spectrum (used for the Ornstein-Uhlenbeck levels).
    pub fn from_levels(mut levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::param(
                "levels",
                "need a non-empty list of finite, non-negative values",
            ));
        }
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let multiplicities = vec![1; levels.len()];
        Ok(StokesSpectrum {
            eigenvalues: levels,
            multiplicities,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.multiplicities
    }

    pub fn lambda1(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }
}

/// Parameters of the equivalent norm `‖u‖_{H,1} = ‖S(r)u‖_H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenormParams {
    pub omega: f64,
    pub r: f64,
    /// `exp((λ_max - ω) r)`.
    pub m: f64,
}

impl RenormParams {
    pub fn new(omega: f64, r: f64, spectrum: &StokesSpectrum) -> Result<Self> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::param("omega", format!("must be >= 0, got {omega}")));
        }
        if omega > spectrum.lambda1() {
            return Err(Error::param(
                "omega",
                format!("{omega} exceeds lambda1 = {}", spectrum.lambda1()),
            ));
        }
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::param("r", format!("must be >= 0, got {r}")));
        }
        Ok(RenormParams {
            omega,
            r,
            m: ((spectrum.lambda_max() - omega) * r).exp(),
        })
    }

    /// `ω = λ₁`, the sharp decay rate.
    pub fn with_lambda1(r: f64, spectrum: &StokesSpectrum) -> Result<Self> {
        Self::new(spectrum.lambda1(), r, spectrum)
    }

    /// Multiplier of `S(r)` on eigenvalue `λ`.
    #[inline]
    pub fn multiplier(&self, lambda: f64) -> f64 {
        ((self.omega - lambda) * self.r).exp()
    }
}

pub fn apply_a(u: &VelocityField) -> VelocityField {
    u.map_spectrum(|lam| lam)
}

pub fn apply_a_inverse(u: &VelocityField) -> VelocityField {
    u.map_spectrum(|lam| 1.0 / lam)
}

pub fn apply_a_power(z: f64, u: &VelocityField) -> VelocityField {
    u.map_spectrum(|lam| lam.powf(z))
}

/// `T(t) u = exp(-tA) u`.
pub fn semigroup_t(t: f64, u: &VelocityField) -> Result<VelocityField> {
    if !(t >= 0.0) {
        return Err(Error::param(
            "t",
            format!("semigroup time must be >= 0, got {t}"),
        ));
    }
    Ok(u.map_spectrum(|lam| (-lam * t).exp()))
}

/// `S(r) u = e^{ωr} T(r) u`.
pub fn renorm_apply_s(p: &RenormParams, u: &VelocityField) -> VelocityField {
    u.map_spectrum(|lam| p.multiplier(lam))
}

/// `<S(r)u, S(r)v>_H`, fused into a single weighted sum.
pub fn inner_product_h1(p: &RenormParams, u: &VelocityField, v: &VelocityField) -> Result<f64> {
    u.grid().check_same(v.grid())?;
    Ok(weighted_inner(u, v, |lam| p.multiplier(lam).powi(2)))
}

pub fn norm_h1(p: &RenormParams, u: &VelocityField) -> f64 {
    weighted_inner(u, u, |lam| p.multiplier(lam).powi(2))
        .max(0.0)
        .sqrt()
}

/// Smoothing constant of `A^z` relative to the renormed norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConstant {
    pub z: f64,
    /// Tight `c_z`: `‖A^z u‖_{H,1} <= (M c_z / r^z) ‖u‖_{H,1}` with equality on the
    /// top eigenmode, i.e. `c_z = r^z λ_max^z / M`.
    pub value: f64,
    /// Index (into the spectrum) of the eigenvalue attaining the tight bound.
    pub extremal_index: usize,
    /// Analytic-smoothing constant `r^z max_k λ_k^z e^{-(λ_k-ω)r}`, bounding
    /// `e^{ωr}‖A^z T(r)u‖_H` by `(c/r^z)‖u‖_H`. Always `>= value`.
    pub analytic: f64,
    pub analytic_index: usize,
}

impl SmoothingConstant {
    /// `M c_z / r^z`.
    pub fn operator_bound(&self, p: &RenormParams) -> f64 {
        p.m * self.value / p.r.powf(self.z)
    }
}

pub fn smoothing_constant(
    z: f64,
    p: &RenormParams,
    spectrum: &StokesSpectrum,
) -> Result<SmoothingConstant> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::param("z", format!("must be > 0, got {z}")));
    }
    if !(p.r > 0.0) {
        return Err(Error::param(
            "r",
            format!("smoothing constants need r > 0, got {}", p.r),
        ));
    }
    let rz = p.r.powf(z);
    // Tight ratio sup ‖A^z u‖_{H,1}/‖u‖_{H,1} = max_k λ_k^z, since A^z and S commute.
    let (extremal_index, top) = spectrum
        .eigenvalues()
        .iter()
        .map(|&lam| lam.powf(z))
        .enumerate()
        .fold(
            (0, f64::MIN),
            |best, (i, v)| if v >= best.1 { (i, v) } else { best },
        );
    let (analytic_index, scan) = spectrum
        .eigenvalues()
        .iter()
        .map(|&lam| lam.powf(z) * p.multiplier(lam))
        .enumerate()
        .fold(
            (0, f64::MIN),
            |best, (i, v)| if v > best.1 { (i, v) } else { best },
        );
    Ok(SmoothingConstant {
        z,
        value: rz * top / p.m,
        extremal_index,
        analytic: rz * scan,
        analytic_index,
    })
}

/// Solves `r = c₂(r)/λ₁` for the `z = 1` smoothing constant by bisection.
///
/// With the tight constant the fixed point is `M(r) = λ_max/λ₁`, i.e.
/// `r = ln(λ_max/λ₁)/(λ_max - ω)`.
pub fn solve_r_hat(omega: f64, spectrum: &StokesSpectrum) -> Result<f64> {
    let l1 = spectrum.lambda1();
    let lmax = spectrum.lambda_max();
    if !(lmax > l1) || !(l1 > 0.0) {
        return Err(Error::param(
            "spectrum",
            "r_hat needs at least two distinct positive eigenvalues",
        ));
    }
    // g(r) = c₂(r)/(r λ₁) - 1 is strictly decreasing in r.
    let g = |r: f64| -> Result<f64> {
        let p = RenormParams::new(omega, r, spectrum)?;
        Ok(smoothing_constant(1.0, &p, spectrum)?.value / (r * l1) - 1.0)
    };
    let mut lo = 1e-12;
    let mut hi = 1.0 / (lmax - omega);
    while g(hi)? > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{norm_h, random_field, NormKind};
    use rustfft::num_complex::Complex64;
    use std::sync::Arc;

    fn grid(n: usize) -> Arc<SpectralGrid> {
        SpectralGrid::unit(n).unwrap()
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn spectrum_of_unit_torus() {
        let g = grid(4);
        let s = StokesSpectrum::from_grid(&g);
        assert_eq!(s.lambda1(), 1.0);
        assert!((s.lambda_max() - 12.0).abs() < 1e-12);
        assert_eq!(s.multiplicities()[0], 3);
        assert!(s.eigenvalues().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn a_on_eigenmodes() {
        let g = grid(6);
        let u = VelocityField::single_mode(&g, [1, 0, 0], [c(0.0), c(1.0), c(0.0)]).unwrap();
        assert!((norm_h(&apply_a(&u)) - norm_h(&u)).abs() < 1e-14);
        let w = VelocityField::single_mode(&g, [1, 2, 2], [c(0.0), c(1.0), c(-1.0)]).unwrap();
        assert!((norm_h(&apply_a(&w)) - 9.0 * norm_h(&w)).abs() < 1e-12 * norm_h(&w));
    }

    #[test]
    fn half_power_twice_is_a() {
        let g = grid(6);
        let u = random_field(&g, 1.0, NormKind::H, 3, 1.0).unwrap();
        let twice = apply_a_power(0.5, &apply_a_power(0.5, &u));
        let diff = twice.sub(&apply_a(&u)).unwrap();
        assert!(norm_h(&diff) < 1e-13 * norm_h(&apply_a(&u)));
        let id = apply_a(&apply_a_inverse(&u)).sub(&u).unwrap();
        assert!(norm_h(&id) < 1e-14);
    }

    #[test]
    fn semigroup_examples() {
        let g = grid(4);
        let u = VelocityField::single_mode(&g, [0, 1, 0], [c(2.0), c(0.0), c(0.0)]).unwrap();
        assert_eq!(semigroup_t(0.0, &u).unwrap().coeffs(), u.coeffs());
        let halved = semigroup_t(std::f64::consts::LN_2, &u).unwrap();
        assert!((halved.mode([0, 1, 0]).unwrap()[0].re - 1.0).abs() < 1e-15);
        assert!(semigroup_t(-0.1, &u).is_err());
    }

    #[test]
    fn renorm_examples() {
        let g = grid(4);
        let s = StokesSpectrum::from_grid(&g);
        let u = VelocityField::single_mode(&g, [0, 0, 1], [c(1.0), c(0.5), c(0.0)]).unwrap();
        let p = RenormParams::with_lambda1(0.7, &s).unwrap();
        assert_eq!(renorm_apply_s(&p, &u).coeffs(), u.coeffs());
        let p0 = RenormParams::new(0.0, 0.3, &s).unwrap();
        let w = random_field(&g, 1.0, NormKind::H, 5, 0.5).unwrap();
        let lhs = renorm_apply_s(&p0, &w);
        let rhs = semigroup_t(0.3, &w).unwrap();
        assert_eq!(lhs.coeffs(), rhs.coeffs());
        assert!(RenormParams::new(1.5, 0.1, &s).is_err());
    }

    #[test]
    fn h1_at_r_zero_is_h() {
        let g = grid(6);
        let s = StokesSpectrum::from_grid(&g);
        let p = RenormParams::with_lambda1(0.0, &s).unwrap();
        let u = random_field(&g, 1.0, NormKind::H, 1, 1.0).unwrap();
        let v = random_field(&g, 1.0, NormKind::H, 2, 1.0).unwrap();
        let a = inner_product_h1(&p, &u, &v).unwrap();
        let b = crate::field::inner_product_h(&u, &v).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn h1_single_mode_multiplier() {
        let g = grid(6);
        let s = StokesSpectrum::from_grid(&g);
        let p = RenormParams::with_lambda1(0.2, &s).unwrap();
        let u = VelocityField::single_mode(&g, [1, 1, 1], [c(1.0), c(-1.0), c(0.0)]).unwrap();
        let expected = ((p.omega - 3.0) * p.r).exp() * norm_h(&u);
        assert!((norm_h1(&p, &u) - expected).abs() < 1e-14 * expected);
    }

    #[test]
    fn smoothing_constant_single_eigenvalue() {
        let s = StokesSpectrum::from_levels(vec![1.0]).unwrap();
        let p = RenormParams::new(1.0, 0.4, &s).unwrap();
        let c1 = smoothing_constant(1.0, &p, &s).unwrap();
        assert!((c1.value - 0.4).abs() < 1e-15);
        assert!((c1.analytic - 0.4).abs() < 1e-15);
        assert!(smoothing_constant(0.0, &p, &s).is_err());
        assert!(smoothing_constant(-1.0, &p, &s).is_err());
    }

    #[test]
    fn smoothing_bound_attained_at_top_mode_for_any_r() {
        let g = grid(6);
        let s = StokesSpectrum::from_grid(&g);
        let top = g
            .modes()
            .iter()
            .find(|m| m.k == [3, 3, 3])
            .map(|m| m.k)
            .unwrap();
        let u = VelocityField::single_mode(&g, top, [c(1.0), c(-1.0), c(0.0)]).unwrap();
        for r in [0.05, 0.1, 0.2] {
            let p = RenormParams::with_lambda1(r, &s).unwrap();
            for z in [0.25, 0.5, 1.0] {
                let sc = smoothing_constant(z, &p, &s).unwrap();
                let lhs = norm_h1(&p, &apply_a_power(z, &u));
                let rhs = sc.operator_bound(&p) * norm_h1(&p, &u);
                assert!((lhs - rhs).abs() <= 1e-12 * rhs, "z={z} r={r}");
                assert!(sc.analytic >= sc.value * (1.0 - 1e-14));
            }
        }
    }

    #[test]
    fn r_hat_matches_closed_form() {
        let g = grid(8);
        let s = StokesSpectrum::from_grid(&g);
        let r = solve_r_hat(s.lambda1(), &s).unwrap();
        let closed = (s.lambda_max() / s.lambda1()).ln() / (s.lambda_max() - s.lambda1());
        assert!((r - closed).abs() < 1e-12 * closed);
        let p = RenormParams::with_lambda1(r, &s).unwrap();
        assert!((p.m - s.lambda_max()).abs() < 1e-9 * s.lambda_max());
    }
}
