//! Divergence-free velocity fields on the periodic torus.
//!
//! A field is a truncated Fourier series
//!
//! ```text
//! u(x) = sum_k û(k) exp(i kphys·x),   kphys = (2π/L) k,   |k_i| <= N/2,   k != 0
//! ```
//!
//! Only one representative of each conjugate pair `±k` is stored (the
//! half-lattice); the partner coefficient is `conj(û(k))`, so every stored field
//! is real-valued in physical space.
//!
//! Inner products carry the physical volume `|T³_L| = L³`:
//!
//! ```text
//! <u, v>_H = L³ sum_{k in full lattice} Re( û(k) · conj(v̂(k)) )
//!          = 2 L³ sum_{k in half lattice} Re( û(k) · conj(v̂(k)) )
//! ```

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::stokes::RenormParams;

/// One complex 3-vector per mode.
pub type ModeVector = [Complex64; 3];

const ZERO3: ModeVector = [Complex64::new(0.0, 0.0); 3];

/// Lattice index together with its physical wavevector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveVector {
    pub k: [i32; 3],
    pub kphys: [f64; 3],
}

impl WaveVector {
    pub fn norm_sq_lattice(&self) -> i64 {
        self.k.iter().map(|&c| (c as i64) * (c as i64)).sum()
    }

    /// Stokes eigenvalue |kphys|².
    pub fn lambda(&self) -> f64 {
        self.kphys.iter().map(|c| c * c).sum()
    }
}

/// Returns true when `k` is the stored representative of its pair `±k`.
pub fn in_half_lattice(k: [i32; 3]) -> bool {
    k[2] > 0 || (k[2] == 0 && (k[1] > 0 || (k[1] == 0 && k[0] > 0)))
}

/// The truncated wavevector lattice shared by all fields of one resolution.
#[derive(Debug)]
pub struct SpectralGrid {
    n: usize,
    box_l: f64,
    modes: Vec<WaveVector>,
    lambdas: Vec<f64>,
    index: HashMap<[i32; 3], usize>,
}

impl SpectralGrid {
    /// Builds the half-lattice for truncation size `n` (even, >= 2) and period `box_l`.
    pub fn new(n: usize, box_l: f64) -> Result<Arc<Self>> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::param(
                "grid_n",
                format!("must be even and >= 2, got {n}"),
            ));
        }
        if !(box_l > 0.0 && box_l.is_finite()) {
            return Err(Error::param(
                "box_l",
                format!("must be positive, got {box_l}"),
            ));
        }
        let kmax = (n / 2) as i32;
        let scale = 2.0 * PI / box_l;
        let mut modes = Vec::new();
        for k0 in -kmax..=kmax {
            for k1 in -kmax..=kmax {
                for k2 in -kmax..=kmax {
                    let k = [k0, k1, k2];
                    if in_half_lattice(k) {
                        let kphys = [scale * k0 as f64, scale * k1 as f64, scale * k2 as f64];
                        modes.push(WaveVector { k, kphys });
                    }
                }
            }
        }
        let lambdas = modes.iter().map(WaveVector::lambda).collect();
        let index = modes.iter().enumerate().map(|(i, m)| (m.k, i)).collect();
        Ok(Arc::new(SpectralGrid {
            n,
            box_l,
            modes,
            lambdas,
            index,
        }))
    }

    /// Default torus with `L = 2π`, so that `λ₁ = 1`.
    pub fn unit(n: usize) -> Result<Arc<Self>> {
        Self::new(n, 2.0 * PI)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Largest stored lattice component, `N/2`.
    pub fn kmax(&self) -> usize {
        self.n / 2
    }

    pub fn box_l(&self) -> f64 {
        self.box_l
    }

    pub fn volume(&self) -> f64 {
        self.box_l.powi(3)
    }

    /// `2π/L`.
    pub fn wavenumber_unit(&self) -> f64 {
        2.0 * PI / self.box_l
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[WaveVector] {
        &self.modes
    }

    /// Stokes eigenvalue of every stored mode, in storage order.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Storage index of `k` if it is a stored representative.
    pub fn index_of(&self, k: [i32; 3]) -> Option<usize> {
        self.index.get(&k).copied()
    }

    pub(crate) fn same_as(&self, other: &SpectralGrid) -> bool {
        self.n == other.n && self.box_l.to_bits() == other.box_l.to_bits()
    }

    pub(crate) fn check_same(&self, other: &SpectralGrid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                n_a: self.n,
                l_a: self.box_l,
                n_b: other.n,
                l_b: other.box_l,
            })
        }
    }
}

/// Fourier vector field without the divergence-free constraint (e.g. a raw
/// forcing or a nonlinear product before projection).
#[derive(Debug, Clone)]
pub struct RawField {
    pub grid: Arc<SpectralGrid>,
    pub coeffs: Vec<ModeVector>,
}

impl RawField {
    pub fn zero(grid: &Arc<SpectralGrid>) -> Self {
        RawField {
            grid: grid.clone(),
            coeffs: vec![ZERO3; grid.len()],
        }
    }

    /// Evaluates `f` on every stored mode. A mean (`k = 0`) is not representable
    /// and is therefore discarded.
    pub fn from_fn(grid: &Arc<SpectralGrid>, mut f: impl FnMut(&WaveVector) -> ModeVector) -> Self {
        RawField {
            grid: grid.clone(),
            coeffs: grid.modes().iter().map(&mut f).collect(),
        }
    }

    /// Sets the coefficient of lattice vector `k`; for `k` in the lower half the
    /// conjugate is stored at `-k`.
    pub fn set_mode(&mut self, k: [i32; 3], value: ModeVector) -> Result<()> {
        let (idx, conj) = locate(&self.grid, k)?;
        self.coeffs[idx] = if conj { conj3(value) } else { value };
        Ok(())
    }
}

fn locate(grid: &SpectralGrid, k: [i32; 3]) -> Result<(usize, bool)> {
    if let Some(i) = grid.index_of(k) {
        return Ok((i, false));
    }
    if let Some(i) = grid.index_of([-k[0], -k[1], -k[2]]) {
        return Ok((i, true));
    }
    Err(Error::Structure(format!(
        "wavevector {k:?} is not on the truncated lattice of size {}",
        grid.n()
    )))
}

fn conj3(v: ModeVector) -> ModeVector {
    [v[0].conj(), v[1].conj(), v[2].conj()]
}

/// Applies `I - k kᵀ/|k|²` to one mode vector. Integer `k` keeps the projector
/// independent of `L`.
#[inline]
pub(crate) fn project_mode(k: [i32; 3], v: ModeVector) -> ModeVector {
    let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
    let k2 = kf[0] * kf[0] + kf[1] * kf[1] + kf[2] * kf[2];
    let dot = v[0] * kf[0] + v[1] * kf[1] + v[2] * kf[2];
    let s = dot / k2;
    [v[0] - s * kf[0], v[1] - s * kf[1], v[2] - s * kf[2]]
}

/// Leray projection onto divergence-free fields, mode by mode.
pub fn leray_project(f: &RawField) -> Result<VelocityField> {
    if f.coeffs.len() != f.grid.len() {
        return Err(Error::Structure(format!(
            "{} coefficients for a lattice with {} stored modes",
            f.coeffs.len(),
            f.grid.len()
        )));
    }
    let coeffs = f
        .grid
        .modes()
        .iter()
        .zip(&f.coeffs)
        .map(|(m, &v)| project_mode(m.k, v))
        .collect();
    Ok(VelocityField {
        grid: f.grid.clone(),
        coeffs,
    })
}

/// Which norm `random_field` normalizes to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    H,
    H1(RenormParams),
    V,
}

/// A divergence-free, zero-mean, real velocity field.
#[derive(Debug, Clone)]
pub struct VelocityField {
    grid: Arc<SpectralGrid>,
    coeffs: Vec<ModeVector>,
}

impl VelocityField {
    pub fn zero(grid: &Arc<SpectralGrid>) -> Self {
        VelocityField {
            grid: grid.clone(),
            coeffs: vec![ZERO3; grid.len()],
        }
    }

    /// Wraps coefficients that must already be divergence-free (relative
    /// residual below `1e-12`).
    pub fn from_coeffs(grid: &Arc<SpectralGrid>, coeffs: Vec<ModeVector>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(Error::Structure(format!(
                "{} coefficients for a lattice with {} stored modes",
                coeffs.len(),
                grid.len()
            )));
        }
        let u = VelocityField {
            grid: grid.clone(),
            coeffs,
        };
        let res = u.divergence_residual();
        if res > 1e-12 {
            return Err(Error::Structure(format!("divergence residual {res:e}")));
        }
        Ok(u)
    }

    /// Field supported on one conjugate pair `±k`; `amplitude` must be orthogonal to `k`.
    pub fn single_mode(
        grid: &Arc<SpectralGrid>,
        k: [i32; 3],
        amplitude: ModeVector,
    ) -> Result<Self> {
        let mut raw = RawField::zero(grid);
        raw.set_mode(k, amplitude)?;
        Self::from_coeffs(grid, raw.coeffs).map_err(|_| {
            Error::Structure(format!(
                "amplitude {amplitude:?} is not orthogonal to k = {k:?}"
            ))
        })
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<SpectralGrid>, coeffs: Vec<ModeVector>) -> Self {
        VelocityField { grid, coeffs }
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[ModeVector] {
        &self.coeffs
    }

    /// Coefficient of any lattice vector (conjugated for the implicit half).
    pub fn mode(&self, k: [i32; 3]) -> Option<ModeVector> {
        if k == [0, 0, 0] {
            return Some(ZERO3);
        }
        let (idx, conj) = locate(&self.grid, k).ok()?;
        let v = self.coeffs[idx];
        Some(if conj { conj3(v) } else { v })
    }

    pub fn to_raw(&self) -> RawField {
        RawField {
            grid: self.grid.clone(),
            coeffs: self.coeffs.clone(),
        }
    }

    /// `max_k |kphys·û(k)| / max_k |û(k)|`, zero for the zero field.
    pub fn divergence_residual(&self) -> f64 {
        let mut num: f64 = 0.0;
        let mut den: f64 = 0.0;
        for (m, v) in self.grid.modes().iter().zip(&self.coeffs) {
            let d = v[0] * m.kphys[0] + v[1] * m.kphys[1] + v[2] * m.kphys[2];
            num = num.max(d.norm());
            let mag = (v[0].norm_sqr() + v[1].norm_sqr() + v[2].norm_sqr()).sqrt();
            den = den.max(mag);
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Multiplies every mode by `mult(λ_k)`; all diagonal operators go through here.
    pub fn map_spectrum(&self, mult: impl Fn(f64) -> f64) -> VelocityField {
        let coeffs = self
            .coeffs
            .iter()
            .zip(self.grid.lambdas())
            .map(|(v, &lam)| {
                let s = mult(lam);
                [v[0] * s, v[1] * s, v[2] * s]
            })
            .collect();
        VelocityField {
            grid: self.grid.clone(),
            coeffs,
        }
    }

    pub fn scale(&self, s: f64) -> VelocityField {
        self.map_spectrum(|_| s)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &VelocityField) -> Result<VelocityField> {
        self.grid.check_same(&other.grid)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| [a[0] + b[0] * s, a[1] + b[1] * s, a[2] + b[2] * s])
            .collect();
        Ok(VelocityField {
            grid: self.grid.clone(),
            coeffs,
        })
    }

    pub fn add(&self, other: &VelocityField) -> Result<VelocityField> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &VelocityField) -> Result<VelocityField> {
        self.axpy(-1.0, other)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|v| *v == ZERO3)
    }
}

/// Plain `L²` inner product of two fields on the same lattice.
pub fn inner_product_h(u: &VelocityField, v: &VelocityField) -> Result<f64> {
    u.grid.check_same(&v.grid)?;
    Ok(weighted_inner(u, v, |_| 1.0))
}

/// `2 L³ Σ_half w(λ_k) Re(û·conj v̂)`; shared by every diagonal-weighted inner product.
pub(crate) fn weighted_inner(
    u: &VelocityField,
    v: &VelocityField,
    weight: impl Fn(f64) -> f64,
) -> f64 {
    let mut acc = 0.0;
    for ((a, b), &lam) in u.coeffs.iter().zip(&v.coeffs).zip(u.grid.lambdas()) {
        let dot = a[0].re * b[0].re
            + a[0].im * b[0].im
            + a[1].re * b[1].re
            + a[1].im * b[1].im
            + a[2].re * b[2].re
            + a[2].im * b[2].im;
        acc += weight(lam) * dot;
    }
    2.0 * u.grid.volume() * acc
}

pub fn norm_h(u: &VelocityField) -> f64 {
    weighted_inner(u, u, |_| 1.0).max(0.0).sqrt()
}

/// `‖A^{1/2} u‖_H`.
pub fn norm_v(u: &VelocityField) -> f64 {
    weighted_inner(u, u, |lam| lam).max(0.0).sqrt()
}

/// Draws a random divergence-free field with `|û(k)| ∝ |k|^{-decay}`, rescaled
/// so that the chosen norm equals `radius`. Deterministic per `seed`.
pub fn random_field(
    grid: &Arc<SpectralGrid>,
    radius: f64,
    norm_kind: NormKind,
    seed: u64,
    spectrum_decay: f64,
) -> Result<VelocityField> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::param(
            "radius",
            format!("must be positive, got {radius}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = RawField::from_fn(grid, |m| {
        let amp = (m.norm_sq_lattice() as f64).powf(-0.5 * spectrum_decay);
        let mut draw = || {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re, im) * amp
        };
        [draw(), draw(), draw()]
    });
    let u = leray_project(&raw)?;
    normalize_to(&u, radius, norm_kind)
}

/// Rescales `u` so that its `norm_kind` norm is `radius`.
pub fn normalize_to(u: &VelocityField, radius: f64, norm_kind: NormKind) -> Result<VelocityField> {
    let current = match norm_kind {
        NormKind::H => norm_h(u),
        NormKind::V => norm_v(u),
        NormKind::H1(p) => crate::stokes::norm_h1(&p, u),
    };
    if !(current > 0.0) {
        return Err(Error::Structure("cannot normalize the zero field".into()));
    }
    Ok(u.scale(radius / current))
}

/// Two fields on a common lattice.
#[derive(Debug, Clone)]
pub struct FieldPair {
    pub u: VelocityField,
    pub v: VelocityField,
}

impl FieldPair {
    pub fn new(u: VelocityField, v: VelocityField) -> Result<Self> {
        u.grid.check_same(&v.grid)?;
        Ok(FieldPair { u, v })
    }

    pub fn difference(&self) -> VelocityField {
        self.u.sub(&self.v).expect("pair shares a grid")
    }
}
