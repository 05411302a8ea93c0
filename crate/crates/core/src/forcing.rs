//! Body forces `f(t) = φ(t) · profile` with a divergence-free spatial profile.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{random_field, NormKind, SpectralGrid, VelocityField};
use crate::stokes::RenormParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForcingKind {
    Zero,
    Steady,
    /// `φ(t) = min(1, |t - t0|^θ)`.
    HolderFamily,
}

impl ForcingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ForcingKind::Zero => "zero",
            ForcingKind::Steady => "steady",
            ForcingKind::HolderFamily => "holder_family",
        }
    }
}

impl fmt::Display for ForcingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ForcingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ForcingKind::Zero),
            "steady" => Ok(ForcingKind::Steady),
            "holder_family" | "holder" => Ok(ForcingKind::HolderFamily),
            _ => Err(Error::parse("forcing.kind", format!("unknown kind `{s}`"))),
        }
    }
}

/// Declared Hoelder data: `‖f(t) - f(τ)‖_{H,1} ≤ d |t - τ|^θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Holder {
    pub d: f64,
    pub theta: f64,
}

#[derive(Debug, Clone)]
pub struct ForcingModel {
    kind: ForcingKind,
    profile: VelocityField,
    amplitude: f64,
    t0: f64,
    holder: Option<Holder>,
}

impl ForcingModel {
    pub fn zero(grid: &Arc<SpectralGrid>) -> Self {
        ForcingModel {
            kind: ForcingKind::Zero,
            profile: VelocityField::zero(grid),
            amplitude: 0.0,
            t0: 0.0,
            holder: Some(Holder { d: 0.0, theta: 0.5 }),
        }
    }

    /// Time-independent force; `profile` is rescaled so `‖profile‖_{H,1} = amplitude`.
    pub fn steady(profile: &VelocityField, amplitude: f64, renorm: &RenormParams) -> Result<Self> {
        let profile = scaled_profile(profile, amplitude, renorm)?;
        Ok(ForcingModel {
            kind: ForcingKind::Steady,
            profile,
            amplitude,
            t0: 0.0,
            holder: Some(Holder { d: 0.0, theta: 0.5 }),
        })
    }

    /// `min(1, |t - t0|^θ) · profile`, Hoelder with exponent `θ` and constant
    /// `d = ‖profile‖_{H,1} = amplitude` by construction.
    pub fn holder_family(
        profile: &VelocityField,
        amplitude: f64,
        theta: f64,
        t0: f64,
        renorm: &RenormParams,
    ) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::param(
                "forcing.theta",
                format!("must lie in (0, 1), got {theta}"),
            ));
        }
        if !t0.is_finite() {
            return Err(Error::param("forcing.t0", "must be finite"));
        }
        let profile = scaled_profile(profile, amplitude, renorm)?;
        Ok(ForcingModel {
            kind: ForcingKind::HolderFamily,
            profile,
            amplitude,
            t0,
            holder: Some(Holder {
                d: amplitude,
                theta,
            }),
        })
    }

    /// Builds a model from a seeded random profile with spectral slope `decay`.
    pub fn from_seed(
        grid: &Arc<SpectralGrid>,
        kind: ForcingKind,
        amplitude: f64,
        theta: f64,
        t0: f64,
        profile_seed: u64,
        decay: f64,
        renorm: &RenormParams,
    ) -> Result<Self> {
        if kind == ForcingKind::Zero || amplitude == 0.0 {
            return Ok(ForcingModel::zero(grid));
        }
        let profile = random_field(grid, 1.0, NormKind::H1(*renorm), profile_seed, decay)?;
        match kind {
            ForcingKind::Steady => ForcingModel::steady(&profile, amplitude, renorm),
            _ => ForcingModel::holder_family(&profile, amplitude, theta, t0, renorm),
        }
    }

    /// Drops the Hoelder declaration (models forcing with unknown regularity).
    pub fn without_holder(mut self) -> Self {
        self.holder = None;
        self
    }

    pub fn kind(&self) -> ForcingKind {
        self.kind
    }

    pub fn profile(&self) -> &VelocityField {
        &self.profile
    }

    pub fn holder(&self) -> Option<Holder> {
        self.holder
    }

    /// `sup_t ‖P f(t)‖_{H,1}`.
    pub fn f_sup(&self) -> f64 {
        self.amplitude
    }

    pub fn modulation(&self, t: f64) -> f64 {
        match self.kind {
            ForcingKind::Zero => 0.0,
            ForcingKind::Steady => 1.0,
            ForcingKind::HolderFamily => (t - self.t0)
                .abs()
                .powf(self.holder.map_or(0.5, |h| h.theta))
                .min(1.0),
        }
    }

    /// `P f(t)`.
    pub fn at(&self, t: f64) -> VelocityField {
        self.profile.scale(self.modulation(t))
    }

    pub fn is_zero(&self) -> bool {
        self.kind == ForcingKind::Zero || self.amplitude == 0.0
    }
}

fn scaled_profile(
    profile: &VelocityField,
    amplitude: f64,
    renorm: &RenormParams,
) -> Result<VelocityField> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::param(
            "forcing.amplitude",
            format!("must be nonnegative, got {amplitude}"),
        ));
    }
    if amplitude == 0.0 {
        return Ok(VelocityField::zero(profile.grid()));
    }
    crate::field::normalize_to(profile, amplitude, NormKind::H1(*renorm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stokes::{norm_h1, StokesSpectrum};

    fn setup() -> (Arc<SpectralGrid>, RenormParams) {
        let g = SpectralGrid::unit(4).unwrap();
        let sp = StokesSpectrum::from_grid(&g);
        (g, RenormParams::with_lambda1(0.1, &sp).unwrap())
    }

    #[test]
    fn amplitude_is_the_renormed_sup() {
        let (g, p) = setup();
        let f =
            ForcingModel::from_seed(&g, ForcingKind::Steady, 0.3, 0.5, 0.0, 4, 2.0, &p).unwrap();
        assert!((norm_h1(&p, &f.at(7.0)) - 0.3).abs() < 1e-14);
        assert_eq!(f.f_sup(), 0.3);
        assert!(f.at(1.0).divergence_residual() < 1e-12);
    }

    #[test]
    fn holder_family_modulation() {
        let (g, p) = setup();
        let f = ForcingModel::from_seed(&g, ForcingKind::HolderFamily, 1.0, 0.5, 0.5, 4, 2.0, &p)
            .unwrap();
        assert_eq!(f.modulation(0.5), 0.0);
        assert_eq!(f.modulation(0.75), 0.5);
        assert_eq!(f.modulation(3.0), 1.0);
        assert_eq!(f.holder().unwrap(), Holder { d: 1.0, theta: 0.5 });
    }

    #[test]
    fn zero_kind_has_no_force() {
        let (g, p) = setup();
        let f = ForcingModel::from_seed(&g, ForcingKind::Zero, 1.0, 0.5, 0.0, 1, 2.0, &p).unwrap();
        assert!(f.is_zero() && f.at(3.0).is_zero() && f.f_sup() == 0.0);
    }

    #[test]
    fn theta_outside_unit_interval_rejected() {
        let (g, p) = setup();
        let u = random_field(&g, 1.0, NormKind::H, 1, 1.0).unwrap();
        assert!(ForcingModel::holder_family(&u, 1.0, 1.0, 0.0, &p).is_err());
        assert!(ForcingModel::holder_family(&u, 1.0, 0.0, 0.0, &p).is_err());
    }

    #[test]
    fn kind_parses() {
        for k in [
            ForcingKind::Zero,
            ForcingKind::Steady,
            ForcingKind::HolderFamily,
        ] {
            assert_eq!(k.as_str().parse::<ForcingKind>().unwrap(), k);
        }
        assert!("wind".parse::<ForcingKind>().is_err());
    }
}
