//! The preconditioned drift `J(u,t) = -u - ν⁻¹A⁻¹B(u,u) + ν⁻¹A⁻¹Pf(t)`, the
//! closed-form certificate `(δ, γ, u±, α, a, ν_min)` and the dissipativity audits.
//!
//! All constants entering the certificate are sampled lower bounds on true
//! suprema, so every report is sample-certified, not proven.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::field::{random_field, NormKind, SpectralGrid, VelocityField};
use crate::forcing::ForcingModel;
use crate::nonlinear::{
    advect_self, audit_renormed_bilinear, audit_renormed_trilinear, audit_trilinear_bound,
    estimate_c, BoundAudit, ConstantEstimate, EstimateMethod, TrilinearExponents, TripleDescriptor,
};
use crate::seeds;
use crate::stokes::{
    apply_a, apply_a_inverse, inner_product_h1, norm_h1, smoothing_constant, solve_r_hat,
    RenormParams, SmoothingConstant, StokesSpectrum,
};

pub const PROVENANCE: &str = "sample-certified, not proven";

/// Whether `J` includes the advection term. `Disabled` is a diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonlinearMode {
    Full,
    Disabled,
}

pub fn apply_j(u: &VelocityField, t: f64, nu: f64, f: &ForcingModel) -> Result<VelocityField> {
    apply_j_with(u, t, nu, f, NonlinearMode::Full)
}

pub fn apply_j_with(
    u: &VelocityField,
    t: f64,
    nu: f64,
    f: &ForcingModel,
    mode: NonlinearMode,
) -> Result<VelocityField> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::param(
            "nu",
            format!("viscosity must be positive, got {nu}"),
        ));
    }
    u.grid().check_same(f.profile().grid())?;
    // -u + ν⁻¹ A⁻¹ (Pf - B(u,u)) in one pass
    let mut rhs = if f.is_zero() {
        VelocityField::zero(u.grid())
    } else {
        f.at(t)
    };
    if mode == NonlinearMode::Full {
        let (b, _) = advect_self(u)?;
        rhs = rhs.sub(&b)?;
    }
    u.scale(-1.0).axpy(1.0 / nu, &apply_a_inverse(&rhs))
}

/// `𝒜(t)u = ν A J(u,t)`.
pub fn apply_aj(
    u: &VelocityField,
    t: f64,
    nu: f64,
    f: &ForcingModel,
    mode: NonlinearMode,
) -> Result<VelocityField> {
    Ok(apply_a(&apply_j_with(u, t, nu, f, mode)?).scale(nu))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RMode {
    AutoRHat,
    Manual(f64),
}

/// `c` plus the smoothing constants `c₁ (z = 1/4)`, `c₂ (z = 1)`, `c₃ (z = 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateConstants {
    pub c: ConstantEstimate,
    pub c1: SmoothingConstant,
    pub c2: SmoothingConstant,
    pub c3: SmoothingConstant,
}

impl CertificateConstants {
    pub fn new(
        c: ConstantEstimate,
        renorm: &RenormParams,
        spectrum: &StokesSpectrum,
    ) -> Result<Self> {
        Ok(CertificateConstants {
            c,
            c1: smoothing_constant(0.25, renorm, spectrum)?,
            c2: smoothing_constant(1.0, renorm, spectrum)?,
            c3: smoothing_constant(1.0, renorm, spectrum)?,
        })
    }
}

/// Scalar certificate quantities, evaluated in double-double arithmetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateScalars {
    pub delta: f64,
    pub gamma: f64,
    pub u_minus: Option<f64>,
    pub u_plus: Option<f64>,
    pub alpha: Option<f64>,
    pub a: Option<f64>,
    pub nu_min: f64,
    pub feasible: bool,
}

/// Closed forms: `δ = ν r^{1/4}/(M³cc₁)`, `γ = 4M³f cc₁/(ν²λ₁r^{1/4})`,
/// `u± = ½δ(1 ± √(1-γ))`, `α = ½(1 - √(1-γ))`, `a = νλ₁(1 - √(1-γ))`,
/// `ν_min = √(4M³f cc₁/(r^{1/4}λ₁))`.
///
/// `γ = 1` yields the double root `u± = δ/2` but is not feasible; for `γ > 1`
/// the roots are absent.
pub fn certificate_scalars(
    nu: f64,
    f_sup: f64,
    c: f64,
    c1: f64,
    m: f64,
    r: f64,
    lambda1: f64,
) -> Result<CertificateScalars> {
    for (name, v) in [
        ("nu", nu),
        ("c", c),
        ("c1", c1),
        ("m", m),
        ("r", r),
        ("lambda1", lambda1),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::param(
                name,
                format!("must be positive and finite, got {v}"),
            ));
        }
    }
    if !(f_sup >= 0.0 && f_sup.is_finite()) {
        return Err(Error::param(
            "f_sup",
            format!("must be nonnegative, got {f_sup}"),
        ));
    }
    let t = TwoFloat::from_f64;
    let (nu2, f2, c2, c12, m2, r2, l2) = (t(nu), t(f_sup), t(c), t(c1), t(m), t(r), t(lambda1));
    let r_quarter = r2.sqrt().sqrt();
    let k = m2.powi(3) * c2 * c12;
    let delta = nu2 * r_quarter / k;
    let gamma = t(4.0) * k * f2 / (nu2 * nu2 * l2 * r_quarter);
    let nu_min = (t(4.0) * k * f2 / (r_quarter * l2)).sqrt();
    let one = t(1.0);
    let half = t(0.5);
    let (u_minus, u_plus, alpha, a) = if gamma <= one {
        let s = (one - gamma).sqrt();
        let denom = one + s;
        (
            // δ(1-s)/2 rewritten without cancellation
            Some((half * delta * gamma / denom).hi()),
            Some((half * delta * denom).hi()),
            Some((half * gamma / denom).hi()),
            Some((nu2 * l2 * gamma / denom).hi()),
        )
    } else {
        (None, None, None, None)
    };
    Ok(CertificateScalars {
        delta: delta.hi(),
        gamma: gamma.hi(),
        u_minus,
        u_plus,
        alpha,
        a,
        nu_min: nu_min.hi(),
        feasible: gamma < one,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub grid_n: usize,
    pub box_l: f64,
    pub c: ConstantEstimate,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub m: f64,
    pub r: f64,
    pub r_hat: f64,
    pub omega: f64,
    pub delta: f64,
    pub gamma: f64,
    pub u_minus: Option<f64>,
    pub u_plus: Option<f64>,
    pub alpha: Option<f64>,
    pub a: Option<f64>,
    pub nu: f64,
    pub nu_min: f64,
    pub f_sup: f64,
    pub lambda1: f64,
    pub feasible: bool,
}

/// Column order of the certificate CSV row.
pub const CERTIFICATE_COLUMNS: &[&str] = &[
    "grid_n",
    "box_l",
    "nu",
    "f_sup",
    "feasible",
    "gamma",
    "delta",
    "u_minus",
    "u_plus",
    "alpha",
    "a",
    "nu_min",
    "c",
    "c1",
    "c2",
    "c3",
    "M",
    "r",
    "r_hat",
    "omega",
    "lambda1",
    "c_method",
    "c_samples",
    "c_triple",
    "c_alpha1",
    "c_alpha2",
    "c_alpha3",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:e}"))
}

impl CertificateReport {
    pub fn renorm(&self) -> RenormParams {
        RenormParams {
            omega: self.omega,
            r: self.r,
            m: self.m,
        }
    }

    /// Radius `u₊/2` of the invariant ball.
    pub fn ball_radius(&self) -> Option<f64> {
        self.u_plus.map(|u| 0.5 * u)
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let e = &self.c.exponents;
        vec![
            ("grid_n", self.grid_n.to_string()),
            ("box_l", format!("{:e}", self.box_l)),
            ("nu", format!("{:e}", self.nu)),
            ("f_sup", format!("{:e}", self.f_sup)),
            ("feasible", self.feasible.to_string()),
            ("gamma", format!("{:e}", self.gamma)),
            ("delta", format!("{:e}", self.delta)),
            ("u_minus", fmt_opt(self.u_minus)),
            ("u_plus", fmt_opt(self.u_plus)),
            ("alpha", fmt_opt(self.alpha)),
            ("a", fmt_opt(self.a)),
            ("nu_min", format!("{:e}", self.nu_min)),
            ("c", format!("{:e}", self.c.value)),
            ("c1", format!("{:e}", self.c1)),
            ("c2", format!("{:e}", self.c2)),
            ("c3", format!("{:e}", self.c3)),
            ("M", format!("{:e}", self.m)),
            ("r", format!("{:e}", self.r)),
            ("r_hat", format!("{:e}", self.r_hat)),
            ("omega", format!("{:e}", self.omega)),
            ("lambda1", format!("{:e}", self.lambda1)),
            ("c_method", self.c.method.to_string()),
            ("c_samples", self.c.samples.to_string()),
            ("c_triple", self.c.attaining_triple.to_string()),
            ("c_alpha1", format!("{:e}", e.alpha1)),
            ("c_alpha2", format!("{:e}", e.alpha2)),
            ("c_alpha3", format!("{:e}", e.alpha3)),
        ]
    }

    /// Flat `key = value` block, one line per field in [`CERTIFICATE_COLUMNS`] order.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("# provenance = {PROVENANCE}\n");
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn csv_header() -> String {
        CERTIFICATE_COLUMNS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Parses the block written by [`to_key_values`](Self::to_key_values).
    pub fn from_key_values(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        Self::from_map(&map)
    }

    /// Parses one data row of the certificate CSV.
    pub fn from_csv_row(row: &str) -> Result<Self> {
        let vals: Vec<&str> = row.trim().split(',').collect();
        if vals.len() != CERTIFICATE_COLUMNS.len() {
            return Err(Error::parse(
                "certificate row",
                format!(
                    "expected {} columns, got {}",
                    CERTIFICATE_COLUMNS.len(),
                    vals.len()
                ),
            ));
        }
        let map = CERTIFICATE_COLUMNS
            .iter()
            .zip(vals)
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self::from_map(&map)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::parse("certificate", format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::parse("certificate", format!("`{k}`: {e}")))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            if get(k)? == "none" {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let method = match get("c_method")? {
            "random-scan" => EstimateMethod::RandomScan,
            "hill-climb" => EstimateMethod::HillClimb,
            other => {
                return Err(Error::parse(
                    "certificate",
                    format!("unknown c_method `{other}`"),
                ))
            }
        };
        Ok(CertificateReport {
            grid_n: get("grid_n")?
                .parse()
                .map_err(|e| Error::parse("certificate", format!("grid_n: {e}")))?,
            box_l: num("box_l")?,
            c: ConstantEstimate {
                exponents: TrilinearExponents {
                    alpha1: num("c_alpha1")?,
                    alpha2: num("c_alpha2")?,
                    alpha3: num("c_alpha3")?,
                },
                value: num("c")?,
                attaining_triple: get("c_triple")?.parse::<TripleDescriptor>()?,
                samples: get("c_samples")?
                    .parse()
                    .map_err(|e| Error::parse("certificate", format!("c_samples: {e}")))?,
                method,
            },
            c1: num("c1")?,
            c2: num("c2")?,
            c3: num("c3")?,
            m: num("M")?,
            r: num("r")?,
            r_hat: num("r_hat")?,
            omega: num("omega")?,
            delta: num("delta")?,
            gamma: num("gamma")?,
            u_minus: opt("u_minus")?,
            u_plus: opt("u_plus")?,
            alpha: opt("alpha")?,
            a: opt("a")?,
            nu: num("nu")?,
            nu_min: num("nu_min")?,
            f_sup: num("f_sup")?,
            lambda1: num("lambda1")?,
            feasible: match get("feasible")? {
                "true" => true,
                "false" => false,
                other => return Err(Error::parse("certificate", format!("feasible: `{other}`"))),
            },
        })
    }
}

/// `key = value` lines; `#` starts a comment line.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse("key-value text", format!("line {}: missing `=`", no + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Fills every certificate field from its closed form.
pub fn build_certificate(
    nu: f64,
    f: &ForcingModel,
    constants: &CertificateConstants,
    renorm: &RenormParams,
    spectrum: &StokesSpectrum,
    r_mode: RMode,
) -> Result<CertificateReport> {
    let r_hat = solve_r_hat(renorm.omega, spectrum)?;
    match r_mode {
        RMode::AutoRHat if (renorm.r - r_hat).abs() > 1e-12 * r_hat => {
            return Err(Error::param(
                "r",
                format!("auto r_hat mode expects r = {r_hat:e}, got {:e}", renorm.r),
            ));
        }
        RMode::Manual(r) if r != renorm.r => {
            return Err(Error::param(
                "r",
                format!("manual r = {r:e} but renorm uses {:e}", renorm.r),
            ));
        }
        _ => {}
    }
    let grid = f.profile().grid();
    let lambda1 = spectrum.lambda1();
    let s = certificate_scalars(
        nu,
        f.f_sup(),
        constants.c.value,
        constants.c1.value,
        renorm.m,
        renorm.r,
        lambda1,
    )?;
    Ok(CertificateReport {
        grid_n: grid.n(),
        box_l: grid.box_l(),
        c: constants.c.clone(),
        c1: constants.c1.value,
        c2: constants.c2.value,
        c3: constants.c3.value,
        m: renorm.m,
        r: renorm.r,
        r_hat,
        omega: renorm.omega,
        delta: s.delta,
        gamma: s.gamma,
        u_minus: s.u_minus,
        u_plus: s.u_plus,
        alpha: s.alpha,
        a: s.a,
        nu,
        nu_min: s.nu_min,
        f_sup: f.f_sup(),
        lambda1,
        feasible: s.feasible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BallMembership {
    /// Finite `‖Au‖`; always true on a truncation.
    pub in_d_of_a: bool,
    /// `‖u‖_{H,1} ≤ u₊/2`.
    pub in_b: bool,
    /// `u₋ ≤ ‖u‖_{H,1} ≤ u₊/2`.
    pub in_annulus_b_minus: bool,
}

/// Relative slack on ball boundaries, so points placed exactly on a sphere count as inside.
pub const MEMBERSHIP_TOL: f64 = 1e-12;

pub fn membership(u: &VelocityField, cert: &CertificateReport) -> BallMembership {
    let x = norm_h1(&cert.renorm(), u);
    membership_of_norm(x, cert)
}

pub fn membership_of_norm(x: f64, cert: &CertificateReport) -> BallMembership {
    let in_b = cert
        .u_plus
        .is_some_and(|up| x <= 0.5 * up * (1.0 + MEMBERSHIP_TOL));
    let above_lower = cert
        .u_minus
        .is_some_and(|um| x >= um * (1.0 - MEMBERSHIP_TOL));
    BallMembership {
        in_d_of_a: x.is_finite(),
        in_b,
        in_annulus_b_minus: in_b && above_lower,
    }
}

fn require_feasible(cert: &CertificateReport) -> Result<()> {
    if cert.feasible {
        Ok(())
    } else {
        Err(Error::Infeasible {
            gamma: cert.gamma,
            nu_min: cert.nu_min,
        })
    }
}

fn require_in_ball(u: &VelocityField, cert: &CertificateReport, name: &str) -> Result<()> {
    if !membership(u, cert).in_b {
        return Err(Error::Membership(format!(
            "{name}: ‖{name}‖_H1 = {:e} exceeds u_plus/2 = {:e}",
            norm_h1(&cert.renorm(), u),
            cert.ball_radius().unwrap_or(f64::NAN)
        )));
    }
    Ok(())
}

/// `<J(u,t), u>_{H,1}`.
pub fn check_zero_dissipative(
    u: &VelocityField,
    t: f64,
    cert: &CertificateReport,
    f: &ForcingModel,
) -> Result<f64> {
    inner_product_h1(&cert.renorm(), &apply_j(u, t, cert.nu, f)?, u)
}

/// `(<J(u,t) - J(v,t), u - v>_{H,1}, -α‖u - v‖²_{H,1})` for `u, v` in the ball.
pub fn check_strong_dissipative(
    u: &VelocityField,
    v: &VelocityField,
    t: f64,
    cert: &CertificateReport,
    f: &ForcingModel,
) -> Result<(f64, f64)> {
    require_feasible(cert)?;
    require_in_ball(u, cert, "u")?;
    require_in_ball(v, cert, "v")?;
    let p = cert.renorm();
    let w = u.sub(v)?;
    let dj = apply_j(u, t, cert.nu, f)?.sub(&apply_j(v, t, cert.nu, f)?)?;
    let lhs = inner_product_h1(&p, &dj, &w)?;
    Ok((lhs, -cert.alpha.unwrap_or(0.0) * norm_h1(&p, &w).powi(2)))
}

/// `(<𝒜u - 𝒜v, u - v>_{H,1}, -a‖u - v‖²_{H,1})` with `𝒜 = νAJ`.
pub fn check_aj_dissipative(
    u: &VelocityField,
    v: &VelocityField,
    t: f64,
    cert: &CertificateReport,
    f: &ForcingModel,
    mode: NonlinearMode,
) -> Result<(f64, f64)> {
    require_feasible(cert)?;
    require_in_ball(u, cert, "u")?;
    require_in_ball(v, cert, "v")?;
    let p = cert.renorm();
    let w = u.sub(v)?;
    let d = apply_aj(u, t, cert.nu, f, mode)?.sub(&apply_aj(v, t, cert.nu, f, mode)?)?;
    let lhs = inner_product_h1(&p, &d, &w)?;
    Ok((lhs, -cert.a.unwrap_or(0.0) * norm_h1(&p, &w).powi(2)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderAudit {
    /// `max ‖J(u,t) - J(u,τ)‖_{H,1} / |t - τ|^θ` over distinct pairs.
    pub worst_ratio: f64,
    /// `d / (ν λ₁)`.
    pub bound: f64,
    pub pairs: usize,
}

impl HolderAudit {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= self.bound * (1.0 + 1e-8) + 1e-300
    }
}

pub fn holder_audit(
    u: &VelocityField,
    f: &ForcingModel,
    nu: f64,
    times: &[f64],
    renorm: &RenormParams,
) -> Result<HolderAudit> {
    let h = f.holder().ok_or(Error::MissingHoelder)?;
    let lambda1 = u
        .grid()
        .lambdas()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let js: Vec<VelocityField> = times
        .iter()
        .map(|&t| apply_j(u, t, nu, f))
        .collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            let dt = (times[i] - times[j]).abs();
            if dt == 0.0 {
                continue;
            }
            pairs += 1;
            let diff = norm_h1(renorm, &js[i].sub(&js[j])?);
            worst = worst.max(diff / dt.powf(h.theta));
        }
    }
    Ok(HolderAudit {
        worst_ratio: worst,
        bound: h.d / (nu * lambda1),
        pairs,
    })
}

/// Outcome of a sampled dissipativity inequality `lhs ≤ bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct DissipativityAudit {
    pub name: &'static str,
    pub seed: u64,
    pub samples: usize,
    pub violations: usize,
    /// `max (lhs - bound)/scale`, negative when every sample has slack.
    pub worst_margin: f64,
    pub offending: Vec<u64>,
}

impl DissipativityAudit {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Relative tolerance of the dissipativity audits, scaled by `‖u - v‖²_{H,1}`.
pub const DISSIPATIVITY_TOL: f64 = 1e-10;

/// Sample `index` of a pair stream inside the ball `‖·‖_{H,1} ≤ u₊/2`, with a time in `[0, t_max]`.
/// Every third pair sits on the sphere; every fourth has `v` a small perturbation of `u`.
pub fn sample_ball_pair(
    grid: &Arc<SpectralGrid>,
    cert: &CertificateReport,
    seed: u64,
    index: u64,
    t_max: f64,
) -> Result<(VelocityField, VelocityField, f64)> {
    let radius = cert.ball_radius().ok_or(Error::Infeasible {
        gamma: cert.gamma,
        nu_min: cert.nu_min,
    })?;
    let p = cert.renorm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let on_sphere = index % 3 == 0;
    let draw = |rng: &mut ChaCha8Rng| -> Result<VelocityField> {
        let rho: f64 = if on_sphere {
            1.0
        } else {
            rng.gen_range(0.05..=1.0)
        };
        let decay = rng.gen_range(0.0..3.0);
        random_field(grid, rho * radius, NormKind::H1(p), rng.gen(), decay)
    };
    let u = draw(&mut rng)?;
    let v = if index % 4 == 1 {
        let eps = rng.gen_range(1e-4..1e-1) * radius;
        let kick = random_field(
            grid,
            eps,
            NormKind::H1(p),
            rng.gen(),
            rng.gen_range(0.0..3.0),
        )?;
        let v = u.add(&kick)?;
        let n = norm_h1(&p, &v);
        if n > radius {
            v.scale(radius / n)
        } else {
            v
        }
    } else {
        draw(&mut rng)?
    };
    let t = rng.gen_range(0.0..=t_max.max(0.0));
    Ok((u, v, t))
}

fn collect_audit(
    name: &'static str,
    seed: u64,
    results: Vec<Option<(f64, f64, f64)>>,
) -> DissipativityAudit {
    let mut a = DissipativityAudit {
        name,
        seed,
        samples: 0,
        violations: 0,
        worst_margin: f64::NEG_INFINITY,
        offending: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        let Some((lhs, bound, scale)) = r else {
            continue;
        };
        a.samples += 1;
        let margin = if scale > 0.0 {
            (lhs - bound) / scale
        } else {
            lhs - bound
        };
        a.worst_margin = a.worst_margin.max(margin);
        if lhs > bound + DISSIPATIVITY_TOL * scale {
            a.violations += 1;
            a.offending.push(i as u64);
        }
    }
    a
}

/// `<J(u,t), u>_{H,1} ≤ 0` for `u₋ ≤ ‖u‖_{H,1} ≤ u₊`. Norms alternate between
/// the sphere `u₊/2` (when it lies in the annulus) and uniform draws from `[u₋, u₊]`.
pub fn audit_zero_dissipative(
    cert: &CertificateReport,
    f: &ForcingModel,
    n: usize,
    seed: u64,
    t_max: f64,
) -> Result<DissipativityAudit> {
    require_feasible(cert)?;
    let grid = f.profile().grid().clone();
    let (um, up) = (cert.u_minus.unwrap_or(0.0), cert.u_plus.unwrap_or(0.0));
    let p = cert.renorm();
    let results = (0..n as u64)
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, f64, f64)>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let x = if i % 2 == 0 && 0.5 * up >= um {
                0.5 * up
            } else {
                rng.gen_range(um.max(1e-3 * up)..=up)
            };
            let u = random_field(
                &grid,
                x,
                NormKind::H1(p),
                rng.gen(),
                rng.gen_range(0.0..3.0),
            )?;
            let t = rng.gen_range(0.0..=t_max.max(0.0));
            let margin = check_zero_dissipative(&u, t, cert, f)?;
            Ok(Some((margin, 0.0, x * x)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_audit("zero-dissipative", seed, results))
}

pub fn audit_strong_dissipative(
    cert: &CertificateReport,
    f: &ForcingModel,
    n: usize,
    seed: u64,
    t_max: f64,
) -> Result<DissipativityAudit> {
    require_feasible(cert)?;
    let grid = f.profile().grid().clone();
    let p = cert.renorm();
    let results = (0..n as u64)
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, f64, f64)>> {
            let (u, v, t) = sample_ball_pair(&grid, cert, seed, i, t_max)?;
            let (lhs, bound) = check_strong_dissipative(&u, &v, t, cert, f)?;
            Ok(Some((lhs, bound, norm_h1(&p, &u.sub(&v)?).powi(2))))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_audit("strong-dissipative", seed, results))
}

pub fn audit_aj_dissipative(
    cert: &CertificateReport,
    f: &ForcingModel,
    n: usize,
    seed: u64,
    t_max: f64,
) -> Result<DissipativityAudit> {
    require_feasible(cert)?;
    let grid = f.profile().grid().clone();
    let p = cert.renorm();
    let results = (0..n as u64)
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, f64, f64)>> {
            let (u, v, t) = sample_ball_pair(&grid, cert, seed, i, t_max)?;
            let (lhs, bound) = check_aj_dissipative(&u, &v, t, cert, f, NonlinearMode::Full)?;
            // 𝒜 carries a factor νλ_max relative to J; scale the tolerance to match
            let scale = cert.nu * norm_h1(&p, &u.sub(&v)?.map_spectrum(f64::sqrt)).powi(2);
            Ok(Some((lhs, bound, scale)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_audit("aj-dissipative", seed, results))
}

/// One round of bound audits in the self-consistency loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantAuditRound {
    pub round: usize,
    pub c_before: f64,
    pub audits: Vec<BoundAudit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfConsistentConstants {
    pub constants: CertificateConstants,
    pub rounds: Vec<ConstantAuditRound>,
    /// The last round found no violation.
    pub converged: bool,
}

/// Budgets for constant estimation and auditing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationBudget {
    pub samples: usize,
    pub hill_climb_steps: u32,
    pub audit_samples: usize,
    pub max_rounds: usize,
}

/// Estimates `c`, then audits the trilinear bound and both renormed bounds on
/// fresh streams. A violation raises `c` just enough to absorb the offending
/// sample and triggers another round with new streams, up to `max_rounds`.
pub fn self_consistent_constants(
    grid: &Arc<SpectralGrid>,
    renorm: &RenormParams,
    spectrum: &StokesSpectrum,
    budget: &EstimationBudget,
    seed: u64,
) -> Result<SelfConsistentConstants> {
    let e = TrilinearExponents::CERTIFICATE;
    let est = estimate_c(grid, &e, budget.samples, seed, budget.hill_climb_steps)?;
    let mut constants = CertificateConstants::new(est, renorm, spectrum)?;
    let mut rounds = Vec::new();
    let mut converged = false;
    for round in 0..budget.max_rounds.max(1) {
        let c = constants.c.value;
        let stage = 100 + 3 * round as u64;
        let audits = vec![
            audit_trilinear_bound(
                grid,
                &e,
                c,
                budget.audit_samples,
                seeds::derive(seed, stage),
            )?,
            audit_renormed_trilinear(
                grid,
                renorm,
                c,
                constants.c1.value,
                budget.audit_samples,
                seeds::derive(seed, stage + 1),
            )?,
            audit_renormed_bilinear(
                grid,
                renorm,
                c,
                constants.c1.value,
                constants.c2.value,
                budget.audit_samples,
                seeds::derive(seed, stage + 2),
            )?,
        ];
        let clean = audits.iter().all(BoundAudit::passed);
        let worst = audits
            .iter()
            .max_by(|a, b| a.worst_ratio.total_cmp(&b.worst_ratio))
            .cloned();
        rounds.push(ConstantAuditRound {
            round,
            c_before: c,
            audits,
        });
        if clean {
            converged = true;
            break;
        }
        if let Some(w) = worst {
            constants.c.value = c * w.required_scaling();
            constants.c.attaining_triple = w.worst;
            constants.c.samples += budget.audit_samples;
        }
    }
    Ok(SelfConsistentConstants {
        constants,
        rounds,
        converged,
    })
}

/// Grid, spectrum and renorming parameters for a certificate run.
#[derive(Debug, Clone)]
pub struct CertificateSetup {
    pub grid: Arc<SpectralGrid>,
    pub spectrum: StokesSpectrum,
    pub renorm: RenormParams,
    pub r_hat: f64,
    pub r_mode: RMode,
}

impl CertificateSetup {
    pub fn new(grid: &Arc<SpectralGrid>, omega: Option<f64>, r_mode: RMode) -> Result<Self> {
        let spectrum = StokesSpectrum::from_grid(grid);
        let omega = omega.unwrap_or(spectrum.lambda1());
        let r_hat = solve_r_hat(omega, &spectrum)?;
        let r = match r_mode {
            RMode::AutoRHat => r_hat,
            RMode::Manual(r) => r,
        };
        let renorm = RenormParams::new(omega, r, &spectrum)?;
        Ok(CertificateSetup {
            grid: grid.clone(),
            spectrum,
            renorm,
            r_hat,
            r_mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::norm_h;
    use crate::nonlinear::EstimateMethod;
    use rustfft::num_complex::Complex64;

    fn fake_estimate(value: f64) -> ConstantEstimate {
        ConstantEstimate {
            exponents: TrilinearExponents::CERTIFICATE,
            value,
            attaining_triple: TripleDescriptor {
                seed: 1,
                index: 2,
                climb_steps: 0,
            },
            samples: 10,
            method: EstimateMethod::RandomScan,
        }
    }

    fn setup(n: usize) -> CertificateSetup {
        CertificateSetup::new(&SpectralGrid::unit(n).unwrap(), None, RMode::AutoRHat).unwrap()
    }

    fn cert_for(s: &CertificateSetup, f: &ForcingModel, nu_factor: f64) -> CertificateReport {
        let consts =
            CertificateConstants::new(fake_estimate(0.01), &s.renorm, &s.spectrum).unwrap();
        let probe = build_certificate(1.0, f, &consts, &s.renorm, &s.spectrum, s.r_mode).unwrap();
        let nu = if probe.nu_min > 0.0 {
            nu_factor * probe.nu_min
        } else {
            nu_factor
        };
        build_certificate(nu, f, &consts, &s.renorm, &s.spectrum, s.r_mode).unwrap()
    }

    #[test]
    fn j_vanishes_at_rest() {
        let g = SpectralGrid::unit(4).unwrap();
        let j = apply_j(&VelocityField::zero(&g), 0.0, 1.0, &ForcingModel::zero(&g)).unwrap();
        assert!(j.is_zero());
    }

    #[test]
    fn j_of_single_mode_is_minus_identity() {
        let g = SpectralGrid::unit(8).unwrap();
        let z = Complex64::new(0.0, 0.0);
        let u =
            VelocityField::single_mode(&g, [0, 1, 2], [Complex64::new(0.3, 0.1), z, z]).unwrap();
        let j = apply_j(&u, 0.0, 0.7, &ForcingModel::zero(&g)).unwrap();
        assert!(norm_h(&j.add(&u).unwrap()) < 1e-12 * norm_h(&u));
    }

    #[test]
    fn j_is_affine_in_forcing() {
        let s = setup(4);
        let f1 = ForcingModel::from_seed(
            &s.grid,
            crate::forcing::ForcingKind::Steady,
            0.2,
            0.5,
            0.0,
            3,
            2.0,
            &s.renorm,
        )
        .unwrap();
        let f2 = ForcingModel::steady(f1.profile(), 0.4, &s.renorm).unwrap();
        let u = random_field(&s.grid, 0.1, NormKind::H, 8, 1.0).unwrap();
        let nu = 0.3;
        let diff = apply_j(&u, 0.0, nu, &f2)
            .unwrap()
            .sub(&apply_j(&u, 0.0, nu, &f1).unwrap())
            .unwrap();
        let expect = apply_a_inverse(&f1.at(0.0)).scale(1.0 / nu);
        assert!(norm_h(&diff.sub(&expect).unwrap()) < 1e-13 * norm_h(&expect));
    }

    #[test]
    fn nonpositive_viscosity_rejected() {
        let g = SpectralGrid::unit(4).unwrap();
        assert!(apply_j(&VelocityField::zero(&g), 0.0, 0.0, &ForcingModel::zero(&g)).is_err());
    }

    #[test]
    fn unforced_roots() {
        let s = certificate_scalars(0.5, 0.0, 0.01, 0.02, 3.0, 0.1, 1.0).unwrap();
        assert_eq!(s.u_minus, Some(0.0));
        assert_eq!(s.u_plus, Some(s.delta));
        assert_eq!(s.gamma, 0.0);
        assert_eq!(s.alpha, Some(0.0));
        assert!(s.feasible);
    }

    #[test]
    fn gamma_three_quarters() {
        // choose f so that gamma = 3/4: gamma = 4 K f /(nu² λ₁ r^{1/4}), K = M³ c c₁
        let (nu, c, c1, m, r, l1): (f64, f64, f64, f64, f64, f64) =
            (0.5, 0.01, 0.02, 3.0, 0.0625, 1.0);
        let k = m.powi(3) * c * c1;
        let f = 0.75 * nu * nu * l1 * r.powf(0.25) / (4.0 * k);
        let s = certificate_scalars(nu, f, c, c1, m, r, l1).unwrap();
        assert!((s.gamma - 0.75).abs() < 1e-15);
        assert!((s.u_plus.unwrap() - 0.75 * s.delta).abs() < 1e-14 * s.delta);
        assert!((s.u_minus.unwrap() - 0.25 * s.delta).abs() < 1e-14 * s.delta);
        assert!((s.alpha.unwrap() - 0.25).abs() < 1e-15);
        assert!((s.a.unwrap() - nu * l1 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn gamma_boundary_and_beyond() {
        let (nu, c, c1, m, r, l1): (f64, f64, f64, f64, f64, f64) = (1.0, 0.25, 1.0, 1.0, 1.0, 1.0);
        // gamma = 4 c c1 f = f with these inputs
        let s = certificate_scalars(nu, 1.0, c, c1, m, r, l1).unwrap();
        assert_eq!(s.gamma, 1.0);
        assert!(!s.feasible);
        assert_eq!(s.u_plus, Some(0.5 * s.delta));
        assert_eq!(s.u_minus, Some(0.5 * s.delta));
        let s = certificate_scalars(nu, 2.0, c, c1, m, r, l1).unwrap();
        assert!(!s.feasible && s.u_plus.is_none() && s.u_minus.is_none() && s.alpha.is_none());
    }

    #[test]
    fn half_minimal_viscosity_quadruples_gamma() {
        let s = certificate_scalars(1.0, 0.3, 0.1, 0.2, 5.0, 0.2, 1.0).unwrap();
        let h = certificate_scalars(0.5 * s.nu_min, 0.3, 0.1, 0.2, 5.0, 0.2, 1.0).unwrap();
        assert!((h.gamma - 4.0).abs() < 1e-14);
        assert!(!h.feasible);
    }

    #[test]
    fn report_round_trips_through_text_and_csv() {
        let s = setup(4);
        let f = ForcingModel::from_seed(
            &s.grid,
            crate::forcing::ForcingKind::Steady,
            1e-6,
            0.5,
            0.0,
            3,
            2.0,
            &s.renorm,
        )
        .unwrap();
        let cert = cert_for(&s, &f, 2.0);
        assert_eq!(
            CertificateReport::from_key_values(&cert.to_key_values()).unwrap(),
            cert
        );
        assert_eq!(
            CertificateReport::from_csv_row(&cert.to_csv_row()).unwrap(),
            cert
        );
        assert_eq!(
            CertificateReport::csv_header().split(',').count(),
            cert.to_csv_row().split(',').count()
        );
    }

    #[test]
    fn auto_r_requires_r_hat() {
        let s = setup(4);
        let consts =
            CertificateConstants::new(fake_estimate(0.01), &s.renorm, &s.spectrum).unwrap();
        let other = RenormParams::with_lambda1(2.0 * s.r_hat, &s.spectrum).unwrap();
        let f = ForcingModel::zero(&s.grid);
        assert!(build_certificate(1.0, &f, &consts, &other, &s.spectrum, RMode::AutoRHat).is_err());
    }

    #[test]
    fn membership_examples() {
        let s = setup(4);
        let f = ForcingModel::from_seed(
            &s.grid,
            crate::forcing::ForcingKind::Steady,
            1e-6,
            0.5,
            0.0,
            3,
            2.0,
            &s.renorm,
        )
        .unwrap();
        let cert = cert_for(&s, &f, 2.0);
        let p = cert.renorm();
        let up = cert.u_plus.unwrap();
        let um = cert.u_minus.unwrap();
        let on = random_field(&s.grid, 0.5 * up, NormKind::H1(p), 1, 1.0).unwrap();
        let m = membership(&on, &cert);
        assert!(m.in_b && m.in_annulus_b_minus && m.in_d_of_a);
        let low = random_field(&s.grid, 0.5 * um, NormKind::H1(p), 1, 1.0).unwrap();
        let m = membership(&low, &cert);
        assert!(m.in_b && !m.in_annulus_b_minus);
        let out = random_field(&s.grid, up, NormKind::H1(p), 1, 1.0).unwrap();
        assert!(!membership(&out, &cert).in_b);
    }

    #[test]
    fn unforced_annulus_equals_ball() {
        let s = setup(4);
        let cert = cert_for(&s, &ForcingModel::zero(&s.grid), 1.0);
        for x in [1e-9, 0.1, 0.5] {
            let r = x * cert.u_plus.unwrap();
            let m = membership_of_norm(r, &cert);
            assert_eq!(m.in_b, m.in_annulus_b_minus);
        }
    }

    #[test]
    fn zero_dissipative_examples() {
        let s = setup(8);
        let f = ForcingModel::zero(&s.grid);
        let cert = cert_for(&s, &f, 1.0);
        let z = Complex64::new(0.0, 0.0);
        let u = VelocityField::single_mode(&s.grid, [1, 1, 0], [z, z, Complex64::new(1e-3, 0.0)])
            .unwrap();
        let m = check_zero_dissipative(&u, 0.0, &cert, &f).unwrap();
        let n = norm_h1(&cert.renorm(), &u);
        assert!((m + n * n).abs() < 1e-12 * n * n);
        assert_eq!(
            check_zero_dissipative(&VelocityField::zero(&s.grid), 0.0, &cert, &f).unwrap(),
            0.0
        );
    }

    #[test]
    fn strong_dissipativity_rejects_outside_ball_and_is_zero_on_diagonal() {
        let s = setup(4);
        let f = ForcingModel::zero(&s.grid);
        let cert = cert_for(&s, &f, 1.0);
        let p = cert.renorm();
        let u = random_field(&s.grid, 0.3 * cert.u_plus.unwrap(), NormKind::H1(p), 2, 1.0).unwrap();
        assert_eq!(
            check_strong_dissipative(&u, &u, 0.0, &cert, &f).unwrap(),
            (0.0, 0.0)
        );
        let big = u.scale(10.0);
        assert!(matches!(
            check_strong_dissipative(&big, &u, 0.0, &cert, &f),
            Err(Error::Membership(_))
        ));
    }

    #[test]
    fn linear_part_of_aj_is_spectral() {
        let s = setup(4);
        let f = ForcingModel::zero(&s.grid);
        let cert = cert_for(&s, &f, 1.0);
        let p = cert.renorm();
        let u = random_field(&s.grid, 0.4 * cert.u_plus.unwrap(), NormKind::H1(p), 4, 0.5).unwrap();
        let v = random_field(&s.grid, 0.2 * cert.u_plus.unwrap(), NormKind::H1(p), 5, 0.5).unwrap();
        let (lhs, _) =
            check_aj_dissipative(&u, &v, 0.0, &cert, &f, NonlinearMode::Disabled).unwrap();
        let w = u.sub(&v).unwrap();
        let expect = -cert.nu * norm_h1(&p, &w.map_spectrum(f64::sqrt)).powi(2);
        assert!(
            (lhs - expect).abs() < 1e-12 * expect.abs(),
            "{lhs} {expect}"
        );
        assert!(lhs <= -cert.nu * cert.lambda1 * norm_h1(&p, &w).powi(2));
    }

    #[test]
    fn holder_audit_examples() {
        let s = setup(4);
        let u = random_field(&s.grid, 1e-3, NormKind::H, 1, 1.0).unwrap();
        let steady = ForcingModel::from_seed(
            &s.grid,
            crate::forcing::ForcingKind::Steady,
            0.1,
            0.5,
            0.0,
            3,
            2.0,
            &s.renorm,
        )
        .unwrap();
        let a = holder_audit(&u, &steady, 0.5, &[0.0, 0.5, 0.5, 1.0], &s.renorm).unwrap();
        assert_eq!(a.worst_ratio, 0.0);
        assert_eq!(a.pairs, 5);
        assert!(matches!(
            holder_audit(
                &u,
                &steady.clone().without_holder(),
                0.5,
                &[0.0, 1.0],
                &s.renorm
            ),
            Err(Error::MissingHoelder)
        ));
    }
}
