//! Time integration of `∂t u = -νAu - B(u,u) + Pf(t)` with second-order
//! exponential time differencing (Cox-Matthews ETDRK2), plus trajectory
//! monitoring against a certified ball.

use std::fmt;
use std::fmt::Write as _;

use crate::certificate::{membership, membership_of_norm, CertificateReport, NonlinearMode};
use crate::error::{Error, Result};
use crate::fft::with_workspace;
use crate::field::{inner_product_h, norm_h, norm_v, ModeVector, VelocityField};
use crate::forcing::ForcingModel;
use crate::stokes::{norm_h1, RenormParams};

/// `φ₁(z) = (e^z - 1)/z`.
fn phi1(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z.exp_m1() / z
    }
}

/// `φ₂(z) = (e^z - 1 - z)/z²`.
fn phi2(z: f64) -> f64 {
    if z.abs() < 0.1 {
        // Taylor series; the closed form cancels badly near zero
        let mut term = 0.5;
        let mut sum = 0.5;
        for n in 3..20 {
            term *= z / n as f64;
            sum += term;
        }
        sum
    } else {
        (z.exp_m1() - z) / (z * z)
    }
}

/// Per-mode ETDRK2 weights for a fixed `(ν, dt)`.
struct Weights {
    dt: f64,
    e: Vec<f64>,
    h_phi1: Vec<f64>,
    h_phi2: Vec<f64>,
}

impl Weights {
    fn new(lambdas: &[f64], nu: f64, dt: f64) -> Self {
        let z: Vec<f64> = lambdas.iter().map(|&l| -nu * l * dt).collect();
        Weights {
            dt,
            e: z.iter().map(|z| z.exp()).collect(),
            h_phi1: z.iter().map(|&z| dt * phi1(z)).collect(),
            h_phi2: z.iter().map(|&z| dt * phi2(z)).collect(),
        }
    }
}

fn combine(a: &VelocityField, wa: &[f64], b: &VelocityField, wb: &[f64]) -> VelocityField {
    let coeffs: Vec<ModeVector> = a
        .coeffs()
        .iter()
        .zip(b.coeffs())
        .zip(wa.iter().zip(wb))
        .map(|((x, y), (&p, &q))| {
            [
                x[0] * p + y[0] * q,
                x[1] * p + y[1] * q,
                x[2] * p + y[2] * q,
            ]
        })
        .collect();
    VelocityField::from_parts_unchecked(a.grid().clone(), coeffs)
}

/// `-B(u,u) + Pf(t)` and `max |u(x)|`.
fn nonlinear_rhs(
    u: &VelocityField,
    t: f64,
    f: &ForcingModel,
    mode: NonlinearMode,
) -> Result<(VelocityField, f64)> {
    let (mut n, vmax) = match mode {
        NonlinearMode::Full => {
            let (b, vmax) = with_workspace(u.grid(), |ws| ws.advect_self(u))?;
            (b.scale(-1.0), vmax)
        }
        NonlinearMode::Disabled => (
            VelocityField::zero(u.grid()),
            with_workspace(u.grid(), |ws| ws.max_speed(u))?,
        ),
    };
    if !f.is_zero() {
        n = n.add(&f.at(t))?;
    }
    Ok((n, vmax))
}

/// Spacing of the dealiasing grid.
pub fn grid_spacing(u: &VelocityField) -> f64 {
    with_workspace(u.grid(), |ws| ws.grid_spacing())
}

/// Advective limit `h / max|u|` (infinite for `u = 0`).
pub fn dt_max(u: &VelocityField) -> Result<f64> {
    let vmax = with_workspace(u.grid(), |ws| ws.max_speed(u))?;
    Ok(if vmax > 0.0 {
        grid_spacing(u) / vmax
    } else {
        f64::INFINITY
    })
}

/// `0.25 · min(h / max|u|, 1/(ν λ₁))`.
///
/// The linear part is integrated exactly, so the viscous scale that bounds
/// the step is the slowest one, not `1/(ν λ_max)`.
pub fn default_dt(u: &VelocityField, nu: f64) -> Result<f64> {
    let lambda1 = u.grid().wavenumber_unit().powi(2);
    Ok(0.25 * dt_max(u)?.min(1.0 / (nu * lambda1)))
}

struct Stepper {
    nu: f64,
    mode: NonlinearMode,
    weights: Option<Weights>,
}

impl Stepper {
    fn step(
        &mut self,
        u: &VelocityField,
        t: f64,
        dt: f64,
        f: &ForcingModel,
    ) -> Result<VelocityField> {
        let (n0, vmax) = nonlinear_rhs(u, t, f, self.mode)?;
        if vmax > 0.0 {
            let limit = grid_spacing(u) / vmax;
            if dt > limit {
                return Err(Error::TimeStepTooLarge { dt, dt_max: limit });
            }
        }
        if self.weights.as_ref().map_or(true, |w| w.dt != dt) {
            self.weights = Some(Weights::new(u.grid().lambdas(), self.nu, dt));
        }
        let w = self.weights.as_ref().unwrap();
        let a = combine(u, &w.e, &n0, &w.h_phi1);
        if self.mode == NonlinearMode::Disabled && f.is_zero() {
            return Ok(a);
        }
        let (na, _) = nonlinear_rhs(&a, t + dt, f, self.mode)?;
        let dn = na.sub(&n0)?;
        let ones = vec![1.0; w.e.len()];
        Ok(combine(&a, &ones, &dn, &w.h_phi2))
    }
}

/// One ETDRK2 step of size `dt` from `(u, t)`.
pub fn step(
    u: &VelocityField,
    t: f64,
    dt: f64,
    nu: f64,
    f: &ForcingModel,
) -> Result<VelocityField> {
    step_with(u, t, dt, nu, f, NonlinearMode::Full)
}

pub fn step_with(
    u: &VelocityField,
    t: f64,
    dt: f64,
    nu: f64,
    f: &ForcingModel,
    mode: NonlinearMode,
) -> Result<VelocityField> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::param("nu", format!("must be positive, got {nu}")));
    }
    u.grid().check_same(f.profile().grid())?;
    Stepper {
        nu,
        mode,
        weights: None,
    }
    .step(u, t, dt, f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub nu: f64,
    pub t_end: f64,
    /// `None` picks [`default_dt`] from the initial state.
    pub dt: Option<f64>,
    /// Record every `sample_stride` steps (the first and last states are always recorded).
    pub sample_stride: usize,
    pub checkpoint_stride: Option<usize>,
    pub mode: NonlinearMode,
    /// Allowed relative excess over `u₊/2` before a certified run is declared violated.
    pub invariance_tol: f64,
}

impl SimulationConfig {
    pub fn new(nu: f64, t_end: f64) -> Self {
        SimulationConfig {
            nu,
            t_end,
            dt: None,
            sample_stride: 1,
            checkpoint_stride: None,
            mode: NonlinearMode::Full,
            invariance_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub norm_h: f64,
    pub norm_h1: f64,
    pub norm_v: f64,
    pub energy: f64,
    pub in_b: Option<bool>,
    pub div_residual: f64,
    pub dt: f64,
    /// `<Pf(t), u>_H`.
    pub forcing_power: f64,
}

pub const TRAJECTORY_SCHEMA: &str = "trajectory/1";
pub const TRAJECTORY_COLUMNS: &[&str] = &[
    "t",
    "norm_h",
    "norm_h1",
    "norm_v",
    "energy",
    "in_b",
    "div_residual",
    "dt",
    "forcing_power",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    /// Certified run stayed in the ball; carries the measured sup of `‖u‖_{H,1}`.
    Invariant {
        sup_norm_h1: f64,
    },
    Violated {
        t: f64,
        norm_h1: f64,
        radius: f64,
    },
    /// No certificate, so no claim.
    NoClaim {
        sup_norm_h1: f64,
    },
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Invariant { .. } => "INVARIANT",
            Verdict::Violated { .. } => "VIOLATED",
            Verdict::NoClaim { .. } => "NO-CLAIM",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Invariant { sup_norm_h1 } | Verdict::NoClaim { sup_norm_h1 } => {
                write!(f, "{} sup_norm_h1={sup_norm_h1:e}", self.label())
            }
            Verdict::Violated { t, norm_h1, radius } => {
                write!(f, "VIOLATED t={t:e} norm_h1={norm_h1:e} radius={radius:e}")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
    pub verdict: Verdict,
    pub final_state: VelocityField,
    pub checkpoints: Vec<(f64, VelocityField)>,
    pub steps: usize,
}

impl TrajectoryRecord {
    pub fn sup_norm_h1(&self) -> f64 {
        self.rows.iter().map(|r| r.norm_h1).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# schema: {TRAJECTORY_SCHEMA}\n{}\n",
            TRAJECTORY_COLUMNS.join(",")
        );
        for r in &self.rows {
            let in_b = match r.in_b {
                Some(true) => "1",
                Some(false) => "0",
                None => "NA",
            };
            let _ = writeln!(
                s,
                "{:e},{:e},{:e},{:e},{:e},{in_b},{:e},{:e},{:e}",
                r.t, r.norm_h, r.norm_h1, r.norm_v, r.energy, r.div_residual, r.dt, r.forcing_power
            );
        }
        s
    }
}

fn row(
    u: &VelocityField,
    t: f64,
    dt: f64,
    p: &RenormParams,
    f: &ForcingModel,
    cert: Option<&CertificateReport>,
) -> Result<TrajectoryRow> {
    let nh = norm_h(u);
    let n1 = norm_h1(p, u);
    Ok(TrajectoryRow {
        t,
        norm_h: nh,
        norm_h1: n1,
        norm_v: norm_v(u),
        energy: 0.5 * nh * nh,
        in_b: cert.map(|c| membership_of_norm(n1, c).in_b),
        div_residual: u.divergence_residual(),
        dt,
        forcing_power: if f.is_zero() {
            0.0
        } else {
            inner_product_h(&f.at(t), u)?
        },
    })
}

/// Integrates from `u0` to `cfg.t_end`. With a certificate, `u0` must lie in the
/// ball (and in the annulus `‖u‖_{H,1} ≥ u₋` when forced), and the run stops
/// early once `‖u‖_{H,1}` exceeds `u₊/2` by more than `cfg.invariance_tol`.
/// The monitoring norm uses `renorm` throughout (the certificate's when given).
pub fn simulate(
    u0: &VelocityField,
    f: &ForcingModel,
    cfg: &SimulationConfig,
    cert: Option<&CertificateReport>,
    renorm: &RenormParams,
) -> Result<TrajectoryRecord> {
    if !(cfg.t_end > 0.0 && cfg.t_end.is_finite()) {
        return Err(Error::param(
            "t_end",
            format!("must be positive, got {}", cfg.t_end),
        ));
    }
    if cfg.sample_stride == 0 {
        return Err(Error::param("sample_stride", "must be at least 1"));
    }
    u0.grid().check_same(f.profile().grid())?;
    let p = cert.map_or(*renorm, |c| c.renorm());
    let radius = match cert {
        Some(c) => {
            if !c.feasible {
                return Err(Error::Infeasible {
                    gamma: c.gamma,
                    nu_min: c.nu_min,
                });
            }
            let m = membership(u0, c);
            let x = norm_h1(&p, u0);
            if !m.in_b {
                return Err(Error::Membership(format!(
                    "in_B fails: ‖u0‖_H1 = {x:e} > u_plus/2 = {:e}",
                    c.ball_radius().unwrap()
                )));
            }
            if c.f_sup > 0.0 && !m.in_annulus_b_minus {
                return Err(Error::Membership(format!(
                    "in_annulus_B_minus fails: ‖u0‖_H1 = {x:e} < u_minus = {:e}",
                    c.u_minus.unwrap()
                )));
            }
            c.ball_radius()
        }
        None => None,
    };
    let mut dt = match cfg.dt {
        Some(dt) if dt > 0.0 && dt.is_finite() => dt,
        Some(dt) => return Err(Error::param("dt", format!("must be positive, got {dt}"))),
        None => default_dt(u0, cfg.nu)?,
    };
    let mut stepper = Stepper {
        nu: cfg.nu,
        mode: cfg.mode,
        weights: None,
    };
    let mut u = u0.clone();
    let mut t = 0.0;
    let mut rows = vec![row(&u, t, 0.0, &p, f, cert)?];
    let mut checkpoints = Vec::new();
    if cfg.checkpoint_stride.is_some() {
        checkpoints.push((t, u.clone()));
    }
    let mut steps = 0usize;
    let mut sup = rows[0].norm_h1;
    let mut verdict = None;
    while t < cfg.t_end && verdict.is_none() {
        // absorb a rounding-sized remainder into the last step
        let remaining = cfg.t_end - t;
        let h = if remaining <= dt * (1.0 + 1e-6) {
            remaining
        } else {
            dt
        };
        let next = match stepper.step(&u, t, h, f) {
            Ok(next) => next,
            Err(Error::TimeStepTooLarge { .. }) => {
                dt *= 0.5;
                if dt < 1e-14 * cfg.t_end {
                    return Err(Error::TimeStepTooLarge { dt, dt_max: 0.0 });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        u = next;
        // land exactly on t_end
        t = if h == remaining { cfg.t_end } else { t + h };
        steps += 1;
        let n1 = norm_h1(&p, &u);
        sup = sup.max(n1);
        if let Some(rad) = radius {
            if n1 > rad * (1.0 + cfg.invariance_tol) {
                verdict = Some(Verdict::Violated {
                    t,
                    norm_h1: n1,
                    radius: rad,
                });
            }
        }
        if steps % cfg.sample_stride == 0 || t >= cfg.t_end || verdict.is_some() {
            rows.push(row(&u, t, h, &p, f, cert)?);
        }
        if let Some(k) = cfg.checkpoint_stride {
            if k > 0 && (steps % k == 0 || t >= cfg.t_end) {
                checkpoints.push((t, u.clone()));
            }
        }
    }
    let verdict = verdict.unwrap_or(if radius.is_some() {
        Verdict::Invariant { sup_norm_h1: sup }
    } else {
        Verdict::NoClaim { sup_norm_h1: sup }
    });
    Ok(TrajectoryRecord {
        rows,
        verdict,
        final_state: u,
        checkpoints,
        steps,
    })
}

/// Finite-difference weights for the first derivative at `x0` (Fornberg).
fn fd_weights(x0: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; 2]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(1);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] *= c4 / c3;
        }
        c1 = c2;
    }
    c.iter().map(|w| w[1]).collect()
}

/// Largest relative defect of `d/dt ½‖u‖²_H = -ν‖u‖²_V + <Pf, u>_H` over the
/// interior rows, with the time derivative from a five-point stencil.
///
/// Rows are too sparse when `Δt · 2νλ_eff > 0.05` for any used spacing, with
/// `λ_eff = ‖u‖²_V / ‖u‖²_H`.
pub fn energy_balance_audit(record: &TrajectoryRecord, nu: f64) -> Result<f64> {
    let rows = &record.rows;
    if rows.len() < 5 {
        return Err(Error::SparseSampling(format!(
            "{} rows, need at least 5",
            rows.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for i in 2..rows.len() - 2 {
        let r = &rows[i];
        let dissipation = nu * r.norm_v * r.norm_v;
        if dissipation == 0.0 {
            continue;
        }
        let lambda_eff = (r.norm_v / r.norm_h).powi(2);
        let span = rows[i + 2].t - rows[i - 2].t;
        if 0.5 * span * 2.0 * nu * lambda_eff > 0.05 {
            return Err(Error::SparseSampling(format!(
                "spacing {:e} at t = {:e} too coarse for rate {:e}",
                0.5 * span,
                r.t,
                2.0 * nu * lambda_eff
            )));
        }
        let xs: Vec<f64> = rows[i - 2..=i + 2].iter().map(|q| q.t).collect();
        let w = fd_weights(r.t, &xs);
        let de: f64 = rows[i - 2..=i + 2]
            .iter()
            .zip(&w)
            .map(|(q, w)| w * q.energy)
            .sum();
        worst = worst.max((de + dissipation - r.forcing_power).abs() / dissipation);
    }
    Ok(worst)
}
