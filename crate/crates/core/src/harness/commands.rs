//! The five harness commands. Each writes into `config.out_dir`, lists every
//! file it wrote in `manifest.txt`, and reports an [`ExitStatus`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use super::config::{InitialState, NuSpec, RunConfig};
use super::manifest::{RunManifest, MANIFEST_FILE};
use crate::certificate::{
    audit_aj_dissipative, audit_strong_dissipative, audit_zero_dissipative, build_certificate,
    holder_audit, self_consistent_constants, CertificateConstants, CertificateReport,
    CertificateSetup, DissipativityAudit, EstimationBudget, HolderAudit, NonlinearMode,
    SelfConsistentConstants, DISSIPATIVITY_TOL,
};
use crate::error::{Error, Result};
use crate::evolution::{
    energy_balance_audit, simulate, SimulationConfig, TrajectoryRecord, Verdict,
};
use crate::field::{norm_h, normalize_to, random_field, NormKind, SpectralGrid, VelocityField};
use crate::forcing::ForcingModel;
use crate::nonlinear::BoundAudit;
use crate::ou::{
    constant_invariance_residual, generator_residual, mehler_residual, ou_renorm_bound_audit,
};
use crate::seeds;
use crate::snapshot::{read_snapshot, write_snapshot};
use crate::stokes::{semigroup_t, smoothing_constant, RenormParams, StokesSpectrum};

pub const CERTIFICATE_SCHEMA: &str = "certificate/1";
pub const AUDITS_SCHEMA: &str = "audits/1";
pub const VERDICTS_SCHEMA: &str = "verdicts/1";
pub const SWEEP_NU_SCHEMA: &str = "sweep_nu/1";
pub const M_SCALING_SCHEMA: &str = "m_scaling/1";
pub const OU_SCHEMA: &str = "ou/1";

pub const AUDIT_COLUMNS: &[&str] = &[
    "audit",
    "round",
    "samples",
    "violations",
    "worst",
    "threshold",
    "seed",
    "replay",
];
pub const VERDICT_COLUMNS: &[&str] = &[
    "trajectory",
    "u0_seed",
    "verdict",
    "sup_norm_h1",
    "radius",
    "violation_t",
    "steps",
    "t_end",
    "stokes_decay_error",
    "energy_residual",
];
pub const SWEEP_NU_COLUMNS: &[&str] = &[
    "cell",
    "nu",
    "feasible",
    "gamma",
    "nu_min",
    "u_minus",
    "u_plus",
    "alpha",
    "a",
    "verdict",
    "sup_norm_h1",
    "status",
];
pub const M_SCALING_COLUMNS: &[&str] = &[
    "cell",
    "grid_n",
    "lambda1",
    "lambda_max",
    "omega",
    "r",
    "r_hat",
    "M",
    "c1",
    "c1_analytic",
    "c2",
    "status",
];
pub const OU_COLUMNS: &[&str] = &[
    "ou.gamma",
    "ou.max_degree",
    "ou.M",
    "ou.c",
    "ou.c_analytic",
    "ou.bound",
    "ou.worst_ratio",
    "ou.samples",
    "ou.skipped",
    "ou.violations",
    "ou.constant_residual",
    "ou.generator_residual",
    "ou.mehler_residual",
    "ou.passed",
];

// per-stage seed offsets
const STAGE_ESTIMATE: u64 = 1;
const STAGE_ZERO: u64 = 3;
const STAGE_STRONG: u64 = 4;
const STAGE_AJ: u64 = 5;
const STAGE_HOLDER: u64 = 6;
const STAGE_OU: u64 = 20;
const STAGE_U0: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    Usage,
    Infeasible,
    AuditViolation,
    InvarianceViolation,
}

impl ExitStatus {
    pub fn code(&self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Usage => 1,
            ExitStatus::Infeasible => 2,
            ExitStatus::AuditViolation => 3,
            ExitStatus::InvarianceViolation => 4,
        }
    }

    /// Exit status for a command that failed before producing a result.
    pub fn of_error(e: &Error) -> Self {
        match e {
            Error::Infeasible { .. } => ExitStatus::Infeasible,
            _ => ExitStatus::Usage,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CommandOutcome {
    pub status: ExitStatus,
    /// Human-readable summary lines, printed by the CLI.
    pub messages: Vec<String>,
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulateOptions {
    pub certificate: Option<PathBuf>,
    pub uncertified: bool,
    pub stokes_only: bool,
}

impl SimulateOptions {
    fn to_flags(&self) -> BTreeMap<String, String> {
        let mut f = BTreeMap::new();
        f.insert("uncertified".into(), self.uncertified.to_string());
        f.insert("stokes_only".into(), self.stokes_only.to_string());
        f.insert(
            "certificate".into(),
            self.certificate
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
        );
        f
    }

    fn from_flags(flags: &BTreeMap<String, String>) -> Self {
        let flag = |k: &str| flags.get(k).is_some_and(|v| v == "true");
        SimulateOptions {
            certificate: flags
                .get("certificate")
                .filter(|v| v.as_str() != "none")
                .map(PathBuf::from),
            uncertified: flag("uncertified"),
            stokes_only: flag("stokes_only"),
        }
    }
}

struct Output {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Output {
    fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Output {
            dir,
            manifest: RunManifest::new(command, cfg),
        })
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.manifest.record_file(&self.dir, rel)
    }

    fn finish(mut self, status: ExitStatus, messages: Vec<String>) -> Result<CommandOutcome> {
        self.manifest.write(&self.dir)?;
        Ok(CommandOutcome {
            status,
            messages,
            out_dir: self.dir,
            manifest: self.manifest,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:e}"))
}

/// Grid, renorming setup and estimated constants, shared by every command
/// that needs a certificate.
pub struct Certification {
    pub setup: CertificateSetup,
    pub forcing: ForcingModel,
    pub constants: SelfConsistentConstants,
    pub certificate: CertificateReport,
}

fn forcing_for(
    cfg: &RunConfig,
    grid: &Arc<SpectralGrid>,
    renorm: &RenormParams,
) -> Result<ForcingModel> {
    ForcingModel::from_seed(
        grid,
        cfg.forcing_kind,
        cfg.forcing_amplitude,
        cfg.forcing_theta,
        cfg.forcing_t0,
        cfg.forcing_seed,
        cfg.forcing_decay,
        renorm,
    )
}

fn budget(cfg: &RunConfig) -> EstimationBudget {
    EstimationBudget {
        samples: cfg.estimator_samples,
        hill_climb_steps: cfg.estimator_climb_steps,
        audit_samples: cfg.estimator_audit_samples,
        max_rounds: cfg.estimator_rounds,
    }
}

/// Certificate at `nu` from already estimated constants; `nu_min` does not depend on `ν`.
fn certificate_at(
    nu: NuSpec,
    forcing: &ForcingModel,
    constants: &CertificateConstants,
    setup: &CertificateSetup,
) -> Result<CertificateReport> {
    let probe = build_certificate(
        1.0,
        forcing,
        constants,
        &setup.renorm,
        &setup.spectrum,
        setup.r_mode,
    )?;
    let nu = nu.resolve(probe.nu_min)?;
    build_certificate(
        nu,
        forcing,
        constants,
        &setup.renorm,
        &setup.spectrum,
        setup.r_mode,
    )
}

/// Estimates constants (with the self-consistency loop) and builds the certificate.
pub fn certification(cfg: &RunConfig) -> Result<Certification> {
    cfg.validate()?;
    let grid = SpectralGrid::new(cfg.grid_n, cfg.box_l)?;
    let setup = CertificateSetup::new(&grid, cfg.omega, cfg.r_mode)?;
    let forcing = forcing_for(cfg, &grid, &setup.renorm)?;
    let constants = self_consistent_constants(
        &grid,
        &setup.renorm,
        &setup.spectrum,
        &budget(cfg),
        seeds::derive(cfg.seed, STAGE_ESTIMATE),
    )?;
    let certificate = certificate_at(cfg.nu, &forcing, &constants.constants, &setup)?;
    Ok(Certification {
        setup,
        forcing,
        constants,
        certificate,
    })
}

fn certificate_csv(cert: &CertificateReport) -> String {
    format!(
        "# schema: {CERTIFICATE_SCHEMA}\n{}\n{}\n",
        CertificateReport::csv_header(),
        cert.to_csv_row()
    )
}

/// Reads the single data row of a `certificate.csv`.
pub fn read_certificate_csv(path: &Path) -> Result<CertificateReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = rows
        .next()
        .ok_or_else(|| Error::parse("certificate csv", "empty file"))?;
    if header != CertificateReport::csv_header() {
        return Err(Error::parse("certificate csv", "unexpected header"));
    }
    let row = rows
        .next()
        .ok_or_else(|| Error::parse("certificate csv", "no data row"))?;
    CertificateReport::from_csv_row(row)
}

fn bound_audit_row(a: &BoundAudit, round: usize) -> String {
    format!(
        "{},{round},{},{},{:e},{:e},{},{}",
        a.name, a.samples, a.violations, a.worst_ratio, 1.0, a.worst.seed, a.worst
    )
}

fn dissipativity_row(a: &DissipativityAudit) -> String {
    let replay = if a.offending.is_empty() {
        "-".to_string()
    } else {
        a.offending
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(";")
    };
    format!(
        "{},0,{},{},{:e},{:e},{},{replay}",
        a.name, a.samples, a.violations, a.worst_margin, DISSIPATIVITY_TOL, a.seed
    )
}

fn holder_row(a: &HolderAudit, seed: u64) -> String {
    let violations = usize::from(!a.passed());
    format!(
        "holder,0,{},{violations},{:e},{:e},{seed},-",
        a.pairs, a.worst_ratio, a.bound
    )
}

/// Times around the forcing's modulation kink, where the Hoelder quotient is largest.
fn holder_times(t0: f64) -> Vec<f64> {
    [
        -1.0, -0.3, -0.1, -1e-2, -1e-3, 0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0,
    ]
    .iter()
    .map(|d| t0 + d)
    .collect()
}

pub fn cmd_certify(cfg: &RunConfig) -> Result<CommandOutcome> {
    let mut out = Output::new("certify", cfg)?;
    let c = certification(cfg)?;
    let cert = &c.certificate;
    out.manifest
        .seeds
        .insert("estimate".into(), seeds::derive(cfg.seed, STAGE_ESTIMATE));
    out.manifest
        .seeds
        .insert("forcing".into(), cfg.forcing_seed);

    let mut messages = Vec::new();
    let mut audits = format!("# schema: {AUDITS_SCHEMA}\n{}\n", AUDIT_COLUMNS.join(","));
    for round in &c.constants.rounds {
        for a in &round.audits {
            let _ = writeln!(audits, "{}", bound_audit_row(a, round.round));
        }
    }
    let last_round_clean = c.constants.converged;
    if c.constants.rounds.len() > 1 {
        messages.push(format!(
            "self-consistency: {} rounds, c raised from {:e} to {:e}",
            c.constants.rounds.len(),
            c.constants.rounds[0].c_before,
            c.constants.constants.c.value
        ));
    }

    let mut violations: Vec<String> = Vec::new();
    if !last_round_clean {
        for a in c
            .constants
            .rounds
            .last()
            .into_iter()
            .flat_map(|r| &r.audits)
        {
            if !a.passed() {
                let replay: Vec<String> = a.offending.iter().map(ToString::to_string).collect();
                violations.push(format!(
                    "{}: {} violations, replay {}",
                    a.name,
                    a.violations,
                    replay.join(" ")
                ));
            }
        }
    }

    let status = if !cert.feasible {
        messages.push(format!(
            "infeasible: gamma = {:e} >= 1; need nu > nu_min = {:e} (nu = {:e})",
            cert.gamma, cert.nu_min, cert.nu
        ));
        ExitStatus::Infeasible
    } else {
        let t_max = cfg.forcing_t0.abs() + 2.0;
        let n = cfg.estimator_dissipativity_samples;
        let runs: [(
            u64,
            fn(&CertificateReport, &ForcingModel, usize, u64, f64) -> Result<DissipativityAudit>,
        ); 3] = [
            (STAGE_ZERO, audit_zero_dissipative),
            (STAGE_STRONG, audit_strong_dissipative),
            (STAGE_AJ, audit_aj_dissipative),
        ];
        for (stage, run) in runs {
            let seed = seeds::derive(cfg.seed, stage);
            out.manifest.seeds.insert(format!("audit_{stage}"), seed);
            let a = run(cert, &c.forcing, n, seed, t_max)?;
            let _ = writeln!(audits, "{}", dissipativity_row(&a));
            if !a.passed() {
                violations.push(format!(
                    "{}: {} violations, replay seed {} indices {:?}",
                    a.name, a.violations, a.seed, a.offending
                ));
            }
        }
        let hseed = seeds::derive(cfg.seed, STAGE_HOLDER);
        out.manifest.seeds.insert("holder".into(), hseed);
        let radius = cert.ball_radius().unwrap_or(cert.delta * 0.5);
        let u = random_field(
            &c.setup.grid,
            radius,
            NormKind::H1(cert.renorm()),
            hseed,
            1.5,
        )?;
        let h = holder_audit(
            &u,
            &c.forcing,
            cert.nu,
            &holder_times(cfg.forcing_t0),
            &cert.renorm(),
        )?;
        let _ = writeln!(audits, "{}", holder_row(&h, hseed));
        if !h.passed() {
            violations.push(format!(
                "holder: ratio {:e} > bound {:e}, seed {hseed}",
                h.worst_ratio, h.bound
            ));
        }
        if violations.is_empty() {
            ExitStatus::Success
        } else {
            ExitStatus::AuditViolation
        }
    };
    messages.extend(violations.iter().map(|v| format!("audit violation: {v}")));

    out.write("certificate.csv", &certificate_csv(cert))?;
    out.write("audits.csv", &audits)?;
    let mut report = cert.to_key_values();
    let _ = writeln!(
        report,
        "# ball radius u_plus/2 = {}",
        fmt_opt(cert.ball_radius())
    );
    let _ = writeln!(report, "# status = {:?}", status);
    for m in &messages {
        let _ = writeln!(report, "# {m}");
    }
    out.write("certificate.txt", &report)?;
    messages.insert(
        0,
        format!(
            "feasible={} gamma={:e} u_minus={} u_plus={} nu={:e} nu_min={:e}",
            cert.feasible,
            cert.gamma,
            fmt_opt(cert.u_minus),
            fmt_opt(cert.u_plus),
            cert.nu,
            cert.nu_min
        ),
    );
    out.finish(status, messages)
}

fn initial_state(
    cfg: &RunConfig,
    grid: &Arc<SpectralGrid>,
    p: &RenormParams,
    norm: f64,
    seed: u64,
) -> Result<VelocityField> {
    match &cfg.u0 {
        InitialState::Random => random_field(grid, norm, NormKind::H1(*p), seed, cfg.u0_decay),
        InitialState::Eigenmode => {
            let one = rustfft::num_complex::Complex64::new(1.0, 0.0);
            let zero = rustfft::num_complex::Complex64::new(0.0, 0.0);
            let e = VelocityField::single_mode(grid, [1, 0, 0], [zero, one, zero])?;
            normalize_to(&e, norm, NormKind::H1(*p))
        }
        InitialState::File(path) => {
            let u = read_snapshot(path)?;
            grid.check_same(u.grid())?;
            Ok(u)
        }
    }
}

/// `max |‖u(t)‖_H / ‖T(νt)u0‖_H - 1|` over the recorded rows: the Stokes-only
/// solution is known exactly.
fn stokes_decay_error(record: &TrajectoryRecord, u0: &VelocityField, nu: f64) -> Result<f64> {
    record.rows.iter().try_fold(0.0f64, |m, r| {
        let exact = norm_h(&semigroup_t(nu * r.t, u0)?);
        Ok(m.max((r.norm_h / exact - 1.0).abs()))
    })
}

struct TrajectoryResult {
    record: TrajectoryRecord,
    row: String,
    seed: u64,
}

fn run_trajectory(
    k: usize,
    cfg: &RunConfig,
    grid: &Arc<SpectralGrid>,
    f: &ForcingModel,
    cert: Option<&CertificateReport>,
    p: &RenormParams,
    nu: f64,
    stokes_only: bool,
) -> Result<TrajectoryResult> {
    let lambda1 = StokesSpectrum::from_grid(grid).lambda1();
    let t_end = cfg.t_end.unwrap_or(50.0 / (nu * lambda1));
    let radius = cert.and_then(CertificateReport::ball_radius);
    let norm = radius.map_or(cfg.u0_norm, |r| cfg.u0_fraction * r);
    let seed = seeds::derive(cfg.seed, STAGE_U0 + k as u64);
    let u0 = initial_state(cfg, grid, p, norm, seed)?;
    let sim = SimulationConfig {
        nu,
        t_end,
        dt: cfg.dt,
        sample_stride: cfg.sample_stride,
        checkpoint_stride: cfg.checkpoint_stride,
        mode: if stokes_only {
            NonlinearMode::Disabled
        } else {
            NonlinearMode::Full
        },
        invariance_tol: 1e-6,
    };
    let record = simulate(&u0, f, &sim, cert, p)?;
    let decay = if stokes_only && f.is_zero() {
        format!("{:e}", stokes_decay_error(&record, &u0, nu)?)
    } else {
        "NA".into()
    };
    let energy =
        energy_balance_audit(&record, nu).map_or_else(|_| "NA".into(), |r| format!("{r:e}"));
    let violation_t = match record.verdict {
        Verdict::Violated { t, .. } => format!("{t:e}"),
        _ => "NA".into(),
    };
    let last_t = record.rows.last().map_or(0.0, |r| r.t);
    let row = format!(
        "{k},{seed},{},{:e},{},{violation_t},{},{:e},{decay},{energy}",
        record.verdict.label(),
        record.sup_norm_h1(),
        fmt_opt(radius),
        record.steps,
        last_t
    );
    Ok(TrajectoryResult { record, row, seed })
}

pub fn cmd_simulate(cfg: &RunConfig, opts: &SimulateOptions) -> Result<CommandOutcome> {
    cfg.validate()?;
    let grid = SpectralGrid::new(cfg.grid_n, cfg.box_l)?;
    let mut out = Output::new("simulate", cfg)?;
    out.manifest.flags = opts.to_flags();

    let needs_cert = !opts.uncertified || matches!(cfg.nu, NuSpec::NuMinFactor(_));
    let cert = match (&opts.certificate, needs_cert) {
        (Some(path), _) => {
            let cert = read_certificate_csv(path)?;
            if cert.grid_n != cfg.grid_n || cert.box_l != cfg.box_l {
                return Err(Error::param(
                    "certificate",
                    "grid does not match the run config",
                ));
            }
            let nu = cfg.nu.resolve(cert.nu_min)?;
            if (nu - cert.nu).abs() > 1e-12 * cert.nu {
                return Err(Error::param(
                    "certificate",
                    format!("certificate nu {:e} differs from {nu:e}", cert.nu),
                ));
            }
            Some(cert)
        }
        (None, true) => {
            out.manifest
                .seeds
                .insert("estimate".into(), seeds::derive(cfg.seed, STAGE_ESTIMATE));
            Some(certification(cfg)?.certificate)
        }
        (None, false) => None,
    };
    let nu = match &cert {
        Some(c) => c.nu,
        None => cfg.nu.resolve(f64::NAN)?,
    };
    let claimed = if opts.uncertified {
        None
    } else {
        cert.as_ref()
    };
    if let Some(c) = claimed {
        if !c.feasible {
            return Err(Error::Infeasible {
                gamma: c.gamma,
                nu_min: c.nu_min,
            });
        }
    }
    let p = match &cert {
        Some(c) => c.renorm(),
        None => CertificateSetup::new(&grid, cfg.omega, cfg.r_mode)?.renorm,
    };
    let f = forcing_for(cfg, &grid, &p)?;
    out.manifest
        .seeds
        .insert("forcing".into(), cfg.forcing_seed);

    let results: Vec<TrajectoryResult> = (0..cfg.trajectories)
        .map(|k| run_trajectory(k, cfg, &grid, &f, claimed, &p, nu, opts.stokes_only))
        .collect::<Result<_>>()?;

    let mut verdicts = format!(
        "# schema: {VERDICTS_SCHEMA}\n{}\n",
        VERDICT_COLUMNS.join(",")
    );
    let mut messages = Vec::new();
    let mut status = ExitStatus::Success;
    for (k, r) in results.iter().enumerate() {
        out.manifest.seeds.insert(format!("u0_{k}"), r.seed);
        out.write(&format!("trajectory-{k}.csv"), &r.record.to_csv())?;
        for (j, (_, u)) in r.record.checkpoints.iter().enumerate() {
            let rel = format!("checkpoints/traj-{k}-{j:05}.snap");
            let path = out.dir.join(&rel);
            std::fs::create_dir_all(out.dir.join("checkpoints"))
                .map_err(|e| Error::io(&out.dir, e))?;
            write_snapshot(u, &path)?;
            out.manifest.record_file(&out.dir, &rel)?;
        }
        let _ = writeln!(verdicts, "{}", r.row);
        messages.push(format!("trajectory {k}: {}", r.record.verdict));
        if let Verdict::Violated { t, .. } = r.record.verdict {
            status = ExitStatus::InvarianceViolation;
            messages.push(format!(
                "invariance violated: trajectory {k}, u0 seed {}, t = {t:e}; replay with the manifest",
                r.seed
            ));
        }
    }
    out.write("verdicts.csv", &verdicts)?;
    if let Some(c) = &cert {
        out.write("certificate.csv", &certificate_csv(c))?;
    }
    out.finish(status, messages)
}

fn sweep_nu_cell(i: usize, nu: NuSpec, cfg: &RunConfig, base: &Certification) -> String {
    let cell = || -> Result<String> {
        let cert = certificate_at(nu, &base.forcing, &base.constants.constants, &base.setup)?;
        let (verdict, sup) = if cfg.sweep_simulate && cert.feasible {
            let r = run_trajectory(
                0,
                cfg,
                &base.setup.grid,
                &base.forcing,
                Some(&cert),
                &cert.renorm(),
                cert.nu,
                false,
            )?;
            (
                r.record.verdict.label().to_string(),
                format!("{:e}", r.record.sup_norm_h1()),
            )
        } else {
            ("NA".to_string(), "NA".to_string())
        };
        Ok(format!(
            "{i},{:e},{},{:e},{:e},{},{},{},{},{verdict},{sup},ok",
            cert.nu,
            cert.feasible,
            cert.gamma,
            cert.nu_min,
            fmt_opt(cert.u_minus),
            fmt_opt(cert.u_plus),
            fmt_opt(cert.alpha),
            fmt_opt(cert.a)
        ))
    };
    cell().unwrap_or_else(|e| {
        let msg = e.to_string().replace(',', ";");
        format!("{i},{nu},NA,NA,NA,NA,NA,NA,NA,NA,NA,error: {msg}")
    })
}

fn m_scaling_cell(i: usize, n: usize, cfg: &RunConfig) -> String {
    let cell = || -> Result<String> {
        let grid = SpectralGrid::new(n, cfg.box_l)?;
        let setup = CertificateSetup::new(&grid, cfg.omega, cfg.r_mode)?;
        let p = setup.renorm;
        let c1 = smoothing_constant(0.25, &p, &setup.spectrum)?;
        let c2 = smoothing_constant(1.0, &p, &setup.spectrum)?;
        Ok(format!(
            "{i},{n},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},ok",
            setup.spectrum.lambda1(),
            setup.spectrum.lambda_max(),
            p.omega,
            p.r,
            setup.r_hat,
            p.m,
            c1.value,
            c1.analytic,
            c2.value
        ))
    };
    cell().unwrap_or_else(|e| {
        let msg = e.to_string().replace(',', ";");
        format!("{i},{n},NA,NA,NA,NA,NA,NA,NA,NA,NA,error: {msg}")
    })
}

/// Runs the cells of one sweep in a pool of `workers` threads; each cell
/// writes its own file and the merged table keeps cell order.
fn run_cells(
    out: &mut Output,
    workers: usize,
    prefix: &str,
    schema: &str,
    columns: &[&str],
    n: usize,
    cell: impl Fn(usize) -> String + Sync,
) -> Result<(String, usize)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::param("sweep.workers", e.to_string()))?;
    let dir = out.dir.clone();
    let cell_dir = dir.join("cells");
    std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    let rels: Vec<String> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| -> Result<String> {
                let rel = format!("cells/{prefix}-{i:04}.csv");
                let path = dir.join(&rel);
                std::fs::write(&path, cell(i) + "\n").map_err(|e| Error::io(&path, e))?;
                Ok(rel)
            })
            .collect::<Result<_>>()
    })?;
    let mut merged = format!("# schema: {schema}\n{}\n", columns.join(","));
    let mut failed = 0;
    for rel in &rels {
        let path = dir.join(rel);
        let row = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if !row.trim_end().ends_with(",ok") {
            failed += 1;
        }
        merged.push_str(&row);
        out.manifest.record_file(&dir, rel)?;
    }
    out.write(&format!("{prefix}.csv"), &merged)?;
    Ok((merged, failed))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<CommandOutcome> {
    cfg.validate()?;
    if cfg.sweep_nu_grid.is_empty() && cfg.sweep_n_grid.is_empty() {
        return Err(Error::param(
            "sweep",
            "both sweep.nu_grid and sweep.n_grid are empty",
        ));
    }
    let mut out = Output::new("sweep", cfg)?;
    let mut messages = Vec::new();
    if !cfg.sweep_nu_grid.is_empty() {
        let base = certification(cfg)?;
        out.manifest
            .seeds
            .insert("estimate".into(), seeds::derive(cfg.seed, STAGE_ESTIMATE));
        let (_, failed) = run_cells(
            &mut out,
            cfg.sweep_workers,
            "sweep_nu",
            SWEEP_NU_SCHEMA,
            SWEEP_NU_COLUMNS,
            cfg.sweep_nu_grid.len(),
            |i| sweep_nu_cell(i, cfg.sweep_nu_grid[i], cfg, &base),
        )?;
        messages.push(format!(
            "nu sweep: {} cells, {failed} failed, nu_min = {:e}",
            cfg.sweep_nu_grid.len(),
            base.certificate.nu_min
        ));
    }
    if !cfg.sweep_n_grid.is_empty() {
        let (_, failed) = run_cells(
            &mut out,
            cfg.sweep_workers,
            "m_scaling",
            M_SCALING_SCHEMA,
            M_SCALING_COLUMNS,
            cfg.sweep_n_grid.len(),
            |i| m_scaling_cell(i, cfg.sweep_n_grid[i], cfg),
        )?;
        messages.push(format!(
            "m-scaling: {} cells, {failed} failed",
            cfg.sweep_n_grid.len()
        ));
    }
    out.finish(ExitStatus::Success, messages)
}

pub fn cmd_ou_validate(cfg: &RunConfig) -> Result<CommandOutcome> {
    cfg.validate()?;
    let mut out = Output::new("ou-validate", cfg)?;
    let seed = seeds::derive(cfg.seed, STAGE_OU);
    out.manifest.seeds.insert("ou".into(), seed);
    let a = ou_renorm_bound_audit(cfg.ou_gamma, cfg.ou_samples, cfg.ou_max_degree, seed)?;
    let constant = constant_invariance_residual(cfg.ou_max_degree, &[0.0, 0.5, 3.0])?;
    let generator = generator_residual(cfg.ou_max_degree.max(10));
    let mehler = mehler_residual(cfg.ou_max_degree_1d)?;
    let passed = a.passed() && constant == 0.0 && generator < 1e-10 && mehler < 1e-8;
    let row = format!(
        "{:e},{},{:e},{:e},{:e},{:e},{:e},{},{},{},{:e},{:e},{:e},{passed}",
        a.gamma,
        a.max_degree,
        a.m,
        a.c.value,
        a.c.analytic,
        a.bound,
        a.worst_ratio,
        a.samples,
        a.skipped,
        a.violations,
        constant,
        generator,
        mehler
    );
    out.write(
        "ou.csv",
        &format!("# schema: {OU_SCHEMA}\n{}\n{row}\n", OU_COLUMNS.join(",")),
    )?;
    let messages = vec![format!(
        "ou: worst ratio {:e} <= bound {:e} ({} violations); generator residual {generator:e}; mehler residual {mehler:e}",
        a.worst_ratio, a.bound, a.violations
    )];
    let status = if passed {
        ExitStatus::Success
    } else {
        ExitStatus::AuditViolation
    };
    out.finish(status, messages)
}

/// Dispatches a command by name, as recorded in a manifest.
pub fn run_command(
    command: &str,
    cfg: &RunConfig,
    flags: &BTreeMap<String, String>,
) -> Result<CommandOutcome> {
    match command {
        "certify" => cmd_certify(cfg),
        "simulate" => cmd_simulate(cfg, &SimulateOptions::from_flags(flags)),
        "sweep" => cmd_sweep(cfg),
        "ou-validate" => cmd_ou_validate(cfg),
        _ => Err(Error::parse(
            "manifest",
            format!("unknown command `{command}`"),
        )),
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub status: ExitStatus,
    pub rerun: CommandOutcome,
    /// `(file, matched)` for every file listed in the original manifest.
    pub files: Vec<(String, bool)>,
}

/// Reruns the command recorded in `manifest_path` into `out_dir` (default:
/// `replay/` next to the manifest) and compares every listed file by hash.
pub fn cmd_replay(manifest_path: &Path, out_dir: Option<&Path>) -> Result<ReplayOutcome> {
    let original = RunManifest::read(manifest_path)?;
    let mut cfg = original.config.clone();
    cfg.out_dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("replay"),
    };
    if cfg.out_dir.join(MANIFEST_FILE) == manifest_path {
        return Err(Error::param(
            "out_dir",
            "replay would overwrite the original run",
        ));
    }
    let rerun = run_command(&original.command, &cfg, &original.flags)?;
    let files: Vec<(String, bool)> = original
        .files
        .iter()
        .map(|(rel, hash)| (rel.clone(), rerun.manifest.files.get(rel) == Some(hash)))
        .collect();
    let status = if files.iter().all(|(_, ok)| *ok) {
        ExitStatus::Success
    } else {
        ExitStatus::AuditViolation
    };
    Ok(ReplayOutcome {
        status,
        rerun,
        files,
    })
}
