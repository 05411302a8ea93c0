//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Runs without the libtest harness so the lines show up in `cargo test` output.

use std::sync::Arc;
use std::time::Instant;

use nsrenorm::certificate::{
    audit_aj_dissipative, audit_strong_dissipative, build_certificate, certificate_scalars,
    holder_audit, self_consistent_constants, CertificateReport, CertificateSetup, EstimationBudget,
    NonlinearMode, RMode, SelfConsistentConstants,
};
use nsrenorm::error::Result;
use nsrenorm::evolution::{simulate, step_with, SimulationConfig, Verdict};
use nsrenorm::field::{
    leray_project, norm_h, norm_v, normalize_to, random_field, NormKind, RawField, SpectralGrid,
    VelocityField,
};
use nsrenorm::forcing::{ForcingKind, ForcingModel};
use nsrenorm::harness::{
    cmd_certify, cmd_ou_validate, cmd_replay, cmd_simulate, cmd_sweep, ExitStatus, NuSpec,
    RunConfig, SimulateOptions,
};
use nsrenorm::nonlinear::trilinear_b;
use nsrenorm::ou::{
    constant_invariance_residual, generator_residual, mehler_residual, ou_renorm_bound_audit,
};
use nsrenorm::stokes::{apply_a_power, norm_h1, renorm_apply_s, smoothing_constant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

const SEED: u64 = 20_241;

// tolerances
const DIV_TOL: f64 = 1e-12;
const IDEMPOTENCE_TOL: f64 = 1e-13;
const SKEW_TOL: f64 = 1e-10;
const DECAY_TOL: f64 = 1e-8;
const ORDER_SLACK: f64 = 0.1;
const NORM_EQ_TOL: f64 = 1e-12;
const VIETA_TOL: f64 = 1e-12;
const HOLDER_SLACK: f64 = 1e-8;
const INVARIANCE_TOL: f64 = 1e-6;
const OU_GENERATOR_TOL: f64 = 1e-10;
const OU_MEHLER_TOL: f64 = 1e-8;

type Outcome = Result<(bool, String)>;

fn raw_field(grid: &Arc<SpectralGrid>, rng: &mut ChaCha8Rng) -> RawField {
    let decay = rng.gen_range(0.0..3.0);
    RawField::from_fn(grid, |m| {
        let a = (m.norm_sq_lattice() as f64).powf(-0.5 * decay);
        let mut c = || Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * a;
        [c(), c(), c()]
    })
}

fn max_diff(a: &VelocityField, b: &VelocityField) -> f64 {
    a.coeffs()
        .iter()
        .zip(b.coeffs())
        .flat_map(|(x, y)| (0..3).map(move |i| (x[i] - y[i]).norm()))
        .fold(0.0, f64::max)
}

fn max_abs(a: &VelocityField) -> f64 {
    a.coeffs()
        .iter()
        .flat_map(|x| x.iter().map(|c| c.norm()))
        .fold(0.0, f64::max)
}

fn projection_suite() -> Outcome {
    let start = Instant::now();
    let g = SpectralGrid::unit(16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut worst_div, mut worst_idem) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let p = leray_project(&raw_field(&g, &mut rng))?;
        let pp = leray_project(&p.to_raw())?;
        worst_div = worst_div.max(p.divergence_residual());
        worst_idem = worst_idem.max(max_diff(&p, &pp) / max_abs(&p));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst_div < DIV_TOL && worst_idem <= IDEMPOTENCE_TOL && secs < 5.0,
        format!("N=16, 1000 fields: max div residual {worst_div:.2e}, idempotence {worst_idem:.2e}, {secs:.1} s"),
    ))
}

fn skew_symmetry() -> Outcome {
    let start = Instant::now();
    let g = SpectralGrid::unit(32)?;
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        rng.set_stream(i);
        let u = random_field(
            &g,
            rng.gen_range(0.1..10.0),
            NormKind::H,
            rng.gen(),
            rng.gen_range(0.0..3.0),
        )?;
        let v = random_field(
            &g,
            rng.gen_range(0.1..10.0),
            NormKind::H,
            rng.gen(),
            rng.gen_range(0.0..3.0),
        )?;
        let b = trilinear_b(&u, &v, &v)?;
        worst = worst.max(b.abs() / (norm_h(&u) * norm_h(&v) * norm_v(&v)));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= SKEW_TOL && secs < 60.0,
        format!(
            "N=32, 1000 triples: max |b(u,v,v)|/(|u|_H |v|_H |v|_V) = {worst:.2e}, {secs:.1} s"
        ),
    ))
}

fn integrate(u0: &VelocityField, nu: f64, t_end: f64, dt: f64) -> Result<VelocityField> {
    let f = ForcingModel::zero(u0.grid());
    let steps = (t_end / dt).round() as usize;
    let mut u = u0.clone();
    for k in 0..steps {
        u = step_with(&u, k as f64 * dt, dt, nu, &f, NonlinearMode::Full)?;
    }
    Ok(u)
}

fn stokes_decay_and_order() -> Outcome {
    let g = SpectralGrid::unit(16)?;
    let nu = 0.1;
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let u0 = VelocityField::single_mode(&g, [1, 0, 0], [zero, one, zero])?;
    let f = ForcingModel::zero(&g);
    let setup = CertificateSetup::new(&g, None, RMode::AutoRHat)?;
    let lambda1 = setup.spectrum.lambda1();
    let mut cfg = SimulationConfig::new(nu, 5.0 / (nu * lambda1));
    cfg.mode = NonlinearMode::Disabled;
    cfg.dt = Some(0.5);
    let rec = simulate(&u0, &f, &cfg, None, &setup.renorm)?;
    let h0 = norm_h(&u0);
    let decay_err = rec
        .rows
        .iter()
        .map(|r| (r.norm_h / (h0 * (-nu * lambda1 * r.t).exp()) - 1.0).abs())
        .fold(0.0, f64::max);

    // global error of the full scheme against a fine reference
    let g8 = SpectralGrid::unit(8)?;
    let u = random_field(&g8, 1.0, NormKind::H, SEED, 1.0)?.scale(1.0);
    let u = normalize_to(&u, 0.5 * (g8.volume()).sqrt(), NormKind::H)?;
    let (nu8, t_end) = (0.05, 1.0);
    let reference = integrate(&u, nu8, t_end, 1.0 / 640.0)?;
    let dts = [1.0 / 20.0, 1.0 / 40.0, 1.0 / 80.0];
    let errs: Vec<f64> = dts
        .iter()
        .map(|&dt| Ok(norm_h(&integrate(&u, nu8, t_end, dt)?.sub(&reference)?)))
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Ok((
        decay_err < DECAY_TOL && (slope - 2.0).abs() <= ORDER_SLACK,
        format!(
            "eigenmode decay rel err {decay_err:.2e} over 5 e-foldings; ETDRK2 order {slope:.3} (errors {:.2e} {:.2e} {:.2e})",
            errs[0], errs[1], errs[2]
        ),
    ))
}

fn renorm_equivalence() -> Outcome {
    let g = SpectralGrid::unit(16)?;
    let setup = CertificateSetup::new(&g, None, RMode::AutoRHat)?;
    let p = setup.renorm;
    let consts: Vec<_> = [0.25, 0.5, 1.0]
        .iter()
        .map(|&z| smoothing_constant(z, &p, &setup.spectrum))
        .collect::<Result<_>>()?;
    let mut violations = 0;
    let mut worst = [0.0f64; 3];
    for i in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 4);
        rng.set_stream(i);
        let u = random_field(
            &g,
            rng.gen_range(0.01..10.0),
            NormKind::H,
            rng.gen(),
            rng.gen_range(0.0..4.0),
        )?;
        let (h, s) = (norm_h(&u), norm_h(&renorm_apply_s(&p, &u)));
        if s > h * (1.0 + NORM_EQ_TOL) || h > p.m * s * (1.0 + NORM_EQ_TOL) {
            violations += 1;
        }
        let h1 = norm_h1(&p, &u);
        for (j, c) in consts.iter().enumerate() {
            let ratio = norm_h1(&p, &apply_a_power(c.z, &u)) / (c.operator_bound(&p) * h1);
            worst[j] = worst[j].max(ratio);
            if ratio > 1.0 + NORM_EQ_TOL {
                violations += 1;
            }
        }
    }
    Ok((
        violations == 0,
        format!(
            "N=16, r=r_hat={:.6}, M={:.3}: {violations} violations; worst smoothing ratios z=1/4 {:.4}, z=1/2 {:.4}, z=1 {:.4}",
            p.r, p.m, worst[0], worst[1], worst[2]
        ),
    ))
}

fn certificate_algebra() -> Outcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 5);
    for _ in 0..1000 {
        let nu = rng.gen_range(0.01..2.0);
        let f = rng.gen_range(0.0..1e-4);
        let (c, c1, m, r) = (
            rng.gen_range(1e-3..0.1),
            rng.gen_range(1e-3..0.1),
            rng.gen_range(1.0..200.0),
            rng.gen_range(1e-3..0.1),
        );
        let lambda1 = rng.gen_range(0.1..10.0);
        let s = certificate_scalars(nu, f, c, c1, m, r, lambda1)?;
        if let (Some(um), Some(up)) = (s.u_minus, s.u_plus) {
            if s.feasible {
                let sum = ((um + up) / s.delta - 1.0).abs();
                let target = s.delta * f / (nu * lambda1);
                let prod = (um * up - target).abs() / target.max(f64::MIN_POSITIVE);
                worst = worst.max(sum).max(if f > 0.0 { prod } else { 0.0 });
            }
        }
    }
    ok &= worst < VIETA_TOL;
    let zero = certificate_scalars(0.3, 0.0, 0.01, 0.02, 10.0, 0.05, 1.0)?;
    let zero_ok = zero.u_minus == Some(0.0) && zero.u_plus == Some(zero.delta);
    // c = c₁ = M = r = λ₁ = 1, ν = 2: γ = f
    let boundary = certificate_scalars(2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)?;
    let boundary_ok = boundary.gamma == 1.0 && !boundary.feasible;
    ok &= zero_ok && boundary_ok;
    Ok((
        ok,
        format!(
            "Vieta worst rel err {worst:.2e}; f=0 gives (0, delta) exactly: {zero_ok}; gamma=1 infeasible: {boundary_ok}"
        ),
    ))
}

fn bound_audits(sc: &SelfConsistentConstants) -> Outcome {
    let mut lines = Vec::new();
    for r in &sc.rounds {
        let s: Vec<String> = r
            .audits
            .iter()
            .map(|a| {
                format!(
                    "{} {}/{} worst {:.3e}",
                    a.name, a.violations, a.samples, a.worst_ratio
                )
            })
            .collect();
        lines.push(format!(
            "round {} (c={:.4e}): {}",
            r.round,
            r.c_before,
            s.join(", ")
        ));
    }
    Ok((
        sc.converged,
        format!(
            "N=16, final c={:.4e}; {}",
            sc.constants.c.value,
            lines.join("; ")
        ),
    ))
}

struct Certified {
    setup: CertificateSetup,
    forcing: ForcingModel,
    cert: CertificateReport,
}

fn certified(
    setup: &CertificateSetup,
    sc: &SelfConsistentConstants,
    forcing: ForcingModel,
    nu: Option<f64>,
) -> Result<Certified> {
    let probe = build_certificate(
        1.0,
        &forcing,
        &sc.constants,
        &setup.renorm,
        &setup.spectrum,
        setup.r_mode,
    )?;
    let nu = nu.unwrap_or(2.0 * probe.nu_min);
    let cert = build_certificate(
        nu,
        &forcing,
        &sc.constants,
        &setup.renorm,
        &setup.spectrum,
        setup.r_mode,
    )?;
    Ok(Certified {
        setup: setup.clone(),
        forcing,
        cert,
    })
}

fn steady(setup: &CertificateSetup, sc: &SelfConsistentConstants) -> Result<Certified> {
    let f = ForcingModel::from_seed(
        &setup.grid,
        ForcingKind::Steady,
        1e-6,
        0.5,
        0.0,
        7,
        2.0,
        &setup.renorm,
    )?;
    certified(setup, sc, f, None)
}

fn strong_dissipativity(c: &Certified) -> Outcome {
    let s = audit_strong_dissipative(&c.cert, &c.forcing, 120, SEED ^ 7, 5.0)?;
    let a = audit_aj_dissipative(&c.cert, &c.forcing, 120, SEED ^ 8, 5.0)?;
    let r_is_hat = c.cert.r == c.cert.r_hat;
    Ok((
        s.passed() && a.passed() && r_is_hat && s.samples >= 100,
        format!(
            "nu = 2 nu_min = {:.4e}: J pairs {}/{} violations (worst margin {:.3}), A pairs {}/{} (worst margin {:.3}), r = r_hat: {r_is_hat}",
            c.cert.nu, s.violations, s.samples, s.worst_margin, a.violations, a.samples, a.worst_margin
        ),
    ))
}

fn holder_propagation(setup: &CertificateSetup, sc: &SelfConsistentConstants) -> Outcome {
    let t0 = 1.0;
    let f = ForcingModel::from_seed(
        &setup.grid,
        ForcingKind::HolderFamily,
        1e-6,
        0.5,
        t0,
        11,
        2.0,
        &setup.renorm,
    )?;
    let c = certified(setup, sc, f, None)?;
    let mut times: Vec<f64> = (-20..=20).map(|k| t0 + 0.15 * k as f64).collect();
    times.extend([1e-6, 1e-4, 1e-2].iter().flat_map(|d| [t0 + d, t0 - d]));
    let mut worst = 0.0f64;
    let mut bound = 0.0;
    let mut ok = true;
    for k in 0..5u64 {
        let u = random_field(
            &setup.grid,
            c.cert.ball_radius().unwrap(),
            NormKind::H1(c.cert.renorm()),
            SEED + k,
            1.5,
        )?;
        let h = holder_audit(&u, &c.forcing, c.cert.nu, &times, &c.cert.renorm())?;
        worst = worst.max(h.worst_ratio);
        bound = h.bound;
        ok &= h.worst_ratio <= h.bound * (1.0 + HOLDER_SLACK);
    }
    Ok((
        ok,
        format!(
            "theta=0.5, d={:.1e}: worst ratio {worst:.6e} vs d/(nu lambda1) = {bound:.6e}",
            c.forcing.holder().unwrap().d
        ),
    ))
}

fn ball_invariance(setup: &CertificateSetup, sc: &SelfConsistentConstants) -> Outcome {
    let cases = [
        (
            "f=0",
            certified(setup, sc, ForcingModel::zero(&setup.grid), Some(0.05))?,
        ),
        ("steady f", steady(setup, sc)?),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, c) in &cases {
        let radius = c.cert.ball_radius().unwrap();
        let t_end = 50.0 / (c.cert.nu * c.cert.lambda1);
        let mut sup_ratio = 0.0f64;
        for k in 0..5u64 {
            let u0 = random_field(
                &c.setup.grid,
                radius,
                NormKind::H1(c.cert.renorm()),
                SEED + 100 + k,
                1.5,
            )?;
            let cfg = SimulationConfig::new(c.cert.nu, t_end);
            let rec = simulate(&u0, &c.forcing, &cfg, Some(&c.cert), &c.cert.renorm())?;
            sup_ratio = sup_ratio.max(rec.sup_norm_h1() / radius);
            if let Verdict::Violated { t, norm_h1, .. } = rec.verdict {
                ok = false;
                notes.push(format!(
                    "{name} seed {} VIOLATED at t={t:e} norm {norm_h1:e} (replay: u0 seed {})",
                    k,
                    SEED + 100 + k
                ));
            }
            ok &= rec.sup_norm_h1() <= radius * (1.0 + INVARIANCE_TOL);
        }
        notes.push(format!(
            "{name} (nu={:.3e}): 5 seeds, sup/radius = {sup_ratio:.9}",
            c.cert.nu
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn ou_suite() -> Outcome {
    let constant = constant_invariance_residual(8, &[0.0, 0.1, 1.0, 10.0])?;
    let generator = generator_residual(10);
    let mehler = mehler_residual(20)?;
    let a = ou_renorm_bound_audit(0.5, 1000, 8, SEED)?;
    Ok((
        constant == 0.0 && generator < OU_GENERATOR_TOL && mehler < OU_MEHLER_TOL && a.passed(),
        format!(
            "T(t)1 residual {constant:e}; generator residual {generator:.2e}; Mehler residual {mehler:.2e}; D^2 audit {}/{} violations, worst {:.3} <= {:.3}",
            a.violations, a.samples, a.worst_ratio, a.bound
        ),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| nsrenorm::error::Error::Io {
        path: std::env::temp_dir(),
        source: e,
    })?;
    let mut base = RunConfig::default();
    base.grid_n = 8;
    base.forcing_kind = ForcingKind::Steady;
    base.forcing_amplitude = 1e-6;
    base.nu = NuSpec::NuMinFactor(2.0);
    base.trajectories = 2;
    base.sweep_nu_grid = vec![NuSpec::NuMinFactor(0.5), NuSpec::NuMinFactor(2.0)];
    base.sweep_n_grid = vec![8, 16, 32];

    let with_dir = |name: &str| {
        let mut c = base.clone();
        c.out_dir = dir.path().join(name);
        c
    };
    let mut runs = Vec::new();
    let cert = cmd_certify(&with_dir("certify"))?;
    runs.push(("certify", cert.status, dir.path().join("certify")));
    let sim = cmd_simulate(
        &with_dir("simulate"),
        &SimulateOptions {
            certificate: Some(dir.path().join("certify/certificate.csv")),
            ..Default::default()
        },
    )?;
    runs.push(("simulate", sim.status, dir.path().join("simulate")));
    let mut stokes = with_dir("stokes");
    stokes.u0 = nsrenorm::harness::InitialState::Eigenmode;
    stokes.t_end = Some(10.0);
    let st = cmd_simulate(
        &stokes,
        &SimulateOptions {
            uncertified: true,
            stokes_only: true,
            ..Default::default()
        },
    )?;
    runs.push(("simulate-stokes", st.status, dir.path().join("stokes")));
    let sw = cmd_sweep(&with_dir("sweep"))?;
    runs.push(("sweep", sw.status, dir.path().join("sweep")));
    let ou = cmd_ou_validate(&with_dir("ou"))?;
    runs.push(("ou-validate", ou.status, dir.path().join("ou")));

    let mut ok = true;
    let mut notes = Vec::new();
    for (name, status, path) in runs {
        let r = cmd_replay(&path.join("manifest.txt"), None)?;
        let matched = r.files.iter().filter(|(_, m)| *m).count();
        ok &=
            status == ExitStatus::Success && r.status == ExitStatus::Success && !r.files.is_empty();
        notes.push(format!(
            "{name} exit {} {matched}/{} identical",
            status.code(),
            r.files.len()
        ));
    }
    Ok((ok, notes.join(", ")))
}

fn main() {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failures += 1;
        }
        println!(
            "{} criterion {n:>2} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    };

    report(1, "projection/divergence", projection_suite());
    report(2, "trilinear skew-symmetry", skew_symmetry());
    report(3, "Stokes decay and scheme order", stokes_decay_and_order());
    report(4, "renorm equivalence and smoothing", renorm_equivalence());
    report(5, "certificate algebra", certificate_algebra());

    let shared = (|| -> Result<(CertificateSetup, SelfConsistentConstants)> {
        let g = SpectralGrid::unit(16)?;
        let setup = CertificateSetup::new(&g, None, RMode::AutoRHat)?;
        let budget = EstimationBudget {
            samples: 1000,
            hill_climb_steps: 200,
            audit_samples: 1000,
            max_rounds: 5,
        };
        let sc = self_consistent_constants(&g, &setup.renorm, &setup.spectrum, &budget, SEED)?;
        Ok((setup, sc))
    })();
    match shared {
        Ok((setup, sc)) => {
            report(6, "trilinear and renormed bounds", bound_audits(&sc));
            report(
                7,
                "strong dissipativity",
                steady(&setup, &sc).and_then(|c| strong_dissipativity(&c)),
            );
            report(8, "Hoelder propagation", holder_propagation(&setup, &sc));
            report(9, "ball invariance", ball_invariance(&setup, &sc));
        }
        Err(e) => {
            for (n, name) in [
                (6, "trilinear and renormed bounds"),
                (7, "strong dissipativity"),
                (8, "Hoelder propagation"),
                (9, "ball invariance"),
            ] {
                report(
                    n,
                    name,
                    Ok((false, format!("constant estimation failed: {e}"))),
                );
            }
        }
    }
    report(10, "Ornstein-Uhlenbeck suite", ou_suite());
    report(11, "determinism (replay)", determinism());

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance criteria passed");
}
