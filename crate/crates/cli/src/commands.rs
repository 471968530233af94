use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use comportal_core::canonical::{canonicalize, check_canonical};
use comportal_core::certificate::{
    certify_via_canonical_detailed, family_membership, theorem1_certificate, verify_certificate, FamilyParams,
    SigmaPolicy,
};
use comportal_core::graph::{build_graph, check_outflow_connected, layer_decomposition, minimal_traps};
use comportal_core::matrix::{validate_compartmental, CompartmentalMatrix, SquareMatrix};
use comportal_core::ode::{integrate, IntegrateOptions, Trajectory};
use comportal_core::sampling::{unit_points, SamplePlan};
use comportal_core::stability::{
    certify_ies, certify_null_es, classify_bounded_coefficients, BoundsDescription, EsReport, IesOptions, IesReport,
    IesVerdict,
};
use comportal_core::system::{Dynamics, LinearSystem, SystemDescription};
use comportal_core::trm::{
    build_trm, check_ies_conditions, max_epsilon, run_estimator, EstimatorOptions, Signal, TimeSeries, TrmConfig,
};
use comportal_core::{Error, Expression, DEFAULT_STRICT_TOL};

use crate::render::{matrix_rows, num, opt, set, vector, yes_no, Text};
use crate::{CertifyArgs, Cli, Command, EstimateArgs, Global, IesArgs, SimulateArgs, TrmArgs, TrmModel};

const SIMULATE_HORIZON: f64 = 10.0;
const TRM_HORIZON: f64 = 100.0;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => crate::EXIT_USAGE,
            CliError::Core(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub struct Outcome {
    pub report: Value,
    pub human: String,
    pub exit: u8,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    if !(g.tol >= 0.0 && g.tol.is_finite()) {
        return Err(CliError::Usage(format!("--tol must be finite and >= 0, got {}", g.tol)));
    }
    if g.horizon.is_some_and(|h| !(h >= 0.0 && h.is_finite())) {
        return Err(CliError::Usage("--horizon must be finite and >= 0".into()));
    }
    if g.step.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
        return Err(CliError::Usage("--step must be positive".into()));
    }
    if let Some(dir) = &g.out {
        std::fs::create_dir_all(dir)?;
    }
    let out = match &cli.command {
        Command::Check { matrix, minimal_traps } => check(g, matrix, *minimal_traps)?,
        Command::Canonicalize { matrix } => canonical(g, matrix)?,
        Command::Certify(a) => certify(g, a)?,
        Command::Simulate(a) => simulate(g, a)?,
        Command::Ies(a) => ies(g, a)?,
        Command::Trm(a) => trm(g, a)?,
        Command::Estimate(a) => estimate(g, a)?,
    };
    if let Some(dir) = &g.out {
        let text = serde_json::to_string_pretty(&out.report).map_err(Error::from)?;
        std::fs::write(dir.join("report.json"), text + "\n")?;
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Core(Error::Input(format!("cannot read {}: {e}", path.display()))))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(Error::Input(format!("{}: {e}", path.display()))))
}

fn read_matrix(g: &Global, path: &Path) -> Result<CompartmentalMatrix> {
    let m: SquareMatrix = read_json(path)?;
    Ok(validate_compartmental(m, g.tol)?)
}

/// `{"schema": "comportal.<kind>/1", "seed": ..., <body fields>}`.
fn report(kind: &str, g: &Global, body: impl Serialize) -> Value {
    let mut map = Map::new();
    map.insert("schema".into(), json!(format!("comportal.{kind}/1")));
    map.insert("seed".into(), json!(g.seed));
    match serde_json::to_value(body).expect("reports serialize") {
        Value::Object(fields) => map.extend(fields),
        other => {
            map.insert("result".into(), other);
        }
    }
    Value::Object(map)
}

fn plan(g: &Global) -> SamplePlan {
    SamplePlan::new(g.samples, g.seed)
}

fn integrate_opts(g: &Global) -> IntegrateOptions {
    IntegrateOptions {
        step: g.step,
        ..IntegrateOptions::default()
    }
}

fn out_dir(g: &Global) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write_trajectory(path: &Path, tr: &Trajectory) -> Result<()> {
    tr.write_csv(BufWriter::new(File::create(path)?))?;
    Ok(())
}

fn sigma_policy(name: &str) -> Result<SigmaPolicy> {
    match name {
        "ones" => Ok(SigmaPolicy::Ones),
        "inverse-a" => Ok(SigmaPolicy::InverseA),
        other => Err(CliError::Usage(format!("unknown --sigma `{other}`, expected `ones` or `inverse-a`"))),
    }
}

fn check(g: &Global, path: &Path, with_minimal: bool) -> Result<Outcome> {
    let m: SquareMatrix = read_json(path)?;
    let n = m.n();
    let mut t = Text::new();
    t.kv("matrix", format!("{n}x{n}"));
    let f = match validate_compartmental(m, g.tol) {
        Ok(f) => f,
        Err(Error::NotCompartmental(rep)) => {
            t.kv("compartmental", "no");
            for v in &rep.violations {
                t.line(format!("  {}", serde_json::to_string(v).expect("serializes")));
            }
            return Ok(Outcome {
                report: report(
                    "check",
                    g,
                    json!({"n": n, "compartmental": false, "violations": rep.violations}),
                ),
                human: t.finish(),
                exit: 3,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let graph = build_graph(&f, DEFAULT_STRICT_TOL);
    let trap = check_outflow_connected(&graph);
    let canon = check_canonical(&f);
    let layers = layer_decomposition(&graph).ok();
    let minimal = with_minimal.then(|| minimal_traps(&graph));
    t.kv("compartmental", "yes");
    t.kv("column sums", vector(f.column_sums()));
    t.kv("outflow vertices", set(&graph.outflow_vertices()));
    t.kv("outflow connected", yes_no(trap.is_outflow_connected));
    if let Some(k) = &trap.trap {
        t.kv("maximal trap", set(k));
    }
    if let Some(ms) = &minimal {
        t.kv("minimal traps", ms.iter().map(|k| set(k)).collect::<Vec<_>>().join(" "));
    }
    let canon_text = match (&canon.l, canon.is_canonical) {
        (Some(l), true) => format!("yes (l = {l})"),
        _ => format!("no ({})", canon.reason.clone().unwrap_or_default()),
    };
    t.kv("canonical", canon_text);
    if let Some(ld) = &layers {
        t.kv("layers", ld.layers.iter().map(|k| set(k)).collect::<Vec<_>>().join(" "));
    }
    let mut body = json!({
        "n": n,
        "compartmental": true,
        "entries": f.matrix().rows(),
        "outflow_vertices": graph.outflow_vertices().iter().map(|i| i + 1).collect::<Vec<_>>(),
        "outflow_connected": trap.is_outflow_connected,
        "trap": trap.trap.as_ref().map(|k| k.iter().map(|i| i + 1).collect::<Vec<_>>()),
        "canonical": canon,
        "layers": layers,
    });
    if let Some(ms) = minimal {
        body["minimal_traps"] = json!(ms.iter().map(|k| k.iter().map(|i| i + 1).collect::<Vec<_>>()).collect::<Vec<_>>());
    }
    Ok(Outcome {
        report: report("check", g, body),
        human: t.finish(),
        exit: if trap.is_outflow_connected { 0 } else { 3 },
    })
}

fn canonical(g: &Global, path: &Path) -> Result<Outcome> {
    let f = read_matrix(g, path)?;
    let mut t = Text::new();
    match canonicalize(&f) {
        Ok(c) => {
            t.kv("r", vector(&c.r.to_one_based().iter().map(|&i| i as f64).collect::<Vec<_>>()));
            t.kv("l", c.l());
            for (k, row) in matrix_rows(&c.a.matrix().rows()).iter().enumerate() {
                t.kv(if k == 0 { "A" } else { "" }, row);
            }
            Ok(Outcome {
                report: report("canonicalization", g, &c),
                human: t.finish(),
                exit: 0,
            })
        }
        Err(Error::NotOutflowConnected(trap)) => {
            t.kv("outflow connected", "no");
            t.kv("maximal trap", set(trap.trap.as_deref().unwrap_or(&[])));
            Ok(Outcome {
                report: report("canonicalization", g, json!({"outflow_connected": false, "trap": trap.trap.map(|k| k.iter().map(|i| i + 1).collect::<Vec<_>>())})),
                human: t.finish(),
                exit: 3,
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn margin_table(t: &mut Text, margins: &[f64]) {
    let rows: Vec<Vec<String>> = margins
        .iter()
        .enumerate()
        .map(|(k, m)| vec![(k + 1).to_string(), format!("{m:.6e}"), yes_no(*m >= 0.0).to_string()])
        .collect();
    t.table(&["column", "margin", "ok"], &rows);
}

fn es_report_text(rep: &EsReport) -> String {
    let mut t = Text::new();
    t.kv("verdict", format!("{:?}", rep.verdict));
    t.kv("basis", rep.basis);
    if let Some(c) = &rep.certificate {
        t.kv("v", vector(&c.v));
        t.kv("lambda", num(c.lambda));
        t.kv("gamma", num(c.gamma));
    }
    if let Some(f) = &rep.family {
        t.kv("family", format!("a = {}, b = {}, l = {}", vector(&f.a), f.b, f.l));
    }
    if let Some(k) = &rep.trap {
        t.kv("trap", set(k));
    }
    if !rep.minimal_traps.is_empty() {
        t.kv("minimal traps", rep.minimal_traps.iter().map(|k| set(k)).collect::<Vec<_>>().join(" "));
    }
    t.kv("samples", rep.samples);
    t.kv("worst membership", opt(rep.worst_membership_margin));
    t.kv("worst certificate", opt(rep.worst_certificate_margin));
    if let Some(w) = &rep.witness {
        t.kv("witness", format!("t = {}, x = {}", w.t, vector(&w.x)));
    }
    for l in &rep.assumptions_log {
        t.line(format!("note: {l}"));
    }
    t.finish()
}

fn certify(g: &Global, a: &CertifyArgs) -> Result<Outcome> {
    let sigma = sigma_policy(&a.sigma)?;
    let horizon = g.horizon.unwrap_or(0.0);
    if let Some(bpath) = &a.bounds {
        let bounds = read_json::<BoundsDescription>(bpath)?.build()?;
        let sys = match &a.system {
            Some(p) => Some(read_json::<SystemDescription>(p)?.build()?),
            None => None,
        };
        let rep = classify_bounded_coefficients(
            sys.as_ref().map(|s| s as &dyn comportal_core::CompartmentalSystem),
            &bounds,
            &plan(g),
            horizon,
        )?;
        return Ok(Outcome {
            human: es_report_text(&rep),
            exit: rep.verdict.exit_code() as u8,
            report: report("es", g, &rep),
        });
    }
    let family: Option<FamilyParams> = match &a.family {
        Some(p) => {
            let f: FamilyParams = read_json(p)?;
            Some(FamilyParams::new(f.n, f.l, f.a, f.b)?)
        }
        None => None,
    };
    if let Some(spath) = &a.system {
        let fam = family.ok_or_else(|| CliError::Usage("--system needs --family (or --bounds)".into()))?;
        let sys = read_json::<SystemDescription>(spath)?.build()?;
        let rep = certify_null_es(&sys, &fam, &sigma, &plan(g), horizon)?;
        return Ok(Outcome {
            human: es_report_text(&rep),
            exit: rep.verdict.exit_code() as u8,
            report: report("es", g, &rep),
        });
    }
    let mut t = Text::new();
    match (&a.matrix, family) {
        (None, None) => Err(CliError::Usage("certify needs a matrix, --family, --system or --bounds".into())),
        (None, Some(fam)) => {
            let cert = theorem1_certificate(&fam, &sigma.sigma(&fam))?;
            t.kv("family", format!("a = {}, b = {}, l = {}", vector(&fam.a), fam.b, fam.l));
            t.kv("v", vector(&cert.v));
            t.kv("lambda", num(cert.lambda));
            t.kv("gamma", num(cert.gamma));
            Ok(Outcome {
                report: report("certificate", g, json!({"verdict": "certified-es", "family": fam, "certificate": cert})),
                human: t.finish(),
                exit: 0,
            })
        }
        (Some(mpath), Some(fam)) => {
            let f = read_matrix(g, mpath)?;
            let mem = family_membership(&f, &fam, g.tol.max(DEFAULT_STRICT_TOL));
            t.kv("member", yes_no(mem.is_member));
            if !mem.is_member {
                for v in &mem.violations {
                    t.line(format!("  {}", serde_json::to_string(v).expect("serializes")));
                }
                return Ok(Outcome {
                    report: report("certificate", g, json!({"verdict": "inconclusive", "family": fam, "membership": mem})),
                    human: t.finish(),
                    exit: 2,
                });
            }
            let cert = theorem1_certificate(&fam, &sigma.sigma(&fam))?;
            let ver = verify_certificate(&f, &cert.normalized(), 1e-9);
            t.kv("v", vector(&cert.v));
            t.kv("lambda", num(cert.lambda));
            margin_table(&mut t, &ver.margins);
            let verdict = if ver.holds { "certified-es" } else { "inconclusive" };
            Ok(Outcome {
                report: report(
                    "certificate",
                    g,
                    json!({"verdict": verdict, "family": fam, "membership": mem, "certificate": cert, "verification": ver}),
                ),
                human: t.finish(),
                exit: if ver.holds { 0 } else { 2 },
            })
        }
        (Some(mpath), None) => {
            let f = read_matrix(g, mpath)?;
            match certify_via_canonical_detailed(&f, &sigma) {
                Ok(cc) => {
                    let ver = verify_certificate(&f, &cc.certificate.normalized(), 1e-9);
                    t.kv("v", vector(&cc.certificate.v));
                    t.kv("lambda", num(cc.certificate.lambda));
                    t.kv("gamma", num(cc.certificate.gamma));
                    t.kv("r", vector(&cc.canonicalization.r.to_one_based().iter().map(|&i| i as f64).collect::<Vec<_>>()));
                    t.kv("family", format!("a = {}, b = {}, l = {}", vector(&cc.family.a), cc.family.b, cc.family.l));
                    margin_table(&mut t, &ver.margins);
                    let verdict = if ver.holds { "certified-es" } else { "inconclusive" };
                    Ok(Outcome {
                        report: report(
                            "certificate",
                            g,
                            json!({
                                "verdict": verdict,
                                "certificate": cc.certificate,
                                "canonicalization": cc.canonicalization,
                                "family": cc.family,
                                "verification": ver,
                            }),
                        ),
                        human: t.finish(),
                        exit: if ver.holds { 0 } else { 2 },
                    })
                }
                Err(Error::NotOutflowConnected(trap)) => {
                    let k: Vec<usize> = trap.trap.clone().unwrap_or_default();
                    t.kv("verdict", "certified-not-as");
                    t.kv("trap", set(&k));
                    Ok(Outcome {
                        report: report(
                            "certificate",
                            g,
                            json!({"verdict": "certified-not-as", "trap": k.iter().map(|i| i + 1).collect::<Vec<_>>()}),
                        ),
                        human: t.finish(),
                        exit: 3,
                    })
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

/// Seeded point of the box, with unbounded sides truncated to width 1.
fn seeded_point(lower: &[f64], upper: &[f64], seed: u64) -> Vec<f64> {
    let u = &unit_points(lower.len(), 1, seed)[0];
    lower
        .iter()
        .zip(upper)
        .zip(u)
        .map(|((l, h), u)| {
            let w = if h.is_finite() { h - l } else { 1.0 };
            l + u * w
        })
        .collect()
}

fn check_x0(x0: &[f64], n: usize) -> Result<()> {
    if x0.len() != n {
        return Err(CliError::Usage(format!("--x0 has {} values, the system has {n}", x0.len())));
    }
    Ok(())
}

fn simulate(g: &Global, a: &SimulateArgs) -> Result<Outcome> {
    let raw: Value = read_json(&a.input)?;
    let (sys, kind): (Box<dyn Dynamics>, &str) = if raw.get("entries").is_some() {
        let m: SquareMatrix = serde_json::from_value(raw).map_err(|e| Error::Input(e.to_string()))?;
        (Box::new(LinearSystem::new(validate_compartmental(m, g.tol)?)), "matrix")
    } else {
        let d: SystemDescription = serde_json::from_value(raw).map_err(|e| Error::Input(e.to_string()))?;
        (Box::new(d.build()?), "system")
    };
    let space = sys.space();
    let x0 = match &a.x0 {
        Some(x) => x.clone(),
        None => seeded_point(&space.lower, &space.upper, g.seed),
    };
    check_x0(&x0, sys.dim())?;
    let horizon = g.horizon.unwrap_or(SIMULATE_HORIZON);
    let tr = integrate(sys.as_ref(), &x0, 0.0, horizon, &integrate_opts(g))?;
    let path = out_dir(g).join("trajectory.csv");
    write_trajectory(&path, &tr)?;
    let mut t = Text::new();
    t.kv("input", kind);
    t.kv("x0", vector(&x0));
    t.kv("horizon", horizon);
    t.kv("step", tr.meta.step);
    t.kv("points", tr.len());
    t.kv("final state", vector(tr.last()));
    t.kv("projections", tr.meta.projections.len());
    t.kv("trajectory", path.display());
    Ok(Outcome {
        report: report(
            "trajectory",
            g,
            json!({
                "input": kind,
                "x0": x0,
                "horizon": horizon,
                "points": tr.len(),
                "final_state": tr.last(),
                "meta": tr.meta,
                "csv": path.display().to_string(),
            }),
        ),
        human: t.finish(),
        exit: 0,
    })
}

fn ies_options(g: &Global, tau: Option<f64>, sigma: SigmaPolicy, horizon: f64) -> IesOptions {
    let mut o = IesOptions {
        tau,
        horizon,
        plan: plan(g),
        sigma,
        check_tol: g.tol,
        ..IesOptions::default()
    };
    o.absorbing.integrate = integrate_opts(g);
    o
}

fn ies_text(t: &mut Text, rep: &IesReport) {
    t.kv("verdict", format!("{:?}", rep.verdict));
    t.kv("basis", rep.basis);
    if let Some(stage) = rep.stage {
        t.kv("stopped at", stage);
    }
    if let Some(r) = &rep.reason {
        t.kv("reason", r);
    }
    t.kv("s", vector(&rep.s));
    t.kv("tau", rep.tau);
    if let Some(f) = &rep.family {
        t.kv("family", format!("a = {}, l = {}", vector(&f.a), f.l));
        t.kv("b = b_F + b~", format!("{} = {} + {}", f.b, opt(rep.b_f), opt(rep.b_tilde)));
    }
    if let Some(p) = &rep.permutation {
        t.kv("r", vector(&p.to_one_based().iter().map(|&i| i as f64).collect::<Vec<_>>()));
    }
    if let Some(c) = &rep.certificate {
        t.kv("v", vector(&c.v));
    }
    t.kv("lambda", opt(rep.lambda.map(num)));
    t.kv("gamma", opt(rep.gamma.map(num)));
    if let Some(v) = &rep.verification {
        t.kv("pairs checked", v.samples);
        t.kv("worst membership", format!("{:.3e}", v.worst_membership_margin));
        t.kv("worst certificate", format!("{:.3e}", v.worst_certificate_margin));
        t.kv("worst D residual", format!("{:.3e}", v.worst_residual));
    }
    for l in &rep.log {
        t.line(format!("note: {l}"));
    }
}

fn ies(g: &Global, a: &IesArgs) -> Result<Outcome> {
    let sys = read_json::<SystemDescription>(&a.system)?.build()?;
    if a.tau.is_some_and(|t| t.is_nan() || t <= 0.0) {
        return Err(CliError::Usage("--tau must be positive".into()));
    }
    let rep = certify_ies(&sys, &ies_options(g, a.tau, sigma_policy(&a.sigma)?, g.horizon.unwrap_or(0.0)))?;
    let mut t = Text::new();
    ies_text(&mut t, &rep);
    Ok(Outcome {
        exit: rep.verdict.exit_code() as u8,
        report: report("ies", g, &rep),
        human: t.finish(),
    })
}

fn parse_signal(src: &str, constants: &BTreeMap<String, f64>) -> Result<Signal> {
    let p = Path::new(src);
    if p.is_file() {
        return Ok(Signal::Series(TimeSeries::from_path(p)?));
    }
    Ok(Signal::parse(src, constants)?)
}

fn trm_config(m: &TrmModel, horizon: f64) -> Result<TrmConfig> {
    let mut constants = BTreeMap::from([("vf".to_string(), 1.0)]);
    for c in &m.constants {
        let (name, value) = c
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--const expects NAME=VALUE, got `{c}`")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--const {name}: `{value}` is not a number")))?;
        constants.insert(name.trim().to_string(), value);
    }
    let mut resolved = constants.clone();
    resolved.insert("rho_max".into(), m.rho_max);
    Ok(TrmConfig {
        n: m.n,
        rho_max: m.rho_max,
        h: Expression::parse(&m.h).map_err(Error::from)?,
        boundary_in: parse_signal(&m.boundary_in, &resolved)?,
        boundary_out: parse_signal(&m.boundary_out, &resolved)?,
        constants,
        h_lipschitz: m.h_lipschitz,
        horizon,
    })
}

fn trm(g: &Global, a: &TrmArgs) -> Result<Outcome> {
    let horizon = g.horizon.unwrap_or(TRM_HORIZON);
    let cfg = trm_config(&a.model, horizon)?;
    let sys = build_trm(&cfg)?;
    let eps = match a.model.epsilon {
        Some(e) => e,
        None => max_epsilon(&cfg)?,
    };
    let cond = check_ies_conditions(&cfg, eps)?;
    let rep = if cond.passed {
        Some(certify_ies(&sys, &ies_options(g, None, SigmaPolicy::Ones, horizon))?)
    } else {
        None
    };
    let x0 = match &a.x0 {
        Some(x) => x.clone(),
        None => seeded_point(&vec![0.0; cfg.n], &vec![cfg.rho_max; cfg.n], g.seed),
    };
    check_x0(&x0, cfg.n)?;
    let tr = integrate(&sys, &x0, 0.0, horizon, &integrate_opts(g))?;
    let path = out_dir(g).join("trm_trajectory.csv");
    write_trajectory(&path, &tr)?;

    let verdict = rep.as_ref().map_or(IesVerdict::Inconclusive, |r| r.verdict);
    let mut t = Text::new();
    t.kv("segments", cfg.n);
    t.kv("h", &a.model.h);
    t.kv("conditions", if cond.passed { "hold at samples".to_string() } else { cond.detail.join("; ") });
    t.kv("a_n", opt(cond.a_n));
    match &rep {
        Some(r) => ies_text(&mut t, r),
        None => {
            t.kv("verdict", format!("{verdict:?}"));
        }
    }
    t.kv("trajectory", path.display());
    Ok(Outcome {
        report: report(
            "trm",
            g,
            json!({
                "n": cfg.n,
                "rho_max": cfg.rho_max,
                "h": a.model.h,
                "conditions": cond,
                "verdict": verdict,
                "ies": rep,
                "x0": x0,
                "horizon": horizon,
                "csv": path.display().to_string(),
            }),
        ),
        human: t.finish(),
        exit: verdict.exit_code() as u8,
    })
}

fn estimate(g: &Global, a: &EstimateArgs) -> Result<Outcome> {
    let horizon = g.horizon.unwrap_or(TRM_HORIZON);
    let cfg = trm_config(&a.model, horizon)?;
    if let Some(x) = &a.estimate_init {
        check_x0(x, cfg.n)?;
    }
    let run = run_estimator(
        &cfg,
        &EstimatorOptions {
            truth_seed: g.seed,
            estimate_init: a.estimate_init.clone(),
            horizon,
            integrate: integrate_opts(g),
            ies: ies_options(g, None, SigmaPolicy::Ones, horizon),
            certify: true,
            epsilon: a.model.epsilon,
        },
    )?;
    let dir = out_dir(g);
    let files = [
        dir.join("estimate_error.csv"),
        dir.join("estimate_error.gp"),
        dir.join("estimate_truth.csv"),
        dir.join("estimate_estimate.csv"),
    ];
    run.write_csv(BufWriter::new(File::create(&files[0])?))?;
    run.error.write_gnuplot(BufWriter::new(File::create(&files[1])?))?;
    write_trajectory(&files[2], &run.truth)?;
    write_trajectory(&files[3], &run.estimate)?;
    let crossing = run.crossing_time(1e-3);
    let bound = run.certified.map(|c| c.time_bound(1e-3));
    let mut t = Text::new();
    t.kv("truth seed", run.truth_seed);
    t.kv("truth x0", vector(&run.truth_init));
    t.kv("estimate x0", vector(&run.estimate_init));
    t.kv("initial error", run.initial_error());
    t.kv("final error", opt(run.error.values.last().map(|&e| num(e))));
    t.kv("1e-3 reached at", opt(crossing));
    if let Some(c) = run.certified {
        t.kv("lambda", num(c.lambda));
        t.kv("gamma", num(c.gamma));
        t.kv("certified bound", opt(bound.map(num)));
    }
    for w in &run.warnings {
        t.line(format!("warning: {w}"));
    }
    for f in &files {
        t.kv("wrote", f.display());
    }
    let exit = if run.certified.is_some() { 0 } else { 2 };
    Ok(Outcome {
        report: report(
            "estimator",
            g,
            json!({
                "run": run,
                "crossing_time_1e-3": crossing,
                "certified_time_bound_1e-3": bound,
                "files": files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>(),
            }),
        ),
        human: t.finish(),
        exit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_names() {
        assert!(matches!(sigma_policy("ones"), Ok(SigmaPolicy::Ones)));
        assert!(matches!(sigma_policy("inverse-a"), Ok(SigmaPolicy::InverseA)));
        assert!(matches!(sigma_policy("twos"), Err(CliError::Usage(_))));
    }

    #[test]
    fn seeded_point_is_inside_and_reproducible() {
        let lo = [0.0, 1.0, -1.0];
        let hi = [1.0, 3.0, f64::INFINITY];
        let p = seeded_point(&lo, &hi, 7);
        assert_eq!(p, seeded_point(&lo, &hi, 7));
        assert!((0.0..=1.0).contains(&p[0]));
        assert!((1.0..=3.0).contains(&p[1]));
        assert!((-1.0..=0.0).contains(&p[2]));
    }

    #[test]
    fn const_flags_are_parsed() {
        let mut m = TrmModel {
            h: "vf * (1 - x / rho_max)".into(),
            n: 3,
            rho_max: 2.0,
            constants: vec!["vf=3".into()],
            boundary_in: "0.1 * vf".into(),
            boundary_out: "1".into(),
            h_lipschitz: None,
            epsilon: None,
        };
        let cfg = trm_config(&m, 5.0).unwrap();
        assert_eq!(cfg.constants["vf"], 3.0);
        assert!((cfg.boundary_in.eval(0.0, 2.0).unwrap() - 0.3).abs() < 1e-15);
        m.constants = vec!["vf".into()];
        assert!(matches!(trm_config(&m, 5.0), Err(CliError::Usage(_))));
    }
}
