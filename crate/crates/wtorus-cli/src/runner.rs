//! Command execution: builds library objects from validated configs, runs
//! the requested study, and writes deterministic CSV/JSON artifacts plus a
//! manifest describing the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use wtorus::elliptic::{solve_poisson, solve_resolvent, DiagonalField};
use wtorus::exclusion::{
    replica_observables, solve_hydrodynamic, DensityProfile, HydroReport, HydroRow, RateModel,
    TimeStepping,
};
use wtorus::homogenize::{
    build_field, fit_effective_coefficient, predicted_homogenized_matrix, run_h_convergence_study,
    CoefficientSpec, ContinuousDual, ContinuousFn, HomogenizationResult, HomogenizeError,
    HomogenizedAxis, HomogenizedMatrix, RandomEnvironmentSpec, StudyReference,
};
use wtorus::measure::WProduct;
use wtorus::mesh::{inner_l2, MeshFunction, TorusGrid};

use crate::config::{
    build_weight, continuous_fn, eval_terms, terms_label, validate_terms, CoefficientConfig,
    ConvergeCommand, DataTerm, HomogenizeCommand, HydroCommand, Manifest, ModeConfig,
    RandomHomogenizeCommand, ReferenceConfig, SolveCommand, SteppingConfig,
};
use crate::error::{config_err, numeric_err, CliError};

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Upper bound on lattice sites per problem; keeps configs from requesting
/// grids that could not be stored anyway.
const MAX_SITES: usize = 1 << 26;

pub struct RunOutcome {
    pub artifacts: Vec<String>,
    pub out_dir: PathBuf,
}

/// Runs one command from its raw JSON config, writes its artifacts and the
/// manifest into `out_dir`, and reports what was written.
pub fn execute(
    command: &str,
    raw: Value,
    jobs: Option<usize>,
    out_dir: &Path,
) -> Result<RunOutcome, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let started = Instant::now();
    let (canonical, seed, mut artifacts) = dispatch(command, &raw, jobs, out_dir)?;
    let bytes = serde_json::to_vec(&canonical).map_err(config_err)?;
    let sha = Sha256::digest(&bytes);
    let mut config_sha256 = String::with_capacity(64);
    for b in sha {
        config_sha256.push_str(&format!("{b:02x}"));
    }
    let manifest = Manifest {
        command: command.to_string(),
        config: canonical,
        config_sha256,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts: artifacts.clone(),
    };
    write_json(out_dir, "manifest.json", &serde_json::to_value(&manifest).map_err(config_err)?)?;
    artifacts.push("manifest.json".to_string());
    Ok(RunOutcome { artifacts, out_dir: out_dir.to_path_buf() })
}

fn dispatch(
    command: &str,
    raw: &Value,
    jobs: Option<usize>,
    out_dir: &Path,
) -> Result<(Value, Value, Vec<String>), CliError> {
    fn parse<T: serde::de::DeserializeOwned>(command: &str, raw: &Value) -> Result<T, CliError> {
        serde_json::from_value(raw.clone())
            .map_err(|e| CliError::Config(format!("invalid {command} config: {e}")))
    }
    match command {
        "solve" => {
            let cmd: SolveCommand = parse(command, raw)?;
            let canonical = serde_json::to_value(&cmd).map_err(config_err)?;
            let seed = cmd.a.random_seed().map_or(Value::Null, |s| json!(s));
            let artifacts = with_pool(jobs, || run_solve(&cmd, out_dir))?;
            Ok((canonical, seed, artifacts))
        }
        "converge" => {
            let cmd: ConvergeCommand = parse(command, raw)?;
            let canonical = serde_json::to_value(&cmd).map_err(config_err)?;
            let seed = cmd.a.random_seed().map_or(Value::Null, |s| json!(s));
            let artifacts = with_pool(jobs, || run_converge(&cmd, out_dir))?;
            Ok((canonical, seed, artifacts))
        }
        "homogenize" => {
            let cmd: HomogenizeCommand = parse(command, raw)?;
            let canonical = serde_json::to_value(&cmd).map_err(config_err)?;
            let artifacts = with_pool(jobs, || run_homogenize(&cmd, out_dir))?;
            Ok((canonical, Value::Null, artifacts))
        }
        "random-homogenize" => {
            let cmd: RandomHomogenizeCommand = parse(command, raw)?;
            let canonical = serde_json::to_value(&cmd).map_err(config_err)?;
            let seed = json!(cmd.seeds);
            let artifacts = with_pool(jobs, || run_random_homogenize(&cmd, out_dir))?;
            Ok((canonical, seed, artifacts))
        }
        "hydro" => {
            let cmd: HydroCommand = parse(command, raw)?;
            let canonical = serde_json::to_value(&cmd).map_err(config_err)?;
            let seed = json!(cmd.seed);
            let artifacts = with_pool(jobs, || run_hydro(&cmd, out_dir))?;
            Ok((canonical, seed, artifacts))
        }
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

fn with_pool<T: Send>(
    jobs: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match jobs {
        None => f(),
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?
            .install(f),
    }
}

/// Library errors from the homogenization module: spec and study complaints
/// mean the config was bad, the rest happened while computing.
fn homog_err(e: HomogenizeError) -> CliError {
    match e {
        HomogenizeError::BadSpec(_) | HomogenizeError::BadStudy(_) => config_err(e),
        _ => numeric_err(e),
    }
}

fn check_grid_size(n: usize, d: usize) -> Result<(), CliError> {
    if n < 2 {
        return Err(CliError::Config(format!("grid size must be at least 2, got {n}")));
    }
    if d == 0 {
        return Err(CliError::Config("dimension must be at least 1".into()));
    }
    let sites = (0..d).try_fold(1usize, |acc, _| acc.checked_mul(n));
    match sites {
        Some(s) if s <= MAX_SITES => Ok(()),
        _ => Err(CliError::Config(format!("grid {n}^{d} exceeds the site limit"))),
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_bytes(out_dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(out_dir.join(name), bytes)
        .map_err(|e| CliError::Config(format!("cannot write {name}: {e}")))
}

fn write_json(out_dir: &Path, name: &str, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(config_err)?;
    text.push('\n');
    write_bytes(out_dir, name, text.as_bytes())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish_csv(
    wtr: csv::Writer<Vec<u8>>,
    out_dir: &Path,
    name: &str,
) -> Result<(), CliError> {
    let bytes = wtr
        .into_inner()
        .map_err(|e| CliError::Config(format!("cannot flush {name}: {e}")))?;
    write_bytes(out_dir, name, &bytes)
}

fn record_err(name: &str) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("cannot write {name}: {e}"))
}

fn run_solve(cmd: &SolveCommand, out_dir: &Path) -> Result<Vec<String>, CliError> {
    check_grid_size(cmd.n, cmd.d)?;
    validate_terms(&cmd.data, cmd.d, "data")?;
    if !(cmd.lambda.is_finite() && cmd.lambda >= 0.0) {
        return Err(CliError::Config(format!("lambda must be nonnegative, got {}", cmd.lambda)));
    }
    let w = build_weight(cmd.d, cmd.w.as_deref())?;
    let spec = cmd.a.to_spec(cmd.d)?;
    let grid = TorusGrid::new(cmd.n, w).map_err(numeric_err)?;
    let field = build_field(&spec, &grid).map_err(homog_err)?;
    let dual = ContinuousDual::site_only(continuous_fn(&cmd.data));
    let rhs = dual.strong_rhs(&grid).map_err(homog_err)?;
    let cfg = cmd.mode.to_solve_config();
    let u = if cmd.lambda > 0.0 {
        solve_resolvent(&field, cmd.lambda, &rhs, &cfg).map_err(numeric_err)?
    } else {
        solve_poisson(&field, &rhs, &cfg).map_err(numeric_err)?
    };

    let name = "solution.csv";
    let mut wtr = csv_writer();
    let mut header = vec!["site".to_string()];
    for k in 0..cmd.d {
        header.push(format!("x{k}"));
    }
    header.push("f".to_string());
    header.push("u".to_string());
    wtr.write_record(&header).map_err(record_err(name))?;
    for idx in 0..grid.site_count() {
        let mut row = vec![idx.to_string()];
        for pos in grid.position_of(idx) {
            row.push(fmt(pos));
        }
        row.push(fmt(rhs.values()[idx]));
        row.push(fmt(u.values()[idx]));
        wtr.write_record(&row).map_err(record_err(name))?;
    }
    finish_csv(wtr, out_dir, name)?;
    Ok(vec![name.to_string()])
}

/// Closed-form limit solution for a single Fourier mode against constant
/// per-axis effective coefficients and a linear, atomless weight on the
/// data axis. Anything else has no closed form here and must use the
/// fine-grid reference.
fn analytic_limit(
    w: &WProduct,
    eff: &[f64],
    lambda: f64,
    terms: &[DataTerm],
) -> Result<ContinuousFn, CliError> {
    let [DataTerm::Fourier { axis, mode, phase, amplitude }] = terms else {
        return Err(CliError::Config(
            "analytic reference requires the data to be a single fourier term".into(),
        ));
    };
    let wc = w.axis(*axis);
    if !wc.atoms().is_empty() {
        return Err(CliError::Config(
            "analytic reference requires an atomless weight on the data axis".into(),
        ));
    }
    let mut pieces = wc.density_pieces();
    let slope = pieces.next().expect("nonempty density").1;
    if pieces.any(|(_, s)| s != slope) {
        return Err(CliError::Config(
            "analytic reference requires a constant-density weight on the data axis".into(),
        ));
    }
    let freq = TAU * *mode as f64;
    let denom = lambda + eff[*axis] * freq * freq / slope;
    let (axis, phase, amplitude) = (*axis, *phase, *amplitude);
    Ok(ContinuousFn::new(move |y| {
        let arg = freq * y[axis];
        let base = match phase {
            crate::config::Phase::Cos => arg.cos(),
            crate::config::Phase::Sin => arg.sin(),
        };
        amplitude * base / denom
    }))
}

struct StudyArgs<'a> {
    d: usize,
    n_list: &'a [usize],
    w: Option<&'a [crate::config::WeightAxis]>,
    lambda: f64,
    data: &'a [DataTerm],
    reference: &'a ReferenceConfig,
    mode: ModeConfig,
    /// Per-axis effective constants for the analytic reference, when the
    /// coefficient spec admits them.
    analytic_eff: Option<Vec<f64>>,
}

fn run_study(
    spec: &CoefficientSpec,
    args: &StudyArgs<'_>,
    out_dir: &Path,
) -> Result<(Vec<String>, HomogenizationResult), CliError> {
    for &n in args.n_list {
        check_grid_size(n, args.d)?;
    }
    validate_terms(args.data, args.d, "data")?;
    if !(args.lambda.is_finite() && args.lambda > 0.0) {
        return Err(CliError::Config(format!(
            "study lambda must be positive, got {}",
            args.lambda
        )));
    }
    let w = build_weight(args.d, args.w)?;
    let reference = match args.reference {
        ReferenceConfig::Analytic => {
            let eff = args.analytic_eff.clone().ok_or_else(|| {
                CliError::Config(
                    "analytic reference requires a constant or pattern coefficient".into(),
                )
            })?;
            StudyReference::Analytic(analytic_limit(&w, &eff, args.lambda, args.data)?)
        }
        ReferenceConfig::FineGrid { factor } => StudyReference::FineGrid { factor: *factor },
    };
    let dual = ContinuousDual::site_only(continuous_fn(args.data));
    let result = run_h_convergence_study(
        spec,
        &w,
        &dual,
        args.lambda,
        args.n_list,
        &reference,
        &args.mode.to_solve_config(),
    )
    .map_err(homog_err)?;

    let name = "study.csv";
    let mut wtr = csv_writer();
    wtr.write_record(["n", "l2_error", "sobolev_norm", "l2_mass", "w_energy"])
        .map_err(record_err(name))?;
    for r in &result.records {
        wtr.write_record([
            r.n.to_string(),
            fmt(r.l2_error),
            fmt(r.sobolev_norm),
            fmt(r.l2_mass),
            fmt(r.w_energy),
        ])
        .map_err(record_err(name))?;
    }
    finish_csv(wtr, out_dir, name)?;
    write_json(
        out_dir,
        "summary.json",
        &json!({
            "reference_n": result.reference_n,
            "reference_l2_mass": result.reference_l2_mass,
            "reference_w_energy": result.reference_w_energy,
        }),
    )?;
    Ok((vec![name.to_string(), "summary.json".to_string()], result))
}

fn run_converge(cmd: &ConvergeCommand, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let spec = cmd.a.to_spec(cmd.d)?;
    let analytic_eff = match &cmd.a {
        CoefficientConfig::Constant { value } => Some(vec![*value; cmd.d]),
        _ => None,
    };
    let args = StudyArgs {
        d: cmd.d,
        n_list: &cmd.n_list,
        w: cmd.w.as_deref(),
        lambda: cmd.lambda,
        data: &cmd.data,
        reference: &cmd.reference,
        mode: cmd.mode,
        analytic_eff,
    };
    let (artifacts, _) = run_study(&spec, &args, out_dir)?;
    Ok(artifacts)
}

fn harmonic_mean(pattern: &[f64]) -> f64 {
    pattern.len() as f64 / pattern.iter().map(|v| 1.0 / v).sum::<f64>()
}

fn predicted_axes_json(matrix: &HomogenizedMatrix) -> Value {
    let axes: Vec<Value> = (0..matrix.dim())
        .map(|k| match matrix.axis(k) {
            Some(HomogenizedAxis::Constant(c)) => json!({ "ambient": c, "atoms": [] }),
            Some(HomogenizedAxis::WithSingular { ambient, at }) => {
                json!({ "ambient": ambient, "atoms": at })
            }
            None => Value::Null,
        })
        .collect();
    json!({ "axes": axes })
}

fn run_homogenize(cmd: &HomogenizeCommand, out_dir: &Path) -> Result<Vec<String>, CliError> {
    if cmd.pattern.len() != cmd.d {
        return Err(CliError::Config(format!(
            "pattern lists {} axes but the problem has dimension {}",
            cmd.pattern.len(),
            cmd.d
        )));
    }
    let spec = CoefficientSpec::periodic(cmd.pattern.clone()).map_err(config_err)?;
    let analytic_eff = Some(cmd.pattern.iter().map(|p| harmonic_mean(p)).collect());
    let args = StudyArgs {
        d: cmd.d,
        n_list: &cmd.n_list,
        w: cmd.w.as_deref(),
        lambda: cmd.lambda,
        data: &cmd.data,
        reference: &cmd.reference,
        mode: cmd.mode,
        analytic_eff,
    };
    let (mut artifacts, result) = run_study(&spec, &args, out_dir)?;
    write_json(out_dir, "predicted.json", &predicted_axes_json(&result.predicted))?;
    artifacts.push("predicted.json".to_string());
    Ok(artifacts)
}

fn run_random_homogenize(
    cmd: &RandomHomogenizeCommand,
    out_dir: &Path,
) -> Result<Vec<String>, CliError> {
    check_grid_size(cmd.n, cmd.d)?;
    validate_terms(&cmd.data, cmd.d, "data")?;
    if cmd.axes.len() != cmd.d {
        return Err(CliError::Config(format!(
            "environment lists {} axes but the problem has dimension {}",
            cmd.axes.len(),
            cmd.d
        )));
    }
    if cmd.seeds.is_empty() {
        return Err(CliError::Config("need at least one seed".into()));
    }
    if !(cmd.lambda.is_finite() && cmd.lambda > 0.0) {
        return Err(CliError::Config(format!("lambda must be positive, got {}", cmd.lambda)));
    }
    if !(cmd.fit.lo.is_finite() && cmd.fit.hi.is_finite() && 0.0 < cmd.fit.lo && cmd.fit.lo < cmd.fit.hi)
    {
        return Err(CliError::Config(format!(
            "fit range must satisfy 0 < lo < hi, got [{}, {}]",
            cmd.fit.lo, cmd.fit.hi
        )));
    }
    let w = build_weight(cmd.d, cmd.w.as_deref())?;
    let kinds: Vec<_> = cmd.axes.iter().map(|a| a.to_kind()).collect();
    let env0 = RandomEnvironmentSpec::new(kinds, cmd.seeds[0]).map_err(config_err)?;
    let predicted =
        predicted_homogenized_matrix(&CoefficientSpec::RandomErgodic(env0.clone()), &w)
            .map_err(homog_err)?;
    // singular pins stay at their predicted values; only the ambient level
    // is fitted
    let pinned: Vec<Vec<(f64, f64)>> = (0..cmd.d)
        .map(|k| match predicted.axis(k) {
            Some(HomogenizedAxis::WithSingular { at, .. }) => at.clone(),
            _ => Vec::new(),
        })
        .collect();
    let grid = TorusGrid::new(cmd.n, w).map_err(numeric_err)?;
    let dual = ContinuousDual::site_only(continuous_fn(&cmd.data));
    let rhs = dual.strong_rhs(&grid).map_err(homog_err)?;
    let cfg = cmd.mode.to_solve_config();

    use rayon::prelude::*;
    let fits: Vec<f64> = cmd
        .seeds
        .par_iter()
        .map(|&seed| -> Result<f64, CliError> {
            let spec = CoefficientSpec::RandomErgodic(env0.with_seed(seed));
            let field = build_field(&spec, &grid).map_err(homog_err)?;
            let observed = solve_resolvent(&field, cmd.lambda, &rhs, &cfg).map_err(numeric_err)?;
            let mut build = |c: f64| -> Result<DiagonalField, HomogenizeError> {
                let axes = pinned
                    .iter()
                    .map(|at| {
                        if at.is_empty() {
                            HomogenizedAxis::Constant(c)
                        } else {
                            HomogenizedAxis::WithSingular { ambient: c, at: at.clone() }
                        }
                    })
                    .collect();
                HomogenizedMatrix::from_axes(axes).to_field(&grid)
            };
            fit_effective_coefficient(
                &observed,
                &rhs,
                cmd.lambda,
                cmd.fit.lo,
                cmd.fit.hi,
                &mut build,
                &cfg,
            )
            .map_err(numeric_err)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let name = "fits.csv";
    let mut wtr = csv_writer();
    wtr.write_record(["seed", "fitted"]).map_err(record_err(name))?;
    for (seed, fit) in cmd.seeds.iter().zip(&fits) {
        wtr.write_record([seed.to_string(), fmt(*fit)]).map_err(record_err(name))?;
    }
    finish_csv(wtr, out_dir, name)?;

    let m = fits.len() as f64;
    let mean = fits.iter().sum::<f64>() / m;
    let stderr = if fits.len() >= 2 {
        let var = fits.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / (m - 1.0);
        Some((var / m).sqrt())
    } else {
        None
    };
    write_json(
        out_dir,
        "summary.json",
        &json!({
            "n": cmd.n,
            "seeds": cmd.seeds.len(),
            "mean": mean,
            "stderr": stderr,
            "predicted": predicted_axes_json(&predicted),
        }),
    )?;
    Ok(vec![name.to_string(), "summary.json".to_string()])
}

/// Replica statistics with the replicas run in parallel. Replicas draw from
/// per-replica random streams and the accumulation happens in replica order
/// afterwards, so the numbers match the library's sequential routine
/// exactly, independent of worker count.
pub fn parallel_hydro_report(
    model: &RateModel,
    a_pde: &DiagonalField,
    rho0: &DensityProfile,
    t_list: &[f64],
    replicas: usize,
    dict: &[MeshFunction],
    seed: u64,
    stepping: TimeStepping,
) -> Result<HydroReport, CliError> {
    if replicas < 2 {
        return Err(CliError::Config("need at least two replicas".into()));
    }
    if dict.is_empty() {
        return Err(CliError::Config("need at least one observable".into()));
    }
    let pde = solve_hydrodynamic(a_pde, rho0, model.kind(), t_list, stepping)
        .map_err(numeric_err)?;

    use rayon::prelude::*;
    let all = (0..replicas)
        .into_par_iter()
        .map(|r| replica_observables(model, rho0, t_list, dict, seed, r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(numeric_err)?;

    let nt = t_list.len();
    let nh = dict.len();
    let sites = model.grid().site_count();
    let mut sum = vec![0.0f64; nt * nh];
    let mut sumsq = vec![0.0f64; nt * nh];
    let mut psum = vec![0.0f64; nt * sites];
    let mut psumsq = vec![0.0f64; nt * sites];
    for obs in &all {
        for (ti, row) in obs.pairings.iter().enumerate() {
            for (hi, &v) in row.iter().enumerate() {
                sum[ti * nh + hi] += v;
                sumsq[ti * nh + hi] += v * v;
            }
        }
        for (ti, prof) in obs.profiles.iter().enumerate() {
            for (si, &v) in prof.iter().enumerate() {
                psum[ti * sites + si] += v;
                psumsq[ti * sites + si] += v * v;
            }
        }
    }

    let m = replicas as f64;
    let stderr_of = |s: f64, sq: f64| {
        let mean = s / m;
        let var = ((sq - m * mean * mean) / (m - 1.0)).max(0.0);
        (mean, (var / m).sqrt())
    };
    let mut rows = Vec::with_capacity(nt * nh);
    for ti in 0..nt {
        for hi in 0..nh {
            let (mean, se) = stderr_of(sum[ti * nh + hi], sumsq[ti * nh + hi]);
            let pde_value = inner_l2(&dict[hi], pde[ti].as_mesh_fn()).map_err(numeric_err)?;
            rows.push(HydroRow {
                t: t_list[ti],
                h_index: hi,
                mc_mean: mean,
                mc_stderr: se,
                pde_value,
                gap: mean - pde_value,
            });
        }
    }
    let mut mc_profiles = Vec::with_capacity(nt);
    let mut mc_profile_stderr = Vec::with_capacity(nt);
    for ti in 0..nt {
        let mut means = Vec::with_capacity(sites);
        let mut ses = Vec::with_capacity(sites);
        for si in 0..sites {
            let (mean, se) = stderr_of(psum[ti * sites + si], psumsq[ti * sites + si]);
            means.push(mean);
            ses.push(se);
        }
        mc_profiles.push(means);
        mc_profile_stderr.push(ses);
    }
    Ok(HydroReport {
        times: t_list.to_vec(),
        rows,
        mc_profiles,
        mc_profile_stderr,
        pde_profiles: pde.iter().map(|p| p.values().to_vec()).collect(),
        replicas,
    })
}

fn run_hydro(cmd: &HydroCommand, out_dir: &Path) -> Result<Vec<String>, CliError> {
    check_grid_size(cmd.n, cmd.d)?;
    validate_terms(&cmd.rho0, cmd.d, "rho0")?;
    if cmd.observables.is_empty() {
        return Err(CliError::Config("need at least one observable".into()));
    }
    for obs in &cmd.observables {
        validate_terms(obs, cmd.d, "observable")?;
    }
    if cmd.replicas < 2 {
        return Err(CliError::Config("need at least two replicas".into()));
    }
    if cmd.t_list.is_empty() {
        return Err(CliError::Config("t_list must be nonempty".into()));
    }
    if cmd.t_list.iter().any(|t| !t.is_finite() || *t < 0.0)
        || cmd.t_list.windows(2).any(|p| p[0] >= p[1])
    {
        return Err(CliError::Config(
            "t_list must be nonnegative and strictly increasing".into(),
        ));
    }
    let kind = cmd.rate.to_kind();
    kind.validate().map_err(config_err)?;
    if let SteppingConfig::ImplicitEuler { dt } = cmd.stepping {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(CliError::Config(format!("implicit step must be positive, got {dt}")));
        }
    }

    let w = build_weight(cmd.d, cmd.w.as_deref())?;
    let grid = TorusGrid::new(cmd.n, w).map_err(numeric_err)?;
    let spec = cmd.a.to_spec(cmd.d)?;
    let field = build_field(&spec, &grid).map_err(homog_err)?;
    let pde_field = match &cmd.pde_coefficients {
        Some(c) => build_field(&c.to_spec(cmd.d)?, &grid).map_err(homog_err)?,
        None => field.clone(),
    };
    let model = RateModel::new(field, kind).map_err(config_err)?;
    let rho0 = DensityProfile::sample(&grid, |y| eval_terms(&cmd.rho0, y)).map_err(|e| {
        CliError::Config(format!("initial density must stay within [0, 1]: {e}"))
    })?;
    let dict: Vec<MeshFunction> =
        cmd.observables.iter().map(|obs| grid.sample(|y| eval_terms(obs, y))).collect();
    let stepping = match cmd.stepping {
        SteppingConfig::Explicit => TimeStepping::Explicit,
        SteppingConfig::ImplicitEuler { dt } => TimeStepping::ImplicitEuler { dt },
    };

    let report = parallel_hydro_report(
        &model,
        &pde_field,
        &rho0,
        &cmd.t_list,
        cmd.replicas,
        &dict,
        cmd.seed,
        stepping,
    )?;

    let labels: Vec<String> = cmd.observables.iter().map(|obs| terms_label(obs)).collect();
    let name = "pairings.csv";
    let mut wtr = csv_writer();
    wtr.write_record(["t", "observable", "mc_mean", "mc_stderr", "pde_value", "gap"])
        .map_err(record_err(name))?;
    for row in &report.rows {
        wtr.write_record([
            fmt(row.t),
            labels[row.h_index].clone(),
            fmt(row.mc_mean),
            fmt(row.mc_stderr),
            fmt(row.pde_value),
            fmt(row.gap),
        ])
        .map_err(record_err(name))?;
    }
    finish_csv(wtr, out_dir, name)?;
    let mut artifacts = vec![name.to_string()];

    if cmd.profiles {
        let name = "profiles.csv";
        let mut wtr = csv_writer();
        let mut header = vec!["t".to_string(), "site".to_string()];
        for k in 0..cmd.d {
            header.push(format!("x{k}"));
        }
        header.extend(["mc_mean".into(), "mc_stderr".into(), "pde_value".into()]);
        wtr.write_record(&header).map_err(record_err(name))?;
        for (ti, t) in report.times.iter().enumerate() {
            for site in 0..grid.site_count() {
                let mut row = vec![fmt(*t), site.to_string()];
                for pos in grid.position_of(site) {
                    row.push(fmt(pos));
                }
                row.push(fmt(report.mc_profiles[ti][site]));
                row.push(fmt(report.mc_profile_stderr[ti][site]));
                row.push(fmt(report.pde_profiles[ti][site]));
                wtr.write_record(&row).map_err(record_err(name))?;
            }
        }
        finish_csv(wtr, out_dir, name)?;
        artifacts.push(name.to_string());
    }

    let max_abs_gap = report.rows.iter().map(|r| r.gap.abs()).fold(0.0f64, f64::max);
    write_json(
        out_dir,
        "summary.json",
        &json!({
            "replicas": report.replicas,
            "times": report.times,
            "observables": labels,
            "max_abs_gap": max_abs_gap,
        }),
    )?;
    artifacts.push("summary.json".to_string());
    Ok(artifacts)
}
