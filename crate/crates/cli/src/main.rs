use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use powerdelay::asymptotics::{fit_scaling, ScalingFit};
use powerdelay::bounds::{
    default_drift_horizons, default_s1, gamma_dependent_lower_bound, verify_lemma1, verify_prop1, verify_prop2,
};
use powerdelay::chain::evaluate;
use powerdelay::config::{BetaGrid, RunConfig};
use powerdelay::error::Error;
use powerdelay::io::{csv_reader, csv_writer, provenance};
use powerdelay::mdp::{
    solve_mdp, solve_mdp_u, sweep_lattice, sweep_u_lattice, Policy, SolverOptions, SweepOptions, TradeoffCurve,
};
use powerdelay::mincost::{classify_case, curve_from_lattice, min_power_curve, Case};
use powerdelay::model::{Mode, ModelSpec};
use powerdelay::sim::simulate;
use powerdelay::suite::Suite;

const DEFAULT_BETA_GRID: &str = "1e-1:1e4:10/decade";

#[derive(Parser)]
#[command(name = "powerdelay", version, about = "Power/delay tradeoffs on a slotted fading link")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Model file (JSON)
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Run configuration (TOML); flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the mean arrival rate (packets/slot)
    #[arg(long, global = true, allow_hyphen_values = true)]
    lambda: Option<f64>,
    /// Target admitted fraction for admission control
    #[arg(long, global = true, allow_hyphen_values = true)]
    rho: Option<f64>,
    /// `lo:hi:N/decade` or a comma-separated list
    #[arg(long, global = true)]
    beta_grid: Option<String>,
    /// Truncation level in lattice steps
    #[arg(long, global = true)]
    qmax: Option<usize>,
    /// Solver span tolerance
    #[arg(long, global = true, allow_hyphen_values = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; CSV goes to stdout when absent
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Solve on a real-valued grid with this step
    #[arg(long, global = true, allow_hyphen_values = true)]
    delta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum average power curve and its breakpoints
    Mincost,
    /// Case of the arrival rate on the minimum-power curve
    Classify,
    /// Solve the Lagrangian MDP for one multiplier
    Solve {
        #[arg(long)]
        beta: f64,
        /// Admission reward (admission models only)
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Trace the tradeoff curve over a grid of beta
    Sweep,
    /// Tradeoff curve with admission control at throughput rho * lambda
    SweepU,
    /// Check the queue-length bounds on every policy of a sweep
    VerifyBounds {
        /// Rate threshold for the geometric bound (default: half the peak mean service)
        #[arg(long)]
        s1: Option<f64>,
        /// Window for the service-rate concentration bound
        #[arg(long, default_value_t = 0.05)]
        eps_v: f64,
    },
    /// Classify how the queue length grows as the power gap shrinks
    Fit {
        /// Sweep CSV to fit; runs a sweep when absent
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Simulate a policy and report batch-means estimates
    Simulate {
        /// Policy CSV; otherwise the optimal policy for --beta is used
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        beta: f64,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        burn_in: Option<u64>,
    },
    /// Run the full acceptance suite and write its artifacts
    ReproPaper,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("reason: invalid_usage");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            eprintln!("reason: {}", e.reason());
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

/// Config file values with command-line overrides applied.
fn resolve(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(common.model.clone().unwrap_or_default()),
    };
    if let Some(m) = &common.model {
        cfg.model = m.clone();
    }
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => {
            $(if let Some(v) = common.$flag.clone() { cfg.$field = Some(v); })*
        };
    }
    set!(lambda <- lambda, rho <- rho, beta_grid <- beta_grid, q_max <- qmax, tol <- tol, out <- out, delta <- delta);
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(cfg: &RunConfig) -> Outcome<ModelSpec> {
    if cfg.model.as_os_str().is_empty() {
        return Err(Failure::Usage("no model given (use --model or a config file)".into()));
    }
    let mut spec = ModelSpec::load(&cfg.model)?;
    if let Some(lambda) = cfg.lambda {
        spec = spec.with_lambda(lambda)?;
    }
    if let Some(delta) = cfg.delta {
        spec = spec.with_mode(Mode::Grid { delta });
    }
    Ok(spec)
}

fn config_text(cfg: &RunConfig, command: &str) -> Outcome<String> {
    Ok(format!("{command}\n{}", cfg.to_toml()?))
}

/// Writes one artifact to `out/name`, or to stdout without an output directory.
fn emit(cfg: &RunConfig, name: &str, write: impl FnOnce(&mut dyn Write) -> powerdelay::error::Result<()>) -> Outcome<()> {
    match &cfg.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(name);
            let mut file = io::BufWriter::new(fs::File::create(&path)?);
            write(&mut file)?;
            file.flush()?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
        }
    }
    Ok(())
}

fn sweep_options(cfg: &RunConfig) -> SweepOptions {
    let mut opts = SweepOptions::default();
    if let Some(q) = cfg.q_max {
        opts.q_max = q;
    }
    if let Some(t) = cfg.tol {
        opts.solver.tol = t;
    }
    opts
}

fn beta_grid(cfg: &RunConfig) -> Outcome<Vec<f64>> {
    let text = cfg.beta_grid.as_deref().unwrap_or(DEFAULT_BETA_GRID);
    Ok(text.parse::<BetaGrid>()?.0)
}

fn run_sweep(cfg: &RunConfig, spec: &ModelSpec, admission: bool) -> Outcome<TradeoffCurve> {
    let lattice = spec.lattice()?;
    let grid = beta_grid(cfg)?;
    let opts = sweep_options(cfg);
    if admission {
        let rho = cfg
            .rho
            .ok_or_else(|| Failure::Usage("admission sweeps need --rho".into()))?;
        Ok(sweep_u_lattice(&lattice, rho, &grid, &opts)?)
    } else {
        Ok(sweep_lattice(&lattice, &grid, &opts)?)
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::ReproPaper => repro_paper(&cfg),
        Command::Mincost => {
            let spec = load_model(&cfg)?;
            let curve = min_power_curve(&spec)?;
            let prov = provenance(&config_text(&cfg, "mincost")?);
            emit(&cfg, "mincost.csv", |w| curve.write_csv(w, &prov))?;
            emit(&cfg, "breakpoints.csv", |w| {
                let mut c = csv_writer(w, &prov)?;
                c.write_record(["breakpoint"])?;
                for b in curve.breakpoints() {
                    c.write_record([b.to_string()])?;
                }
                c.flush()?;
                Ok(())
            })
        }
        Command::Classify => {
            let spec = load_model(&cfg)?;
            let lattice = spec.lattice()?;
            let rate = cfg.rho.map_or(lattice.lambda, |r| r * lattice.lambda);
            let info = classify_case(&curve_from_lattice(&lattice), rate)?;
            let prov = provenance(&config_text(&cfg, "classify")?);
            emit(&cfg, "case.csv", |w| info.write_csv(w, &prov))
        }
        Command::Solve { beta, theta } => {
            let spec = load_model(&cfg)?;
            let lattice = spec.lattice()?;
            let tol = cfg.tol.unwrap_or(SolverOptions::default().tol);
            let solve = |q_max: usize| match (spec.admission, theta) {
                (true, Some(theta)) => Ok(solve_mdp_u(&spec, beta, theta, q_max, tol)?),
                (true, None) => Err(Failure::Usage("admission models need --theta".into())),
                (false, Some(_)) => Err(Failure::Usage("--theta needs an admission model".into())),
                (false, None) => Ok(solve_mdp(&spec, beta, q_max, tol)?),
            };
            // without --qmax, double the truncation until the boundary mass is negligible
            let mut q_max = cfg.q_max.unwrap_or_else(|| (10 * lattice.a_max()).max(64));
            let (sol, dist, avg) = loop {
                let sol = solve(q_max)?;
                let (dist, avg) = evaluate(&lattice, &sol.policy)?;
                let opts = SweepOptions::default();
                if cfg.q_max.is_some() || dist.tail_mass <= opts.tail_ceiling || 2 * q_max > opts.q_max_cap {
                    break (sol, dist, avg);
                }
                q_max *= 2;
            };
            let prov = provenance(&config_text(&cfg, &format!("solve beta={beta} theta={theta:?}"))?);
            emit(&cfg, "solution.csv", |w| {
                let mut c = csv_writer(w, &prov)?;
                c.write_record(["quantity", "value"])?;
                let rows = [
                    ("beta", beta),
                    ("theta", theta.unwrap_or(f64::NAN)),
                    ("g_star", sol.g_star),
                    ("q_bar", avg.q_bar),
                    ("p_bar", avg.p_bar),
                    ("s_bar", avg.s_bar),
                    ("a_bar", avg.a_bar.unwrap_or(f64::NAN)),
                    ("tail_mass", dist.tail_mass),
                    ("residual", sol.residual),
                    ("iterations", sol.iterations as f64),
                    ("q_max", q_max as f64),
                ];
                for (k, v) in rows {
                    c.write_record([k.to_string(), v.to_string()])?;
                }
                c.flush()?;
                Ok(())
            })?;
            if cfg.out.is_some() {
                emit(&cfg, "policy.csv", |w| sol.policy.write_csv(&lattice, w, &prov))?;
            }
            Ok(())
        }
        Command::Sweep | Command::SweepU => {
            let spec = load_model(&cfg)?;
            let admission = matches!(cli.command, Command::SweepU);
            if admission && !spec.admission {
                return Err(Failure::Usage("sweep-u needs a model with \"admission\": true".into()));
            }
            let curve = run_sweep(&cfg, &spec, admission)?;
            for (beta, why) in &curve.failures {
                eprintln!("beta {beta}: {why}");
            }
            let prov = provenance(&config_text(&cfg, "sweep")?);
            emit(&cfg, "sweep.csv", |w| curve.write_csv(w, &prov))
        }
        Command::VerifyBounds { s1, eps_v } => {
            let spec = load_model(&cfg)?;
            let lattice = spec.lattice()?;
            let curve = run_sweep(&cfg, &spec, spec.admission)?;
            let min_curve = curve_from_lattice(&lattice);
            let rate = if spec.admission {
                cfg.rho.unwrap_or(1.0) * lattice.lambda
            } else {
                lattice.lambda
            };
            let info = classify_case(&min_curve, rate)?;
            let prov = provenance(&config_text(&cfg, &format!("verify-bounds s1={s1:?} eps_v={eps_v}"))?);
            let mut failures = 0;
            emit(&cfg, "bounds.csv", |w| {
                let mut c = csv_writer(w, &prov)?;
                c.write_record(["beta", "bound", "status", "worst_slack", "vacuous", "note"])?;
                for p in &curve.points {
                    let mut policies = vec![(p.policy.clone(), p.dist.clone())];
                    if let Some((_, partner)) = &p.mix {
                        policies.push((partner.clone(), evaluate(&lattice, partner)?.0));
                    }
                    for (policy, dist) in &policies {
                        let s1 = s1.unwrap_or_else(|| default_s1(&lattice, dist));
                        let mut reports = vec![
                            verify_prop1(&lattice, dist, policy, s1),
                            verify_prop2(&lattice, dist, policy, &default_drift_horizons(dist)),
                        ];
                        if info.case != Case::One {
                            reports.push(verify_lemma1(&lattice, dist, policy, &info, &min_curve, eps_v));
                        }
                        for r in &reports {
                            failures += usize::from(!r.passed());
                            c.write_record([
                                p.beta.to_string(),
                                r.name.to_string(),
                                r.status.as_str().to_string(),
                                r.worst_slack.to_string(),
                                r.vacuous.to_string(),
                                r.note.clone(),
                            ])?;
                        }
                        let sw = gamma_dependent_lower_bound(&lattice, dist, policy, &min_curve);
                        failures += usize::from(!sw.holds());
                        c.write_record([
                            p.beta.to_string(),
                            "sandwich".into(),
                            if sw.holds() { "pass" } else { "fail" }.into(),
                            (sw.p_bar - sw.expected_cost).min(sw.expected_cost - sw.c_mean).to_string(),
                            "false".into(),
                            format!("c(lambda)={} c(S)={} E c(s(Q))={} P={}", sw.c_lambda, sw.c_mean, sw.expected_cost, sw.p_bar),
                        ])?;
                    }
                }
                c.flush()?;
                Ok(())
            })?;
            eprintln!("{} points, {failures} failed checks", curve.points.len());
            Ok(())
        }
        Command::Fit { input } => {
            let fit = match &input {
                Some(path) => fit_csv(path)?,
                None => {
                    let spec = load_model(&cfg)?;
                    let curve = run_sweep(&cfg, &spec, spec.admission)?;
                    powerdelay::asymptotics::fit_sweep(&curve, 0.0)?
                }
            };
            eprintln!("class {} (margin {:.2}, {:.2} decades)", fit.class, fit.margin, fit.decades);
            let prov = provenance(&config_text(&cfg, &format!("fit {input:?}"))?);
            emit(&cfg, "fit.csv", |w| fit.write_csv(w, &prov))
        }
        Command::Simulate { policy, beta, horizon, burn_in } => {
            let spec = load_model(&cfg)?;
            let lattice = spec.lattice()?;
            let policy = match &policy {
                Some(path) => Policy::read_csv(&lattice, fs::File::open(path)?)?,
                None if spec.admission => {
                    return Err(Failure::Usage("admission models need a --policy file".into()))
                }
                None => {
                    let q_max = cfg.q_max.unwrap_or_else(|| (10 * lattice.a_max()).max(64));
                    solve_mdp(&spec, beta, q_max, cfg.tol.unwrap_or(SolverOptions::default().tol))?.policy
                }
            };
            let horizon = horizon.or(cfg.horizon).unwrap_or(1_000_000);
            let burn_in = burn_in.or(cfg.burn_in).unwrap_or(horizon / 10);
            let est = simulate(&spec, &policy, horizon, burn_in, cfg.seed)?;
            let prov = provenance(&config_text(&cfg, &format!("simulate {horizon} {burn_in}"))?);
            emit(&cfg, "simulation.csv", |w| est.write_csv(w, &prov))
        }
    }
}

/// Fits the clean rows (no flags) of a sweep CSV.
fn fit_csv(path: &Path) -> Outcome<ScalingFit> {
    let mut rdr = csv_reader(fs::File::open(path)?);
    let headers = rdr.headers().map_err(Error::from)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Core(Error::Shape(format!("sweep CSV has no `{name}` column"))))
    };
    let (vc, qc, pc, fc) = (col("v")?, col("q_bar")?, col("p_bar")?, col("flags")?);
    let mut points = Vec::new();
    let mut c_ref: f64 = 0.0;
    for rec in rdr.records() {
        let rec = rec.map_err(Error::from)?;
        let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
        let (v, q, p) = (num(vc), num(qc), num(pc));
        if !rec.get(fc).unwrap_or("").is_empty() || !(v.is_finite() && q.is_finite()) {
            continue;
        }
        c_ref = c_ref.max((p - v).abs());
        points.push((v, q));
    }
    let floor = 100.0 * 1e-13 * c_ref.max(1.0);
    points.retain(|&(v, _)| v > floor);
    points.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(fit_scaling(&points)?)
}

fn repro_paper(cfg: &RunConfig) -> Outcome<()> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("repro-paper"));
    let suite = Suite::run(|o| println!("{}", o.line()));
    fs::create_dir_all(&dir)?;
    for (name, bytes) in &suite.artifacts {
        fs::write(dir.join(name), bytes)?;
    }
    let passed = suite.outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} criteria passed; artifacts in {}", suite.outcomes.len(), dir.display());
    Ok(())
}
