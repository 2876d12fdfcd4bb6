//! Command-line front end: reproducible runs of every estimator with a
//! single seed, law, and truncation configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use bcap::capacity::{
    capacity_proxy, energy_minimize, estimate_bcap, estimate_bcap_via_hitting, CapacityRecord,
};
use bcap::experiments::{
    scaling_sweep, write_scaling_csv, SweepBudget, SweepMetadata,
};
use bcap::green::{
    build_green_table, default_table, default_table_params, read_table, write_table, GreenEval,
};
use bcap::gwtree::{TreeSampler, TruncationPolicy};
use bcap::lattice::{ball, LatticePoint, SiteSet};
use bcap::lawler::{estimate_escape, stats_un_gn, verify_identities};
use bcap::offspring::OffspringLaw;
use bcap::rng::stream;
use bcap::stats::McEstimate;

#[derive(Parser)]
#[command(name = "bcap", version, about = "Branching-capacity Monte Carlo toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Args, Clone, Serialize)]
struct Common {
    /// Lattice dimension (5..=8 where tables exist).
    #[arg(long, default_value_t = 6)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 = all cores. Output is identical for any value.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Offspring law: a file of probabilities, builtin:binary, or
    /// builtin:geometric.
    #[arg(long, default_value = "builtin:binary")]
    law: String,
    /// Spine truncation radius as a multiple of the relevant scale.
    #[arg(long)]
    radius_factor: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    node_cap: u64,
    /// Green table file; defaults to the built-in table for the dimension.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Build a Green's-function table and write it to a file.
    GreenTable {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        radius: Option<i64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Per-point equilibrium estimates and their sum over a ball or a
    /// point file.
    Bcap {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2.0)]
        ball: f64,
        /// File with one lattice point per line (d whitespace-separated
        /// coordinates); overrides --ball.
        #[arg(long)]
        set: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: u64,
    },
    /// Capacity from the far-point hitting probability (d = 6).
    BcapHit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0)]
        ball: f64,
        /// Distance of the far root along the first axis.
        #[arg(long, default_value_t = 8)]
        x_dist: i64,
        #[arg(long, default_value_t = 20_000)]
        samples: u64,
    },
    /// Minimal G-energy over probability measures on a ball and the
    /// reciprocal capacity proxy.
    Energy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2.0)]
        ball: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 100_000)]
        max_iters: usize,
    },
    /// Verify both exact identities; exit 2 if a gate fails.
    LawlerCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        n: u64,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
    },
    /// Growth statistics of U_n, G_n, g_n over a list of n (d = 6).
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        n_list: Vec<u64>,
        #[arg(long, default_value_t = 1000)]
        samples: u64,
    },
    /// Escape probabilities P(A_n), P(B_n) (d = 6).
    Escape {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        n: u64,
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
    },
    /// Sweep E[BCap(R_n)] over a list of n.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        n_list: Vec<u64>,
        /// Fixed trial count per n; 0 selects the auto budget.
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
        /// Target relative stderr for the auto budget.
        #[arg(long, default_value_t = 0.05)]
        rel_stderr: f64,
        #[arg(long, default_value_t = 2_000_000)]
        max_samples: u64,
    },
    /// Dump one invariant tree sample as labeled vertex lines.
    TreeDump {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16.0)]
        radius: f64,
    },
}

fn resolve_law(spec: &str) -> bcap::Result<OffspringLaw> {
    match spec {
        "builtin:binary" => Ok(OffspringLaw::binary()),
        "builtin:geometric" => Ok(OffspringLaw::geometric_half()),
        path => OffspringLaw::from_file(std::path::Path::new(path)),
    }
}

fn open_out(path: &Option<PathBuf>) -> std::io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn config_echo(common: &Common, sub: &str, extra: serde_json::Value) -> String {
    // Deliberately excludes the worker count: results are identical for any
    // pool size, and the echo must be too.
    let mut obj = json!({
        "command": sub,
        "d": common.d,
        "seed": common.seed,
        "law": common.law,
        "radius_factor": common.radius_factor,
        "node_cap": common.node_cap,
    });
    if let (Some(m), Some(e)) = (obj.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            m.insert(k.clone(), v.clone());
        }
    }
    obj.to_string()
}

fn green_eval(common: &Common) -> bcap::Result<GreenEval> {
    match &common.table {
        Some(path) => GreenEval::new(Arc::new(read_table(path)?)),
        None => GreenEval::new(default_table(common.d)?),
    }
}

fn setup_workers(workers: usize) {
    if workers > 0 {
        // Determinism never depends on this; it only sizes the pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
}

fn read_point_file(path: &PathBuf, d: usize) -> bcap::Result<Vec<LatticePoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let coords: Vec<i64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<i64>()
                    .map_err(|e| bcap::Error::Parse(format!("line {}: {e}", i + 1)))
            })
            .collect::<bcap::Result<_>>()?;
        if coords.len() != d {
            return Err(bcap::Error::Parse(format!(
                "line {}: expected {d} coordinates, got {}",
                i + 1,
                coords.len()
            )));
        }
        pts.push(LatticePoint::from_coords(&coords)?);
    }
    Ok(pts)
}

#[derive(Serialize)]
struct StatLine<'a> {
    n: u64,
    statistic: &'a str,
    mean: f64,
    stderr: f64,
    samples: u64,
    bias: f64,
    seed: u64,
}

fn write_stat_lines(
    out: &mut dyn Write,
    format: Format,
    echo: &str,
    rows: &[(u64, &str, &McEstimate)],
    seed: u64,
) -> std::io::Result<()> {
    match format {
        Format::Csv => {
            writeln!(out, "# {echo}")?;
            writeln!(out, "n,statistic,mean,stderr,samples,bias,seed")?;
            for (n, name, est) in rows {
                writeln!(
                    out,
                    "{n},{name},{},{},{},{},{seed}",
                    est.mean, est.stderr, est.samples, est.bias_bound
                )?;
            }
        }
        Format::Jsonl => {
            writeln!(out, "{{\"config\":{echo}}}")?;
            for (n, name, est) in rows {
                let line = StatLine {
                    n: *n,
                    statistic: name,
                    mean: est.mean,
                    stderr: est.stderr,
                    samples: est.samples,
                    bias: est.bias_bound,
                    seed,
                };
                writeln!(out, "{}", serde_json::to_string(&line).expect("serializable"))?;
            }
        }
    }
    Ok(())
}

fn run() -> bcap::Result<i32> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not errors.
            if e.use_stderr() {
                eprint!("{e}");
                return Ok(1);
            }
            print!("{e}");
            return Ok(0);
        }
    };
    match cli.command {
        Command::GreenTable {
            common,
            radius,
            steps,
            tol,
        } => {
            setup_workers(common.workers);
            let (def_r, def_n, def_tol) = default_table_params(common.d)?;
            let radius = radius.unwrap_or(def_r);
            let steps = steps.unwrap_or(def_n);
            let tol = tol.unwrap_or(def_tol);
            let out = common.out.clone().ok_or_else(|| {
                bcap::Error::Config("green-table requires --out".into())
            })?;
            let started = Instant::now();
            let table = build_green_table(common.d, radius, steps, tol)?;
            write_table(&table, &out)?;
            eprintln!(
                "wrote d={} radius={radius} steps={steps} tail_bound={:.3e} in {:.1}s",
                common.d,
                table.tail_bound,
                started.elapsed().as_secs_f64()
            );
            Ok(0)
        }
        Command::Bcap {
            common,
            ball: ball_r,
            set,
            samples,
        } => {
            setup_workers(common.workers);
            let law = resolve_law(&common.law)?;
            let sampler = TreeSampler::new(common.d, law)?;
            let pts = match &set {
                Some(path) => read_point_file(path, common.d)?,
                None => ball(common.d, &LatticePoint::origin(), ball_r),
            };
            let a = SiteSet::from_points(common.d, &pts);
            let diam = a.diameter();
            let policy = match common.radius_factor {
                Some(f) => TruncationPolicy::new((f * diam).max(64.0), common.node_cap, 1_000_000)?,
                None => TruncationPolicy::for_set_radius(diam),
            };
            let profile = estimate_bcap(&sampler, &a, &policy, samples, common.seed)?;
            let set_desc = match &set {
                Some(p) => format!("file:{}", p.display()),
                None => format!("ball_r{ball_r}"),
            };
            let echo = config_echo(&common, "bcap", json!({"set": set_desc, "samples": samples}));
            let mut out = open_out(&common.out)?;
            match common.format {
                Format::Jsonl => {
                    writeln!(out, "{{\"config\":{echo}}}")?;
                    let rec = CapacityRecord::new(&set_desc, "bcap", &profile.bcap, common.seed);
                    writeln!(out, "{}", rec.to_jsonl())?;
                }
                Format::Csv => {
                    writeln!(out, "# {echo}")?;
                    writeln!(out, "set,estimator,mean,stderr,bias,samples,seed")?;
                    writeln!(
                        out,
                        "{set_desc},bcap,{},{},{},{},{}",
                        profile.bcap.mean,
                        profile.bcap.stderr,
                        profile.bcap.bias_bound,
                        profile.bcap.samples,
                        common.seed
                    )?;
                }
            }
            Ok(0)
        }
        Command::BcapHit {
            common,
            ball: ball_r,
            x_dist,
            samples,
        } => {
            setup_workers(common.workers);
            let law = resolve_law(&common.law)?;
            let sampler = TreeSampler::new(common.d, law)?;
            let green = green_eval(&common)?;
            let a = SiteSet::from_points(common.d, &ball(common.d, &LatticePoint::origin(), ball_r));
            let x_far = LatticePoint::unit(0, x_dist);
            let radius = common.radius_factor.unwrap_or(2.0) * x_dist as f64;
            let policy = TruncationPolicy::new(radius.max(16.0), common.node_cap, 1_000_000)?;
            let est = estimate_bcap_via_hitting(
                &sampler, &a, &x_far, &policy, samples, &green, common.seed,
            )?;
            let set_desc = format!("ball_r{ball_r}");
            let echo = config_echo(
                &common,
                "bcap-hit",
                json!({"set": set_desc, "x_dist": x_dist, "samples": samples}),
            );
            let mut out = open_out(&common.out)?;
            match common.format {
                Format::Jsonl => {
                    writeln!(out, "{{\"config\":{echo}}}")?;
                    let rec = CapacityRecord::new(&set_desc, "bcap_hit", &est, common.seed);
                    writeln!(out, "{}", rec.to_jsonl())?;
                }
                Format::Csv => {
                    writeln!(out, "# {echo}")?;
                    writeln!(out, "set,estimator,mean,stderr,bias,samples,seed")?;
                    writeln!(
                        out,
                        "{set_desc},bcap_hit,{},{},{},{},{}",
                        est.mean, est.stderr, est.bias_bound, est.samples, common.seed
                    )?;
                }
            }
            eprintln!("{}", est.meta);
            Ok(0)
        }
        Command::Energy {
            common,
            ball: ball_r,
            tol,
            max_iters,
        } => {
            setup_workers(common.workers);
            let green = green_eval(&common)?;
            let a = SiteSet::from_points(common.d, &ball(common.d, &LatticePoint::origin(), ball_r));
            let res = energy_minimize(&a, &green, tol, max_iters)?;
            let echo = config_echo(
                &common,
                "energy",
                json!({"set": format!("ball_r{ball_r}"), "tol": tol, "max_iters": max_iters}),
            );
            let mut out = open_out(&common.out)?;
            let record = json!({
                "config": serde_json::from_str::<serde_json::Value>(&echo).expect("echo is json"),
                "energy": res.energy,
                "fw_gap": res.fw_gap,
                "iterations": res.iterations,
                "capacity_proxy": capacity_proxy(&res),
                "support": res.measure.len(),
            });
            writeln!(out, "{record}")?;
            Ok(0)
        }
        Command::LawlerCheck {
            common,
            n,
            samples,
        } => {
            setup_workers(common.workers);
            let law = resolve_law(&common.law)?;
            let sampler = TreeSampler::new(common.d, law)?;
            let green = green_eval(&common)?;
            let caps = TruncationPolicy::new(8.0, common.node_cap, 10_000_000)?;
            let rf = common.radius_factor.unwrap_or(4.0);
            let report = verify_identities(&sampler, n, &caps, rf, &green, samples, common.seed)?;
            let echo = config_echo(
                &common,
                "lawler-check",
                json!({"n": n, "samples": samples, "retried": report.retried}),
            );
            let mut out = open_out(&common.out)?;
            write_stat_lines(
                &mut out,
                common.format,
                &echo,
                &[
                    (n, "identity_l", &report.pair.l_form),
                    (n, "identity_u", &report.pair.u_form),
                ],
                common.seed,
            )?;
            drop(out);
            for (name, est, pass) in [
                ("L", &report.pair.l_form, report.pass_l),
                ("U", &report.pair.u_form, report.pass_u),
            ] {
                eprintln!(
                    "{name}-form: mean {:.5} +- {:.5} (bias {:.2e}) {}",
                    est.mean,
                    est.stderr,
                    est.bias_bound,
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            Ok(if report.pass_l && report.pass_u { 0 } else { 2 })
        }
        Command::Stats {
            common,
            n_list,
            samples,
        } => {
            setup_workers(common.workers);
            let law = resolve_law(&common.law)?;
            let sampler = TreeSampler::new(common.d, law)?;
            let green = green_eval(&common)?;
            let caps = TruncationPolicy::new(8.0, common.node_cap, 100_000_000)?;
            let rf = common.radius_factor.unwrap_or(1.5);
            let stats = stats_un_gn(&sampler, &n_list, &caps, rf, &green, samples, common.seed)?;
            let echo = config_echo(
                &common,
                "stats",
                json!({
                    "n_list": n_list,
                    "samples": samples,
                    "slope_u": stats.slope_u,
                    "slope_g": stats.slope_g,
                }),
            );
            let mut rows: Vec<(u64, &str, McEstimate)> = Vec::new();
            for row in &stats.rows {
                let m = |mean: f64, stderr: f64| McEstimate {
                    mean,
                    stderr,
                    samples: row.samples,
                    bias_bound: 0.0,
                    meta: String::new(),
                };
                rows.push((row.n, "mean_u", m(row.mean_u, row.stderr_u)));
                rows.push((row.n, "var_u", m(row.var_u, 0.0)));
                rows.push((row.n, "mean_g", m(row.mean_g, row.stderr_g)));
                rows.push((row.n, "var_g", m(row.var_g, 0.0)));
                rows.push((row.n, "mean_small_g", m(row.mean_small_g, 0.0)));
            }
            let refs: Vec<(u64, &str, &McEstimate)> =
                rows.iter().map(|(n, s, e)| (*n, *s, e)).collect();
            let mut out = open_out(&common.out)?;
            write_stat_lines(&mut out, common.format, &echo, &refs, common.seed)?;
            eprintln!(
                "slope mean_u vs log n: {:.5}; slope mean_g vs log n: {:.5}",
                stats.slope_u, stats.slope_g
            );
            Ok(0)
        }
        Command::Escape {
            common,
            n,
            samples,
        } => {
            setup_workers(common.workers);
            let law = resolve_law(&common.law)?;
            let sampler = TreeSampler::new(common.d, law)?;
            let caps = TruncationPolicy::new(8.0, common.node_cap, 10_000_000)?;
            let rf = common.radius_factor.unwrap_or(2.0);
            let (pa, pb) = estimate_escape(&sampler, n, &caps, rf, samples, common.seed)?;
            let echo = config_echo(&common, "escape", json!({"n": n, "samples": samples}));
            let mut out = open_out(&common.out)?;
            write_stat_lines(
                &mut out,
                common.format,
                &echo,
                &[(n, "p_a", &pa), (n, "p_b", &pb)],
                common.seed,
            )?;
            Ok(0)
        }
        Command::Sweep {
            common,
            n_list,
            samples,
            rel_stderr,
            max_samples,
        } => {
            setup_workers(common.workers);
            let law = resolve_law(&common.law)?;
            let sampler = TreeSampler::new(common.d, law)?;
            let caps = TruncationPolicy::new(8.0, common.node_cap, 10_000_000)?;
            let rf = common.radius_factor.unwrap_or(3.0);
            let budget = if samples == 0 {
                SweepBudget::Auto {
                    rel_stderr,
                    max_samples,
                }
            } else {
                SweepBudget::Fixed(samples)
            };
            let started = Instant::now();
            let rows = scaling_sweep(&sampler, &n_list, &caps, rf, budget, common.seed)?;
            let echo = config_echo(&common, "sweep", json!({"n_list": n_list}));
            let mut out = open_out(&common.out)?;
            match common.format {
                Format::Csv => {
                    writeln!(out, "# {echo}")?;
                    write_scaling_csv(&mut out, &rows)?;
                }
                Format::Jsonl => {
                    writeln!(out, "{{\"config\":{echo}}}")?;
                    for r in &rows {
                        writeln!(out, "{}", serde_json::to_string(r).expect("serializable"))?;
                    }
                }
            }
            drop(out);
            if let Some(path) = &common.out {
                let meta = SweepMetadata::collect(
                    &common.law,
                    &caps,
                    rf,
                    &n_list,
                    common.seed,
                    started,
                );
                let mut mpath = path.clone();
                let mut name = mpath
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                name.push_str(".meta.json");
                mpath.set_file_name(name);
                let mut mout = BufWriter::new(File::create(&mpath)?);
                meta.write_json(&mut mout)?;
            }
            Ok(0)
        }
        Command::TreeDump { common, radius } => {
            let law = resolve_law(&common.law)?;
            let sampler = TreeSampler::new(common.d, law)?;
            let policy = TruncationPolicy::new(radius, common.node_cap, 1_000_000)?;
            let mut rng = stream(common.seed, &[0x31]);
            let mut out = open_out(&common.out)?;
            writeln!(
                out,
                "# {}",
                config_echo(&common, "tree-dump", json!({"radius": radius}))
            )?;
            sampler.dump_invariant_tree(LatticePoint::origin(), &policy, &mut rng, &mut out)?;
            Ok(0)
        }
    }
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        // A downstream consumer closing the pipe early is not an error.
        Err(bcap::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            std::process::exit(0)
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
