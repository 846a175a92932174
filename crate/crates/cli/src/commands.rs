use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use jointpic::bench::{emit, run_bench, summary_table, BenchConfig, Method};
use jointpic::data::Dataset;
use jointpic::deriv::{gradcheck, random_state};
use jointpic::inference::{data_digest, fit, sha256_hex, wald, FitResult};
use jointpic::model::{JointModel, ModelConfig, ModelSpec};
use jointpic::optimizer::InnerLoopConfig;
use jointpic::simulate::{generate, SimScenario};
use jointpic::variance::{initial_variances, OuterLoopConfig};

use crate::{predict, Cli, Command, Status};

/// Sidecar written next to every artifact.
#[derive(Serialize)]
struct RunMeta<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config_digest: String,
    seed: Option<u64>,
    threads: usize,
    wall_clock_seconds: f64,
}

struct Ctx<'a> {
    cli: &'a Cli,
    start: Instant,
}

impl Ctx<'_> {
    fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.cli.out.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }

    fn meta(&self, command: &str, config: &serde_json::Value, seed: Option<u64>) -> Result<()> {
        let meta = RunMeta {
            tool: "jointpic",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_digest: sha256_hex(config.to_string().as_bytes()),
            seed,
            threads: rayon::current_num_threads(),
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
        };
        self.write(&format!("{command}.meta.json"), &serde_json::to_string_pretty(&meta)?)
    }
}

pub fn run(cli: &Cli) -> Result<Status> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx { cli, start: Instant::now() };
    match &cli.command {
        Command::Fit { data, model } => cmd_fit(&ctx, data, model),
        Command::Predict { fit, query } => cmd_predict(&ctx, fit, query),
        Command::Simulate { scenario } => cmd_simulate(&ctx, scenario),
        Command::Benchmark { scenario, reps, methods } => cmd_benchmark(&ctx, scenario, *reps, methods),
        Command::Gradcheck { data, model } => cmd_gradcheck(&ctx, data, model),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, serde_json::Value)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let parsed = serde_json::from_value(value.clone()).with_context(|| format!("interpreting {}", path.display()))?;
    Ok((parsed, value))
}

/// Reads and validates a data file against a model specification.
fn load(data: &Path, model: &Path) -> Result<(Dataset, ModelConfig, serde_json::Value)> {
    let (cfg, raw): (ModelConfig, _) = read_json(model)?;
    let schema = jointpic::data::CsvSchema {
        z: cfg.longitudinal.iter().map(|l| l.column.clone()).collect(),
        x: cfg.cox_covariates.clone(),
        w: cfg.long_covariates.clone(),
    };
    let ds = Dataset::read_csv(data, Some(&schema)).with_context(|| format!("reading {}", data.display()))?;
    let report = ds.validate();
    if !report.is_empty() {
        let lines: Vec<String> = report
            .findings
            .iter()
            .map(|f| format!("{}: {}", f.subject.as_deref().unwrap_or("dataset"), f.message))
            .collect();
        bail!("invalid data in {}:\n  {}", data.display(), lines.join("\n  "));
    }
    Ok((ds, cfg, raw))
}

fn cmd_fit(ctx: &Ctx, data: &Path, model: &Path) -> Result<Status> {
    let (ds, cfg, raw) = load(data, model)?;
    let res = fit(&ds, &cfg, &InnerLoopConfig::default(), &OuterLoopConfig::default())?;
    ctx.write("fit.json", &res.to_json()?)?;
    let table = summary_csv(&res)?;
    ctx.write("summary.csv", &table)?;
    print!("{}", pretty_table(&table, true));
    println!(
        "sigma_eps2 {}  sigma_theta2 {}  outer iterations {}  converged {}",
        res.var.sigma_eps2,
        res.var.sigma_theta2,
        res.history.len(),
        res.converged
    );
    ctx.meta("fit", &json!({ "model": raw, "data": data_digest(&ds)? }), ctx.cli.seed)?;
    if res.converged {
        Ok(Status::Ok)
    } else {
        eprintln!("fit did not converge; fit.json holds the best state reached");
        Ok(Status::Failed)
    }
}

fn summary_csv(res: &FitResult) -> Result<String> {
    let mut out = String::from("parameter,estimate,se,z,p,ci_lower,ci_upper\n");
    for (i, name) in res.parameter_names.iter().enumerate() {
        let w = wald(res, i)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            w.estimate,
            w.se,
            opt(w.z),
            opt(w.p),
            w.ci95.0,
            w.ci95.1
        ));
    }
    Ok(out)
}

fn pretty_table(csv: &str, round: bool) -> String {
    let rows: Vec<Vec<String>> = csv
        .lines()
        .map(|l| {
            l.split(',')
                .map(|c| match c.parse::<f64>() {
                    Ok(v) if round => format!("{v:.4}"),
                    _ => c.to_string(),
                })
                .collect()
        })
        .collect();
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(j, c)| format!("{c:>w$}", w = widths[j])).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn cmd_predict(ctx: &Ctx, fit_path: &Path, query: &Path) -> Result<Status> {
    let text = fs::read_to_string(fit_path).with_context(|| format!("reading {}", fit_path.display()))?;
    let res = FitResult::from_json(&text).with_context(|| format!("parsing {}", fit_path.display()))?;
    let (q, raw): (predict::QueryFile, _) = read_json(query)?;
    let csv = predict::curves(&res, &q)?;
    ctx.write("curves.csv", &csv)?;
    ctx.meta("predict", &json!({ "fit": sha256_hex(text.as_bytes()), "query": raw }), ctx.cli.seed)?;
    Ok(Status::Ok)
}

fn cmd_simulate(ctx: &Ctx, scenario: &Path) -> Result<Status> {
    let (mut scn, _): (SimScenario, _) = read_json(scenario)?;
    if let Some(seed) = ctx.cli.seed {
        scn.seed = seed;
    }
    let (ds, truth) = generate(&scn)?;
    ds.write_csv(ctx.cli.out.join("data.csv"))?;
    ctx.write("truth.json", &serde_json::to_string_pretty(&truth)?)?;
    let a = truth.achieved;
    println!(
        "{} subjects, {} measurements; exact {:.3} left {:.3} interval {:.3} right {:.3}",
        ds.n(),
        ds.n_measurements(),
        a.exact,
        a.left,
        a.interval,
        a.right
    );
    ctx.meta("simulate", &serde_json::to_value(&truth.scenario)?, Some(scn.seed))?;
    Ok(Status::Ok)
}

fn cmd_benchmark(ctx: &Ctx, scenario: &Path, reps: usize, methods: &[String]) -> Result<Status> {
    let (mut scn, _): (SimScenario, _) = read_json(scenario)?;
    if let Some(seed) = ctx.cli.seed {
        scn.seed = seed;
    }
    let methods = methods.iter().map(|m| m.parse::<Method>()).collect::<jointpic::Result<Vec<_>>>()?;
    let cfg = BenchConfig::new(reps, methods);
    let report = run_bench(&scn, &cfg)?;
    emit(&report, &ctx.cli.out)?;
    for (k, v) in summary_table(&report) {
        println!("{k:<28} {v}");
    }
    for m in &report.methods {
        println!(
            "{:<9} mise_h0 {:.4}  ok {}  failed {}{}",
            m.method.name(),
            m.mise_h0,
            m.successes,
            m.failures,
            if m.unreliable { "  UNRELIABLE" } else { "" }
        );
    }
    ctx.meta("benchmark", &json!({ "scenario": report.scenario, "config": cfg }), Some(scn.seed))?;
    Ok(Status::Ok)
}

fn cmd_gradcheck(ctx: &Ctx, data: &Path, model: &Path) -> Result<Status> {
    let (ds, cfg, raw) = load(data, model)?;
    let spec = ModelSpec::from_config(&cfg, &ds)?;
    let jm = JointModel::new(spec, &ds)?;
    let seed = ctx.cli.seed.unwrap_or(0);
    let state = random_state(&jm, seed);
    let var = initial_variances(&jm);
    let report = gradcheck(&jm, &state, &var);
    let mut csv = String::from("kind,block,entries,max_abs_err,max_rel_err,tolerance,result\n");
    for b in &report.blocks {
        csv.push_str(&format!(
            "{},{},{},{:.3e},{:.3e},{:e},{}\n",
            b.kind,
            b.block,
            b.entries,
            b.max_abs_err,
            b.max_rel_err,
            b.tolerance,
            if b.passed { "pass" } else { "FAIL" }
        ));
    }
    ctx.write("gradcheck.csv", &csv)?;
    print!("{}", pretty_table(&csv, false));
    ctx.meta("gradcheck", &json!({ "model": raw, "data": data_digest(&ds)? }), Some(seed))?;
    if report.passed() {
        println!("gradcheck passed");
        Ok(Status::Ok)
    } else {
        println!("gradcheck FAILED");
        Ok(Status::Failed)
    }
}
