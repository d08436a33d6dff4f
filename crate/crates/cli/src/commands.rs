use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use kbse::agent::{DdpgAgent, PolicyParams};
use kbse::barrier::{certify_values, BarrierModel};
use kbse::kbse_loop::{eval_episode, run_kbse_until, EvalEpisode, EvalReport, RunConfig, RunOutput};
use kbse::ReplayBuffer;
use rayon::prelude::*;

use crate::interrupt;
use crate::report::{reference_for, CertificateReport, EvalOutput, TrainSummary, REPORT_VERSION};

pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(error: anyhow::Error) -> CliError {
    CliError { code: 2, error }
}

fn runtime(error: anyhow::Error) -> CliError {
    CliError { code: 1, error }
}

trait Classify<T> {
    fn usage_err(self) -> CliResult<T>;
    fn runtime_err(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage_err(self) -> CliResult<T> {
        self.map_err(|e| usage(e.into()))
    }
    fn runtime_err(self) -> CliResult<T> {
        self.map_err(|e| runtime(e.into()))
    }
}

/// Reads and validates a run configuration, applying command-line overrides.
pub fn load_config(path: &Path, seed: Option<u64>, env: Option<&str>, horizon: Option<usize>) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))
        .usage_err()?;
    let mut config: RunConfig = toml::from_str(&text)
        .with_context(|| format!("invalid config file {}", path.display()))
        .usage_err()?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(e) = env {
        config.env.name = e.to_string();
    }
    if let Some(h) = horizon {
        config.training.horizon = h;
    }
    config.validate().usage_err()?;
    Ok(config)
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display())).runtime_err()
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display())).runtime_err()?;
    for r in rows {
        w.serialize(r).runtime_err()?;
    }
    w.flush().runtime_err()
}

fn save_run(out_dir: &Path, config: &RunConfig, run: &RunOutput) -> CliResult<TrainSummary> {
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display())).runtime_err()?;
    write(&out_dir.join("config.toml"), &toml::to_string(config).runtime_err()?)?;
    write(&out_dir.join("policy.json"), &run.agent.to_params().to_json().runtime_err()?)?;
    let barrier_path = out_dir.join("barrier.json");
    match &run.barrier {
        Some(b) => write(&barrier_path, &b.to_json().runtime_err()?)?,
        None => {
            if barrier_path.exists() {
                fs::remove_file(&barrier_path).runtime_err()?;
            }
        }
    }
    write(&out_dir.join("metrics.jsonl"), &run.metrics.to_jsonl().runtime_err()?)?;
    write_csv(&out_dir.join("episodes.csv"), &run.metrics.episodes)?;
    write_csv(&out_dir.join("epochs.csv"), &run.metrics.epochs)?;
    let buffer_file = fs::File::create(out_dir.join("buffer.jsonl")).runtime_err()?;
    run.buffer.write_jsonl(buffer_file).runtime_err()?;
    let summary = TrainSummary::new(run, config.seed, config.training.zeta);
    write(&out_dir.join("summary.json"), &serde_json::to_string_pretty(&summary).runtime_err()?)?;
    Ok(summary)
}

pub fn train(config_path: &Path, out_dir: &Path, seed: Option<u64>, env: Option<&str>, horizon: Option<usize>) -> CliResult<()> {
    let config = load_config(config_path, seed, env, horizon)?;
    interrupt::install();
    let run = run_kbse_until(&config, &interrupt::STOP).runtime_err()?;
    let summary = save_run(out_dir, &config, &run)?;
    println!(
        "{}: {} steps, {} episodes, {} violations (90th percentile at {})",
        summary.env,
        summary.steps,
        summary.episodes,
        summary.total_violations,
        summary.violation_p90_pct.map_or("n/a".into(), |p| format!("{p:.2}% of horizon")),
    );
    println!("{}", summary.certificate.statement);
    println!("outputs written to {}", out_dir.display());
    if run.interrupted {
        return Err(runtime(anyhow!("interrupted after {} steps; checkpoints flushed", summary.steps)));
    }
    Ok(())
}

pub struct EvalRequest {
    pub policy: PathBuf,
    pub barrier: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub episodes: usize,
    pub seed: Option<u64>,
    pub env: Option<String>,
    pub out: Option<PathBuf>,
}

fn read_checkpoint(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).runtime_err()
}

pub fn load_policy(path: &Path) -> CliResult<DdpgAgent> {
    let text = read_checkpoint(path)?;
    PolicyParams::from_json(&text)
        .and_then(|p| DdpgAgent::from_params(&p))
        .with_context(|| format!("policy checkpoint {}", path.display()))
        .runtime_err()
}

pub fn load_barrier(path: &Path) -> CliResult<BarrierModel> {
    let text = read_checkpoint(path)?;
    BarrierModel::from_json(&text).with_context(|| format!("barrier file {}", path.display())).runtime_err()
}

fn eval_config(req: &EvalRequest) -> CliResult<RunConfig> {
    let sibling = req.policy.parent().map(|d| d.join("config.toml"));
    match (&req.config, sibling.filter(|p| p.exists())) {
        (Some(path), _) => load_config(path, req.seed, req.env.as_deref(), None),
        (None, Some(path)) => load_config(&path, req.seed, req.env.as_deref(), None),
        (None, None) => {
            let name = req
                .env
                .as_deref()
                .ok_or_else(|| usage(anyhow!("no config found next to the policy; pass --config or --env")))?;
            let mut c = RunConfig::new(name);
            c.seed = req.seed.unwrap_or(0);
            c.validate().usage_err()?;
            Ok(c)
        }
    }
}

pub fn eval(req: &EvalRequest) -> CliResult<()> {
    let config = eval_config(req)?;
    let agent = load_policy(&req.policy)?;
    let barrier = req.barrier.as_deref().map(load_barrier).transpose()?;
    let env = config.make_env().usage_err()?;
    if agent.state_dim() != env.state_dim || agent.action_dim() != env.action_dim {
        return Err(usage(anyhow!("policy dimensions do not match environment `{}`", env.name())));
    }
    let episodes: Vec<EvalEpisode> = (0..req.episodes as u64)
        .into_par_iter()
        .map(|i| eval_episode(&env, &agent, barrier.as_ref(), &config.shield, config.seed, i))
        .collect::<Result<_, _>>()
        .runtime_err()?;
    let output = EvalOutput {
        version: REPORT_VERSION,
        env: env.name().to_string(),
        seed: config.seed,
        shielded: barrier.as_ref().is_some_and(|b| b.valid),
        certified_delta: barrier.as_ref().filter(|b| b.valid).map(|b| b.delta),
        report: EvalReport::from_episodes(&episodes),
    };
    let json = serde_json::to_string_pretty(&output).runtime_err()?;
    println!("{json}");
    if let Some(dir) = &req.out {
        fs::create_dir_all(dir).runtime_err()?;
        write(&dir.join("eval.json"), &json)?;
    }
    Ok(())
}

pub fn certify(barrier_path: &Path, horizon: Option<usize>, env: Option<&str>, out: Option<&Path>) -> CliResult<()> {
    let mut model = load_barrier(barrier_path)?;
    if let Some(t) = horizon {
        if t == 0 {
            return Err(usage(anyhow!("--horizon must be positive")));
        }
        model.horizon_t = t;
    }
    // Recompute rather than trust the stored delta: the levels decide validity.
    match certify_values(model.eta, model.nu, model.c, model.horizon_t) {
        Ok(delta) if model.valid => model.delta = delta,
        Ok(_) => {}
        Err(_) => model.valid = false,
    }
    let cert = model.certificate();
    let fmt = |v: f64| format!("{v:.6e}");
    println!("eta      {}", fmt(model.eta));
    println!("nu       {}", fmt(model.nu));
    println!("c        {}", fmt(model.c));
    println!("c_minmax {}", fmt(model.c_minmax));
    println!("b_bar    {}", fmt(model.b_bar));
    println!("epsilon  {}", fmt(model.epsilon));
    println!("zeta     {}", fmt(model.zeta));
    println!("T        {}", model.horizon_t);
    match cert.delta {
        Some(d) => println!("delta    {d:.6}"),
        None => println!("delta    n/a (invalid barrier)"),
    }
    println!("{}", cert.statement());
    if let Some(r) = env.and_then(reference_for) {
        println!("reference (published, not comparable at this scale): safety probability {}", r.safety_probability);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).runtime_err()?;
        let report = CertificateReport::from_certificate(&cert);
        write(&dir.join("certificate.json"), &serde_json::to_string_pretty(&report).runtime_err()?)?;
    }
    Ok(())
}

pub fn inspect(path: &Path) -> CliResult<()> {
    let text = read_checkpoint(path)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".jsonl") {
        let first: serde_json::Value = text
            .lines()
            .next()
            .map(serde_json::from_str)
            .transpose()
            .runtime_err()?
            .unwrap_or(serde_json::Value::Null);
        if first.get("record").is_some() {
            return inspect_metrics(&text);
        }
        let buffer = ReplayBuffer::read_jsonl(BufReader::new(text.as_bytes())).runtime_err()?;
        println!("transition buffer: {} transitions", buffer.len());
        if let Some(t) = buffer.as_slice().first() {
            println!("state dim {}, action dim {}", t.s.len(), t.a.len());
        }
        return Ok(());
    }
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not JSON", path.display()))
        .runtime_err()?;
    if value.get("alpha").is_some() {
        let m = load_barrier(path)?;
        println!(
            "barrier: {} centers in {} dimensions, bandwidth {:.4}, ridge {:.1e}",
            m.centers.len(),
            m.state_dim().unwrap_or(0),
            m.bandwidth,
            m.ridge_lambda
        );
        println!("{}", m.certificate().statement());
    } else if value.get("theta").is_some() {
        let agent = load_policy(path)?;
        println!(
            "policy: state dim {}, action dim {}, actor {} parameters, critic {} parameters, hidden {:?}",
            agent.state_dim(),
            agent.action_dim(),
            agent.actor().num_params(),
            agent.critic().num_params(),
            agent.config.hidden
        );
    } else if value.get("certificate").is_some() {
        println!("{}", serde_json::to_string_pretty(&value).runtime_err()?);
    } else {
        return Err(runtime(anyhow!("unrecognised file {}", path.display())));
    }
    Ok(())
}

fn inspect_metrics(text: &str) -> CliResult<()> {
    let mut episodes = 0usize;
    let mut reward = 0.0;
    let mut cost = 0u64;
    let mut epochs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).with_context(|| format!("metrics line {}", i + 1)).runtime_err()?;
        match v.get("record").and_then(|r| r.as_str()) {
            Some("episode") => {
                episodes += 1;
                reward += v["reward"].as_f64().unwrap_or(0.0);
                cost += v["cost"].as_u64().unwrap_or(0);
            }
            Some("epoch") => epochs.push(v),
            _ => return Err(runtime(anyhow!("metrics line {}: missing record tag", i + 1))),
        }
    }
    println!("metrics: {episodes} episodes, {} epochs, {cost} unsafe steps", epochs.len());
    if episodes > 0 {
        println!("mean episode reward {:.3}", reward / episodes as f64);
    }
    for e in &epochs {
        println!(
            "epoch {} (step {}): valid {} accepted {} delta {}",
            e["epoch"], e["step"], e["valid"], e["accepted"], e["delta"]
        );
    }
    Ok(())
}
