use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use neubay::agent::{evaluate, ActMode, SacAgent};
use neubay::bandit::{fig3_csv, run_bandit, BanditRunConfig, LAMBDA_HEAVY};
use neubay::diagnostics::{backup_bound_grid, backup_csv, open_loop_eval, DEFAULT_ROLLOUTS};
use neubay::env::pointline::{generate_dataset, PointLine, DEFAULT_HORIZON};
use neubay::env::{load_dataset, save_dataset, BehaviorPolicy, NeverTerminal, DEFAULT_GAMMA};
use neubay::rng::{stream, Stream};
use neubay::rollout::{round_horizons, rollout_round, RolloutSpec, UniformPolicy};
use neubay::theory::{gap_csv, gap_experiment, eps_threshold, GapConfig};
use neubay::trainer::{self, RunConfig};
use neubay::world::{EnsembleConfig, WorldEnsemble};

#[derive(Parser)]
#[command(name = "neubay", version, about = "Bayesian offline model-based RL toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or generate offline datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train world-model ensembles and inspect their uncertainty.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Imagined rollout statistics.
    #[command(subcommand)]
    Rollout(RolloutCmd),
    /// Evaluate a trained agent.
    #[command(subcommand)]
    Agent(AgentCmd),
    /// Run offline training from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key.path=value`, applied after the file.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Continue a run from its last checkpoint.
    Resume {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Skewed two-armed bandit experiment.
    #[command(subcommand)]
    Bandit(BanditCmd),
    /// Numerical checks of the two-bandit construction.
    #[command(subcommand)]
    Theory(TheoryCmd),
    /// Compounding-error and backup-bound diagnostics.
    #[command(subcommand)]
    Diag(DiagCmd),
}

#[derive(Subcommand)]
enum DatasetCmd {
    Validate { path: PathBuf },
    Stats { path: PathBuf },
    /// Roll a behavior policy in PointLine.
    Generate {
        #[arg(long, value_enum, default_value_t = Behavior::Medium)]
        behavior: Behavior,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Behavior {
    Random,
    Medium,
    NearOptimal,
}

impl Behavior {
    fn policy(self) -> BehaviorPolicy {
        match self {
            Behavior::Random => BehaviorPolicy::Random,
            Behavior::Medium => BehaviorPolicy::medium(),
            Behavior::NearOptimal => BehaviorPolicy::NearOptimal { noise_std: 0.1 },
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum ModelCmd {
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 16)]
        pool: usize,
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long, value_enum, default_value_t = OnOff::On)]
        layernorm: OnOff,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical CDF of dataset uncertainties, normalized by their mean.
    Cdf {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RolloutCmd {
    /// One round of uniform-policy rollouts from dataset histories.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        zeta: f64,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AgentCmd {
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "pointline")]
        env: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample actions instead of acting on the mean.
        #[arg(long)]
        stochastic: bool,
    },
}

#[derive(Subcommand)]
enum BanditCmd {
    Run {
        /// Penalty coefficient; repeat for a sweep.
        #[arg(long = "lambda", default_values_t = vec![0.0, LAMBDA_HEAVY])]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TheoryCmd {
    Verify {
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        /// Gap sizes; defaults to a grid up to twice the regime threshold.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DiagCmd {
    Compound(CompoundArgs),
    BackupBound {
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long = "H", default_value_t = 50)]
        h: usize,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        eps: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CompoundArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ROLLOUTS)]
    rollouts: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Validate { path } => {
            let ds = load_dataset(&path)?;
            println!(
                "ok: {} trajectories, {} transitions",
                ds.trajectories().len(),
                ds.num_transitions()
            );
        }
        DatasetCmd::Stats { path } => {
            let ds = load_dataset(&path)?;
            let h = ds.header();
            println!("state_dim {} action_dim {} T {} gamma {}", h.state_dim, h.action_dim, h.max_len, h.gamma);
            println!("trajectories {}", ds.trajectories().len());
            let mut hist = BTreeMap::new();
            for t in ds.trajectories() {
                *hist.entry(t.len()).or_insert(0usize) += 1;
            }
            println!("length histogram:");
            for (len, count) in hist {
                println!("  {len:>6} {count}");
            }
            let (lo, hi) = ds.reward_range();
            println!("reward range [{lo}, {hi}]");
        }
        DatasetCmd::Generate {
            behavior,
            n,
            horizon,
            gamma,
            seed,
            out,
        } => {
            let mut rng = stream(seed, Stream::Data, &[]);
            let ds = generate_dataset(&PointLine::new(horizon), behavior.policy(), n, gamma, &mut rng)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} trajectories to {}", n, out.display());
        }
    }
    Ok(())
}

fn model(cmd: ModelCmd) -> Result<()> {
    match cmd {
        ModelCmd::Train {
            dataset,
            pool,
            top,
            layernorm,
            seed,
            out,
        } => {
            let ds = load_dataset(&dataset)?;
            let mut cfg = EnsembleConfig {
                pool_size: pool,
                top_n: top,
                ..Default::default()
            };
            cfg.model.layer_norm = layernorm == OnOff::On;
            let world = WorldEnsemble::train(&ds, &cfg, seed)?;
            world.save(&out)?;
            println!("saved {} members to {}", world.len(), out.display());
        }
        ModelCmd::Cdf { ckpt, dataset, out } => {
            let world = WorldEnsemble::load(&ckpt)?;
            let ds = load_dataset(&dataset)?;
            let mut s = String::from("normalized_uncertainty,cdf\n");
            for (u, p) in world.empirical_cdf(&ds)? {
                s.push_str(&format!("{u},{p}\n"));
            }
            write(&out, &s)?;
        }
    }
    Ok(())
}

fn rollout(cmd: RolloutCmd) -> Result<()> {
    let RolloutCmd::Analyze {
        ckpt,
        dataset,
        zeta,
        k,
        seed,
        out,
    } = cmd;
    let world = WorldEnsemble::load(&ckpt)?;
    let ds = load_dataset(&dataset)?;
    let spec = RolloutSpec {
        k,
        threshold: world.quantile_threshold(&ds, zeta)?,
        horizon: ds.max_len(),
        penalty: 0.0,
        keep_truncated_step: true,
    };
    let policy = UniformPolicy {
        action_dim: ds.action_dim(),
    };
    let round = rollout_round(&ds, &world, &NeverTerminal, &policy, &spec, seed, 0)?;
    let mut s = String::from("rollout,model,trajectory,t,length,stop\n");
    for (i, r) in round.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            r.model_index,
            r.history.trajectory,
            r.history.t,
            r.imagined_len(),
            r.stop.as_str()
        ));
    }
    write(&out, &s)?;
    let h = round_horizons(&round)?;
    println!(
        "threshold {:.6} median {} q25 {} q75 {} max {}",
        spec.threshold.value, h.median, h.q25, h.q75, h.max
    );
    Ok(())
}

fn agent(cmd: AgentCmd) -> Result<()> {
    let AgentCmd::Eval {
        ckpt,
        env,
        episodes,
        horizon,
        seed,
        stochastic,
    } = cmd;
    if env != "pointline" {
        bail!("unknown environment {env:?}; only pointline is built in");
    }
    let agent = SacAgent::load(&ckpt)?;
    let mode = if stochastic { ActMode::Stochastic } else { ActMode::Deterministic };
    let mut rng = stream(seed, Stream::Eval, &[]);
    let report = evaluate(
        &agent.policy(mode),
        &mut PointLine::new(horizon),
        episodes,
        agent.cfg.gamma,
        &mut rng,
    )?;
    println!(
        "return {:.4} ± {:.4} (discounted {:.4}) over {episodes} episodes",
        report.mean, report.std, report.discounted_mean
    );
    Ok(())
}

fn bandit(cmd: BanditCmd) -> Result<()> {
    let BanditCmd::Run {
        lambdas,
        seed,
        config,
        overrides,
        out,
    } = cmd;
    let mut value = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
        None => serde_json::to_value(BanditRunConfig::default())?,
    };
    for o in &overrides {
        trainer::apply_override(&mut value, o)?;
    }
    let cfg: BanditRunConfig = serde_json::from_value(value)?;
    let (_, runs) = run_bandit(&cfg, &lambdas, seed)?;
    fs::create_dir_all(&out)?;
    let mut fig3 = String::new();
    for (i, run) in runs.iter().enumerate() {
        let csv = fig3_csv(&run.rows, run.lambda);
        fig3.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |c| c.1) });
        for r in &run.rows {
            println!(
                "lambda {} p1 {} return {:.3} arm1 rate {:.3}",
                run.lambda, r.p1, r.mean_return, r.arm1_rate
            );
        }
    }
    write(&out.join("fig3_data.csv"), &fig3)?;
    if let Some(run) = runs.first() {
        write(&out.join("posterior_hist.csv"), &run.posterior.to_csv())?;
        println!("uncertainty ratio U(1)/U(0) = {:.2}", run.posterior.ratio);
    }
    write(&out.join("runs.json"), &serde_json::to_string_pretty(&runs)?)?;
    Ok(())
}

fn theory(cmd: TheoryCmd) -> Result<()> {
    let TheoryCmd::Verify {
        beta,
        n,
        gamma,
        trials,
        eps,
        seed,
        out,
    } = cmd;
    let thr = eps_threshold(n, beta).min(0.5);
    let eps = eps.unwrap_or_else(|| (0..=8).map(|i| (thr * i as f64 / 4.0).min(0.5)).collect());
    let rows = gap_experiment(&GapConfig {
        beta,
        n,
        gamma,
        eps,
        trials,
        seed,
    })?;
    for r in &rows {
        println!(
            "eps {:.4} misidentification {:.4} (sigma {:.4}) delta_dp {:.5}",
            r.eps, r.misidentification, r.sigma, r.delta_dp
        );
    }
    write(&out, &gap_csv(&rows))
}

fn diag(cmd: DiagCmd) -> Result<()> {
    match cmd {
        DiagCmd::Compound(a) => {
            let world = WorldEnsemble::load(&a.ckpt)?;
            let ds = load_dataset(&a.dataset)?;
            let report = open_loop_eval(&world, &ds, a.rollouts, a.steps, a.seed)?;
            fs::create_dir_all(&a.out)?;
            write(&a.out.join("bands.csv"), &report.bands_csv())?;
            write(&a.out.join("scatter.csv"), &report.scatter_csv())?;
            println!("spearman(uncertainty, next-state rmse) = {:.4}", report.spearman);
        }
        DiagCmd::BackupBound {
            gamma,
            h,
            delta,
            eps,
            trials,
            seed,
            out,
        } => {
            let rows = backup_bound_grid(&[gamma], h, &[delta], &[eps], trials, seed)?;
            let violations: usize = rows.iter().map(|r| r.violations).sum();
            write(&out, &backup_csv(&rows))?;
            println!("{} grid points, {violations} violations", rows.len());
            if violations > 0 {
                bail!("realized error exceeded the bound");
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Dataset(c) => dataset(c),
        Command::Model(c) => model(c),
        Command::Rollout(c) => rollout(c),
        Command::Agent(c) => agent(c),
        Command::Train { config, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let s = trainer::train(cfg)?;
            println!("finished at step {} (round {})", s.step, s.round);
            Ok(())
        }
        Command::Resume { dir } => {
            let s = trainer::resume(&dir)?;
            if s.already_complete {
                println!("run already complete at step {}", s.step);
            } else {
                println!("finished at step {} (round {})", s.step, s.round);
            }
            Ok(())
        }
        Command::Bandit(c) => bandit(c),
        Command::Theory(c) => theory(c),
        Command::Diag(c) => diag(c),
    }
}
