//! `featinv`: feature-inversion attacks on split models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use featinv_core::config::{parse_config, AttackVariant, RunConfig};
use featinv_core::error::{Error, Result};
use featinv_core::manifest::RunManifest;
use featinv_core::runner::{self, Command, RunOutcome};
use featinv_core::splitnet::zoo;

#[derive(Parser)]
#[command(name = "featinv", version, about = "Feature-inversion attacks on split neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set attack.iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root (`out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output subdirectory (`run_id`).
    #[arg(long)]
    run_id: Option<String>,
    /// Base seed (`seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// White-box inversion of intercepted features.
    Whitebox {
        #[command(flatten)]
        common: Common,
        /// Text prompt for the prior (`attack.text`).
        #[arg(long)]
        text: Option<String>,
        /// Directory of consecutive frames; switches to multi-frame inversion.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// White-box inversion with a text-conditioned prior.
    WhiteboxText {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        text: String,
    },
    /// Joint inversion of consecutive frames.
    Multiframe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Query-based attack: collect pairs, train an inverter, run it.
    Blackbox {
        #[command(subcommand)]
        stage: BlackboxStage,
    },
    /// Run whatever `attack.variant` selects.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Privacy/utility sweep over feature-noise levels.
    Defend {
        #[command(flatten)]
        common: Common,
        /// Comma-separated noise levels (`defense.sigmas`).
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        /// Also copy the trade-off table here.
        #[arg(long = "csv")]
        csv: Option<PathBuf>,
    },
    /// PSNR/SSIM/IS of reconstructions against originals.
    Metrics {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        /// Model used for the inception score, or `none`.
        #[arg(long, default_value = "toy_cnn")]
        classifier: String,
        /// Write the report as JSON (or CSV when the name ends in .csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary table and comparison figure over finished runs.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
    /// Re-execute a run from its manifest and compare checksums.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several configs as independent processes.
    Batch {
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum BlackboxStage {
    Collect {
        #[command(flatten)]
        common: Common,
    },
    Train {
        #[command(flatten)]
        common: Common,
    },
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, mut extra: Vec<(String, String)>) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(o) = &common.out {
        overrides.push(("out_dir".to_string(), toml_string(&o.to_string_lossy())));
    }
    if let Some(r) = &common.run_id {
        overrides.push(("run_id".to_string(), toml_string(r)));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    overrides.append(&mut extra);
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.clone(), "expected KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if overrides.is_empty() {
        Ok(base)
    } else {
        base.with_overrides(&overrides)
    }
}

fn toml_string(s: &str) -> String {
    format!("{s:?}")
}

fn variant(v: AttackVariant) -> (String, String) {
    let name = match v {
        AttackVariant::Whitebox => "whitebox",
        AttackVariant::WhiteboxText => "whitebox_text",
        AttackVariant::Multiframe => "multiframe",
        AttackVariant::Blackbox => "blackbox",
    };
    ("attack.variant".into(), toml_string(name))
}

fn frames_overrides(dir: &Path) -> Vec<(String, String)> {
    vec![
        variant(AttackVariant::Multiframe),
        ("data.source".into(), toml_string("directory")),
        ("data.images_dir".into(), toml_string(&dir.to_string_lossy())),
    ]
}

fn report_outcome(o: &RunOutcome) {
    println!("run {} -> {}", o.manifest.run_id, o.dir.display());
    let metrics = o.dir.join("metrics.json");
    if let Ok(r) = featinv_core::metrics::MetricsReport::load(&metrics) {
        let a = &r.aggregate;
        match a.inception_score {
            Some(is) => println!("mean PSNR {:.2} dB, mean SSIM {:.4}, IS {:.3}", a.mean_psnr, a.mean_ssim, is),
            None => println!("mean PSNR {:.2} dB, mean SSIM {:.4}", a.mean_psnr, a.mean_ssim),
        }
    }
    if o.manifest.status != featinv_core::manifest::RunStatus::Completed {
        println!("status: {:?}", o.manifest.status);
    }
}

fn attack(common: &Common, extra: Vec<(String, String)>, command: Command) -> Result<()> {
    let cfg = resolve(common, extra)?;
    let out = runner::run_command(&cfg, command)?;
    report_outcome(&out);
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Whitebox { common, text, frames } => {
            let mut extra = vec![variant(AttackVariant::Whitebox)];
            if let Some(t) = text {
                extra.push(("attack.text".into(), toml_string(&t)));
            }
            if let Some(d) = frames {
                extra.extend(frames_overrides(&d));
            }
            attack(&common, extra, Command::Attack)
        }
        Cmd::WhiteboxText { common, text } => attack(
            &common,
            vec![variant(AttackVariant::WhiteboxText), ("attack.text".into(), toml_string(&text))],
            Command::Attack,
        ),
        Cmd::Multiframe { common, frames } => {
            let mut extra = vec![variant(AttackVariant::Multiframe)];
            if let Some(d) = frames {
                extra.extend(frames_overrides(&d));
            }
            attack(&common, extra, Command::Attack)
        }
        Cmd::Blackbox { stage } => match stage {
            BlackboxStage::Collect { common } => attack(&common, vec![], Command::BlackboxCollect),
            BlackboxStage::Train { common } => attack(&common, vec![], Command::BlackboxTrain),
            BlackboxStage::Run { common } => attack(&common, vec![], Command::BlackboxRun),
        },
        Cmd::Run { common } => attack(&common, vec![], Command::Attack),
        Cmd::Defend { common, sigmas, csv } => {
            let mut extra = Vec::new();
            if let Some(s) = sigmas {
                let list: Vec<String> = s.iter().map(|x| format!("{x:?}")).collect();
                extra.push(("defense.sigmas".into(), format!("[{}]", list.join(", "))));
            }
            let cfg = resolve(&common, extra)?;
            let out = runner::run_command(&cfg, Command::Defend)?;
            let table = out.dir.join("tradeoff.csv");
            if let Some(dest) = csv {
                std::fs::copy(&table, &dest).map_err(|e| Error::io(&dest, e))?;
            }
            println!("run {} -> {}", out.manifest.run_id, out.dir.display());
            print!("{}", std::fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?);
            Ok(())
        }
        Cmd::Metrics {
            original,
            recon,
            classifier,
            out,
        } => {
            let model = match classifier.as_str() {
                "none" => None,
                name => Some(zoo::load_model(name, None)?),
            };
            let report = runner::evaluate_dirs(&original, &recon, model.as_ref())?;
            match out {
                Some(p) if p.extension().is_some_and(|e| e == "csv") => {
                    featinv_core::io::write_atomic(&p, report.to_csv().as_bytes())?
                }
                Some(p) => report.save(&p)?,
                None => {}
            }
            println!("{}", report.to_json());
            Ok(())
        }
        Cmd::Report { runs, out, images } => {
            if runs.is_empty() {
                return Err(Error::input("no run directories given"));
            }
            let (table, figure) = runner::build_report(&runs, images)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            featinv_core::io::write_atomic(&out.join("report.md"), table.as_bytes())?;
            if let Some(fig) = figure {
                fig.save_png(&out.join("comparison.png"))?;
            }
            print!("{table}");
            Ok(())
        }
        Cmd::Replay { manifest, out } => {
            let m = RunManifest::load(&manifest)?;
            let (outcome, diff) = runner::replay(&m, &out)?;
            report_outcome(&outcome);
            if diff.is_empty() {
                println!("all {} artifacts reproduced", m.artifacts.len());
                Ok(())
            } else {
                Err(Error::Contract(format!("artifacts differ: {}", diff.join(", "))))
            }
        }
        Cmd::Batch { configs, jobs } => batch(&configs, jobs.max(1)),
        Cmd::Config { common } => {
            print!("{}", resolve(&common, vec![])?.to_toml());
            Ok(())
        }
    }
}

/// Each config runs in its own child process; the first failing exit code
/// is returned once all jobs finish.
fn batch(configs: &[PathBuf], jobs: usize) -> Result<()> {
    if configs.is_empty() {
        return Err(Error::input("no configs given"));
    }
    let exe = std::env::current_exe().map_err(|e| Error::io("featinv", e))?;
    let mut pending = configs.iter();
    let mut running: Vec<(PathBuf, std::process::Child)> = Vec::new();
    let mut failures: Vec<(PathBuf, i32)> = Vec::new();
    loop {
        while running.len() < jobs {
            let Some(cfg) = pending.next() else { break };
            let child = std::process::Command::new(&exe)
                .arg("run")
                .arg("--config")
                .arg(cfg)
                .spawn()
                .map_err(|e| Error::io(cfg, e))?;
            running.push((cfg.clone(), child));
        }
        if running.is_empty() {
            break;
        }
        let (cfg, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| Error::io(&cfg, e))?;
        if !status.success() {
            failures.push((cfg, status.code().unwrap_or(1)));
        }
    }
    match failures.first() {
        None => Ok(()),
        Some((_, code)) => {
            for (cfg, c) in &failures {
                eprintln!("{} failed with exit code {c}", cfg.display());
            }
            Err(Error::Batch { code: *code, failed: failures.len() })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
