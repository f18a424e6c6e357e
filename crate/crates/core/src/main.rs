use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use async_trait::async_trait;
use clap::{Args, Parser, Subcommand};

use agentry::autogen::{generate_workflow, run_meta_agent, DialogueSession, MetaOptions, SessionEvent, ToolLibrary};
use agentry::config::{emit_config, parse_config, EnvSpec};
use agentry::environment::{EnvHandle, EnvProvider};
use agentry::eval::{evaluate, load_dataset, persist_report, EvalOptions, Metric};
use agentry::gateway::{HttpConfig, HttpTransport, LlmClient, RecordTransport, ReplayTransport, Transport};
use agentry::practice::{practice_run, ExperienceBank, PracticeOptions};
use agentry::runtime::{run_episode, RuntimeDeps};
use agentry::service::{serve, MetaBackend, Service, ServiceOptions};
use agentry::toolkit::{HttpFetcher, OfflineFetcher, ToolCatalog};

#[derive(Parser)]
#[command(name = "agentry", version, about = "Declarative LLM agents")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Append every model exchange to this cassette.
    #[arg(long, global = true, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Answer model calls from this cassette instead of the network.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Serve web tools from this offline fixture (JSON) instead of the network.
    #[arg(long, global = true)]
    web_fixture: Option<PathBuf>,
    /// Tool library directory (builtins plus synthesized tools).
    #[arg(long, global = true, default_value = "library")]
    library: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one episode and print the final answer.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        task: String,
        /// Write the trajectory JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate an agent config from a description.
    Gen {
        #[command(subcommand)]
        mode: GenMode,
    },
    /// Improve an experience bank by grouped practice on a dataset.
    Practice {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 3)]
        epochs: u32,
        #[arg(long, default_value_t = 5)]
        group_size: usize,
        #[arg(long, default_value_t = 0.7)]
        temp: f64,
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Snapshots go to `<out>/banks/<run_id>/`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Score a config on a dataset.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(long, default_value = "pass_at_1")]
        metric: Metric,
        #[arg(short, default_value_t = 1)]
        k: u32,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
        #[arg(long)]
        temp: Option<f64>,
        /// Bank snapshot (JSON) to inject into every episode.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Results root; reports go to `<out>/<dataset>/<fingerprint>/`.
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Serve the rollout and session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 64)]
        pool: usize,
        #[arg(long, default_value = "service-data")]
        root: PathBuf,
        #[arg(long)]
        config_dir: Option<PathBuf>,
    },
    /// Minimal MCP server on stdio, for tests.
    #[command(hide = true)]
    McpStub {
        /// Never answer.
        #[arg(long)]
        silent: bool,
    },
}

#[derive(Subcommand)]
enum GenMode {
    /// Four fixed stages, no questions asked.
    Workflow {
        description: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Interactive architect agent; questions are asked on the terminal.
    Meta {
        description: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

impl Common {
    fn client(&self) -> Result<LlmClient> {
        if let Some(path) = &self.replay {
            let t = ReplayTransport::open(path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
            return Ok(LlmClient::new(Arc::new(t), "replay"));
        }
        let cfg = HttpConfig::from_env().context("set LLM_BASE_URL (and LLM_API_KEY, LLM_MODEL), or pass --replay")?;
        let model = cfg.model.clone();
        let mut t: Arc<dyn Transport> = Arc::new(HttpTransport::new(cfg)?);
        if let Some(path) = &self.record {
            t = Arc::new(RecordTransport::create(t, path).with_context(|| path.display().to_string())?);
        }
        Ok(LlmClient::new(t, model))
    }

    fn base_catalog(&self) -> Result<ToolCatalog> {
        Ok(match &self.web_fixture {
            Some(p) => ToolCatalog::builtin(Arc::new(
                OfflineFetcher::load(p).with_context(|| p.display().to_string())?,
            )),
            None => ToolCatalog::builtin(Arc::new(HttpFetcher::from_env())),
        })
    }

    fn library(&self, base: &ToolCatalog) -> Result<ToolLibrary> {
        ToolLibrary::open(&self.library, base).map_err(|e| anyhow!("{e}"))
    }

    /// Client plus the base catalog extended with synthesized tools.
    fn deps(&self) -> Result<RuntimeDeps> {
        let base = self.base_catalog()?;
        let lib = self.library(&base)?;
        Ok(RuntimeDeps::new(self.client()?).with_catalog(lib.catalog(&base)))
    }
}

fn load_config(path: &Path) -> Result<agentry::config::AgentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    parse_config(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn sandbox() -> Result<EnvHandle> {
    EnvProvider::default()
        .create(&EnvSpec::named("sandbox"))
        .map_err(|e| anyhow!("sandbox: {e}"))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| p.display().to_string()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Questions on stderr, answers from stdin.
struct TerminalDialogue;

#[async_trait]
impl DialogueSession for TerminalDialogue {
    async fn ask(&self, question: &str) -> Result<String, String> {
        eprintln!("\n? {question}");
        eprint!("> ");
        let _ = std::io::stderr().flush();
        tokio::task::spawn_blocking(|| {
            let mut line = String::new();
            std::io::stdin().read_line(&mut line).map_err(|e| e.to_string())?;
            Ok(line.trim_end().to_string())
        })
        .await
        .map_err(|e| e.to_string())?
    }

    fn emit(&self, event: SessionEvent) {
        match event {
            SessionEvent::AssistantDelta { text } => eprintln!("{text}"),
            SessionEvent::ToolEvent { name, status: None, .. } => eprintln!("[{name}]"),
            SessionEvent::ConfigPreview { .. } => eprintln!("[config drafted]"),
            SessionEvent::Failed { error } => eprintln!("failed: {error}"),
            _ => {}
        }
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Cmd::McpStub { silent } = cli.cmd {
        agentry::toolkit::remote::run_stub_server(silent)?;
        return Ok(());
    }
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let common = &cli.common;
    match cli.cmd {
        Cmd::Run { config, task, out } => {
            let cfg = load_config(&config)?;
            let traj = run_episode(&cfg, &task, &common.deps()?).await;
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&traj)? + "\n";
                std::fs::write(&p, text).with_context(|| p.display().to_string())?;
            }
            match traj.final_answer.as_deref().filter(|_| traj.answered()) {
                Some(a) => println!("{a}"),
                None => bail!(
                    "no answer ({:?}){}",
                    traj.termination,
                    traj.error.map(|e| format!(": {e}")).unwrap_or_default()
                ),
            }
        }
        Cmd::Gen { mode } => {
            let base = common.base_catalog()?;
            let lib = common.library(&base)?.into_shared();
            let client = common.client()?;
            let sandbox = sandbox()?;
            let (cfg, report, out, report_path) = match mode {
                GenMode::Workflow { description, out, report } => {
                    let (cfg, r) = generate_workflow(&description, &lib, &client, &sandbox, &base).await?;
                    (cfg, r, out, report)
                }
                GenMode::Meta { description, out, report } => {
                    let deps = RuntimeDeps::new(client).with_catalog(base.clone());
                    let (cfg, r) = run_meta_agent(
                        &description,
                        Arc::new(TerminalDialogue),
                        &lib,
                        &deps,
                        &sandbox,
                        &base,
                        &MetaOptions::default(),
                    )
                    .await?;
                    (cfg, r, out, report)
                }
            };
            sandbox.close();
            if let Some(p) = report_path {
                std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")
                    .with_context(|| p.display().to_string())?;
            }
            write_out(out.as_deref(), &emit_config(&cfg)?)?;
        }
        Cmd::Practice {
            config,
            dataset,
            epochs,
            group_size,
            temp,
            run_id,
            out,
        } => {
            let cfg = load_config(&config)?;
            let data = load_dataset(&dataset)?;
            let opts = PracticeOptions {
                run_id,
                epochs,
                group_size,
                temperature: temp,
                output_root: Some(out),
                ..Default::default()
            };
            let (bank, report) = practice_run(&cfg, &data, &opts, &common.deps()?).await?;
            for e in &report.epochs {
                eprintln!(
                    "epoch {}: mean reward {:.4}, bank {} ({} applied, {} rejected)",
                    e.epoch, e.mean_reward, e.bank_size, e.edits_applied, e.edits_rejected
                );
            }
            println!("{}", serde_json::to_string_pretty(&bank)?);
        }
        Cmd::Eval {
            config,
            dataset,
            metric,
            k,
            concurrency,
            temp,
            bank,
            out,
        } => {
            let cfg = load_config(&config)?;
            let data = load_dataset(&dataset)?;
            let bank = match bank {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| p.display().to_string())?;
                    Some(bank_from_json(&text).with_context(|| p.display().to_string())?)
                }
                None => None,
            };
            let opts = EvalOptions {
                metric,
                k,
                concurrency,
                temperature: temp,
                bank,
                dataset_name: dataset
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into()),
            };
            let report = evaluate(&cfg, &data, &opts, &common.deps()?).await?;
            let path = persist_report(&report, &out)?;
            eprintln!("report written to {}", path.display());
            println!("{:?}@{}: {}", report.metric, report.k, report.aggregate);
        }
        Cmd::Serve {
            port,
            pool,
            root,
            config_dir,
        } => {
            let deps = common.deps()?;
            let base = common.base_catalog()?;
            let meta = MetaBackend {
                lib: common.library(&base)?.into_shared(),
                deps: RuntimeDeps::new(deps.client.clone()).with_catalog(base.clone()),
                sandbox: sandbox()?,
                base,
                opts: MetaOptions::default(),
            };
            let opts = ServiceOptions { root, pool, config_dir };
            let svc = Service::with_meta(opts, deps, meta)?;
            let handle = serve(SocketAddr::from(([0, 0, 0, 0], port)), svc).await?;
            eprintln!("listening on {}", handle.addr);
            tokio::signal::ctrl_c().await?;
            eprintln!("shutting down");
            handle.shutdown().await;
        }
        Cmd::McpStub { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// A bank file or a single epoch snapshot.
fn bank_from_json(text: &str) -> Result<ExperienceBank> {
    if let Ok(b) = serde_json::from_str::<ExperienceBank>(text) {
        return Ok(b);
    }
    let snap: agentry::practice::BankSnapshot = serde_json::from_str(text)?;
    let mut b = ExperienceBank::default();
    b.entries = snap.entries;
    Ok(b)
}
