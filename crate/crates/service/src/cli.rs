use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use echo_agent_core::agent::{append_event, read_events_file, replay, ExitKind, Session};
use echo_agent_core::canonical::{canonical_string, to_canonical, to_document};
use echo_agent_core::clock::SystemClock;
use echo_agent_core::controller::BackendSpec;
use echo_agent_core::domain::{read_study_file, validate_study, ClinicianQuery, FindingCategory};
use echo_agent_core::eval::{
    generate_synthetic_qa, load_question_set, render_markdown_table, render_table, run_protocol, score, EvalConfig,
};
use echo_agent_core::executors::{serve_frames, serve_request, StudyIndex};
use echo_agent_core::grading::ClinicalThresholds;

use crate::config::{check_backend, ServiceConfig};
use crate::server::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "echo-agent", version, about = "Tool-using agent runtime for echocardiography studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Ask one question about a study and print the answer.
    Ask(AskArgs),
    /// Score a backend on a closed-ended question set.
    Eval(EvalArgs),
    /// Inspect the tool registry.
    Tools {
        #[command(subcommand)]
        command: ToolsCommand,
    },
    /// Write a synthetic question set with known answers.
    GenQa(GenQaArgs),
    /// Re-derive the outcomes recorded in an event log.
    Replay {
        #[arg(long)]
        events: PathBuf,
    },
    /// Serve the mock tools to an out-of-process executor.
    ToolServe(ToolServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// JSON service configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// oracle, scripted, remote, prior or heuristic.
    #[arg(long, default_value = "oracle")]
    pub backend: String,
    /// Action list for the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
}

impl BackendArgs {
    fn spec(&self) -> Result<BackendSpec, CliError> {
        let spec = match (self.backend.as_str(), &self.script) {
            ("scripted", Some(path)) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
                let script =
                    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
                BackendSpec::Scripted { script }
            }
            (_, Some(_)) => return Err(CliError::Invalid("--script only applies to --backend scripted".into())),
            (name, None) => BackendSpec::from_name(name).map_err(CliError::Invalid)?,
        };
        check_backend(&spec).map_err(CliError::Invalid)?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[arg(long)]
    pub study: PathBuf,
    #[arg(long)]
    pub question: String,
    /// Answer option text, given four times in A..D order.
    #[arg(long = "option", num_args = 1)]
    pub options: Vec<String>,
    /// lv_systolic_function, lv_hypertrophy, pericardial_effusion or mitral_valve.
    #[arg(long)]
    pub category: Option<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Registry manifest; the in-process mock suite when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Append the session's events to this file.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub t_max_ms: Option<u64>,
    #[arg(long)]
    pub max_iterations: Option<u32>,
    /// Print the outcome as canonical JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A `.qa.jsonl` question set.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub questions: Option<PathBuf>,
    /// Generate this many synthetic questions instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Backends to score, comma separated.
    #[arg(long, default_value = "oracle", value_delimiter = ',')]
    pub backend: Vec<String>,
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    #[arg(long)]
    pub share_cache: bool,
    /// Write a Markdown accuracy table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Write the runs and reports here as canonical JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ToolsCommand {
    List {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct GenQaArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToolServeArgs {
    /// Directory of study files, looked up by content fingerprint.
    #[arg(long, default_value = ".")]
    pub studies: PathBuf,
    /// Serve `POST /invoke` on this address instead of stdin frames.
    #[arg(long)]
    pub http: Option<String>,
}

/// Exit code 1 for bad input, 2 for failures while running.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve(args) => serve_command(args),
        Command::Ask(args) => ask(args),
        Command::Eval(args) => eval(args),
        Command::Tools { command: ToolsCommand::List { manifest, json } } => list_tools(manifest, json),
        Command::GenQa(args) => gen_qa(args),
        Command::Replay { events } => replay_command(&events),
        Command::ToolServe(args) => tool_serve(args),
    }
}

fn registry_config(manifest: Option<PathBuf>) -> Result<ServiceConfig, CliError> {
    let config = ServiceConfig { manifest, ..ServiceConfig::default() };
    config.validate().map_err(|p| CliError::Invalid(p.join("\n")))?;
    Ok(config)
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("cannot start the async runtime")
}

fn serve_command(args: ServeArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => ServiceConfig::load(path).map_err(CliError::Invalid)?,
        None => ServiceConfig::default(),
    };
    if let Some(bind) = args.bind {
        config.bind = bind;
    }
    if let Some(dir) = args.data_dir {
        config.data_dir = dir;
    }
    config.validate().map_err(|p| CliError::Invalid(p.join("\n")))?;
    let bind = config.bind.clone();
    runtime()?.block_on(async move {
        let state = AppState::open(config)?;
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("cannot bind {bind}"))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

fn parse_category(name: &str) -> Result<FindingCategory, CliError> {
    FindingCategory::ALL.into_iter().find(|c| c.as_str() == name).ok_or_else(|| {
        CliError::Invalid(format!(
            "unknown category {name:?} (expected lv_systolic_function, lv_hypertrophy, pericardial_effusion or mitral_valve)"
        ))
    })
}

fn ask(args: AskArgs) -> Result<(), CliError> {
    let study = read_study_file(&args.study).map_err(|e| CliError::Invalid(e.to_string()))?;
    if let Err(violations) = validate_study(&study) {
        let lines: Vec<String> = violations.iter().map(|v| format!("{}: {v}", args.study.display())).collect();
        return Err(CliError::Invalid(lines.join("\n")));
    }
    let category = args.category.as_deref().map(parse_category).transpose()?;
    let query = match args.options.len() {
        0 => ClinicianQuery { category, ..ClinicianQuery::open(&args.question) },
        4 => {
            let o: Vec<&str> = args.options.iter().map(String::as_str).collect();
            ClinicianQuery::multiple_choice(&args.question, [o[0], o[1], o[2], o[3]], category)
        }
        n => return Err(CliError::Invalid(format!("--option must be given 4 times (A..D), got {n}"))),
    };
    query
        .validate()
        .map_err(|v| CliError::Invalid(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")))?;

    let mut config = registry_config(args.manifest)?;
    config.t_max_ms = args.t_max_ms.unwrap_or(config.t_max_ms);
    config.max_iterations = args.max_iterations.unwrap_or(config.max_iterations);
    let agent = config.agent_config();
    agent.validate().map_err(CliError::Invalid)?;
    let registry = config.build_registry()?;
    let backend = args.backend.spec()?;
    let mut controller = backend.build(config.thresholds, 0).map_err(CliError::Invalid)?;

    let mut session = Session::new("cli", Arc::new(study), Arc::new(SystemClock::new()));
    if let Some(path) = args.events.clone() {
        if path.exists() {
            std::fs::remove_file(&path).with_context(|| format!("cannot replace {}", path.display()))?;
        }
        session.set_sink(Box::new(move |e| {
            if let Err(err) = append_event(&path, e) {
                tracing::error!(path = %path.display(), error = %err, "cannot append to event log");
            }
        }));
    }
    let outcome =
        session.ask(query, &agent, &registry, controller.as_mut()).map_err(|e| CliError::Invalid(e.to_string()))?;

    if args.json {
        let text = String::from_utf8(to_canonical(&outcome).context("outcome is not canonical")?).expect("utf-8");
        println!("{text}");
        return Ok(());
    }
    match outcome.exit {
        ExitKind::Answer => println!("answer: {}", outcome.response.text),
        ExitKind::Clarification => println!("clarification needed: {}", outcome.response.text),
        ExitKind::Timeout => println!("stopped early ({:?}): {}", outcome.reason, outcome.response.text),
    }
    if let Some(choice) = outcome.response.choice {
        println!("choice: {}", choice.as_str());
    }
    for e in &outcome.response.evidence {
        println!("evidence: {} from {}", e.finding, e.artifact.producer_tool);
    }
    println!("iterations: {}  elapsed: {} ms", outcome.iterations_used, outcome.elapsed_ms);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let thresholds = ClinicalThresholds::default();
    let questions = match (&args.questions, args.synthetic) {
        (Some(path), _) => {
            load_question_set(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
        }
        (None, Some(n)) => generate_synthetic_qa(n, args.seed, &thresholds).map_err(CliError::Invalid)?.loaded(),
        (None, None) => return Err(CliError::Invalid("give --questions or --synthetic".into())),
    };
    if args.parallelism == 0 {
        return Err(CliError::Invalid("--parallelism must be positive".into()));
    }
    let backends = args
        .backend
        .iter()
        .map(|name| BackendArgs { backend: name.clone(), script: args.script.clone() }.spec())
        .collect::<Result<Vec<_>, _>>()?;
    let config = EvalConfig { share_cache: args.share_cache, parallelism: args.parallelism, ..EvalConfig::default() };

    let mut rows = Vec::new();
    let mut documents = Vec::new();
    for backend in &backends {
        let run = run_protocol(&config, backend, &questions, args.seed);
        let report = score(&run);
        tracing::info!(backend = backend.label(), n = report.n, correct = report.correct, "evaluation finished");
        documents.push(serde_json::json!({"run": run, "report": report}));
        rows.push((backend.label().to_string(), report));
    }
    print!("{}", render_table(&rows));
    if let Some(path) = &args.table {
        std::fs::write(path, render_markdown_table(&rows))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = &args.out {
        let doc = to_document(&documents).context("runs are not canonical")?;
        let text = canonical_string(&doc).context("runs are not canonical")?;
        std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn list_tools(manifest: Option<PathBuf>, json: bool) -> Result<(), CliError> {
    let registry = registry_config(manifest)?.build_registry()?;
    let tools = registry.list_tools(None);
    if json {
        let doc = to_document(&tools).context("descriptors are not canonical")?;
        println!("{}", canonical_string(&doc).context("descriptors are not canonical")?);
        return Ok(());
    }
    let width = tools.iter().map(|t| t.name.len()).max().unwrap_or(0);
    for t in &tools {
        let fallbacks = registry.fallback_chain(&t.name);
        let tail = if fallbacks.is_empty() { String::new() } else { format!("  (fallback: {})", fallbacks.join(", ")) };
        println!("{:width$}  {:7}  {}{tail}", t.name, t.version.to_string(), t.description);
    }
    Ok(())
}

fn gen_qa(args: GenQaArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Invalid("--n must be positive".into()));
    }
    let set = generate_synthetic_qa(args.n, args.seed, &ClinicalThresholds::default()).map_err(CliError::Invalid)?;
    let path = set.write_to(&args.out).map_err(|e| anyhow::anyhow!(e))?;
    println!("wrote {} questions and {} studies to {}", set.questions.len(), set.studies.len(), path.display());
    Ok(())
}

fn replay_command(path: &Path) -> Result<(), CliError> {
    let events = read_events_file(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let report = replay(&events);
    println!("{}", report.to_string().trim_end());
    if report.is_match() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{}: replay does not match the recorded outcomes", path.display())))
    }
}

fn tool_serve(args: ToolServeArgs) -> Result<(), CliError> {
    let studies = Arc::new(StudyIndex::new(args.studies));
    let thresholds = ClinicalThresholds::default();
    let Some(addr) = args.http else {
        let stdin = std::io::stdin().lock();
        let mut stdout = std::io::stdout().lock();
        serve_frames(stdin, &mut stdout, &studies, &thresholds).context("frame stream failed")?;
        stdout.flush().context("cannot flush stdout")?;
        return Ok(());
    };
    runtime()?.block_on(async move {
        let app = axum::Router::new().route(
            "/invoke",
            axum::routing::post(move |body: axum::body::Bytes| {
                let studies = Arc::clone(&studies);
                async move {
                    let response = tokio::task::spawn_blocking(move || serve_request(&body, &studies, &thresholds))
                        .await
                        .expect("tool worker panicked");
                    let bytes = to_canonical(&response).expect("responses are canonical");
                    ([(axum::http::header::CONTENT_TYPE, "application/json")], bytes)
                }
            }),
        );
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("cannot bind {addr}"))?;
        tracing::info!(addr = %listener.local_addr()?, "serving tools");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
