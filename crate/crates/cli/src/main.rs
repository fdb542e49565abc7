use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use clap::{Parser, Subcommand};
use serde::Serialize;

use soforge_core::analysis::{classify_exports, duplicate_exports, list_exports, ClassifiedExport};
use soforge_core::disasm::{infer_signature, DisasmError};
use soforge_core::ledger::{compute_report, render_report, ReportFormat};
use soforge_core::llm::SystemClock;
use soforge_core::orchestrator::{EXIT_BACKEND, EXIT_CONFIG, EXIT_INPUT, EXIT_OK};
use soforge_core::{load_binary, run_pipeline, BackendKind, BinaryImage, PipelineConfig, PipelineEnv, RunLedger};

/// Synthesizes libFuzzer drivers for the exported functions of a shared library.
///
/// Exit status: 0 full coverage, 1 partial coverage, 2 input error,
/// 3 configuration error, 4 backend error.
#[derive(Parser)]
#[command(name = "soforge", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured workspace directory.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List exports with fuzzability verdicts and inferred signatures.
    Analyze {
        /// Overrides `library_path`.
        library: Option<PathBuf>,
    },
    /// Generate, compile and smoke-run drivers for every fuzzable export.
    Run {
        library: Option<PathBuf>,
    },
    /// Render the coverage report of a run ledger.
    Report {
        ledger: PathBuf,
        /// text, json or csv.
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a recorded session set offline from its transcripts.
    Replay {
        transcripts: PathBuf,
        library: Option<PathBuf>,
    },
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn input(message: impl ToString) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.to_string(),
        }
    }
}

static CANCEL: OnceLock<Arc<AtomicBool>> = OnceLock::new();

extern "C" fn on_sigint(_: libc::c_int) {
    if let Some(flag) = CANCEL.get() {
        flag.store(true, Ordering::SeqCst);
    }
}

fn install_sigint() -> Arc<AtomicBool> {
    let flag = CANCEL.get_or_init(|| Arc::new(AtomicBool::new(false))).clone();
    let handler = on_sigint as extern "C" fn(libc::c_int);
    // SAFETY: the handler only performs an atomic store
    unsafe {
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
        libc::signal(libc::SIGTERM, handler as libc::sighandler_t);
    }
    flag
}

fn load_config(cli: &Cli, library: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(Failure::config)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env();
    if let Some(lib) = library {
        cfg.library_path = lib.to_path_buf();
    }
    if let Some(ws) = &cli.workspace {
        cfg.workspace = ws.clone();
    }
    cfg.validate_settings().map_err(Failure::config)?;
    if cfg.library_path.as_os_str().is_empty() {
        return Err(Failure::config("no library given (argument or library_path)"));
    }
    Ok(cfg)
}

fn load_image(cfg: &PipelineConfig) -> Result<BinaryImage, Failure> {
    load_binary(&cfg.library_path).map_err(Failure::input)
}

#[derive(Serialize)]
struct Listing<'a> {
    library: String,
    exports: &'a [ClassifiedExport],
    duplicates: Vec<soforge_core::ExportedFunction>,
}

fn analyze(cli: &Cli, library: Option<&Path>) -> Result<i32, Failure> {
    let cfg = load_config(cli, library)?;
    let image = load_image(&cfg)?;
    let provider = cfg.provider().map_err(Failure::config)?;
    let classified = classify_exports(list_exports(&image), &cfg.denylist(), |f| {
        infer_signature(provider.as_ref(), &image, f)
    });
    let unavailable = DisasmError::AdapterUnavailable(String::new()).to_string();
    if let Some(e) = classified.iter().filter_map(|c| c.provider_error.as_deref()).find(|e| e.starts_with(&unavailable)) {
        return Err(Failure::config(e));
    }
    let mut stdout = std::io::stdout().lock();
    if cli.json {
        let listing = Listing {
            library: image.file_name(),
            exports: &classified,
            duplicates: duplicate_exports(&image),
        };
        let text = serde_json::to_string_pretty(&listing).expect("listing serializes");
        let _ = writeln!(stdout, "{text}");
        return Ok(EXIT_OK);
    }
    let _ = writeln!(stdout, "{:<32} {:>10}  {:<6}  {:<16}  signature", "name", "address", "bind", "verdict");
    for c in &classified {
        let f = &c.function;
        let verdict = match f.exclusion_reason {
            None => "FUZZABLE".to_string(),
            Some(r) => wire_name(&r),
        };
        let sig = match (&c.signature, &c.provider_error) {
            (Some(s), _) => format!("{} [{}]", s.c_declaration(), wire_name(&s.confidence)),
            (None, Some(e)) => format!("({e})"),
            (None, None) => "-".into(),
        };
        let bind = if f.binding == soforge_core::analysis::Binding::Weak { "WEAK" } else { "GLOBAL" };
        let _ = writeln!(stdout, "{:<32} {:>#10x}  {:<6}  {:<16}  {sig}", f.name, f.address, bind, verdict);
    }
    let fuzzable = classified.iter().filter(|c| c.function.fuzzable).count();
    let _ = writeln!(stdout, "{} exports, {fuzzable} fuzzable", classified.len());
    Ok(EXIT_OK)
}

/// The serialized name of a unit enum variant.
fn wire_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn execute(cfg: &PipelineConfig, json: bool) -> Result<i32, Failure> {
    let image = load_image(cfg)?;
    let env = PipelineEnv {
        backend_factory: cfg.backend_factory().map_err(Failure::config)?,
        provider: cfg.provider().map_err(Failure::config)?,
        clock: Arc::new(SystemClock::default()),
        cancel: install_sigint(),
    };
    let out = run_pipeline(&image, cfg, &env).map_err(|e| Failure {
        code: e.exit_code(),
        message: e.to_string(),
    })?;
    let format = if json { ReportFormat::Json } else { ReportFormat::TableText };
    print!("{}", render_report(&out.report, format));
    eprintln!("ledger: {}", out.ledger_path.display());
    if let Some(i) = &out.interrupt {
        eprintln!("soforge: run stopped early: {i:?}");
    }
    let code = out.exit_code();
    if code == EXIT_BACKEND {
        eprintln!("soforge: BACKEND_UNREACHABLE; partial ledger kept");
    }
    Ok(code)
}

fn run(cli: &Cli, library: Option<&Path>) -> Result<i32, Failure> {
    let cfg = load_config(cli, library)?;
    execute(&cfg, cli.json)
}

fn replay(cli: &Cli, transcripts: &Path, library: Option<&Path>) -> Result<i32, Failure> {
    let mut cfg = load_config(cli, library)?;
    if !transcripts.is_dir() {
        return Err(Failure::input(format!("{} is not a directory", transcripts.display())));
    }
    cfg.backend = BackendKind::Replay;
    cfg.backend_params.insert("transcripts".into(), transcripts.to_string_lossy().into_owned());
    if cli.workspace.is_none() {
        // keep the recorded workspace intact
        let mut ws = cfg.workspace.clone().into_os_string();
        ws.push(".replay");
        cfg.workspace = ws.into();
    }
    execute(&cfg, cli.json)
}

fn report(ledger: &Path, format: ReportFormat, out: Option<&Path>, json: bool) -> Result<i32, Failure> {
    let ledger = RunLedger::load(ledger).map_err(Failure::input)?;
    let format = if json { ReportFormat::Json } else { format };
    let text = render_report(&compute_report(&ledger), format);
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze { library } => analyze(&cli, library.as_deref()),
        Command::Run { library } => run(&cli, library.as_deref()),
        Command::Report { ledger, format, out } => report(ledger, *format, out.as_deref(), cli.json),
        Command::Replay { transcripts, library } => replay(&cli, transcripts, library.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("soforge: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
