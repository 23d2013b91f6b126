use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ozip_core::corpus::{make_fixtures, FixtureProfile, Manifest, Role, Sample};
use ozip_core::model::ModelParams;
use ozip_core::pipeline::{bench, export_checkpoint, selfcheck, train_on_samples, Codec, Container, TrainPlan};
use ozip_core::tokenizer::Modality;
use ozip_core::trainer::{Stage, StepRecord, TrainObserver, Validation};
use ozip_core::Error;

#[derive(Parser)]
#[command(name = "ozip", version, about = "Lossless compression with a learned multi-modal predictor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the training files of a fixture tree.
    Train {
        /// `key = value` config file; missing keys keep the desk defaults.
        config: Option<PathBuf>,
        /// Fixture tree with a manifest.
        #[arg(long, default_value = "fixtures")]
        data: PathBuf,
        /// Where to write the checkpoint.
        #[arg(short, long, default_value = "model.ozw")]
        out: PathBuf,
        /// Print the metrics line of every n-th step (0 for none).
        #[arg(long, default_value_t = 20)]
        log_every: usize,
    },
    /// Compress one file.
    Compress {
        #[arg(short, long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(short = 'w', long)]
        weights: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Also write expert-usage CSV here.
        #[arg(long)]
        usage: Option<PathBuf>,
    },
    /// Restore a compressed file.
    Decompress {
        #[arg(short = 'w', long)]
        weights: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Measure bits/Byte and speed; every file is verified to roundtrip.
    Bench {
        #[arg(short = 'w', long)]
        weights: PathBuf,
        /// Fixture tree to read (test and edge files by default).
        #[arg(long, conflicts_with = "files")]
        data: Option<PathBuf>,
        /// Include the training files as well.
        #[arg(long, requires = "data")]
        all: bool,
        /// Modality of the listed files.
        #[arg(short, long, value_parser = parse_modality, requires = "files")]
        modality: Option<Modality>,
        files: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        usage: Option<PathBuf>,
    },
    /// Write the deterministic synthetic fixture tree.
    Fixtures {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long, default_value = "fixtures")]
        out: PathBuf,
        /// `desk` (about 2 MiB per modality) or `smoke`.
        #[arg(long, default_value = "desk")]
        profile: String,
        /// Real prose to use for the text modality instead of synthetic text.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Print a container header.
    Inspect { container: PathBuf },
    /// Run the built-in invariant suites.
    Selfcheck,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::from_name(s).map_err(|e| e.to_string())
}

enum Failure {
    Data(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Checksum { .. } | Error::HashMismatch { .. } | Error::Verification(_) => {
                Failure::Verification(e.to_string())
            }
            e => Failure::Data(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

struct Progress {
    every: usize,
    /// Stage-end checkpoints go next to the final one as `<out>.stageN`.
    out: PathBuf,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, r: &StepRecord) -> ozip_core::Result<()> {
        if self.every > 0 && r.step.is_multiple_of(self.every) {
            eprintln!("{}", r.log_line());
        }
        Ok(())
    }

    fn on_stage_end(&mut self, stage: Stage, params: &ModelParams, v: &Validation) -> ozip_core::Result<()> {
        let mut path = self.out.clone().into_os_string();
        path.push(format!(".stage{}", stage.number()));
        std::fs::write(&path, params.to_checkpoint().to_bytes())?;
        eprintln!("stage {} done, wrote {}, held-out:", stage.number(), Path::new(&path).display());
        print_validation(v);
        Ok(())
    }
}

fn print_validation(v: &Validation) {
    for m in Modality::ALL {
        if let (Some(bpb), Some(bpt)) = (v.bits_per_byte(m), v.bits_per_token(m)) {
            eprintln!("  {:<9} {bpb:.4} bits/byte  {bpt:.4} bits/token", m.name());
        }
    }
}

fn load_codec(path: &Path) -> Result<Codec, Failure> {
    Ok(Codec::from_checkpoint_bytes(&std::fs::read(path)?)?)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train { config, data, out, log_every } => {
            let plan = match config {
                Some(p) => TrainPlan::from_config_text(&std::fs::read_to_string(p)?)?,
                None => TrainPlan::desk(),
            };
            let samples = Manifest::load(&data)?.samples(&data, Some(Role::Train))?;
            let trained = train_on_samples(&samples, &plan, &mut Progress { every: log_every, out: out.clone() })?;
            let bytes = export_checkpoint(&trained.params, &trained.vocab)?;
            std::fs::write(&out, &bytes)?;
            println!("wrote {} ({} bytes, {} steps)", out.display(), bytes.len(), trained.report.steps.len());
        }
        Command::Compress { modality, weights, input, output, usage } => {
            let codec = load_codec(&weights)?;
            let bytes = std::fs::read(&input)?;
            let out = codec.compress(&bytes, modality, usage.is_some())?;
            let packed = out.container.to_bytes()?;
            std::fs::write(&output, &packed)?;
            if let (Some(path), Some(table)) = (usage, out.usage) {
                std::fs::write(path, table.to_csv())?;
            }
            let bpb = if bytes.is_empty() { 0.0 } else { 8.0 * packed.len() as f64 / bytes.len() as f64 };
            println!("{} -> {} bytes ({bpb:.4} bits/byte)", bytes.len(), packed.len());
        }
        Command::Decompress { weights, input, output } => {
            let codec = load_codec(&weights)?;
            let restored = codec.decompress(&std::fs::read(&input)?)?;
            std::fs::write(&output, &restored)?;
        }
        Command::Bench { weights, data, all, modality, files, csv, usage } => {
            let codec = load_codec(&weights)?;
            let samples = match (data, modality) {
                (Some(dir), _) => {
                    let man = Manifest::load(&dir)?;
                    let mut s = man.samples(&dir, Some(Role::Test))?;
                    s.extend(man.samples(&dir, Some(Role::Edge))?);
                    if all {
                        s.extend(man.samples(&dir, Some(Role::Train))?);
                    }
                    s
                }
                (None, Some(m)) => files
                    .into_iter()
                    .map(|p| Ok(Sample { modality: m, bytes: std::fs::read(&p)?, path: p }))
                    .collect::<Result<Vec<_>, std::io::Error>>()?,
                (None, None) => return Err(Failure::Data(Error::Input("give --data or -m with files".into()))),
            };
            let report = bench(&codec, &samples, usage.is_some())?;
            match csv {
                Some(p) => std::fs::write(p, report.to_csv())?,
                None => print!("{}", report.to_csv()),
            }
            if let (Some(p), Some(t)) = (usage, &report.usage) {
                std::fs::write(p, t.to_csv())?;
            }
            eprintln!("{}", report.summary_table());
        }
        Command::Fixtures { seed, out, profile, text } => {
            let profile = FixtureProfile::from_name(&profile)?;
            let text = text.map(std::fs::read).transpose()?;
            let man = make_fixtures(&out, profile, seed, text.as_deref())?;
            println!("wrote {} files under {}", man.entries.len(), out.display());
        }
        Command::Inspect { container } => {
            let c = Container::from_bytes(&std::fs::read(&container)?)?;
            println!("{c}");
        }
        Command::Selfcheck => {
            let results = selfcheck();
            for r in &results {
                println!("{r}");
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.ok()).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(Failure::Verification(format!("failed suites: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}
