//! `flaudit` command-line interface.
//!
//! Exit codes: 0 on success, 1 when an input (config, CSV, model file,
//! argument) is invalid, 2 when a run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flaudit::auditor::{self, Detector};
use flaudit::data;
use flaudit::federation::{self, Update};
use flaudit::harness::experiment::{bench_scaling, run_and_write, scaling_csv, Prepared};
use flaudit::harness::report::with_suffix;
use flaudit::harness::{deserialize_params, parse_config, serialize_params, ExperimentConfig};
use flaudit::seed::derive_seed;
use flaudit::Error;

#[derive(Parser, Debug)]
#[command(name = "flaudit", version, about = "Federated learning poisoning-audit simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write its reports, global model and detector.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time the audit phase for several client counts.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Ascending client counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        clients: Vec<usize>,
        /// Timed repetitions per client count; the fastest is reported.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Output CSV (default `<prefix>_scaling.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit one model file against a saved detector.
    Audit {
        #[arg(long)]
        model: PathBuf,
        /// Labeled CSV the audit samples are built from.
        #[arg(long)]
        public: PathBuf,
        #[arg(long)]
        detector: PathBuf,
    },
    /// Write the dataset a client trains on and the parameters it shares in
    /// the first round, after its configured attack.
    AttackPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        client: usize,
        /// Output prefix (default `<prefix>_client<id>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let bytes = read_input(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Failure::Validation(format!("{} is not UTF-8", path.display())))?;
    parse_config(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

fn run(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let (outcome, written) = run_and_write(&cfg)?;
    if let Some(det) = &outcome.detector {
        let c = &det.config;
        println!(
            "detector: h_train {:.1}  h_test {:.1}  sigma {:.1}  P {:.1}",
            c.h_train,
            c.h_test,
            c.sigma(),
            c.threshold()
        );
    }
    for r in &outcome.reports {
        println!("round {}  ({})", r.round, r.aggregator);
        for c in &r.clients {
            let h = c.verdict.as_ref().map_or("-".to_string(), |v| format!("{:.1}", v.h));
            let verdict = if c.accepted { "accepted" } else { "rejected" };
            println!("  client {}  {:<4}  h {:>5}  {verdict}", c.client_id, c.attack, h);
        }
        if r.all_rejected {
            println!("  every update rejected; global model unchanged");
        }
        println!("  accuracy {:.4} -> {:.4}", r.acc_before, r.acc_after);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn bench(config: &Path, clients: &[usize], repeats: usize, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    if clients.is_empty() || clients.contains(&0) || clients.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::Validation(
            "--clients must be strictly ascending positive counts".into(),
        ));
    }
    let points = bench_scaling(&cfg, clients, repeats)?;
    let csv = scaling_csv(&points);
    let out = out.unwrap_or_else(|| with_suffix(&cfg.output.prefix, "_scaling.csv"));
    write_output(&out, csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(())
}

fn audit(model: &Path, public: &Path, detector: &Path) -> Result<(), Failure> {
    let params = deserialize_params(&read_input(model)?)
        .map_err(|e| Failure::Validation(format!("{}: {e}", model.display())))?;
    let det: Detector = serde_json::from_slice(&read_input(detector)?)
        .map_err(|e| Failure::Validation(format!("{}: {e}", detector.display())))?;
    if !params.matches(&det.arch) {
        return Err(Failure::Validation(format!(
            "{} does not match the detector's architecture",
            model.display()
        )));
    }
    let mut ds = data::load_csv(public)?;
    if ds.feature_len() != det.arch.input_length || ds.num_classes > det.arch.num_classes {
        return Err(Failure::Validation(format!(
            "{}: samples do not fit the detector's architecture",
            public.display()
        )));
    }
    ds.num_classes = det.arch.num_classes;
    let update = Update {
        client_id: 0,
        params,
        n_samples: ds.len(),
    };
    let verdict = auditor::audit_update(&update, &det.arch, &ds, &det.auditor, &det.config)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&verdict).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    Ok(())
}

fn attack_preview(config: &Path, client: usize, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    if client >= cfg.clients.len() {
        return Err(Failure::Validation(format!(
            "--client {client}: config has {} clients",
            cfg.clients.len()
        )));
    }
    let prepared = Prepared::from_config(&cfg)?;
    let fed = prepared.federation(&cfg, None);
    let attack = &cfg.clients[client].attack;
    let original = &prepared.client_data[client];
    let seed = fed.client_seed(0, client);
    let attacked = attack.apply_to_data(original, derive_seed(seed, "attack_data", &[]))?;
    let update = federation::local_train(
        &cfg.arch,
        client,
        original,
        &prepared.initial,
        &cfg.training,
        seed,
        attack,
    )?;

    let prefix = out.unwrap_or_else(|| with_suffix(&cfg.output.prefix, &format!("_client{client}")));
    let data_path = with_suffix(&prefix, "_data.csv");
    let params_path = with_suffix(&prefix, "_params.flpd");
    write_output(&params_path, &serialize_params(&update.params))?;
    data::write_csv(&attacked, &data_path)?;

    let relabeled = original
        .samples
        .iter()
        .zip(&attacked.samples)
        .filter(|(a, b)| a.label != b.label)
        .count();
    let perturbed = original
        .samples
        .iter()
        .zip(&attacked.samples)
        .filter(|(a, b)| a.features != b.features)
        .count();
    println!("client {client}: attack {attack}");
    println!("  samples {}  relabeled {relabeled}  feature-perturbed {perturbed}", original.len());
    println!("  shared parameter L2 norm {:.4}", update.params.l2_norm());
    println!("wrote {}", data_path.display());
    println!("wrote {}", params_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { config } => run(&config),
        Command::Bench {
            config,
            clients,
            repeats,
            out,
        } => bench(&config, &clients, repeats, out),
        Command::Audit {
            model,
            public,
            detector,
        } => audit(&model, &public, &detector),
        Command::AttackPreview { config, client, out } => attack_preview(&config, client, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
