use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use tweetattn_cli::commands::{cmd_evaluate, cmd_stats, load_model, predict_texts};
use tweetattn_cli::config::KEYS;
use tweetattn_cli::error::{CliResult, EXIT_USAGE};
use tweetattn_cli::pipeline::{FeatureSet, Stage};
use tweetattn_cli::{CliError, Pipeline, RunConfig};

fn cli() -> Command {
    let mut root = Command::new("tweetattn")
        .about("Tweet sentiment from transformer hidden states and attention corners")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("PATH")
                .help("key = value config file"),
        );
    // `seed`, `out` and every other config key double as override flags.
    for key in KEYS {
        root = root.arg(Arg::new(*key).long(*key).global(true).value_name("VALUE").hide(!matches!(*key, "seed" | "out")));
    }
    let model = || Arg::new("model").long("model").required(true).value_name("PATH");
    root.subcommand(Command::new("stats").about("Word-count histogram of the dataset"))
        .subcommand(Command::new("build-vocab").about("Split the data and build the vocabulary"))
        .subcommand(Command::new("pretrain").about("Masked-token pretraining"))
        .subcommand(Command::new("finetune").about("Fine-tune the encoder with the built-in head"))
        .subcommand(Command::new("embed").about("Extract and cache tweet embeddings"))
        .subcommand(Command::new("train").about("Train one MLP on the cached embeddings"))
        .subcommand(Command::new("train-ensemble").about("Train the k-fold voting ensemble"))
        .subcommand(
            Command::new("predict")
                .about("Classify tweets with a saved model")
                .arg(model())
                .arg(Arg::new("text").long("text").required(true).action(ArgAction::Append)),
        )
        .subcommand(Command::new("evaluate").about("Held-out accuracy of a saved model").arg(model()))
        .subcommand(Command::new("pipeline").about("Run every stage and write report.tsv"))
}

fn load_config(m: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
        cfg.apply_text(&text, path)?;
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_last_epoch(p: &Pipeline, stage: Stage) {
    let path = p.path(&format!("logs/{}.tsv", stage.name()));
    if let Some(last) = std::fs::read_to_string(path).ok().and_then(|s| s.lines().last().map(str::to_string)) {
        println!("{}\t{last}", stage.name());
    }
}

fn run(m: &ArgMatches) -> CliResult<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = load_config(sub)?;
    if name == "stats" {
        print!("{}", cmd_stats(&cfg)?);
        return Ok(());
    }
    let mut p = Pipeline::new(cfg)?;
    let features = FeatureSet::from_include_attention(p.cfg.include_attention);
    match name {
        "build-vocab" => {
            p.ensure(Stage::Vocab)?;
            println!("{}", p.path("vocab.txt").display());
        }
        "pretrain" => {
            p.ensure(Stage::Pretrain)?;
            println!("{}", p.path("encoder_pretrained.atsn").display());
        }
        "finetune" => {
            p.ensure(Stage::Finetune)?;
            print_last_epoch(&p, Stage::Finetune);
        }
        "embed" => {
            p.ensure(Stage::Embed)?;
            println!("{}", p.path("embed_train.atse").display());
            println!("{}", p.path("embed_test.atse").display());
        }
        "train" => {
            p.ensure(Stage::Mlp(features))?;
            print_last_epoch(&p, Stage::Mlp(features));
            println!("{}", p.path(&Stage::Mlp(features).artifacts()[0]).display());
        }
        "train-ensemble" => {
            let stage = Stage::Ensemble(features);
            p.ensure(stage)?;
            println!("{}", p.path(&stage.artifacts()[0]).display());
        }
        "predict" => {
            let model = load_model(&PathBuf::from(sub.get_one::<String>("model").expect("required")))?;
            let texts: Vec<&str> = sub.get_many::<String>("text").expect("required").map(String::as_str).collect();
            for (label, prob) in predict_texts(&p, &model, &texts)? {
                println!("{label}\t{prob:.6}");
            }
        }
        "evaluate" => {
            let model = load_model(&PathBuf::from(sub.get_one::<String>("model").expect("required")))?;
            let e = cmd_evaluate(&p, &model)?;
            println!("model\taccuracy\ttrue_pos\ttrue_neg\tfalse_pos\tfalse_neg");
            println!(
                "{}\t{:.6}\t{}\t{}\t{}\t{}",
                model.kind(),
                e.accuracy,
                e.true_pos,
                e.true_neg,
                e.false_pos,
                e.false_neg
            );
        }
        "pipeline" => {
            let report = p.run_all()?;
            print!("{}", report.to_tsv());
        }
        _ => unreachable!("unknown subcommand {name}"),
    }
    if name != "pipeline" && name != "predict" && name != "evaluate" {
        p.write_timing()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
