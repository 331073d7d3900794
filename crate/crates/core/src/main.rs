use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hetenc::harness::{
    self, cost_csv, preset_costs, select_top_pairs, synergy_matrix, Preset, Scale, ScoreTable, Settings, SynergyMatrix,
};
use hetenc::model::CostReport;
use hetenc::{Error, Result};

#[derive(Parser)]
#[command(name = "hetenc", version, about = "Multi-encoder Transformer translation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Settings file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        for a in &self.set {
            s.set(a)?;
        }
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Learn a BPE vocabulary from data.train.
    BpeLearn(Common),
    /// Train, checkpoint, decode the test split and score it.
    Train(Common),
    /// Translate translate.input with a trained run.
    Translate(Common),
    /// Corpus BLEU of score.hyp against score.ref.
    Score(Common),
    /// Synergy matrix and top pairs from a score table.
    Synergy(Common),
    /// Parameter and GFLOP report for presets or a configured model.
    Cost(Common),
}

fn write_out(path: Option<PathBuf>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::BpeLearn(c) => {
            let (vocab, path) = harness::learn_vocab(&c.settings()?)?;
            println!("{} merges, {} tokens -> {}", vocab.merges.len(), vocab.len(), path.display());
        }
        Cmd::Train(c) => {
            let summary = harness::run_experiment(&c.settings()?, |line| eprintln!("{line}"))?;
            println!("run directory: {}", summary.dir.display());
            if let Some(b) = summary.bleu {
                println!("{b}");
            }
        }
        Cmd::Translate(c) => {
            let s = c.settings()?;
            let (lines, unfinished) = harness::translate_file(&s)?;
            if unfinished > 0 {
                eprintln!("warning: {unfinished} sentences reached the length limit without EOS");
            }
            match s.path("translate.output") {
                Some(p) => harness::write_lines(&p, &lines)?,
                None => {
                    let mut out = std::io::stdout().lock();
                    for l in &lines {
                        writeln!(out, "{l}")?;
                    }
                }
            }
        }
        Cmd::Score(c) => {
            let s = c.settings()?;
            let r = harness::score_files(&s)?;
            println!("{r}");
            write_out(s.path("score.out"), &format!("{}\n{}\n", hetenc::eval::BleuReport::CSV_HEADER, r.csv_line()))?;
        }
        Cmd::Synergy(c) => {
            let s = c.settings()?;
            let table_path = s.require_path("synergy.table")?;
            let table =
                ScoreTable::from_csv(&fs::read_to_string(&table_path).map_err(|_| Error::MissingFile(table_path))?)?;
            let derived = synergy_matrix(&table)?;
            println!("synergy s[i][j] = dual(i+j) - single(j)\n{}", derived.to_table());
            let ranked_on = match s.path("synergy.matrix") {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|_| Error::MissingFile(p.clone()))?;
                    println!("pair selection uses {}", p.display());
                    SynergyMatrix::from_csv(&text)?
                }
                None => derived.clone(),
            };
            let k = s.get_or("synergy.k", 3usize)?;
            println!("top {k} pairs by s[i][j] + s[j][i]:");
            for p in select_top_pairs(&ranked_on, k) {
                println!("  {:<5} {:+.2}", p.label(), p.sum);
            }
            write_out(s.path("synergy.out"), &derived.to_csv())?;
        }
        Cmd::Cost(c) => {
            let s = c.settings()?;
            let configured = s.iter().any(|(k, _)| k.starts_with("model."));
            let reports = if configured {
                let cfg = harness::model_config(&s)?;
                vec![CostReport::new(&harness::model_name(&s), &cfg)]
            } else {
                let presets = match s.list::<String>("cost.presets")? {
                    Some(v) => v.iter().map(|p| p.parse()).collect::<Result<Vec<Preset>>>()?,
                    None => Preset::ALL.to_vec(),
                };
                let scales = match s.list::<String>("cost.scales")? {
                    Some(v) => v.iter().map(|p| p.parse()).collect::<Result<Vec<Scale>>>()?,
                    None => vec![Scale::Small, Scale::Large],
                };
                preset_costs(&presets, &scales)
            };
            let csv = cost_csv(&reports);
            print!("{csv}");
            write_out(s.path("cost.out"), &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
