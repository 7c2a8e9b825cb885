use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use glyphembed::analysis::{embedding_norms, export_norm_histogram, NormSummary, DEFAULT_BINS};
use glyphembed::config::{ExperimentConfig, Task};
use glyphembed::corpus::{build_vocab, parse_bakeoff_file, parse_raw, SegmentedSentence, Vocab, DEFAULT_MAX_VOCAB};
use glyphembed::embed::{EmbedderConfig, EmbedderKind};
use glyphembed::experiment::{
    at, epoch_json, load_atlas, load_sentences, perplexity_json, run_experiment, score_json, train_lm_from_config,
    train_seg_from_config, Stage, StageError, TestMetric,
};
use glyphembed::glyph::{build_atlas, DEFAULT_RESOLUTION};
use glyphembed::lm::{perplexity_from_nll, LmModel};
use glyphembed::seg::{score_segmentation, SegModel};
use glyphembed::tensor::Checkpoint;

#[derive(Parser)]
#[command(name = "glyphembed", version, about = "Glyph-aware character embeddings for Chinese LM and word segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the characters of one or more text files into a glyph atlas.
    BuildAtlas {
        #[arg(long)]
        font: PathBuf,
        /// Text files whose characters (whitespace ignored) make up the charset.
        #[arg(long, required_unless_present = "vocab")]
        charset: Vec<PathBuf>,
        /// Vocabulary file whose content characters make up the charset.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the frequency-capped character vocabulary of a segmented corpus.
    BuildVocab {
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_VOCAB)]
        max_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a character language model.
    TrainLm(TrainArgs),
    /// Test perplexity of a language-model checkpoint.
    EvalLm {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Overrides the atlas path recorded in the checkpoint.
        #[arg(long)]
        atlas: Option<PathBuf>,
    },
    /// Train a word segmentor.
    TrainSeg(TrainArgs),
    /// Segment raw text, one sentence per line.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        atlas: Option<PathBuf>,
    },
    /// Word-level precision, recall and F1 of a segmentation against gold.
    EvalSeg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Export the id-norm and glyph-norm histogram of a mixed-embedder checkpoint.
    AnalyzeNorms {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        atlas: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train` in the config.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn print_json(v: &serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
    let _ = out.flush();
}

fn load_config(args: &TrainArgs, task: Task) -> Result<ExperimentConfig, StageError> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(at(Stage::Config))?;
    if cfg.task != task {
        return Err(at(Stage::Config)(format!("{} is a `{}` config", args.config.display(), cfg.task)));
    }
    for (slot, flag) in [(&mut cfg.train, &args.train), (&mut cfg.dev, &args.dev), (&mut cfg.atlas, &args.atlas)] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    cfg.validate().map_err(at(Stage::Config))?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, StageError> {
    Checkpoint::load(path).map_err(|e| at(Stage::Config)(format!("{}: {e}", path.display())))
}

fn checkpoint_atlas(ckpt: &Checkpoint, flag: Option<&Path>) -> Result<Option<glyphembed::glyph::GlyphAtlas>, StageError> {
    let embedder = EmbedderConfig::read_meta(&ckpt.meta).map_err(at(Stage::Config))?;
    let path = flag.map(Path::to_path_buf).or_else(|| ckpt.meta.get("atlas").map(PathBuf::from));
    load_atlas(&embedder, path.as_deref())
}

fn charset_of(files: &[PathBuf], vocab: Option<&Path>) -> Result<Vec<char>, StageError> {
    let mut chars = BTreeSet::new();
    for f in files {
        let text = fs::read_to_string(f).map_err(|e| at(Stage::Corpus)(format!("{}: {e}", f.display())))?;
        chars.extend(text.chars().filter(|c| !c.is_whitespace() && *c != '\u{feff}'));
    }
    if let Some(v) = vocab {
        chars.extend(Vocab::load(v).map_err(|e| at(Stage::Vocab)(format!("{}: {e}", v.display())))?.content_chars());
    }
    Ok(chars.into_iter().collect())
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::BuildAtlas { font, charset, vocab, resolution, out } => {
            let chars = charset_of(&charset, vocab.as_deref())?;
            let (atlas, report) = build_atlas(&chars, &font, resolution).map_err(at(Stage::Atlas))?;
            for w in report.warnings() {
                eprintln!("warning: {w}");
            }
            atlas.save(&out).map_err(at(Stage::Output))?;
            print_json(&json!({
                "event": "atlas",
                "chars": atlas.len(),
                "rendered": report.rendered,
                "missing": report.missing.len(),
                "resolution": resolution,
                "font": atlas.font_name(),
            }));
        }
        Command::BuildVocab { train, max_size, out } => {
            let sentences = load_sentences(&train)?;
            let vocab = build_vocab(&sentences, max_size).map_err(at(Stage::Vocab))?;
            vocab.save(&out).map_err(at(Stage::Output))?;
            print_json(&json!({
                "event": "vocab",
                "content_chars": vocab.content_len(),
                "ids": vocab.len(),
                "train_unk_rate": vocab.unk_rate(&sentences),
            }));
        }
        Command::TrainLm(args) => {
            let cfg = load_config(&args, Task::Lm)?;
            let t = train_lm_from_config(&cfg, &mut |r| print_json(&epoch_json(Task::Lm, r)))?;
            t.checkpoint.save(&args.out).map_err(at(Stage::Output))?;
        }
        Command::TrainSeg(args) => {
            let cfg = load_config(&args, Task::Seg)?;
            let t = train_seg_from_config(&cfg, &mut |r| print_json(&epoch_json(Task::Seg, r)))?;
            t.checkpoint.save(&args.out).map_err(at(Stage::Output))?;
        }
        Command::EvalLm { ckpt, test, atlas } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let model = LmModel::from_checkpoint(&ckpt).map_err(at(Stage::Config))?;
            let atlas = checkpoint_atlas(&ckpt, atlas.as_deref())?;
            let test = load_sentences(&test)?;
            let (nll, count) = model.nll(atlas.as_ref(), &test).map_err(at(Stage::Eval))?;
            let ppl = perplexity_from_nll(nll, count);
            println!("{}", TestMetric::Perplexity(ppl).summary_line());
            print_json(&perplexity_json(ppl, count));
        }
        Command::Segment { ckpt, input, out, atlas } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let model = SegModel::from_checkpoint(&ckpt).map_err(at(Stage::Config))?;
            let atlas = checkpoint_atlas(&ckpt, atlas.as_deref())?;
            let file = fs::File::open(&input).map_err(|e| at(Stage::Corpus)(format!("{}: {e}", input.display())))?;
            let lines = parse_raw(BufReader::new(file)).map_err(at(Stage::Corpus))?;
            let segmented = model.segment_text(atlas.as_ref(), &lines).map_err(at(Stage::Eval))?;
            let mut text = segmented.join("\n");
            text.push('\n');
            fs::write(&out, text).map_err(at(Stage::Output))?;
        }
        Command::EvalSeg { pred, gold } => {
            let read = |p: &Path| -> Result<Vec<SegmentedSentence>, StageError> {
                parse_bakeoff_file(p).map(|(s, _)| s).map_err(|e| at(Stage::Corpus)(format!("{}: {e}", p.display())))
            };
            let score = score_segmentation(&read(&pred)?, &read(&gold)?).map_err(at(Stage::Eval))?;
            println!("{}", TestMetric::Segmentation(score).summary_line());
            print_json(&score_json(&score));
        }
        Command::AnalyzeNorms { ckpt, atlas, bins, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let embedder_cfg = EmbedderConfig::read_meta(&ckpt.meta).map_err(at(Stage::Config))?;
            if embedder_cfg.kind != EmbedderKind::Mixed {
                return Err(at(Stage::Analysis)(format!("norm analysis needs a mixed embedder, got {}", embedder_cfg.kind)));
            }
            let (embedder, params, vocab) = match ckpt.meta.get("task").map(String::as_str) {
                Some("lm") => {
                    let m = LmModel::from_checkpoint(&ckpt).map_err(at(Stage::Config))?;
                    (m.embedder, m.params, m.vocab)
                }
                Some("seg") => {
                    let m = SegModel::from_checkpoint(&ckpt).map_err(at(Stage::Config))?;
                    (m.embedder, m.params, m.vocab)
                }
                _ => return Err(at(Stage::Config)("checkpoint has no known task")),
            };
            let atlas = checkpoint_atlas(&ckpt, atlas.as_deref())?.expect("mixed embedder loads an atlas");
            let records = embedding_norms(&embedder, &params, &vocab, &atlas).map_err(at(Stage::Analysis))?;
            let hist = export_norm_histogram(&records, bins, None).map_err(at(Stage::Analysis))?;
            fs::write(&out, hist.to_csv()).map_err(at(Stage::Output))?;
            if let Some(s) = NormSummary::from_records(&records) {
                println!("{}", s.report());
                print_json(&json!({ "event": "norms", "records": records.len(), "median_id_norm": s.median_id, "median_glyph_norm": s.median_glyph }));
            }
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config).map_err(at(Stage::Config))?;
            let summary = run_experiment(&cfg)?;
            println!("{}", summary.metric.summary_line());
            if let Some(r) = &summary.norm_report {
                println!("{r}");
            }
            print_json(&json!({ "event": "run", "run_dir": summary.run_dir.display().to_string() }));
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
