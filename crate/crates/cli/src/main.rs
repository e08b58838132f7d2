//! `blockskim` command-line interface.

mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blockskim_core::analysis::{probe_features, profile_distribution, read_trace, write_trace, TraceFile};
use blockskim_core::data::{
    build_squad_vocab, ldjson_vocab, load_squad_json, make_batch, make_batch_padded, read_ldjson,
    synth_vocab, write_ldjson, QAExample, Vocab,
};
use blockskim_core::error::{Error, Result};
use blockskim_core::inference::{
    analytical_speedup, retentions_from_lengths, skim_forward, vanilla_forward,
};
use blockskim_core::model::{load_checkpoint, save_checkpoint, BlockSkimModel};
use blockskim_core::training::{
    evaluate, train, TrainOutputs, MAX_ANSWER_LEN,
};
use blockskim_core::inference::decode_span;
use blockskim_core::training::em_f1;
use rayon::prelude::*;

use config::{parse_layer_list, parse_mode, RunConfig};

#[derive(Parser)]
#[command(
    name = "blockskim",
    version,
    about = "Block-skimming transformer QA: data generation, training, skim inference, profiling"
)]
struct Cli {
    /// Bound the size of the evaluation thread pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic needle-in-haystack dataset (LDJSON).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Override a config key (repeatable): --set synth.seq_len=64
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Train a model (modes: joint | vanilla | freeze | skim-train).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Optional explicit dev set; otherwise train.dev_fraction splits.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Base path for the step CSV and summary JSON reports.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Full-length EM/F1 of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Skimming inference: EM/F1 plus FLOPs ratio table.
    SkimEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Positive-class probability needed to retain a block.
        #[arg(long)]
        threshold: Option<f64>,
        /// Comma-separated active layers (default: all but layer 0).
        #[arg(long)]
        layers: Option<String>,
        /// Use the top-fraction rule instead of thresholding.
        #[arg(long)]
        top_fraction: Option<f64>,
        /// Dump per-example retained blocks as LDJSON.
        #[arg(long)]
        skim_out: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Capture attention traces and profile answer vs irrelevant tokens.
    ProfileAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trace_out: PathBuf,
        /// Histogram JSON output path.
        #[arg(long)]
        hist_out: Option<PathBuf>,
    },
    /// Fit per-layer logistic probes on block attention features.
    Probe {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        block_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
    },
    /// Analytical speedup from per-layer retention fractions.
    Speedup {
        /// `0.9x12` or a comma list `0.9,0.8,...`.
        #[arg(long)]
        retention: Option<String>,
        /// Average retentions from a skim-eval LDJSON state dump.
        #[arg(long)]
        from_skimstate: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = error_class(&e);
            eprintln!(
                "{}",
                serde_json::json!({ "error": class, "message": e.to_string() })
            );
            ExitCode::from(exit_code(&e))
        }
    }
}

fn error_class(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Parse(_) | Error::Json(_) => "parse",
        Error::Format(_) => "format",
        Error::Dimension(_) => "dimension",
        Error::Index(_) => "index",
        Error::Data(_) => "data",
        Error::Alignment(_) => "alignment",
        Error::Domain(_) => "domain",
        Error::NonFinite { .. } => "numeric",
        Error::Diverged { .. } => "diverged",
        Error::Internal(_) => "internal",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Parse(_) | Error::Json(_) | Error::Format(_) => 4,
        Error::Dimension(_) | Error::Index(_) => 5,
        Error::Data(_) | Error::Alignment(_) => 6,
        Error::Domain(_) | Error::NonFinite { .. } | Error::Diverged { .. } => 7,
        Error::Internal(_) => 8,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData {
            config,
            out,
            n,
            sets,
        } => cmd_gen_data(config.as_deref(), &out, n, &sets),
        Cmd::Train {
            config,
            data,
            dev,
            mode,
            out_ckpt,
            report,
            sets,
        } => cmd_train(
            config.as_deref(),
            &data,
            dev.as_deref(),
            mode.as_deref(),
            &out_ckpt,
            report.as_deref(),
            &sets,
        ),
        Cmd::Eval { ckpt, data } => cmd_eval(&ckpt, &data),
        Cmd::SkimEval {
            ckpt,
            data,
            config,
            threshold,
            layers,
            top_fraction,
            skim_out,
            sets,
        } => cmd_skim_eval(
            &ckpt,
            &data,
            config.as_deref(),
            threshold,
            layers.as_deref(),
            top_fraction,
            skim_out.as_deref(),
            &sets,
        ),
        Cmd::ProfileAttn {
            ckpt,
            data,
            trace_out,
            hist_out,
        } => cmd_profile_attn(&ckpt, &data, &trace_out, hist_out.as_deref()),
        Cmd::Probe {
            trace,
            data,
            block_size,
            l2,
        } => cmd_probe(&trace, &data, block_size, l2),
        Cmd::Speedup {
            retention,
            from_skimstate,
        } => cmd_speedup(retention.as_deref(), from_skimstate.as_deref()),
    }
}

fn resolve_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(sets)?;
    eprintln!("# resolved configuration");
    eprint!("{}", cfg.dump());
    Ok(cfg)
}

#[derive(Clone, Copy, PartialEq)]
enum DataKind {
    Ldjson,
    Squad,
}

fn sniff_kind(path: &Path) -> Result<DataKind> {
    let text = std::fs::read_to_string(path)?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or_default();
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(first) {
        if v.get("tokens").is_some() {
            return Ok(DataKind::Ldjson);
        }
        if v.get("data").is_some() {
            return Ok(DataKind::Squad);
        }
    }
    // pretty-printed SQuAD does not parse line by line
    if serde_json::from_str::<serde_json::Value>(&text)
        .map(|v| v.get("data").is_some())
        .unwrap_or(false)
    {
        return Ok(DataKind::Squad);
    }
    if first.is_empty() {
        return Ok(DataKind::Ldjson);
    }
    Err(Error::Parse(format!(
        "{}: neither LDJSON dataset nor SQuAD v1.1 file",
        path.display()
    )))
}

fn build_vocab_for(path: &Path, cap: usize) -> Result<Vocab> {
    match sniff_kind(path)? {
        DataKind::Ldjson => ldjson_vocab(path, cap),
        DataKind::Squad => build_squad_vocab(path, cap),
    }
}

fn load_examples(path: &Path, vocab: &Vocab, max_seq_len: usize) -> Result<Vec<QAExample>> {
    match sniff_kind(path)? {
        DataKind::Ldjson => read_ldjson(path, vocab),
        DataKind::Squad => {
            let (examples, skips) = load_squad_json(path, vocab, max_seq_len)?;
            if skips != Default::default() {
                eprintln!(
                    "# squad skips: unmappable={} truncated={} long_question={} no_answer={}",
                    skips.unmappable_answer,
                    skips.answer_truncated,
                    skips.question_too_long,
                    skips.no_answer
                );
            }
            Ok(examples)
        }
    }
}

fn vocab_sidecar(ckpt: &Path) -> PathBuf {
    PathBuf::from(format!("{}.vocab.json", ckpt.display()))
}

fn load_model_and_vocab(ckpt: &Path) -> Result<(BlockSkimModel, Vocab)> {
    let model = load_checkpoint(ckpt)?;
    let vocab = Vocab::load(&vocab_sidecar(ckpt))?;
    Ok((model, vocab))
}

fn cmd_gen_data(config: Option<&Path>, out: &Path, n: usize, sets: &[String]) -> Result<()> {
    let cfg = resolve_config(config, sets)?;
    let examples = blockskim_core::data::gen_synthetic(&cfg.synth, n)?;
    let vocab = synth_vocab(&cfg.synth);
    write_ldjson(out, &examples, &vocab)?;
    println!(
        "{}",
        serde_json::json!({ "written": examples.len(), "path": out.display().to_string() })
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    dev: Option<&Path>,
    mode: Option<&str>,
    out_ckpt: &Path,
    report_base: Option<&Path>,
    sets: &[String],
) -> Result<()> {
    let mut cfg = resolve_config(config, sets)?;
    if let Some(m) = mode {
        cfg.train.mode = parse_mode(m)?;
        if cfg.train.mode == blockskim_core::training::TrainMode::Vanilla {
            cfg.train.alpha = 0.0;
        }
        eprintln!("# train.mode = {} (from --mode)", config::mode_name(cfg.train.mode));
    }
    cfg.train.validate()?;
    cfg.model.validate()?;

    let vocab = build_vocab_for(data, cfg.model.vocab_size)?;
    let examples = load_examples(data, &vocab, cfg.model.max_seq_len)?;
    let (train_set, dev_set): (Vec<QAExample>, Vec<QAExample>) = match dev {
        Some(devp) => (examples, load_examples(devp, &vocab, cfg.model.max_seq_len)?),
        None if cfg.dev_fraction > 0.0 => {
            let every = (1.0 / cfg.dev_fraction).round().max(2.0) as usize;
            let mut tr = Vec::new();
            let mut dv = Vec::new();
            for (i, ex) in examples.into_iter().enumerate() {
                if i % every == every - 1 {
                    dv.push(ex);
                } else {
                    tr.push(ex);
                }
            }
            (tr, dv)
        }
        None => (examples, Vec::new()),
    };

    let mut model = BlockSkimModel::new(
        cfg.model,
        cfg.predictor,
        cfg.train.block_size,
        cfg.train.seed,
    )?;
    let dev_opt = if dev_set.is_empty() {
        None
    } else {
        Some(dev_set.as_slice())
    };
    let report = train(
        &mut model,
        &train_set,
        dev_opt,
        &cfg.train,
        &TrainOutputs {
            ckpt_path: Some(out_ckpt),
        },
    )?;
    save_checkpoint(&model, out_ckpt)?;
    vocab.save(&vocab_sidecar(out_ckpt))?;
    if let Some(base) = report_base {
        report.write_csv(&base.with_extension("csv"))?;
        report.write_json(&base.with_extension("json"))?;
    }
    println!(
        "{}",
        serde_json::json!({
            "beta": report.beta,
            "steps": report.steps.len(),
            "qa_skipped_examples": report.qa_skipped_examples,
            "final_em": report.final_em(),
            "final_f1": report.final_f1(),
            "ckpt": out_ckpt.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path) -> Result<()> {
    let (model, vocab) = load_model_and_vocab(ckpt)?;
    let examples = load_examples(data, &vocab, model.config.max_seq_len)?;
    let (em, f1) = evaluate(&model, &examples)?;
    println!("{}", serde_json::json!({ "em": em, "f1": f1 }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_skim_eval(
    ckpt: &Path,
    data: &Path,
    config: Option<&Path>,
    threshold: Option<f64>,
    layers: Option<&str>,
    top_fraction: Option<f64>,
    skim_out: Option<&Path>,
    sets: &[String],
) -> Result<()> {
    let (model, vocab) = load_model_and_vocab(ckpt)?;
    let examples = load_examples(data, &vocab, model.config.max_seq_len)?;
    if examples.is_empty() {
        return Err(Error::Data("skim-eval: empty dataset".into()));
    }
    let mut cfg = resolve_config(config, sets)?;
    cfg.model = model.config; // policy defaults follow the checkpoint
    if let Some(t) = threshold {
        cfg.skim_threshold = t;
        cfg.skim_top_fraction = None;
    }
    if let Some(f) = top_fraction {
        cfg.skim_top_fraction = Some(f);
    }
    if let Some(l) = layers {
        cfg.skim_layers = Some(parse_layer_list(l)?);
    }
    let policy = cfg.policy();

    let (v_em, v_f1) = evaluate(&model, &examples)?;

    let idx: Vec<usize> = (0..examples.len()).collect();
    let items = make_batch(&examples, &idx, model.block_size, false, model.config.max_seq_len)?;
    let per_example: Result<Vec<_>> = items
        .par_iter()
        .map(|item| {
            let (out, state, flops) = skim_forward(&model, item, &policy)?;
            let pred = decode_span(&out, item.passage_span, MAX_ANSWER_LEN);
            let (em, f1) = em_f1(pred, item.answer);
            Ok((em, f1, state, flops))
        })
        .collect();
    let per_example = per_example?;

    let n = per_example.len() as f64;
    let s_em = per_example.iter().map(|r| r.0).sum::<f64>() / n * 100.0;
    let s_f1 = per_example.iter().map(|r| r.1).sum::<f64>() / n * 100.0;
    let vanilla_total: u64 = per_example.iter().map(|r| r.3.vanilla_total).sum();
    let skimmed_total: u64 = per_example.iter().map(|r| r.3.skimmed_total).sum();
    let ratio = vanilla_total as f64 / skimmed_total as f64;

    // mean per-layer retentions feed the analytical model
    let layers_n = model.config.num_layers;
    let mut mean_ret = vec![0.0; layers_n];
    for (_, _, state, _) in &per_example {
        let r = retentions_from_lengths(state.lengths[0], &state.lengths)?;
        for (m, v) in mean_ret.iter_mut().zip(&r) {
            *m += v / n;
        }
    }
    // averaging exact-1.0 retentions can tip over 1 by an ulp
    for m in &mut mean_ret {
        *m = m.min(1.0);
    }
    let analytical = analytical_speedup(&mean_ret)?;

    println!("mode,em,f1,flops_ratio,analytical_speedup");
    println!("vanilla,{:.4},{:.4},1.00,1.00", v_em, v_f1);
    println!(
        "skim,{:.4},{:.4},{:.2},{:.2}",
        s_em, s_f1, ratio, analytical
    );

    if let Some(path) = skim_out {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, (_, _, state, _)) in per_example.iter().enumerate() {
            let line = serde_json::json!({
                "example": i,
                "blocks": state.blocks_per_layer,
                "lengths": state.lengths,
                "passage_exhausted": state.passage_exhausted,
            });
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

fn cmd_profile_attn(
    ckpt: &Path,
    data: &Path,
    trace_out: &Path,
    hist_out: Option<&Path>,
) -> Result<()> {
    let (model, vocab) = load_model_and_vocab(ckpt)?;
    let examples = load_examples(data, &vocab, model.config.max_seq_len)?;
    if examples.is_empty() {
        return Err(Error::Data("profile-attn: empty dataset".into()));
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let items = make_batch(&examples, &idx, model.block_size, false, model.config.max_seq_len)?;
    let captures: Result<Vec<_>> = items
        .par_iter()
        .map(|item| {
            let (_, trace) = vanilla_forward(&model, item, true)?;
            trace.ok_or_else(|| Error::Internal("capture missing".into()))
        })
        .collect();
    let captures = captures?;

    let trace = TraceFile::from_captures(model.config.num_heads, items[0].token_ids.len(), &captures)?;
    write_trace(trace_out, &trace)?;

    let dist = profile_distribution(&captures, &items)?;
    println!(
        "layer,answer_mean,answer_std,answer_count,irrelevant_mean,irrelevant_std,irrelevant_count"
    );
    for l in &dist.layers {
        println!(
            "{},{},{},{},{},{},{}",
            l.layer,
            l.answer_mean,
            l.answer_std,
            l.answer_count,
            l.irrelevant_mean,
            l.irrelevant_std,
            l.irrelevant_count
        );
    }
    if let Some(path) = hist_out {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &dist)?;
    }
    Ok(())
}

fn cmd_probe(trace_path: &Path, data: &Path, block_size: usize, l2: f64) -> Result<()> {
    let trace = read_trace(trace_path)?;
    // token ids are irrelevant for probing; a file-local vocabulary keeps
    // span structure intact
    let vocab = build_vocab_for(data, usize::MAX / 2)?;
    let examples = load_examples(data, &vocab, trace.max_len as usize)?;
    if examples.len() != trace.examples.len() {
        return Err(Error::Alignment(format!(
            "{} trace examples vs {} dataset examples",
            trace.examples.len(),
            examples.len()
        )));
    }
    if trace.examples.is_empty() {
        return Err(Error::Data("probe: empty trace".into()));
    }
    let target_len = trace.examples[0].lengths[0] as usize;
    let idx: Vec<usize> = (0..examples.len()).collect();
    let items = make_batch_padded(
        &examples,
        &idx,
        block_size,
        false,
        trace.max_len as usize,
        target_len,
    )?;

    println!("layer,samples,train_accuracy,train_f1,heldout_accuracy,heldout_f1,iterations,converged");
    for l in 0..trace.num_layers as usize {
        let mut feats: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<u8> = Vec::new();
        for (e, item) in items.iter().enumerate() {
            let attn = trace.layer_tensor(e, l)?;
            for (block, f) in probe_features(&attn, item)? {
                feats.push(f);
                labels.push(item.labels.y[block]);
            }
        }
        let (_, rep) = blockskim_core::analysis::probe_fit(&feats, &labels, l2)?;
        println!(
            "{},{},{},{},{},{},{},{}",
            l,
            feats.len(),
            rep.train_accuracy,
            rep.train_f1,
            rep.heldout_accuracy,
            rep.heldout_f1,
            rep.iterations,
            rep.converged
        );
    }
    Ok(())
}

fn parse_retentions(spec: &str) -> Result<Vec<f64>> {
    if let Some((r, times)) = spec.split_once('x') {
        let r: f64 = r
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad retention `{spec}`")))?;
        let times: usize = times
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad retention repeat `{spec}`")))?;
        return Ok(vec![r; times]);
    }
    spec.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad retention `{p}`")))
        })
        .collect()
}

fn cmd_speedup(retention: Option<&str>, from_skimstate: Option<&Path>) -> Result<()> {
    let retentions = match (retention, from_skimstate) {
        (Some(r), None) => parse_retentions(r)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            let mut sums: Vec<f64> = Vec::new();
            let mut count = 0usize;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
                let lengths: Vec<usize> = v
                    .get("lengths")
                    .and_then(|l| l.as_array())
                    .ok_or_else(|| Error::Parse("skim state line lacks `lengths`".into()))?
                    .iter()
                    .map(|x| x.as_u64().unwrap_or(0) as usize)
                    .collect();
                let r = retentions_from_lengths(lengths[0], &lengths)?;
                if sums.is_empty() {
                    sums = vec![0.0; r.len()];
                }
                for (s, v) in sums.iter_mut().zip(&r) {
                    *s += v;
                }
                count += 1;
            }
            if count == 0 {
                return Err(Error::Data("skim state dump is empty".into()));
            }
            sums.iter()
                .map(|s| (s / count as f64).min(1.0))
                .collect()
        }
        _ => {
            return Err(Error::Config(
                "speedup needs exactly one of --retention or --from-skimstate".into(),
            ))
        }
    };
    let speedup = analytical_speedup(&retentions)?;
    println!("{:.2}", speedup);
    Ok(())
}
