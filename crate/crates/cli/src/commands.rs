use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use aste_core::corpus::{self, Embeddings, Sentence, Vocabulary};
use aste_core::decode;
use aste_core::evaluate;
use aste_core::model::Model;
use aste_core::train::{self, Checkpoint};
use aste_core::Triplet;

use crate::config::RunConfig;

fn load_sentences(path: &Path) -> Result<Vec<Sentence>> {
    let outcome = corpus::load_dataset_lenient(path)?;
    for (line, reason) in &outcome.rejected {
        eprintln!("warning: {}:{line}: skipped: {reason}", path.display());
    }
    for w in &outcome.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    if outcome.sentences.is_empty() {
        bail!("{}: no valid sentences", path.display());
    }
    Ok(outcome.sentences)
}

fn load_embeddings_for(cfg: &RunConfig, corpora: &[&[Sentence]]) -> Result<Embeddings> {
    let all: Vec<Sentence> = corpora.iter().flat_map(|c| c.iter().cloned()).collect();
    let vocab = Vocabulary::build(&all);
    Ok(Embeddings::load(
        &cfg.path(&cfg.embeddings),
        vocab,
        cfg.d_w,
    )?)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.require(&["train_data", "dev_data", "embeddings", "checkpoint_out"])?;
    let train_set = load_sentences(&cfg.path(&cfg.train_data))?;
    let dev_set = load_sentences(&cfg.path(&cfg.dev_data))?;
    let embeddings = load_embeddings_for(cfg, &[&train_set, &dev_set])?;

    let resume = if cfg.resume_from.is_empty() {
        None
    } else {
        Some(Checkpoint::load(&cfg.path(&cfg.resume_from))?)
    };

    let result = train::fit(
        &train_set,
        &dev_set,
        &embeddings,
        &cfg.model_config(),
        &cfg.train_config(),
        resume.as_ref(),
    )?;

    let ckpt_path = cfg.path(&cfg.checkpoint_out);
    result.best.save(&ckpt_path)?;

    let log_path = if cfg.log_out.is_empty() {
        format!("{}.log", cfg.checkpoint_out)
    } else {
        cfg.log_out.clone()
    };
    let mut log_file = fs::File::create(&log_path).context("creating training log")?;
    for line in &result.log {
        writeln!(log_file, "{line}")?;
    }

    for line in result.log.iter().filter(|l| l.contains("dev_f1=")) {
        println!("{line}");
    }
    let (model, _) = result.best.restore()?;
    let report = train::dev_score(&model, &embeddings, &dev_set)?;
    println!(
        "best_step={} dev_p={:.6} dev_r={:.6} dev_f1={:.6}",
        result.best.step, report.precision, report.recall, report.f1
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(&cfg.path(&cfg.checkpoint_in))?;
    let (model, _) = ckpt.restore()?;
    Ok((model, ckpt))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    cfg.require(&["checkpoint_in", "test_data", "embeddings"])?;
    let (model, ckpt) = load_model(cfg)?;
    let test_set = load_sentences(&cfg.path(&cfg.test_data))?;
    let mut cfg_emb = cfg.clone();
    cfg_emb.d_w = ckpt.model.d_w;
    let embeddings = load_embeddings_for(&cfg_emb, &[&test_set])?;

    let predictions = decode::predict_sentences(&model, &embeddings, &test_set)?;
    let pred_triplets: Vec<Vec<Triplet>> = predictions.into_iter().map(|p| p.triplets).collect();
    let gold: Vec<Vec<Triplet>> = test_set.iter().map(|s| s.triplets.clone()).collect();
    let evaluation = evaluate::evaluate(&pred_triplets, &gold)?;

    println!("{evaluation}");
    print!("{}", evaluation.machine_lines());
    if !cfg.report_out.is_empty() {
        fs::write(cfg.path(&cfg.report_out), evaluation.machine_lines())?;
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    cfg.require(&["checkpoint_in", "embeddings", "predict_in", "predict_out"])?;
    let (model, ckpt) = load_model(cfg)?;
    let text = fs::read_to_string(cfg.path(&cfg.predict_in))
        .with_context(|| format!("reading {}", cfg.predict_in))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);

    // raw sentences: one space-tokenized sentence per line
    let mut lines: Vec<(usize, Vec<String>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let tokens: Vec<String> = raw
            .trim_end_matches('\r')
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        if tokens.is_empty() {
            continue;
        }
        lines.push((idx + 1, tokens));
    }

    let pseudo: Vec<Sentence> = lines
        .iter()
        .map(|(_, tokens)| Sentence {
            tokens: tokens.clone(),
            triplets: Vec::new(),
            gold_tags: vec![aste_core::BioTag::Outside; tokens.len()],
            gold_table: aste_core::SentimentTable::empty(tokens.len()),
        })
        .collect();
    let mut cfg_emb = cfg.clone();
    cfg_emb.d_w = ckpt.model.d_w;
    let embeddings = load_embeddings_for(&cfg_emb, &[&pseudo])?;

    let mut out = fs::File::create(cfg.path(&cfg.predict_out))?;
    let mut failures = 0usize;
    for (line_no, tokens) in &lines {
        if tokens.len() > model.config.max_len {
            eprintln!(
                "{}:{line_no}: sentence has {} tokens, model max is {}",
                cfg.predict_in,
                tokens.len(),
                model.config.max_len
            );
            failures += 1;
            continue;
        }
        let ids: Vec<usize> = tokens
            .iter()
            .map(|t| embeddings.vocab().lookup(t))
            .collect();
        let logits = model.infer(&embeddings, &ids)?;
        let prediction = decode::decode_triplets(&logits);
        writeln!(
            out,
            "{}",
            decode::format_prediction_line(tokens, &prediction)
        )?;
    }
    if failures > 0 {
        bail!("{failures} line(s) failed; see diagnostics above");
    }
    Ok(())
}

pub fn cmd_inspect(cfg: &RunConfig) -> Result<()> {
    cfg.require(&["checkpoint_in", "embeddings", "sentence"])?;
    let (model, ckpt) = load_model(cfg)?;
    let tokens: Vec<String> = cfg
        .sentence
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect();
    if tokens.is_empty() {
        bail!("sentence is empty");
    }
    if tokens.len() > model.config.max_len {
        bail!(
            "sentence has {} tokens, model max is {}",
            tokens.len(),
            model.config.max_len
        );
    }
    let pseudo = vec![Sentence {
        tokens: tokens.clone(),
        triplets: Vec::new(),
        gold_tags: vec![aste_core::BioTag::Outside; tokens.len()],
        gold_table: aste_core::SentimentTable::empty(tokens.len()),
    }];
    let mut cfg_emb = cfg.clone();
    cfg_emb.d_w = ckpt.model.d_w;
    let embeddings = load_embeddings_for(&cfg_emb, &[&pseudo])?;

    let ids: Vec<usize> = tokens
        .iter()
        .map(|t| embeddings.vocab().lookup(t))
        .collect();
    let logits = model.infer(&embeddings, &ids)?;
    let n = tokens.len();

    let tags: Vec<aste_core::BioTag> = (0..n)
        .map(|i| aste_core::BioTag::from_index(logits.seq.argmax_row(i)).expect("5-way head"))
        .collect();
    println!("tokens: {}", tokens.join(" "));
    println!(
        "tags: {}",
        tags.iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!("grid:");
    let probs = logits.table.softmax_rows();
    for m in 0..n {
        let row: Vec<&str> = (0..n)
            .map(|k| {
                aste_core::TableLabel::from_index(probs.argmax_row(m * n + k))
                    .expect("4-way head")
                    .as_str()
            })
            .collect();
        println!(
            "  {}",
            row.iter()
                .map(|s| format!("{s:<4}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    let prediction = decode::decode_triplets(&logits);
    println!("triplets:");
    for t in &prediction.triplets {
        let target: Vec<String> = t.target.indices().map(|i| i.to_string()).collect();
        let opinion: Vec<String> = t.opinion.indices().map(|i| i.to_string()).collect();
        println!(
            "  ([{}], [{}], '{}')",
            target.join(", "),
            opinion.join(", "),
            t.sentiment
        );
    }
    Ok(())
}
