//! Commands behind the `relemb` binary. Each writes plain-text artifacts
//! into an output directory and is deterministic given config and seed.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use config::{EvalMode, RunConfig};

use crate::analogy::{eligible_pool, Transfer};
use crate::checkpoint::Checkpoint;
use crate::datamodel::{
    from_file_token, load_dataset, load_triplet_list, load_word_table, synth_generate, to_file_token, write_dataset,
    write_text, write_triplet_list, write_word_table, DatasetFiles, SynthOutput, Triplet, Vocabularies,
};
use crate::embed::BranchKind;
use crate::error::{Error, Result};
use crate::evalkit::{mean_ap, results_text, APResult};
use crate::pipeline::{observed_queries, train_full, Evaluator, TrainOutput};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const RESULTS_FILE: &str = "results.txt";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const HELDOUT_FILE: &str = "heldout.txt";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the synthetic benchmark into `out`: `train.txt`, `test.txt`,
/// the vocabulary files, `words.txt`, `heldout.txt` and the effective config.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthOutput> {
    let data = synth_generate(&cfg.synth, cfg.seed)?;
    create_dir(out)?;
    let files = DatasetFiles::default();
    write_dataset(&out.join(&cfg.train_file), &data.train, &files)?;
    write_dataset(&out.join(&cfg.test_file), &data.test, &files)?;
    write_word_table(&out.join(&cfg.words_file), &data.words)?;
    write_triplet_list(&out.join(HELDOUT_FILE), &data.heldout, &data.train.vocab)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(data)
}

/// Trains both stages on `data_dir/train_file` and writes the checkpoint,
/// loss trace and effective config into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    let train = load_dataset(&cfg.path(&cfg.train_file))?;
    let words = load_word_table(&cfg.path(&cfg.words_file), &train.vocab)?;
    let result = train_full(cfg, &train, &words)?;
    create_dir(out)?;
    result.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(LOSS_FILE), &result.loss_text())?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(result)
}

fn detections_text(vocab: &Vocabularies, per_query: &[(Triplet, Vec<crate::evalkit::Detection>)]) -> String {
    let mut out = String::new();
    for (t, dets) in per_query {
        let (s, p, o) = vocab.names(*t);
        for (rank, d) in dets.iter().enumerate() {
            writeln!(
                out,
                "query {} {} {} rank {} pair {} image {} score {} log_score {}",
                to_file_token(s),
                to_file_token(p),
                to_file_token(o),
                rank + 1,
                d.pair_id,
                to_file_token(&d.image),
                d.score,
                d.log_score
            )
            .expect("string write");
        }
    }
    out
}

/// Evaluates a checkpoint on `data_dir/test_file` and writes `results.txt`
/// (plus `detections.txt` when `top_detections > 0`). Queries come from
/// `queries_file` or default to every triplet with test positives.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<APResult>> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let test = load_dataset(&cfg.path(&cfg.test_file))?;
    let queries = if cfg.queries_file.is_empty() {
        observed_queries(&test)
    } else {
        load_triplet_list(&cfg.path(&cfg.queries_file), ck.model.vocab())?
    };
    let ev = Evaluator::new(&ck.model, &ck.gamma, cfg, &test, &cfg.score_branches, cfg.eval_mode)?;
    let outcomes = ev.run(&queries)?;
    let results: Vec<APResult> = outcomes.iter().map(|o| o.result.clone()).collect();
    mean_ap(&results)?;
    create_dir(out)?;
    write_text(&out.join(RESULTS_FILE), &results_text(&results, ck.model.vocab())?)?;
    if cfg.top_detections > 0 {
        let top: Vec<_> = outcomes
            .into_iter()
            .map(|o| (o.result.query, o.detections.into_iter().take(cfg.top_detections).collect()))
            .collect();
        write_text(&out.join(DETECTIONS_FILE), &detections_text(ck.model.vocab(), &top))?;
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inspect {
    /// Language embeddings of every label key per branch, plus visual
    /// embeddings of every pair of an optional dataset.
    Embeddings { dataset: Option<PathBuf> },
    /// Transfer sources of a triplet given as three file tokens.
    Sources { triplet: [String; 3] },
}

fn push_vector(out: &mut String, v: &[f64]) {
    for x in v {
        write!(out, " {x}").expect("string write");
    }
    out.push('\n');
}

fn triplet_tokens(vocab: &Vocabularies, t: Triplet, slots: [bool; 3]) -> [String; 3] {
    let (s, p, o) = vocab.names(t);
    let mut toks = [s, p, o].map(to_file_token);
    for (tok, keep) in toks.iter_mut().zip(slots) {
        if !keep {
            *tok = "-".into();
        }
    }
    toks
}

/// Text dump of a checkpoint.
///
/// `embeddings` lines: `lang <branch> <s|-> <p|-> <o|-> v1 .. vd` and
/// `vis <branch> <pair_id> v1 .. vd`. `sources` lines: `target s p o` then
/// `source s p o g <G>` in selection order.
pub fn cmd_inspect(cfg: &RunConfig, checkpoint: &Path, what: &Inspect) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = &ck.model;
    let mut out = String::new();
    match what {
        Inspect::Embeddings { dataset } => {
            for br in model.branches() {
                let mask = br.kind.mask();
                for &key in model.universe(br.kind)? {
                    let [s, p, o] = triplet_tokens(model.vocab(), key, mask.slots());
                    write!(out, "lang {} {s} {p} {o}", br.kind).expect("string write");
                    push_vector(&mut out, &model.embed_language(key, br.kind)?);
                }
            }
            if let Some(path) = dataset {
                let data = load_dataset(path)?;
                if data.vocab != *model.vocab() {
                    return Err(Error::Validation("dataset vocabularies differ from the checkpoint's".into()));
                }
                for pair in data.pairs() {
                    let emb = model.pair_embedding(pair)?;
                    for (br, v) in model.branches().iter().zip(&emb.v) {
                        write!(out, "vis {} {}", br.kind, pair.id).expect("string write");
                        push_vector(&mut out, v);
                    }
                }
            }
        }
        Inspect::Sources { triplet } => {
            let [s, p, o] = triplet.clone().map(|t| from_file_token(&t));
            let u = model.vocab().triplet(&s, &p, &o)?;
            model.branch(BranchKind::Vp)?;
            let transfer = Transfer::new(model, &ck.gamma, &cfg.transfer, eligible_pool(model, &cfg.transfer))?;
            let set = transfer.sources(u)?;
            let [a, b, c] = triplet_tokens(model.vocab(), u, [true; 3]);
            writeln!(out, "target {a} {b} {c}").expect("string write");
            for (t, g) in &set.sources {
                let [a, b, c] = triplet_tokens(model.vocab(), *t, [true; 3]);
                writeln!(out, "source {a} {b} {c} g {g}").expect("string write");
            }
        }
    }
    Ok(out)
}
