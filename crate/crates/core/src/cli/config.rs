use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analogy::{GammaKind, TransferConfig};
use crate::datamodel::SynthConfig;
use crate::embed::{format_branch_set, parse_branch_set, BranchKind, ModelConfig, Schedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    #[default]
    Direct,
    Transfer,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Direct => "direct",
            EvalMode::Transfer => "transfer",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(EvalMode::Direct),
            "transfer" => Ok(EvalMode::Transfer),
            _ => Err(Error::Config(format!("unknown eval mode '{s}'"))),
        }
    }
}

/// Every knob of a run. Parsed from `key=value` lines; see [`RunConfig::to_text`]
/// for the full key list.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub train_file: String,
    pub test_file: String,
    pub words_file: String,
    /// Query list for evaluation; empty means every triplet with test positives.
    pub queries_file: String,
    pub model: ModelConfig,
    pub stage1: Schedule,
    pub stage2_epochs: usize,
    pub gamma: GammaKind,
    /// Hidden width of the deep Γ; 0 means `3d`.
    pub gamma_hidden: usize,
    pub transfer: TransferConfig,
    pub eval_mode: EvalMode,
    /// Branches multiplied into the score; empty means all trained branches.
    pub score_branches: Vec<BranchKind>,
    pub iou_threshold: f64,
    /// Detections per query written next to the results; 0 disables.
    pub top_detections: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("."),
            train_file: "train.txt".into(),
            test_file: "test.txt".into(),
            words_file: "words.txt".into(),
            queries_file: String::new(),
            model: ModelConfig::default(),
            stage1: Schedule::default(),
            stage2_epochs: 5,
            gamma: GammaKind::Deep,
            gamma_hidden: 0,
            transfer: TransferConfig::default(),
            eval_mode: EvalMode::Direct,
            score_branches: Vec::new(),
            iou_threshold: 0.5,
            top_detections: 0,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

impl RunConfig {
    pub fn stage2(&self) -> Schedule {
        Schedule {
            epochs: self.stage2_epochs,
            ..self.stage1
        }
    }

    pub fn gamma_hidden_or_default(&self) -> usize {
        if self.gamma_hidden == 0 {
            3 * self.model.dim
        } else {
            self.gamma_hidden
        }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.data_dir.join(file)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_file" => self.train_file = v.into(),
            "test_file" => self.test_file = v.into(),
            "words_file" => self.words_file = v.into(),
            "queries_file" => self.queries_file = v.into(),
            "branches" => self.model.branches = parse_branch_set(v)?,
            "dim" => self.model.dim = parse(key, v)?,
            "branch_hidden" => self.model.branch_hidden = parse(key, v)?,
            "dropout" => self.model.dropout = parse(key, v)?,
            "visual_subject" => self.model.visual.subject = parse(key, v)?,
            "visual_object" => self.model.visual.object = parse(key, v)?,
            "spatial_hidden" => self.model.visual.spatial_hidden = parse(key, v)?,
            "spatial_dim" => self.model.visual.spatial = parse(key, v)?,
            "spatial_norm" => self.model.spatial_norm = v.parse()?,
            "vp_negatives" => self.model.vp_negatives = v.parse()?,
            "finetune_words" => self.model.finetune_words = parse(key, v)?,
            "lr" => self.stage1.lr = parse(key, v)?,
            "batch_size" => self.stage1.batch_size = parse(key, v)?,
            "positives_per_batch" => self.stage1.positives_per_batch = parse(key, v)?,
            "epochs_stage1" => self.stage1.epochs = parse(key, v)?,
            "epochs_stage2" => self.stage2_epochs = parse(key, v)?,
            "gamma" => self.gamma = v.parse()?,
            "gamma_hidden" => self.gamma_hidden = parse(key, v)?,
            "k" => self.transfer.k = parse(key, v)?,
            "alpha_s" => self.transfer.alpha[0] = parse(key, v)?,
            "alpha_p" => self.transfer.alpha[1] = parse(key, v)?,
            "alpha_o" => self.transfer.alpha[2] = parse(key, v)?,
            "lambda" => self.transfer.lambda = parse(key, v)?,
            "similarity" => self.transfer.similarity = v.parse()?,
            "clamp_g" => self.transfer.clamp_g = parse(key, v)?,
            "normalize_aggregation" => self.transfer.normalize_aggregation = parse(key, v)?,
            "rare_threshold" => self.transfer.rare_threshold = parse(key, v)?,
            "eval_mode" => self.eval_mode = v.parse()?,
            "score_branches" => {
                self.score_branches = if v.is_empty() {
                    Vec::new()
                } else {
                    parse_branch_set(v)?
                }
            }
            "iou_threshold" => self.iou_threshold = parse(key, v)?,
            "top_detections" => self.top_detections = parse(key, v)?,
            "synth_subjects" => s.subjects = parse(key, v)?,
            "synth_predicates" => s.predicates = parse(key, v)?,
            "synth_objects" => s.objects = parse(key, v)?,
            "synth_object_groups" => s.object_groups = parse(key, v)?,
            "synth_groups_per_predicate" => s.groups_per_predicate = parse(key, v)?,
            "synth_triplets" => s.triplets = parse(key, v)?,
            "synth_train_pairs_min" => s.train_pairs_min = parse(key, v)?,
            "synth_train_pairs_max" => s.train_pairs_max = parse(key, v)?,
            "synth_rare_fraction" => s.rare_fraction = parse(key, v)?,
            "synth_test_pairs" => s.test_pairs = parse(key, v)?,
            "synth_negative_ratio" => s.negative_ratio = parse(key, v)?,
            "synth_duplicate_rate" => s.duplicate_rate = parse(key, v)?,
            "synth_appearance_dim" => s.appearance_dim = parse(key, v)?,
            "synth_noise" => s.noise = parse(key, v)?,
            "synth_subject_scale" => s.subject_scale = parse(key, v)?,
            "synth_pose_scale" => s.pose_scale = parse(key, v)?,
            "synth_group_scale" => s.group_scale = parse(key, v)?,
            "synth_identity_scale" => s.identity_scale = parse(key, v)?,
            "synth_interaction_scale" => s.interaction_scale = parse(key, v)?,
            "synth_specific_scale" => s.specific_scale = parse(key, v)?,
            "synth_geometry_noise" => s.geometry_noise = parse(key, v)?,
            "synth_word_noise" => s.word_noise = parse(key, v)?,
            "synth_heldout" => s.heldout = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; a repeated key keeps the last value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.transfer.validate()?;
        if self.stage1.batch_size == 0 || self.stage1.positives_per_batch == 0 || self.stage1.positives_per_batch > self.stage1.batch_size {
            return Err(Error::Config("need 1 <= positives_per_batch <= batch_size".into()));
        }
        if !(self.stage1.lr >= 0.0 && self.stage1.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("iou_threshold must lie in (0,1]".into()));
        }
        if let Some(b) = self.score_branches.iter().find(|b| !self.model.branches.contains(b)) {
            return Err(Error::Config(format!("score branch {b} is not trained")));
        }
        Ok(())
    }

    /// Every key with its effective value; [`RunConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.transfer;
        let s = &self.synth;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("train_file", self.train_file.clone()),
            ("test_file", self.test_file.clone()),
            ("words_file", self.words_file.clone()),
            ("queries_file", self.queries_file.clone()),
            ("branches", format_branch_set(&m.branches)),
            ("dim", m.dim.to_string()),
            ("branch_hidden", m.branch_hidden.to_string()),
            ("dropout", m.dropout.to_string()),
            ("visual_subject", m.visual.subject.to_string()),
            ("visual_object", m.visual.object.to_string()),
            ("spatial_hidden", m.visual.spatial_hidden.to_string()),
            ("spatial_dim", m.visual.spatial.to_string()),
            ("spatial_norm", m.spatial_norm.to_string()),
            ("vp_negatives", m.vp_negatives.to_string()),
            ("finetune_words", m.finetune_words.to_string()),
            ("lr", self.stage1.lr.to_string()),
            ("batch_size", self.stage1.batch_size.to_string()),
            ("positives_per_batch", self.stage1.positives_per_batch.to_string()),
            ("epochs_stage1", self.stage1.epochs.to_string()),
            ("epochs_stage2", self.stage2_epochs.to_string()),
            ("gamma", self.gamma.to_string()),
            ("gamma_hidden", self.gamma_hidden.to_string()),
            ("k", t.k.to_string()),
            ("alpha_s", t.alpha[0].to_string()),
            ("alpha_p", t.alpha[1].to_string()),
            ("alpha_o", t.alpha[2].to_string()),
            ("lambda", t.lambda.to_string()),
            ("similarity", t.similarity.to_string()),
            ("clamp_g", t.clamp_g.to_string()),
            ("normalize_aggregation", t.normalize_aggregation.to_string()),
            ("rare_threshold", t.rare_threshold.to_string()),
            ("eval_mode", self.eval_mode.to_string()),
            ("score_branches", format_branch_set(&self.score_branches)),
            ("iou_threshold", self.iou_threshold.to_string()),
            ("top_detections", self.top_detections.to_string()),
            ("synth_subjects", s.subjects.to_string()),
            ("synth_predicates", s.predicates.to_string()),
            ("synth_objects", s.objects.to_string()),
            ("synth_object_groups", s.object_groups.to_string()),
            ("synth_groups_per_predicate", s.groups_per_predicate.to_string()),
            ("synth_triplets", s.triplets.to_string()),
            ("synth_train_pairs_min", s.train_pairs_min.to_string()),
            ("synth_train_pairs_max", s.train_pairs_max.to_string()),
            ("synth_rare_fraction", s.rare_fraction.to_string()),
            ("synth_test_pairs", s.test_pairs.to_string()),
            ("synth_negative_ratio", s.negative_ratio.to_string()),
            ("synth_duplicate_rate", s.duplicate_rate.to_string()),
            ("synth_appearance_dim", s.appearance_dim.to_string()),
            ("synth_noise", s.noise.to_string()),
            ("synth_subject_scale", s.subject_scale.to_string()),
            ("synth_pose_scale", s.pose_scale.to_string()),
            ("synth_group_scale", s.group_scale.to_string()),
            ("synth_identity_scale", s.identity_scale.to_string()),
            ("synth_interaction_scale", s.interaction_scale.to_string()),
            ("synth_specific_scale", s.specific_scale.to_string()),
            ("synth_geometry_noise", s.geometry_noise.to_string()),
            ("synth_word_noise", s.word_noise.to_string()),
            ("synth_heldout", s.heldout.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_preset() {
        let c = RunConfig::default();
        assert_eq!(c.stage1.lr, 0.001);
        assert_eq!((c.stage1.batch_size, c.stage1.positives_per_batch), (64, 16));
        assert_eq!((c.stage1.epochs, c.stage2_epochs), (10, 5));
        assert_eq!(c.transfer.k, 5);
        assert_eq!(c.transfer.alpha, [0.1, 0.8, 0.1]);
        assert_eq!(c.transfer.lambda, 1.0);
    }

    #[test]
    fn emitted_text_reparses_to_equal_config() {
        let mut c = RunConfig::default();
        c.set("branches", "s+o+vp+sp").unwrap();
        c.set("dropout", "0.3").unwrap();
        c.set("alpha_s", "0.25").unwrap();
        c.set("alpha_p", "0.5").unwrap();
        c.set("alpha_o", "0.25").unwrap();
        c.set("score_branches", "s+vp").unwrap();
        c.set("synth_noise", "0.123456789").unwrap();
        c.set("data_dir", "some/dir").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse("nonsense=1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("dim=abc").is_err());
        assert!(RunConfig::parse("just a line").is_err());
        assert!(RunConfig::parse("alpha_p=0.9").is_err());
        assert!(RunConfig::parse("score_branches=p\nbranches=s+o").is_err());
        let c = RunConfig::parse("# comment\n\n dim = 16 \n").unwrap();
        assert_eq!(c.model.dim, 16);
    }
}
