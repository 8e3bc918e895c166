//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "RELEMBCK"
//! version     u32
//! header_len  u64
//! header      UTF-8 key=value lines (configuration, vocabularies, counts,
//!             seed, and `config_hash`, the SHA-256 of every other line)
//! blocks      repeated: name_len u32, name, count u64, count f64 values
//! ```
//!
//! Blocks appear in a fixed order: `words`, `mlp_s`, `mlp_o`, `mlp_r`, then
//! for each active branch in canonical order `<b>.visual` and `<b>.language`,
//! then `gamma` when Γ has parameters.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::analogy::{GammaKind, GammaParams};
use crate::datamodel::{from_file_token, to_file_token, Triplet, Vocabularies, Vocabulary, WordTable};
use crate::embed::{format_branch_set, parse_branch_set, Block, EmbeddingBranch, JointModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numkit::Mlp;
use crate::repr::{VisualDims, VisualInputParams};

pub const MAGIC: &[u8; 8] = b"RELEMBCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: JointModel,
    pub gamma: GammaParams,
    pub seed: u64,
}

fn tokens_line(v: &Vocabulary) -> String {
    v.tokens().iter().map(|t| to_file_token(t)).collect::<Vec<_>>().join(" ")
}

fn header_lines(ck: &Checkpoint) -> Vec<String> {
    let m = &ck.model;
    let c = m.config();
    let counts: Vec<String> = m
        .train_counts()
        .iter()
        .map(|(t, n)| format!("{},{},{}:{n}", t.s, t.p, t.o))
        .collect();
    vec![
        format!("seed={}", ck.seed),
        format!("branches={}", format_branch_set(&c.branches)),
        format!("dim={}", c.dim),
        format!("branch_hidden={}", c.branch_hidden),
        format!("dropout={}", c.dropout),
        format!("visual_subject={}", c.visual.subject),
        format!("visual_object={}", c.visual.object),
        format!("spatial_hidden={}", c.visual.spatial_hidden),
        format!("spatial_dim={}", c.visual.spatial),
        format!("spatial_norm={}", c.spatial_norm),
        format!("vp_negatives={}", c.vp_negatives),
        format!("finetune_words={}", c.finetune_words),
        format!("appearance_dim={}", m.appearance_dim()),
        format!("word_dim={}", m.words().dim()),
        format!("gamma={}", ck.gamma.kind()),
        format!("gamma_hidden={}", ck.gamma.hidden().unwrap_or(0)),
        format!("subjects={}", tokens_line(&m.vocab().subjects)),
        format!("predicates={}", tokens_line(&m.vocab().predicates)),
        format!("objects={}", tokens_line(&m.vocab().objects)),
        format!(
            "words={}",
            m.words().tokens().iter().map(|t| to_file_token(t)).collect::<Vec<_>>().join(" ")
        ),
        format!("counts={}", counts.join(" ")),
    ]
}

fn hash(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn push_block(out: &mut Vec<u8>, name: &str, data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut lines = header_lines(self);
        let digest = hash(&lines);
        lines.push(format!("config_hash={digest}"));
        let header = lines.join("\n");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for b in self.model.block_list() {
            push_block(&mut out, &b.to_string(), self.model.block(b).expect("listed block"));
        }
        if !self.gamma.params().is_empty() {
            push_block(&mut out, "gamma", self.gamma.params());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut lines: Vec<String> = header.lines().map(str::to_string).collect();
        let stored = lines
            .pop()
            .and_then(|l| l.strip_prefix("config_hash=").map(str::to_string))
            .ok_or_else(|| Error::Checkpoint("missing config_hash".into()))?;
        if hash(&lines) != stored {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let h = Header::parse(&lines)?;
        let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
                .to_string();
            let count = r.u64()? as usize;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("block too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            blocks.push((name, data));
        }
        let mut blocks = blocks.into_iter();
        let mut next = |want: &str| -> Result<Vec<f64>> {
            match blocks.next() {
                Some((name, data)) if name == want => Ok(data),
                Some((name, _)) => Err(Error::Checkpoint(format!("expected block {want}, found {name}"))),
                None => Err(Error::Checkpoint(format!("missing block {want}"))),
            }
        };
        let cfg = h.config()?;
        let vocab = Vocabularies {
            subjects: Vocabulary::new(h.tokens("subjects")?)?,
            predicates: Vocabulary::new(h.tokens("predicates")?)?,
            objects: Vocabulary::new(h.tokens("objects")?)?,
        };
        let wd: usize = h.num("word_dim")?;
        let word_data = next(&Block::Words.to_string())?;
        let word_tokens = h.tokens("words")?;
        if word_data.len() != wd * word_tokens.len() {
            return Err(Error::Checkpoint("word block size mismatch".into()));
        }
        let mut words = WordTable::new(wd);
        for (t, row) in word_tokens.iter().zip(word_data.chunks(wd.max(1))) {
            words.insert(t, row)?;
        }
        let ad: usize = h.num("appearance_dim")?;
        let v = cfg.visual;
        let ck = |e: Error| Error::Checkpoint(e.to_string());
        let visual = VisualInputParams {
            mlp_s: Mlp::from_params(&[ad, v.subject], true, 0.0, next("mlp_s")?).map_err(ck)?,
            mlp_o: Mlp::from_params(&[ad, v.object], true, 0.0, next("mlp_o")?).map_err(ck)?,
            mlp_r: Mlp::from_params(&[8, v.spatial_hidden, v.spatial], true, 0.0, next("mlp_r")?).map_err(ck)?,
        };
        let mut branches = Vec::new();
        for &kind in &cfg.branches {
            let vin = if kind.uses_full_visual() { v.total() } else { ad };
            let vis = next(&Block::BranchVisual(kind).to_string())?;
            let lang = next(&Block::BranchLanguage(kind).to_string())?;
            branches.push(EmbeddingBranch {
                kind,
                visual: Mlp::from_params(&[vin, cfg.branch_hidden, cfg.dim], true, cfg.dropout, vis).map_err(ck)?,
                language: Mlp::from_params(&[3 * wd, cfg.branch_hidden, cfg.dim], true, 0.0, lang).map_err(ck)?,
            });
        }
        let kind: GammaKind = h.get("gamma")?.parse()?;
        let gh: usize = h.num("gamma_hidden")?;
        let d = cfg.dim;
        let net = match kind {
            GammaKind::Absent | GammaKind::Zero => None,
            GammaKind::Linear => Some(Mlp::from_params(&[3 * d, d], false, 0.0, next("gamma")?).map_err(ck)?),
            GammaKind::Deep => Some(Mlp::from_params(&[3 * d, gh, d], false, 0.0, next("gamma")?).map_err(ck)?),
        };
        if let Some((name, _)) = blocks.next() {
            return Err(Error::Checkpoint(format!("unexpected trailing block {name}")));
        }
        let gamma = GammaParams::from_parts(kind, d, net)?;
        let model = JointModel::from_parts(cfg, vocab, words, visual, branches, h.counts()?)?;
        Ok(Checkpoint {
            model,
            gamma,
            seed: h.num("seed")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Header {
    map: BTreeMap<String, String>,
}

impl Header {
    fn parse(lines: &[String]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for l in lines {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line '{l}'")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Self { map })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
    }

    fn tokens(&self, key: &str) -> Result<Vec<String>> {
        Ok(self.get(key)?.split_whitespace().map(from_file_token).collect())
    }

    fn config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            branches: parse_branch_set(self.get("branches")?)?,
            dim: self.num("dim")?,
            branch_hidden: self.num("branch_hidden")?,
            dropout: self.num("dropout")?,
            visual: VisualDims {
                subject: self.num("visual_subject")?,
                object: self.num("visual_object")?,
                spatial_hidden: self.num("spatial_hidden")?,
                spatial: self.num("spatial_dim")?,
            },
            spatial_norm: self.get("spatial_norm")?.parse()?,
            vp_negatives: self.get("vp_negatives")?.parse()?,
            finetune_words: self.num("finetune_words")?,
        })
    }

    fn counts(&self) -> Result<BTreeMap<Triplet, usize>> {
        let bad = || Error::Checkpoint("bad counts entry".into());
        let mut out = BTreeMap::new();
        for item in self.get("counts")?.split_whitespace() {
            let (t, n) = item.split_once(':').ok_or_else(bad)?;
            let idx: Vec<usize> = t.split(',').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            if idx.len() != 3 {
                return Err(bad());
            }
            out.insert(Triplet::new(idx[0], idx[1], idx[2]), n.parse().map_err(|_| bad())?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analogy::testutil::toy;
    use crate::numkit::rng_from;

    fn sample(kind: GammaKind) -> Checkpoint {
        let (model, _) = toy(3, 0.25);
        let gamma = GammaParams::new(kind, model.dim(), 7, &mut rng_from(3, "g")).unwrap();
        Checkpoint { model, gamma, seed: 42 }
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in GammaKind::ALL {
            let ck = sample(kind);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample(GammaKind::Deep).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let text_start = 20;
        let mut tampered = bytes.clone();
        let pos = bytes[text_start..].iter().position(|&b| b == b'=').unwrap() + text_start + 1;
        tampered[pos] = if tampered[pos] == b'9' { b'8' } else { b'9' };
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let ck = sample(GammaKind::Linear);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
