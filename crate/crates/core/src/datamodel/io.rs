//! Line-oriented text formats.
//!
//! Tokens containing spaces are written with underscores (`sports_ball`) and
//! read back with spaces (`sports ball`); in memory tokens always carry spaces.
//!
//! Dataset file:
//!
//! ```text
//! #appearance_dim 32
//! #subjects subjects.txt
//! #predicates predicates.txt
//! #objects objects.txt
//! pair 0 img_0 sub 10 20 110 220 obj 90 40 200 180 scat person ocat horse afeat_s ... afeat_o ... labels ride
//! ```
//!
//! Vocabulary paths are relative to the dataset file. `labels` lists the
//! positive predicates; subject and object come from `scat`/`ocat`. Other lines
//! starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{BoundingBox, CandidatePair, Dataset, Triplet, Vocabularies, Vocabulary, WordTable};
use crate::error::{Error, Result};

pub fn to_file_token(token: &str) -> String {
    token.replace(' ', "_")
}

pub fn from_file_token(token: &str) -> String {
    token.replace('_', " ")
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = read(path)?;
    let tokens: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(from_file_token)
        .collect();
    Vocabulary::new(tokens).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for t in vocab.tokens() {
        out.push_str(&to_file_token(t));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Vocabulary file names referenced from a dataset header, relative to the
/// dataset file's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub subjects: PathBuf,
    pub predicates: PathBuf,
    pub objects: PathBuf,
}

impl Default for DatasetFiles {
    fn default() -> Self {
        Self {
            subjects: "subjects.txt".into(),
            predicates: "predicates.txt".into(),
            objects: "objects.txt".into(),
        }
    }
}

struct Cursor<'a> {
    path: &'a Path,
    line: usize,
    it: std::iter::Peekable<std::str::SplitWhitespace<'a>>,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, msg)
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.it.next().ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        let got = self.next(kw)?;
        if got != kw {
            return Err(self.err(format!("expected `{kw}`, found `{got}`")));
        }
        Ok(())
    }

    fn real(&mut self, what: &str) -> Result<f64> {
        let tok = self.next(what)?;
        let v: f64 = tok.parse().map_err(|_| self.err(format!("bad real `{tok}` for {what}")))?;
        if !v.is_finite() {
            return Err(self.err(format!("non-finite value for {what}")));
        }
        Ok(v)
    }

    fn reals(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.real(what)).collect()
    }

    fn bbox(&mut self) -> Result<BoundingBox> {
        let c = self.reals(4, "box coordinate")?;
        BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| self.err(e.to_string()))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = read(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut appearance_dim = None;
    let mut vocab_paths: [Option<PathBuf>; 3] = [None, None, None];
    let mut raw_pairs: Vec<(usize, &str)> = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            let key = parts.next().unwrap_or("");
            let value = parts.next();
            let slot = match key {
                "appearance_dim" => {
                    let v = value.ok_or_else(|| Error::parse(path, lineno, "missing appearance_dim value"))?;
                    let d: usize = v
                        .parse()
                        .map_err(|_| Error::parse(path, lineno, format!("bad appearance_dim `{v}`")))?;
                    appearance_dim = Some(d);
                    continue;
                }
                "subjects" => 0,
                "predicates" => 1,
                "objects" => 2,
                _ => continue,
            };
            let v = value.ok_or_else(|| Error::parse(path, lineno, format!("missing path for #{key}")))?;
            vocab_paths[slot] = Some(base.join(v));
            continue;
        }
        if !line.starts_with("pair ") {
            return Err(Error::parse(path, lineno, "expected a `pair` line or a `#` header"));
        }
        raw_pairs.push((lineno, line));
    }

    let appearance_dim = appearance_dim.ok_or_else(|| Error::parse(path, 0, "missing #appearance_dim header"))?;
    let mut load = |slot: usize, name: &str| -> Result<Vocabulary> {
        let p = vocab_paths[slot]
            .take()
            .ok_or_else(|| Error::parse(path, 0, format!("missing #{name} header")))?;
        load_vocabulary(&p)
    };
    let vocab = Vocabularies {
        subjects: load(0, "subjects")?,
        predicates: load(1, "predicates")?,
        objects: load(2, "objects")?,
    };

    let mut pairs = Vec::with_capacity(raw_pairs.len());
    for (lineno, line) in raw_pairs {
        pairs.push(parse_pair(path, lineno, line, appearance_dim, &vocab)?);
    }
    Dataset::new(vocab, appearance_dim, pairs)
}

fn parse_pair(path: &Path, line_no: usize, line: &str, dim: usize, vocab: &Vocabularies) -> Result<CandidatePair> {
    let mut c = Cursor {
        path,
        line: line_no,
        it: line.split_whitespace().peekable(),
    };
    c.keyword("pair")?;
    let id_tok = c.next("pair id")?;
    let id: u64 = id_tok.parse().map_err(|_| c.err(format!("bad pair id `{id_tok}`")))?;
    let image = c.next("image id")?.to_string();
    c.keyword("sub")?;
    let sub_box = c.bbox()?;
    c.keyword("obj")?;
    let obj_box = c.bbox()?;
    c.keyword("scat")?;
    let scat = from_file_token(c.next("subject category")?);
    let sub_category = vocab.subjects.get(&scat).ok_or_else(|| c.err(format!("unknown subject `{scat}`")))?;
    c.keyword("ocat")?;
    let ocat = from_file_token(c.next("object category")?);
    let obj_category = vocab.objects.get(&ocat).ok_or_else(|| c.err(format!("unknown object `{ocat}`")))?;
    c.keyword("afeat_s")?;
    let sub_appearance = c.reals(dim, "subject appearance")?;
    c.keyword("afeat_o")?;
    let obj_appearance = c.reals(dim, "object appearance")?;
    if let Some(&tok) = c.it.peek() {
        if tok != "labels" {
            return Err(c.err(format!(
                "appearance has more than the declared {dim} values (found `{tok}`)"
            )));
        }
    }
    c.keyword("labels")?;
    let mut predicates = Vec::new();
    for tok in c.it.by_ref() {
        let p = from_file_token(tok);
        let idx = vocab
            .predicates
            .get(&p)
            .ok_or_else(|| Error::parse(path, line_no, format!("unknown predicate `{p}`")))?;
        predicates.push(idx);
    }
    Ok(CandidatePair {
        id,
        image,
        sub_box,
        obj_box,
        sub_category,
        obj_category,
        sub_appearance,
        obj_appearance,
        predicates,
    })
}

fn push_reals(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, " {v}");
    }
}

/// Writes the dataset and its three vocabulary files (next to it).
pub fn write_dataset(path: &Path, dataset: &Dataset, files: &DatasetFiles) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    write_vocabulary(&base.join(&files.subjects), &dataset.vocab.subjects)?;
    write_vocabulary(&base.join(&files.predicates), &dataset.vocab.predicates)?;
    write_vocabulary(&base.join(&files.objects), &dataset.vocab.objects)?;

    let mut out = String::new();
    let _ = writeln!(out, "#appearance_dim {}", dataset.appearance_dim);
    let _ = writeln!(out, "#subjects {}", files.subjects.display());
    let _ = writeln!(out, "#predicates {}", files.predicates.display());
    let _ = writeln!(out, "#objects {}", files.objects.display());
    let v = &dataset.vocab;
    for pair in dataset.pairs() {
        let _ = write!(out, "pair {} {} sub", pair.id, to_file_token(&pair.image));
        push_reals(&mut out, &pair.sub_box.coords());
        out.push_str(" obj");
        push_reals(&mut out, &pair.obj_box.coords());
        let _ = write!(
            out,
            " scat {} ocat {} afeat_s",
            to_file_token(v.subjects.token(pair.sub_category)),
            to_file_token(v.objects.token(pair.obj_category))
        );
        push_reals(&mut out, &pair.sub_appearance);
        out.push_str(" afeat_o");
        push_reals(&mut out, &pair.obj_appearance);
        out.push_str(" labels");
        for &p in &pair.predicates {
            let _ = write!(out, " {}", to_file_token(v.predicates.token(p)));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Reads a whole word table: first line `dim <d>`, then `token v1 .. vd`.
pub fn read_word_table(path: &Path) -> Result<WordTable> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty word table"))?;
    let mut h = header.split_whitespace();
    let dim = match (h.next(), h.next(), h.next()) {
        (Some("dim"), Some(d), None) => d
            .parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::parse(path, 1, format!("bad dimension `{d}`")))?,
        _ => return Err(Error::parse(path, 1, "expected `dim <d>` header")),
    };
    let mut table = WordTable::new(dim);
    for (i, line) in lines {
        let mut it = line.split_whitespace();
        let token = from_file_token(it.next().unwrap());
        let values: Vec<f64> = it
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::parse(path, i + 1, format!("bad value in vector of `{token}`")))?;
        if values.len() != dim {
            return Err(Error::parse(
                path,
                i + 1,
                format!("`{token}` has {} values, expected {dim}", values.len()),
            ));
        }
        table.insert(&token, &values)?;
    }
    Ok(table)
}

/// Reads a word table keeping only the vocabulary tokens (extras are dropped).
pub fn load_word_table(path: &Path, vocab: &Vocabularies) -> Result<WordTable> {
    read_word_table(path)?.restrict(&vocab.all_tokens())
}

pub fn write_word_table(path: &Path, table: &WordTable) -> Result<()> {
    let mut out = format!("dim {}\n", table.dim());
    for (i, t) in table.tokens().iter().enumerate() {
        out.push_str(&to_file_token(t));
        push_reals(&mut out, table.row(i));
        out.push('\n');
    }
    write_text(path, &out)
}

/// One triplet per line: `subject predicate object`.
pub fn load_triplet_list(path: &Path, vocab: &Vocabularies) -> Result<Vec<Triplet>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<String> = line.split_whitespace().map(from_file_token).collect();
        match toks.as_slice() {
            [] => continue,
            [s, p, o] => out.push(
                vocab
                    .triplet(s, p, o)
                    .map_err(|e| Error::parse(path, i + 1, e.to_string()))?,
            ),
            _ => return Err(Error::parse(path, i + 1, "expected `subject predicate object`")),
        }
    }
    Ok(out)
}

pub fn write_triplet_list(path: &Path, triplets: &[Triplet], vocab: &Vocabularies) -> Result<()> {
    let mut out = String::new();
    for &t in triplets {
        let (s, p, o) = vocab.names(t);
        let _ = writeln!(out, "{} {} {}", to_file_token(s), to_file_token(p), to_file_token(o));
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dir: &Path, pairs: &str) -> PathBuf {
        fs::write(dir.join("s.txt"), "person\n").unwrap();
        fs::write(dir.join("p.txt"), "ride\nhold\n").unwrap();
        fs::write(dir.join("o.txt"), "horse\nsports_ball\n").unwrap();
        let path = dir.join("d.txt");
        fs::write(
            &path,
            format!("#appearance_dim 2\n#subjects s.txt\n#predicates p.txt\n#objects o.txt\n{pairs}"),
        )
        .unwrap();
        path
    }

    #[test]
    fn one_positive_pair() {
        let dir = tempfile::tempdir().unwrap();
        let p = setup(
            dir.path(),
            "pair 7 im1 sub 0 0 10 10 obj 5 5 20 20 scat person ocat horse afeat_s 1 2 afeat_o 3 4 labels ride\n",
        );
        let d = load_dataset(&p).unwrap();
        assert_eq!(d.count(Triplet::new(0, 0, 0)), 1);
        assert_eq!(d.pairs()[0].obj_appearance, vec![3.0, 4.0]);
        assert_eq!(d.vocab.objects.token(1), "sports ball");
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            "pair 1 im sub 0 0 1 1 obj 0 0 1 1 scat person ocat horse afeat_s 1 afeat_o 3 4 labels\n",
            "pair 1 im sub 0 0 1 1 obj 0 0 1 1 scat person ocat horse afeat_s 1 2 3 afeat_o 3 4 labels\n",
            "pair 1 im sub 0 0 1 1 obj 0 0 1 1 scat person ocat cow afeat_s 1 2 afeat_o 3 4 labels\n",
            "pair 1 im sub 0 0 1 1 obj 0 0 1 1 scat person ocat horse afeat_s 1 2 afeat_o 3 4 labels eat\n",
            "pair 1 im sub 0 0 0 1 obj 0 0 1 1 scat person ocat horse afeat_s 1 2 afeat_o 3 4 labels\n",
            "garbage\n",
        ];
        for case in cases {
            let p = setup(dir.path(), case);
            match load_dataset(&p) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 5, "{case}"),
                other => panic!("{case}: {other:?}"),
            }
        }
    }

    #[test]
    fn word_table_drops_extras_and_lists_missing() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabularies {
            subjects: Vocabulary::new(["person"]).unwrap(),
            predicates: Vocabulary::new(["ride"]).unwrap(),
            objects: Vocabulary::new(["horse", "sports ball"]).unwrap(),
        };
        let wt = dir.path().join("w.txt");
        fs::write(
            &wt,
            "dim 2\nperson 1 0\nride 0 1\nhorse 0.5 0.5\nsports_ball -1 2\nzebra 9 9\n",
        )
        .unwrap();
        let t = load_word_table(&wt, &vocab).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.get("sports ball"), Some(&[-1.0, 2.0][..]));
        assert!(t.get("zebra").is_none());

        fs::write(&wt, "dim 2\nperson 1 0\n").unwrap();
        match load_word_table(&wt, &vocab) {
            Err(Error::MissingTokens(m)) => assert_eq!(m, vec!["ride", "horse", "sports ball"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn multiword_tokens_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = WordTable::new(3);
        t.insert("sports ball", &[0.25, -1.5, 3.0]).unwrap();
        t.insert("hair drier", &[1.0, 2.0, 1e-17]).unwrap();
        let p = dir.path().join("w.txt");
        write_word_table(&p, &t).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("sports_ball"));
        assert_eq!(read_word_table(&p).unwrap(), t);
    }
}
