//! Inputs of the embedding branches: the visual vector `x_i` built from
//! appearance and box geometry, and the slot-masked word input `q_t`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::datamodel::{BoundingBox, CandidatePair, Triplet, Vocabularies, WordRows, WordTable};
use crate::error::{Error, Result};
use crate::numkit::{Mlp, MlpCache};

/// Divisor applied to box coordinates after moving the union origin to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpatialNorm {
    /// Every coordinate divided by the union-box area.
    #[default]
    Area,
    /// x coordinates divided by the union width, y by the union height.
    Extent,
}

impl fmt::Display for SpatialNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialNorm::Area => "area",
            SpatialNorm::Extent => "extent",
        })
    }
}

impl FromStr for SpatialNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "area" => Ok(SpatialNorm::Area),
            "extent" => Ok(SpatialNorm::Extent),
            _ => Err(Error::Config(format!("unknown spatial_norm '{s}'"))),
        }
    }
}

/// `[x_min, x_max, y_min, y_max]` of the subject then the object, relative to
/// the union box.
pub fn spatial_features(sub: &BoundingBox, obj: &BoundingBox, norm: SpatialNorm) -> [f64; 8] {
    let u = sub.union(obj);
    let (sx, sy) = match norm {
        SpatialNorm::Area => (u.area(), u.area()),
        SpatialNorm::Extent => (u.width(), u.height()),
    };
    let mut out = [0.0; 8];
    for (k, b) in [sub, obj].into_iter().enumerate() {
        out[4 * k] = (b.x_min - u.x_min) / sx;
        out[4 * k + 1] = (b.x_max - u.x_min) / sx;
        out[4 * k + 2] = (b.y_min - u.y_min) / sy;
        out[4 * k + 3] = (b.y_max - u.y_min) / sy;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualDims {
    pub subject: usize,
    pub object: usize,
    pub spatial_hidden: usize,
    pub spatial: usize,
}

impl Default for VisualDims {
    fn default() -> Self {
        Self {
            subject: 300,
            object: 300,
            spatial_hidden: 400,
            spatial: 400,
        }
    }
}

impl VisualDims {
    pub fn total(&self) -> usize {
        self.subject + self.object + self.spatial
    }
}

/// `MLP_s`, `MLP_o` (one affine layer each) and the two-layer `MLP_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInputParams {
    pub mlp_s: Mlp,
    pub mlp_o: Mlp,
    pub mlp_r: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeature {
    pub x: Vec<f64>,
    pub sub_appearance: Vec<f64>,
    pub obj_appearance: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VisualCache {
    s: MlpCache,
    o: MlpCache,
    r: MlpCache,
}

impl VisualInputParams {
    pub fn new<R: Rng + ?Sized>(appearance_dim: usize, dims: VisualDims, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp_s: Mlp::new(&[appearance_dim, dims.subject], true, 0.0, rng)?,
            mlp_o: Mlp::new(&[appearance_dim, dims.object], true, 0.0, rng)?,
            mlp_r: Mlp::new(&[8, dims.spatial_hidden, dims.spatial], true, 0.0, rng)?,
        })
    }

    pub fn zeros(appearance_dim: usize, dims: VisualDims) -> Result<Self> {
        Ok(Self {
            mlp_s: Mlp::zeros(&[appearance_dim, dims.subject], true, 0.0)?,
            mlp_o: Mlp::zeros(&[appearance_dim, dims.object], true, 0.0)?,
            mlp_r: Mlp::zeros(&[8, dims.spatial_hidden, dims.spatial], true, 0.0)?,
        })
    }

    pub fn appearance_dim(&self) -> usize {
        self.mlp_s.in_dim()
    }

    pub fn dims(&self) -> VisualDims {
        VisualDims {
            subject: self.mlp_s.out_dim(),
            object: self.mlp_o.out_dim(),
            spatial_hidden: self.mlp_r.dims()[1],
            spatial: self.mlp_r.out_dim(),
        }
    }

    /// Dimension of `x_i`.
    pub fn dim(&self) -> usize {
        self.dims().total()
    }

    pub fn forward(&self, pair: &CandidatePair, norm: SpatialNorm) -> Result<(VisualFeature, VisualCache)> {
        let r = spatial_features(&pair.sub_box, &pair.obj_box, norm);
        let (ys, s) = self.mlp_s.forward(&pair.sub_appearance, None)?;
        let (yo, o) = self.mlp_o.forward(&pair.obj_appearance, None)?;
        let (yr, r) = self.mlp_r.forward(&r, None)?;
        let mut x = ys;
        x.extend_from_slice(&yo);
        x.extend_from_slice(&yr);
        Ok((
            VisualFeature {
                x,
                sub_appearance: pair.sub_appearance.clone(),
                obj_appearance: pair.obj_appearance.clone(),
            },
            VisualCache { s, o, r },
        ))
    }

    pub fn visual_input(&self, pair: &CandidatePair, norm: SpatialNorm) -> Result<VisualFeature> {
        self.forward(pair, norm).map(|(f, _)| f)
    }

    /// Accumulates gradients of `x_i` into the three parameter buffers.
    pub fn backward_into(&self, cache: &VisualCache, dx: &[f64], grads: [&mut [f64]; 3]) -> Result<()> {
        if dx.len() != self.dim() {
            return Err(Error::Shape {
                context: "VisualInputParams::backward",
                expected: self.dim(),
                got: dx.len(),
            });
        }
        let [gs, go, gr] = grads;
        let (a, rest) = dx.split_at(self.mlp_s.out_dim());
        let (b, c) = rest.split_at(self.mlp_o.out_dim());
        self.mlp_s.backward_into(&cache.s, a, gs)?;
        self.mlp_o.backward_into(&cache.o, b, go)?;
        self.mlp_r.backward_into(&cache.r, c, gr)?;
        Ok(())
    }
}

/// Which of the three word slots of `q_t` are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LangMask {
    Full,
    S,
    P,
    O,
    Sp,
    Po,
}

impl LangMask {
    pub fn slots(self) -> [bool; 3] {
        match self {
            LangMask::Full => [true, true, true],
            LangMask::S => [true, false, false],
            LangMask::P => [false, true, false],
            LangMask::O => [false, false, true],
            LangMask::Sp => [true, true, false],
            LangMask::Po => [false, true, true],
        }
    }

    /// Sets the masked-out indices of `t` to zero, so triplets that share
    /// every visible slot map to the same key.
    pub fn key(self, t: Triplet) -> Triplet {
        let [s, p, o] = self.slots();
        Triplet::new(
            if s { t.s } else { 0 },
            if p { t.p } else { 0 },
            if o { t.o } else { 0 },
        )
    }
}

/// `q_t = [e_s; e_p; e_o]` with zeros in masked slots.
pub fn language_input(t: Triplet, vocab: &Vocabularies, table: &WordTable, mask: LangMask) -> Result<Vec<f64>> {
    let (s, p, o) = vocab.names(t);
    let dw = table.dim();
    let mut q = vec![0.0; 3 * dw];
    for (k, (tok, on)) in [s, p, o].into_iter().zip(mask.slots()).enumerate() {
        if on {
            let v = table.get(tok).ok_or_else(|| Error::UnknownToken(tok.to_string()))?;
            q[k * dw..(k + 1) * dw].copy_from_slice(v);
        }
    }
    Ok(q)
}

/// Word-table rows used by the slots of `t` that `mask` keeps.
pub(crate) fn slot_rows(t: Triplet, rows: &WordRows, mask: LangMask) -> [Option<usize>; 3] {
    let [s, p, o] = mask.slots();
    [
        s.then(|| rows.subjects[t.s]),
        p.then(|| rows.predicates[t.p]),
        o.then(|| rows.objects[t.o]),
    ]
}

/// Same as [`language_input`] with pre-resolved rows.
pub(crate) fn language_input_rows(t: Triplet, rows: &WordRows, table: &WordTable, mask: LangMask) -> Vec<f64> {
    let dw = table.dim();
    let mut q = vec![0.0; 3 * dw];
    for (k, r) in slot_rows(t, rows, mask).into_iter().enumerate() {
        if let Some(r) = r {
            q[k * dw..(k + 1) * dw].copy_from_slice(table.row(r));
        }
    }
    q
}

/// Adds the slot gradients of `dq` to the word-table gradient buffer.
pub(crate) fn scatter_language_grad(t: Triplet, rows: &WordRows, dw: usize, mask: LangMask, dq: &[f64], grad: &mut [f64]) {
    for (k, r) in slot_rows(t, rows, mask).into_iter().enumerate() {
        if let Some(r) = r {
            for (g, d) in grad[r * dw..(r + 1) * dw].iter_mut().zip(&dq[k * dw..(k + 1) * dw]) {
                *g += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Vocabulary;
    use crate::numkit::{rng_from, Matrix};

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn unit_union_box() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(spatial_features(&b, &b, SpatialNorm::Area), [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn side_by_side_boxes() {
        let f = spatial_features(&bx(0.0, 0.0, 10.0, 10.0), &bx(10.0, 0.0, 20.0, 10.0), SpatialNorm::Area);
        let want = [0.0, 0.05, 0.0, 0.05, 0.05, 0.1, 0.0, 0.05];
        for (a, b) in f.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let e = spatial_features(&bx(0.0, 0.0, 10.0, 10.0), &bx(10.0, 0.0, 20.0, 10.0), SpatialNorm::Extent);
        assert_eq!(e, [0.0, 0.5, 0.0, 1.0, 0.5, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn translation_leaves_features_unchanged() {
        let (s, o) = (bx(1.0, 2.0, 5.0, 9.0), bx(3.0, 1.0, 8.0, 4.0));
        let a = spatial_features(&s, &o, SpatialNorm::Area);
        let b = spatial_features(&s.translate(7.0, 3.0), &o.translate(7.0, 3.0), SpatialNorm::Area);
        assert_eq!(a, b);
    }

    fn pair(sub_app: Vec<f64>, obj_app: Vec<f64>, sub: BoundingBox, obj: BoundingBox) -> CandidatePair {
        CandidatePair {
            id: 0,
            image: "im".into(),
            sub_box: sub,
            obj_box: obj,
            sub_category: 0,
            obj_category: 0,
            sub_appearance: sub_app,
            obj_appearance: obj_app,
            predicates: vec![],
        }
    }

    #[test]
    fn identity_maps_and_zero_spatial() {
        let dims = VisualDims {
            subject: 3,
            object: 3,
            spatial_hidden: 4,
            spatial: 2,
        };
        let mut p = VisualInputParams::zeros(3, dims).unwrap();
        p.mlp_s.set_weight(0, &Matrix::identity(3)).unwrap();
        p.mlp_o.set_weight(0, &Matrix::identity(3)).unwrap();
        let pr = pair(vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -1.0], bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 3.0, 4.0));
        let f = p.visual_input(&pr, SpatialNorm::Area).unwrap();
        assert_eq!(f.x, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(f.sub_appearance, pr.sub_appearance);
    }

    #[test]
    fn seeded_forward_matches_straight_line() {
        let dims = VisualDims {
            subject: 2,
            object: 3,
            spatial_hidden: 4,
            spatial: 2,
        };
        let p = VisualInputParams::new(2, dims, &mut rng_from(5, "t")).unwrap();
        let pr = pair(vec![0.3, -0.7], vec![1.1, 0.2], bx(0.0, 0.0, 4.0, 2.0), bx(1.0, 1.0, 5.0, 6.0));
        let affine = |m: &Mlp, l: usize, x: &[f64]| -> Vec<f64> {
            let w = m.weight(l);
            let b = m.bias(l).unwrap();
            (0..w.rows())
                .map(|r| {
                    b[r] + x.iter().enumerate().map(|(c, v)| w.get(r, c) * v).sum::<f64>()
                })
                .collect()
        };
        let r = spatial_features(&pr.sub_box, &pr.obj_box, SpatialNorm::Area);
        let h: Vec<f64> = affine(&p.mlp_r, 0, &r).into_iter().map(|v| v.max(0.0)).collect();
        let mut want = affine(&p.mlp_s, 0, &pr.sub_appearance);
        want.extend(affine(&p.mlp_o, 0, &pr.obj_appearance));
        want.extend(affine(&p.mlp_r, 1, &h));
        let got = p.visual_input(&pr, SpatialNorm::Area).unwrap().x;
        assert_eq!(got.len(), 7);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn geometry_only_touches_spatial_slots() {
        let dims = VisualDims {
            subject: 4,
            object: 4,
            spatial_hidden: 6,
            spatial: 5,
        };
        let p = VisualInputParams::new(3, dims, &mut rng_from(1, "t")).unwrap();
        let a = pair(vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0], bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 3.0, 4.0));
        let mut b = a.clone();
        b.obj_box = bx(5.0, 0.0, 9.0, 1.0);
        let (fa, fb) = (p.visual_input(&a, SpatialNorm::Area).unwrap(), p.visual_input(&b, SpatialNorm::Area).unwrap());
        assert_eq!(fa.x[..8], fb.x[..8]);
        assert_ne!(fa.x[8..], fb.x[8..]);
    }

    #[test]
    fn appearance_dim_mismatch_is_shape_error() {
        let p = VisualInputParams::zeros(3, VisualDims::default()).unwrap();
        let pr = pair(vec![1.0; 4], vec![1.0; 3], bx(0.0, 0.0, 1.0, 1.0), bx(0.0, 0.0, 1.0, 1.0));
        assert!(matches!(p.visual_input(&pr, SpatialNorm::Area), Err(Error::Shape { .. })));
    }

    fn toy_words() -> (Vocabularies, WordTable) {
        let vocab = Vocabularies {
            subjects: Vocabulary::new(["person"]).unwrap(),
            predicates: Vocabulary::new(["ride", "pet"]).unwrap(),
            objects: Vocabulary::new(["horse", "person"]).unwrap(),
        };
        let mut t = WordTable::new(2);
        t.insert("person", &[1.0, 2.0]).unwrap();
        t.insert("ride", &[3.0, 4.0]).unwrap();
        t.insert("pet", &[5.0, 6.0]).unwrap();
        t.insert("horse", &[7.0, 8.0]).unwrap();
        (vocab, t)
    }

    #[test]
    fn language_masks() {
        let (vocab, table) = toy_words();
        let t = Triplet::new(0, 0, 0);
        let full = language_input(t, &vocab, &table, LangMask::Full).unwrap();
        assert_eq!(full, vec![1.0, 2.0, 3.0, 4.0, 7.0, 8.0]);
        let o = language_input(t, &vocab, &table, LangMask::O).unwrap();
        assert_eq!(o, vec![0.0, 0.0, 0.0, 0.0, 7.0, 8.0]);
        let sp = language_input(t, &vocab, &table, LangMask::Sp).unwrap();
        assert_eq!(sp, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let rows = WordRows::resolve(&table, &vocab).unwrap();
        for mask in [LangMask::Full, LangMask::S, LangMask::P, LangMask::O, LangMask::Sp, LangMask::Po] {
            let t = Triplet::new(0, 1, 1);
            assert_eq!(
                language_input_rows(t, &rows, &table, mask),
                language_input(t, &vocab, &table, mask).unwrap()
            );
        }
    }

    #[test]
    fn masked_keys_collapse_hidden_slots() {
        assert_eq!(LangMask::P.key(Triplet::new(3, 2, 5)), Triplet::new(0, 2, 0));
        assert_eq!(LangMask::Po.key(Triplet::new(3, 2, 5)), Triplet::new(0, 2, 5));
        assert_eq!(LangMask::Full.key(Triplet::new(3, 2, 5)), Triplet::new(3, 2, 5));
    }

    #[test]
    fn unknown_token_is_reported() {
        let (vocab, mut table) = toy_words();
        table = table.restrict(&["person", "ride"]).unwrap();
        let err = language_input(Triplet::new(0, 0, 0), &vocab, &table, LangMask::Full).unwrap_err();
        assert!(matches!(err, Error::UnknownToken(t) if t == "horse"));
    }
}
