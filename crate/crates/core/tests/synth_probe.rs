use nalgebra::DMatrix;
use relemb::datamodel::{synth_generate, Dataset, SynthConfig};

fn design(ds: &Dataset) -> DMatrix<f64> {
    let d = ds.appearance_dim;
    DMatrix::from_fn(ds.len(), d + 1, |i, j| if j == d { 1.0 } else { ds.pairs()[i].obj_appearance[j] })
}

/// A least-squares linear read-out of object identity from object appearance.
fn probe_accuracy(seed: u64) -> f64 {
    let cfg = SynthConfig::default();
    let data = synth_generate(&cfg, seed).unwrap();
    let n_obj = data.train.vocab.objects.len();
    let x = design(&data.train);
    let y = DMatrix::from_fn(data.train.len(), n_obj, |i, k| f64::from(data.train.pairs()[i].obj_category == k));
    let w = x.clone().svd(true, true).solve(&y, 1e-10).unwrap();
    let pred = design(&data.test) * w;
    let hits = (0..data.test.len())
        .filter(|&i| pred.row(i).transpose().argmax().0 == data.test.pairs()[i].obj_category)
        .count();
    hits as f64 / data.test.len() as f64
}

#[test]
fn object_identity_is_linearly_recoverable() {
    for seed in 0..3 {
        let acc = probe_accuracy(seed);
        assert!(acc >= 0.95, "seed {seed}: accuracy {acc}");
    }
}
