use rand::Rng;

use crate::data::{ColumnEncoder, Dataset, SplitTag};
use crate::rng;

/// Two well-separated Gaussian blobs in `[0,1]²`, label = blob.
pub(crate) fn blobs(n: usize, seed: u64) -> Dataset {
    let mut r = rng::rng_from_seed(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let c = if label == 1 { 0.75 } else { 0.25 };
        for _ in 0..2 {
            let v: f64 = c + 0.08 * (r.random::<f64>() - 0.5) * 2.0;
            x.push(v.clamp(0.0, 1.0));
        }
        y.push(label as f64);
    }
    Dataset {
        x,
        y,
        n_features: 2,
        feature_names: vec!["a".into(), "s".into()],
        sensitive_index: 1,
        encoders: vec![
            ColumnEncoder::Continuous { name: "a".into(), min: 0.0, max: 1.0 },
            ColumnEncoder::Continuous { name: "s".into(), min: 0.0, max: 1.0 },
        ],
        split: SplitTag::Full,
        unseen_categories: 0,
    }
}
