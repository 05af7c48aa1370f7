//! CSV ingestion through preprocessing, and the synthetic generator's
//! ground truth.

use std::io::Write;

use bayesfair::data::{
    class_counts, load_csv, preprocess, split_and_preprocess, synthesize, DatasetSchema,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const SCHEMA: &str = r#"{"columns":[
  {"name":"age","kind":"continuous","role":"feature"},
  {"name":"job","kind":"categorical","role":"feature"},
  {"name":"sex","kind":"binary","role":"sensitive","positive":"F"},
  {"name":"income","kind":"binary","role":"label","positive":">50K"}
]}"#;

fn write_csv(rows: &[String]) -> (tempfile::TempDir, std::path::PathBuf, DatasetSchema) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "age,job,sex,income").unwrap();
    for r in rows {
        writeln!(f, "{r}").unwrap();
    }
    let schema: DatasetSchema = serde_json::from_str(SCHEMA).unwrap();
    (dir, path, schema)
}

#[test]
fn end_to_end_encoding() {
    let rows: Vec<String> = (0..40)
        .map(|i| {
            let job = ["a", "b", "c"][i % 3];
            let sex = if i % 2 == 0 { "F" } else { "M" };
            let inc = if i % 4 < 2 { ">50K" } else { "<=50K" };
            format!("{},{job},{sex},{inc}", 20 + i)
        })
        .chain(std::iter::once("33,,F,>50K".to_string()))
        .collect();
    let (_dir, path, schema) = write_csv(&rows);
    let raw = load_csv(&path, &schema).unwrap();
    assert_eq!(raw.dropped, 1);
    let d = preprocess(&raw).unwrap();
    assert_eq!(d.n_features, 5);
    assert_eq!(d.feature_names, ["age", "job=a", "job=b", "job=c", "sex"]);
    assert_eq!(d.sensitive_index, 4);
    assert!(d.x.iter().all(|v| (0.0..=1.0).contains(v)));
    for r in d.rows() {
        assert_eq!(r[1] + r[2] + r[3], 1.0);
    }
    assert_eq!(d.row(0)[0], 0.0);
    assert_eq!(d.row(39)[0], 1.0);
    assert_eq!(d.column(4)[0], 1.0);
    assert_eq!(d.y[0], 1.0);

    let (_, train, test) = split_and_preprocess(&raw, 0.75, 3).unwrap();
    assert_eq!(train.len() + test.len(), 40);
    let (ct, ce) = (class_counts(&train), class_counts(&test));
    assert_eq!(ct[&1], 15);
    assert_eq!(ce[&1], 5);
    let (_, again, _) = split_and_preprocess(&raw, 0.75, 3).unwrap();
    assert_eq!(train, again);
}

proptest! {
    #[test]
    fn continuous_inverse_recovers_raw(values in prop::collection::vec(-1e4f64..1e4, 3..30)) {
        let rows: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{v},a,{},{}", if i % 2 == 0 { "F" } else { "M" }, if i % 3 == 0 { ">50K" } else { "<=50K" }))
            .collect();
        let (_dir, path, schema) = write_csv(&rows);
        let raw = load_csv(&path, &schema).unwrap();
        let pre = bayesfair::data::Preprocessor::fit(&raw).unwrap();
        let d = pre.transform(&raw, bayesfair::data::SplitTag::Full).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in values.iter().enumerate() {
            let z = d.row(i)[0];
            prop_assert!((0.0..=1.0).contains(&z));
            if hi > lo {
                let back = pre.inverse_continuous("age", z).unwrap();
                prop_assert!((back - v).abs() <= 1e-9 * (1.0 + v.abs()));
            }
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Logistic regression with intercept by Newton's method.
fn logistic_regression(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (n, d) = x.shape();
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { 1.0 });
    let mut beta = DVector::zeros(d + 1);
    for _ in 0..25 {
        let p = (&xa * &beta).map(|z| 1.0 / (1.0 + (-z).exp()));
        let grad = xa.transpose() * (y - &p);
        let wdiag = p.map(|v| v * (1.0 - v));
        let h = DMatrix::from_fn(d + 1, d + 1, |a, b| {
            (0..n).map(|i| xa[(i, a)] * xa[(i, b)] * wdiag[i]).sum::<f64>()
        });
        beta += h.lu().solve(&grad).unwrap();
    }
    beta
}

#[test]
fn synthetic_ground_truth_is_recoverable() {
    let syn = synthesize(10_000, 3, 0.0, 21).unwrap();
    let d = &syn.dataset;
    let x = DMatrix::from_row_slice(d.len(), d.n_features, &d.x);
    let y = DVector::from_vec(d.y.clone());
    let beta = logistic_regression(&x, &y);
    let fitted = beta.rows(0, d.n_features);
    let truth = DVector::from_vec(syn.separator.clone());
    let cos = fitted.dot(&truth) / (fitted.norm() * truth.norm());
    assert!(cos >= 0.95, "cosine {cos}");
    let r = pearson(&d.column(d.sensitive_index), &d.y);
    assert!(r.abs() < 0.03, "label/sensitive correlation {r}");
}

#[test]
fn bias_couples_label_to_sensitive() {
    let d = synthesize(10_000, 3, 5.0, 21).unwrap().dataset;
    let r = pearson(&d.column(d.sensitive_index), &d.y);
    assert!(r > 0.2, "correlation {r}");
}
