//! Confusion-matrix F1 oracle.

use std::collections::BTreeMap;

use drive_align::decision::f1_report;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-class F1 from the full confusion matrix `m[pred][truth]`.
fn confusion_oracle(pairs: &[(u8, u8)], classes: usize) -> (BTreeMap<u8, f64>, Option<f64>) {
    let mut m = vec![vec![0usize; classes]; classes];
    for &(p, t) in pairs {
        m[p as usize][t as usize] += 1;
    }
    let mut per = BTreeMap::new();
    for c in 0..classes {
        let tp = m[c][c];
        let predicted: usize = m[c].iter().sum();
        let actual: usize = (0..classes).map(|r| m[r][c]).sum();
        if predicted == 0 && actual == 0 {
            continue;
        }
        let (fp, fn_) = (predicted - tp, actual - tp);
        per.insert(c as u8, (2 * tp) as f64 / (2 * tp + fp + fn_) as f64);
    }
    let avg = (!per.is_empty()).then(|| per.values().sum::<f64>() / per.len() as f64);
    (per, avg)
}

pub fn f1_report_equals_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1);
    for case in 0..100 {
        let n = rng.gen_range(0..=1000);
        let used = rng.gen_range(1..=7u8);
        let skew: f64 = rng.gen_range(0.0..1.0);
        let pairs: Vec<(u8, u8)> = (0..n)
            .map(|_| {
                let t = rng.gen_range(0..used);
                let p = if rng.gen_bool(skew) { t } else { rng.gen_range(0..used) };
                (p, t)
            })
            .collect();
        let report = f1_report(&pairs);
        let (per, avg) = confusion_oracle(&pairs, 7);
        assert_eq!(report.per_class, per, "case {case}");
        assert_eq!(report.macro_avg, avg, "case {case}");
    }
}
