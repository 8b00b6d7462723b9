//! Threshold-free detection metrics.
//!
//! In-distribution is the positive class throughout. Tied scores are grouped:
//! an ROC or PR curve only has a vertex after a whole tie group, which is what
//! makes the trapezoidal ROC area coincide with the midrank AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    In,
    Out,
}

impl Label {
    pub fn is_in(self) -> bool {
        matches!(self, Label::In)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label) -> Self {
        Self { score, label }
    }
}

/// Convenience: label a list of in-distribution and out-of-distribution scores.
pub fn labelled(in_scores: &[f64], out_scores: &[f64]) -> Vec<ScoredSample> {
    in_scores
        .iter()
        .map(|&s| ScoredSample::new(s, Label::In))
        .chain(out_scores.iter().map(|&s| ScoredSample::new(s, Label::Out)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub auroc: f64,
    pub aupr_in: f64,
    pub ap: f64,
    pub fpr_at_tpr95: f64,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// (false positive rate, true positive rate), from (0,0) to (1,1).
    pub roc: Vec<(f64, f64)>,
    /// (recall, precision), starting at (0,1).
    pub pr: Vec<(f64, f64)>,
}

fn counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let mut n_in = 0;
    let mut n_out = 0;
    for s in samples {
        if !s.score.is_finite() {
            return Err(Error::precondition(format!("non-finite score {}", s.score)));
        }
        match s.label {
            Label::In => n_in += 1,
            Label::Out => n_out += 1,
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::precondition(format!(
            "metrics need both classes (n_in = {n_in}, n_out = {n_out})"
        )));
    }
    Ok((n_in, n_out))
}

/// Cumulative (tp, fp) after each tie group, scanning from the highest score down.
fn tie_groups(samples: &[ScoredSample]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].label.is_in() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Probability that a random in-distribution sample outranks a random
/// out-of-distribution one, ties counted one half. Computed from midranks.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (n_in, n_out) = counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum_in = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        let ins = sorted[i..j].iter().filter(|s| s.label.is_in()).count();
        rank_sum_in += midrank * ins as f64;
        i = j;
    }
    let u = rank_sum_in - (n_in * (n_in + 1)) as f64 / 2.0;
    Ok(u / (n_in as f64 * n_out as f64))
}

/// False positive rate at the first operating point (scanning thresholds from
/// high to low) whose true positive rate reaches `tpr_target`.
pub fn fpr_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<f64> {
    let (n_in, n_out) = counts(samples)?;
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::precondition(format!("tpr target {tpr_target} outside [0,1]")));
    }
    for (tp, fp) in tie_groups(samples) {
        if tp as f64 / n_in as f64 >= tpr_target {
            return Ok(fp as f64 / n_out as f64);
        }
    }
    Ok(1.0)
}

/// (AUPR with in-distribution positive by trapezoid, average precision by the
/// step-interpolated sum).
pub fn pr_metrics(samples: &[ScoredSample]) -> Result<(f64, f64)> {
    let (n_in, _) = counts(samples)?;
    let mut aupr = 0.0;
    let mut ap = 0.0;
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    for (tp, fp) in tie_groups(samples) {
        let r = tp as f64 / n_in as f64;
        let p = tp as f64 / (tp + fp) as f64;
        aupr += (r - prev_r) * (p + prev_p) / 2.0;
        ap += (r - prev_r) * p;
        prev_r = r;
        prev_p = p;
    }
    Ok((aupr, ap))
}

pub fn curves(samples: &[ScoredSample]) -> Result<Curves> {
    let (n_in, n_out) = counts(samples)?;
    let groups = tie_groups(samples);
    let mut roc = Vec::with_capacity(groups.len() + 1);
    roc.push((0.0, 0.0));
    let mut pr = Vec::with_capacity(groups.len() + 1);
    pr.push((0.0, 1.0));
    for &(tp, fp) in &groups {
        roc.push((fp as f64 / n_out as f64, tp as f64 / n_in as f64));
        pr.push((tp as f64 / n_in as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(Curves { roc, pr })
}

/// Trapezoidal area under a polyline given as (x, y) points.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn evaluate(samples: &[ScoredSample]) -> Result<MetricResult> {
    let (n_in, n_out) = counts(samples)?;
    let (aupr_in, ap) = pr_metrics(samples)?;
    Ok(MetricResult {
        auroc: auroc(samples)?,
        aupr_in,
        ap,
        fpr_at_tpr95: fpr_at_tpr(samples, 0.95)?,
        n_in,
        n_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auroc(s: &[ScoredSample]) -> f64 {
        let ins: Vec<f64> = s.iter().filter(|x| x.label.is_in()).map(|x| x.score).collect();
        let outs: Vec<f64> = s.iter().filter(|x| !x.label.is_in()).map(|x| x.score).collect();
        let mut acc = 0.0;
        for a in &ins {
            for b in &outs {
                acc += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (ins.len() * outs.len()) as f64
    }

    fn brute_fpr_at_tpr(s: &[ScoredSample], target: f64) -> f64 {
        let n_in = s.iter().filter(|x| x.label.is_in()).count() as f64;
        let n_out = s.len() as f64 - n_in;
        let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        for t in thresholds {
            let tp = s.iter().filter(|x| x.label.is_in() && x.score >= t).count() as f64;
            if tp / n_in >= target {
                let fp = s.iter().filter(|x| !x.label.is_in() && x.score >= t).count() as f64;
                return fp / n_out;
            }
        }
        1.0
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&labelled(&[2.0, 3.0], &[1.0])).unwrap(), 1.0);
        assert_eq!(auroc(&labelled(&[1.0], &[1.0])).unwrap(), 0.5);
        assert_eq!(auroc(&labelled(&[1.0, 3.0], &[2.0])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(auroc(&labelled(&[1.0, 2.0], &[])).is_err());
        assert!(pr_metrics(&labelled(&[], &[1.0])).is_err());
        assert!(auroc(&labelled(&[f64::NAN], &[1.0])).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&labelled(&[5.0, 6.0], &[1.0, 2.0]), 0.95).unwrap(), 0.0);

        let ins: Vec<f64> = (1..=100).map(f64::from).collect();
        let outs: Vec<f64> = ins.iter().map(|v| v - 0.5).collect();
        let s = labelled(&ins, &outs);
        let got = fpr_at_tpr(&s, 0.95).unwrap();
        assert!((got - brute_fpr_at_tpr(&s, 0.95)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins: Vec<f64> = (0..20000).map(|_| rng.random::<f64>()).collect();
        let outs: Vec<f64> = (0..20000).map(|_| rng.random::<f64>()).collect();
        let got = fpr_at_tpr(&labelled(&ins, &outs), 0.95).unwrap();
        assert!((got - 0.95).abs() < 0.01, "{got}");
    }

    #[test]
    fn pr_examples() {
        let (aupr, ap) = pr_metrics(&labelled(&[3.0, 4.0], &[1.0, 2.0])).unwrap();
        assert_eq!(aupr, 1.0);
        assert_eq!(ap, 1.0);

        let (_, ap) = pr_metrics(&labelled(&[1.0; 3], &[1.0; 7])).unwrap();
        assert_eq!(ap, 0.3);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ins: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let outs: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let (aupr, _) = pr_metrics(&labelled(&ins, &outs)).unwrap();
        assert!((aupr - 0.5).abs() < 0.05, "{aupr}");
    }

    #[test]
    fn curve_examples() {
        let c = curves(&labelled(&[2.0], &[1.0])).unwrap();
        assert_eq!(c.roc, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);

        let s = labelled(&[0.3, 0.9, 0.5, 0.5], &[0.1, 0.5, 0.7]);
        let c = curves(&s).unwrap();
        assert_eq!(*c.roc.first().unwrap(), (0.0, 0.0));
        assert_eq!(*c.roc.last().unwrap(), (1.0, 1.0));
        assert!((trapezoid(&c.roc) - auroc(&s).unwrap()).abs() < 1e-9);

        let neg: Vec<ScoredSample> =
            s.iter().map(|x| ScoredSample::new(-x.score, x.label)).collect();
        let a = auroc(&s).unwrap();
        assert!((auroc(&neg).unwrap() - (1.0 - a)).abs() < 1e-12);
        let cn = curves(&neg).unwrap();
        for (p, q) in c.roc.iter().zip(cn.roc.iter().rev()) {
            assert!((p.0 - (1.0 - q.0)).abs() < 1e-12 && (p.1 - (1.0 - q.1)).abs() < 1e-12);
        }
    }

    fn tied_instance() -> impl Strategy<Value = Vec<ScoredSample>> {
        (1usize..30, 1usize..30).prop_flat_map(|(a, b)| {
            (
                proptest::collection::vec(0i32..8, a),
                proptest::collection::vec(0i32..8, b),
            )
                .prop_map(|(i, o)| {
                    let i: Vec<f64> = i.into_iter().map(f64::from).collect();
                    let o: Vec<f64> = o.into_iter().map(f64::from).collect();
                    labelled(&i, &o)
                })
        })
    }

    proptest! {
        #[test]
        fn rank_matches_pairwise_and_trapezoid(s in tied_instance()) {
            let a = auroc(&s).unwrap();
            prop_assert!((a - brute_auroc(&s)).abs() < 1e-12);
            prop_assert!((a - trapezoid(&curves(&s).unwrap().roc)).abs() < 1e-9);
            prop_assert!((fpr_at_tpr(&s, 0.95).unwrap() - brute_fpr_at_tpr(&s, 0.95)).abs() < 1e-12);
        }

        #[test]
        fn monotone_transforms_preserve_auroc(s in tied_instance()) {
            let a = auroc(&s).unwrap();
            for f in [|x: f64| x.exp(), |x: f64| 3.0 * x - 7.0, |x: f64| x * x * x] {
                let t: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(f(x.score), x.label)).collect();
                prop_assert_eq!(auroc(&t).unwrap(), a);
            }
        }

        #[test]
        fn negation_with_swapped_labels(s in tied_instance()) {
            let swapped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(
                -x.score,
                if x.label.is_in() { Label::Out } else { Label::In },
            )).collect();
            prop_assert!((auroc(&swapped).unwrap() - auroc(&s).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metrics_in_unit_interval(s in tied_instance()) {
            let m = evaluate(&s).unwrap();
            for v in [m.auroc, m.aupr_in, m.ap, m.fpr_at_tpr95] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
