//! Acceptance criteria, one pass/fail line each.
//!
//! The desk-scale criteria (4 to 10) share one matrix run whose models,
//! scores and cells are cached under `$FTOOD_ACCEPTANCE_DIR` (default: the
//! cargo target tmpdir), so only the first run pays for training and
//! fine-tuning. `FTOOD_ACCEPTANCE_ONLY=1,2,3` restricts the run to a subset.
//!
//! The process fails when a correctness criterion (1, 2, 3, 10) fails. The
//! empirical criteria (4 to 9) print their verdicts; with
//! `FTOOD_ACCEPTANCE_STRICT` set, their failures are fatal as well.

use std::path::PathBuf;
use std::process::ExitCode;

use candle_core::{Device, Tensor};
use finetune_ood::datasets::{make_synthetic, AugmentPolicy, DatasetResolver, ImageShape, Split, SyntheticKind, DATA_ROOT_ENV};
use finetune_ood::genmodels::{Architecture, Family, GenerativeModel, VectorFlow};
use finetune_ood::harness::audit::audit_run;
use finetune_ood::harness::{read_details, ExperimentSpec, Indicator, MatrixReport, PairInfo, PairSpec, RunRecord, Runner};
use finetune_ood::metrics::{auroc, curves, labelled, trapezoid};
use finetune_ood::nn::{vec_f64, Precision};
use finetune_ood::theorylab::{mc_tolerance, validate_default, TheoremStatus};
use finetune_ood::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRAYSCALE: [&str; 4] = ["mnist", "fashion-mnist", "noise28", "constant28"];
/// Criteria that check the implementation rather than an empirical outcome;
/// a failure here always fails the run.
const CORRECTNESS: [u8; 4] = [1, 2, 3, 10];
const ROBUSTNESS_PAIRS: [(&str, &str); 2] = [("fashion-mnist", "mnist"), ("mnist", "fashion-mnist")];

enum Verdict {
    Pass(String),
    Fail(String),
    /// Failed because required data is absent from this machine.
    Blocked(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn cache_dir() -> PathBuf {
    std::env::var_os("FTOOD_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")))
}

fn desk_spec() -> ExperimentSpec {
    ExperimentSpec {
        name: "acceptance".into(),
        datasets: GRAYSCALE.iter().map(|s| s.to_string()).collect(),
        indicators: vec![
            Indicator::Loglik,
            Indicator::NaiveFinetune,
            Indicator::OnlineFinetune,
            Indicator::SubsampleFinetune,
            Indicator::BlockFinetune,
            Indicator::SingleShot,
            Indicator::KlOracle,
        ],
        data_root: Some(data_root()),
        output_dir: cache_dir(),
        ..ExperimentSpec::default()
    }
}

/// The main desk-scale matrix, computed once per process.
struct Desk {
    report: Result<MatrixReport, String>,
}

impl Desk {
    fn ok_records(&self, indicator: Indicator) -> Vec<&RunRecord> {
        match &self.report {
            Ok(r) => r.records.iter().filter(|x| x.indicator == indicator && x.metrics.is_some()).collect(),
            Err(_) => vec![],
        }
    }

    /// Mean over families of the uniform-over-pairs mean AUROC.
    fn mean(&self, indicator: Indicator) -> Option<f64> {
        let r = self.report.as_ref().ok()?;
        if indicator.is_oracle() { r.oracle.row_mean(indicator) } else { r.practical.row_mean(indicator) }
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rank, mut worst_trap, mut invariant) = (0.0f64, 0.0f64, true);
    for _ in 0..1000 {
        let (n_in, n_out) = (rng.random_range(1..40), rng.random_range(1..40));
        let levels = rng.random_range(2..12);
        let a: Vec<f64> = (0..n_in).map(|_| rng.random_range(0..levels) as f64).collect();
        let b: Vec<f64> = (0..n_out).map(|_| rng.random_range(0..levels) as f64).collect();
        let mut wins = 0.0;
        for x in &a {
            for y in &b {
                wins += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
            }
        }
        let brute = wins / (n_in * n_out) as f64;
        let s = labelled(&a, &b);
        let rank = auroc(&s).unwrap();
        worst_rank = worst_rank.max((rank - brute).abs());
        worst_trap = worst_trap.max((trapezoid(&curves(&s).unwrap().roc) - rank).abs());
        let g = |v: &[f64]| v.iter().map(|x| (x / 7.0).exp() * 3.0 - 11.0).collect::<Vec<_>>();
        invariant &= auroc(&labelled(&g(&a), &g(&b))).unwrap() == rank;
    }
    verdict(
        worst_rank <= 1e-12 && worst_trap <= 1e-9 && invariant,
        format!("max |rank - brute force| {worst_rank:.1e}, max |trapezoid - rank| {worst_trap:.1e}, monotone invariance exact: {invariant}"),
    )
}

fn criterion_2() -> Verdict {
    let mut notes = vec![];
    let mut ok = true;

    let mut f = VectorFlow::new(2, 4, 8, Precision::F64, 1).unwrap();
    f.randomize(0.5, 3).unwrap();
    let pts: Vec<[f64; 2]> = (0..50).map(|k| [(k as f64 * 0.37).sin() * 2.5, (k as f64 * 0.91).cos() * 1.5]).collect();
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    let x = Tensor::from_vec(flat.clone(), (pts.len(), 2), &Device::Cpu).unwrap();
    let (z, logdet) = f.forward(&x).unwrap();
    let back = vec_f64(&f.inverse(&z).unwrap()).unwrap();
    let inv = back.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ok &= inv <= 1e-5;
    notes.push(format!("flow inversion {inv:.1e}"));

    let logdet = vec_f64(&logdet).unwrap();
    let fwd = |p: [f64; 2]| vec_f64(&f.forward(&Tensor::new(&[p], &Device::Cpu).unwrap()).unwrap().0).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, p) in pts.iter().enumerate() {
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let (mut a, mut b) = (*p, *p);
            a[j] += h;
            b[j] -= h;
            let (fa, fb) = (fwd(a), fwd(b));
            for i in 0..2 {
                jac[i][j] = (fa[i] - fb[i]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        worst = worst.max((det.abs().ln() - logdet[k]).abs());
    }
    ok &= worst <= 1e-4;
    notes.push(format!("log-det vs finite differences {worst:.1e}"));

    let shape = ImageShape::GRAY28;
    let data = make_synthetic(SyntheticKind::Noise, shape, 16, 5).unwrap().samples();
    let mut ar = GenerativeModel::new(Architecture::default_for(Family::PixelAr, shape), shape, Precision::F32, 2).unwrap();
    for _ in 0..3 {
        ar.grad_step(&data, 1e-2).unwrap();
    }
    let x = data[0].clone();
    let base = ar.subpixel_log_probs(&x).unwrap();
    let mut causal = true;
    for k in [0, 1, 27, 28, 29, 391, 392, 600, 783] {
        let mut y = x.clone();
        y.pixels[k] = y.pixels[k].wrapping_add(101);
        let changed = ar.subpixel_log_probs(&y).unwrap();
        causal &= (0..k).all(|i| base[i].to_bits() == changed[i].to_bits());
    }
    ok &= causal;
    notes.push(format!("autoregressive causality exact: {causal}"));

    let vae = GenerativeModel::new(Architecture::default_for(Family::Vae, shape), shape, Precision::F32, 3).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (iw, elbo) = (mean(&vae.log_density_batch(&data).unwrap()), mean(&vae.elbo_batch(&data).unwrap()));
    ok &= iw >= elbo;
    notes.push(format!("VAE importance-weighted {iw:.2} >= ELBO {elbo:.2}"));

    let dir = tempfile::tempdir().unwrap();
    let mut exact = true;
    for family in Family::ALL {
        let m = GenerativeModel::new(Architecture::default_for(family, shape), shape, Precision::F32, 4).unwrap();
        let path = dir.path().join(format!("{family}.ftood"));
        m.save(&path).unwrap();
        let back = GenerativeModel::load(&path).unwrap();
        let (a, b) = (m.log_density_batch(&data[..4]).unwrap(), back.log_density_batch(&data[..4]).unwrap());
        exact &= back.param_hash().unwrap() == m.param_hash().unwrap() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    ok &= exact;
    notes.push(format!("checkpoint round trip exact: {exact}"));
    verdict(ok, notes.join(", "))
}

fn criterion_3() -> Verdict {
    let n = 100_000;
    let mut notes = vec![];
    let mut ok = true;

    let t2 = validate_default(2, n, 0).unwrap();
    let diff = t2.quantities["auroc_abs_diff"];
    ok &= diff <= 1e-12;
    notes.push(format!("T2 |diff| {diff:.1e}"));

    let t1 = validate_default(1, n, 0).unwrap();
    let want = Normal::new(0.0, 1.0).unwrap().cdf(4.0 / 2f64.sqrt());
    let got = t1.quantities["auroc_ab"];
    ok &= (got - want).abs() <= 0.005;
    notes.push(format!("T1 AUROC {got:.5} vs Phi(4/sqrt2) {want:.5}"));

    let t3 = validate_default(3, n, 0).unwrap();
    let (ll, kl) = (t3.quantities["auroc_loglik"], t3.quantities["auroc_kl"]);
    let t3_ok = t3.status == TheoremStatus::Pass && kl >= ll - mc_tolerance(ll.max(kl), n).max(mc_tolerance(0.5, n) / 10.0);
    ok &= t3_ok;
    notes.push(format!("T3 KL {kl:.5} vs loglik {ll:.5}"));

    let t4 = validate_default(4, n, 0).unwrap();
    let kl = t4.quantities["auroc_kl"];
    let worst = t4
        .quantities
        .iter()
        .filter(|(k, _)| k.starts_with("auroc_g"))
        .map(|(_, &a)| a - kl - mc_tolerance(a.max(kl).min(1.0), n))
        .fold(f64::NEG_INFINITY, f64::max);
    ok &= t4.pass && worst <= 0.0;
    notes.push(format!("T4 max candidate excess over KL + 3se {worst:.2e}"));

    let mut applicable = 0;
    let mut t5_ok = true;
    for seed in 0..5 {
        let r = validate_default(5, n, seed).unwrap();
        if r.status != TheoremStatus::PremiseUnmet {
            applicable += 1;
            t5_ok &= (r.quantities["auroc_fit_ratio"] - r.quantities["auroc_kl"]).abs() <= 0.02;
        }
    }
    ok &= t5_ok && applicable > 0;
    notes.push(format!("T5 within 0.02 on {applicable}/5 seeds with the premise met: {t5_ok}"));
    verdict(ok, notes.join(", "))
}

fn criterion_4(desk: &Desk) -> Verdict {
    let below: Vec<String> = desk
        .ok_records(Indicator::Loglik)
        .into_iter()
        .filter(|r| r.in_dataset == "fashion-mnist" && r.out_dataset == "mnist")
        .map(|r| format!("{} {:.3}", r.model_family, r.metrics.unwrap().auroc))
        .collect();
    let n_below = desk
        .ok_records(Indicator::Loglik)
        .into_iter()
        .filter(|r| r.in_dataset == "fashion-mnist" && r.out_dataset == "mnist" && r.metrics.unwrap().auroc < 0.35)
        .count();
    let gray_ok = n_below >= 2;
    let color = DatasetResolver { root: data_root(), ..DatasetResolver::new(data_root()) }.resolve("cifar10", Split::Test);
    let detail = format!("fashion-mnist->mnist loglik AUROC [{}]: {n_below}/3 below 0.35", below.join(", "));
    match color {
        Err(Error::MissingData { path }) => Verdict::Blocked(format!("{detail}; cifar10->svhn not run, no data at {}", path.display())),
        Err(e) => Verdict::Fail(format!("{detail}; cifar10->svhn: {e}")),
        Ok(_) => {
            let spec = ExperimentSpec {
                name: "acceptance-color".into(),
                datasets: vec![],
                pairs: vec![PairSpec::new("cifar10", "svhn")],
                indicators: vec![Indicator::Loglik],
                ..desk_spec()
            };
            match Runner::new(spec).and_then(|r| r.run_matrix()) {
                Ok(rep) => {
                    let aucs: Vec<f64> = rep.records.iter().filter_map(|r| r.metrics.map(|m| m.auroc)).collect();
                    let n = aucs.iter().filter(|&&a| a < 0.35).count();
                    verdict(gray_ok && n >= 2, format!("{detail}; cifar10->svhn {aucs:.3?}: {n}/3 below 0.35"))
                }
                Err(e) => Verdict::Fail(format!("{detail}; cifar10->svhn failed: {e}")),
            }
        }
    }
}

fn criterion_5(desk: &Desk) -> Verdict {
    let m = desk.mean(Indicator::KlOracle);
    verdict(m.is_some_and(|m| m >= 0.97), format!("mean KL-oracle AUROC {} over {} cells", fmt(m), desk.ok_records(Indicator::KlOracle).len()))
}

fn criterion_6(desk: &Desk) -> Verdict {
    let (kl, naive, sf, ll) = (
        desk.mean(Indicator::KlOracle),
        desk.mean(Indicator::NaiveFinetune),
        desk.mean(Indicator::SingleShot),
        desk.mean(Indicator::Loglik),
    );
    let ok = match (kl, naive, sf, ll) {
        (Some(kl), Some(naive), Some(sf), Some(ll)) => kl >= naive && naive >= sf - 0.02 && sf - ll >= 0.10,
        _ => false,
    };
    verdict(ok, format!("KL {} >= naive {} >= single-shot {} - 0.02; single-shot - loglik = {}", fmt(kl), fmt(naive), fmt(sf), fmt(sf.zip(ll).map(|(a, b)| a - b))))
}

fn criterion_7(desk: &Desk) -> Verdict {
    let Some(naive) = desk.mean(Indicator::NaiveFinetune) else {
        return Verdict::Fail("no naive fine-tune results".into());
    };
    let mut ok = true;
    let mut notes = vec![format!("naive {naive:.4}")];
    for i in [Indicator::OnlineFinetune, Indicator::SubsampleFinetune, Indicator::BlockFinetune] {
        let m = desk.mean(i);
        ok &= m.is_some_and(|m| (m - naive).abs() <= 0.08 && m - naive <= 0.02);
        notes.push(format!("{i} {}", fmt(m)));
    }
    verdict(ok, notes.join(", "))
}

fn robustness_spec(name: &str, pairs: &[PairInfo]) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        datasets: vec![],
        pairs: pairs.iter().map(|p| PairSpec::new(&p.in_name, &p.out_name)).collect(),
        families: vec![Family::Vae],
        indicators: vec![Indicator::SingleShot],
        ..desk_spec()
    }
}

fn criterion_8(desk: &Desk) -> (Verdict, Vec<PathBuf>) {
    let Ok(report) = &desk.report else {
        return (Verdict::Fail("desk matrix unavailable".into()), vec![]);
    };
    let pairs: Vec<PairInfo> = ROBUSTNESS_PAIRS
        .iter()
        .filter_map(|(a, b)| report.pairs.iter().find(|p| p.in_name == *a && p.out_name == *b && p.admitted).cloned())
        .collect();
    if pairs.len() < 2 {
        return (Verdict::Fail(format!("robustness pairs not admitted: {pairs:?}")), vec![]);
    }
    let base = robustness_spec("acceptance-m64", &pairs);
    let mut steps = base.clone();
    steps.name = "acceptance-m128".into();
    steps.finetune.steps = 128;
    let mut aug = base.clone();
    aug.name = "acceptance-augment".into();
    aug.finetune.augment = AugmentPolicy::extended();
    let run = |s: ExperimentSpec| Runner::new(s).and_then(|r| r.run_matrix());
    let (rb, rs, ra) = match (run(base), run(steps), run(aug)) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (a, b, c) => {
            let e: Vec<String> = [a.err(), b.err(), c.err()].into_iter().flatten().map(|e| e.to_string()).collect();
            return (Verdict::Fail(format!("robustness runs failed: {}", e.join("; "))), vec![]);
        }
    };
    let aucs = |r: &MatrixReport| r.records.iter().map(|x| x.metrics.map(|m| m.auroc)).collect::<Option<Vec<f64>>>();
    let dirs = vec![rb.run_dir.clone(), rs.run_dir.clone(), ra.run_dir.clone()];
    let (Some(b), Some(s), Some(a)) = (aucs(&rb), aucs(&rs), aucs(&ra)) else {
        return (Verdict::Fail("a robustness cell failed".into()), dirs);
    };
    let step_diffs: Vec<f64> = s.iter().zip(&b).map(|(x, y)| x - y).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let aug_diff = mean(&a) - mean(&b);
    let ok = step_diffs.iter().all(|d| d.abs() <= 0.01) && aug_diff.abs() <= 0.02;
    let labels: Vec<String> = pairs.iter().map(|p| p.label()).collect();
    (
        verdict(ok, format!("vae on [{}]: m=64 {b:.4?}, m=128 {s:.4?}; extended augmentations change the mean by {aug_diff:+.4}", labels.join(", "))),
        dirs,
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

fn criterion_9(desk: &Desk) -> Verdict {
    let mut checked = 0;
    let mut violations = vec![];
    for r in desk.ok_records(Indicator::SingleShot) {
        if r.metrics.unwrap().auroc <= 0.6 {
            continue;
        }
        let rows = match read_details(&cache_dir().join(r.details_file.as_ref().unwrap())) {
            Ok(rows) => rows,
            Err(e) => return Verdict::Fail(format!("{} {}: {e}", r.pair, r.model_family)),
        };
        let gains = |label: &str| rows.iter().filter(|d| d.label == label).map(|d| d.logp_gamma - d.logp_theta).collect::<Vec<_>>();
        let (gin, gout) = (median(gains("in")), median(gains("out")));
        checked += 1;
        if gout <= gin {
            violations.push(format!("{} {}: out {gout:.2} <= in {gin:.2}", r.pair, r.model_family));
        }
    }
    let detail = format!("{checked} cells with single-shot AUROC > 0.6, {} violations {violations:?}", violations.len());
    verdict(checked > 0 && violations.is_empty(), detail)
}

fn criterion_10(desk: &Desk, extra: &[PathBuf]) -> Verdict {
    let Ok(report) = &desk.report else {
        return Verdict::Fail("desk matrix unavailable".into());
    };
    let mut cells = 0;
    let mut mismatches = vec![];
    for dir in std::iter::once(&report.run_dir).chain(extra) {
        match audit_run(dir) {
            Ok(a) => {
                cells += a.cells_checked;
                mismatches.extend(a.mismatches);
            }
            Err(e) => mismatches.push(format!("{}: {e}", dir.display())),
        }
    }
    verdict(cells > 0 && mismatches.is_empty(), format!("{cells} cells recomputed, {} discrepancies {mismatches:?}", mismatches.len()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let only: Option<Vec<u8>> = std::env::var("FTOOD_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |k: u8| only.as_ref().is_none_or(|o| o.contains(&k));

    let mut results: Vec<(u8, &str, Verdict)> = vec![];
    let mut report = |k: u8, name: &'static str, v: Verdict| {
        let (tag, d) = match &v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::Blocked(d) => ("FAIL (blocked: data absent)", d),
        };
        println!("criterion {k:>2} {tag}: {name}: {d}");
        results.push((k, name, v));
    };
    if want(1) {
        report(1, "metric oracle suite", criterion_1());
    }
    if want(2) {
        report(2, "model invariant suite", criterion_2());
    }
    if want(3) {
        report(3, "theorem suite", criterion_3());
    }
    if (4..=10).any(&want) {
        let runner = Runner::new(desk_spec());
        let desk = Desk { report: runner.and_then(|r| r.run_matrix()).map_err(|e| e.to_string()) };
        if let Err(e) = &desk.report {
            println!("desk-scale matrix failed: {e}");
        }
        if want(4) {
            report(4, "counterexample reproduction", criterion_4(&desk));
        }
        if want(5) {
            report(5, "oracle strength", criterion_5(&desk));
        }
        if want(6) {
            report(6, "indicator ordering", criterion_6(&desk));
        }
        if want(7) {
            report(7, "transductive ablations", criterion_7(&desk));
        }
        let mut extra = vec![];
        if want(8) {
            let (v, dirs) = criterion_8(&desk);
            extra = dirs;
            report(8, "single-shot robustness", v);
        }
        if want(9) {
            report(9, "likelihood gain mechanism", criterion_9(&desk));
        }
        if want(10) {
            report(10, "audit", criterion_10(&desk, &extra));
        }
    }
    let failed = results.iter().filter(|r| matches!(r.2, Verdict::Fail(_))).count();
    let blocked = results.iter().filter(|r| matches!(r.2, Verdict::Blocked(_))).count();
    println!(
        "acceptance: {} passed, {failed} failed, {blocked} failed for missing data",
        results.len() - failed - blocked
    );
    let strict = std::env::var_os("FTOOD_ACCEPTANCE_STRICT").is_some();
    let fatal = results.iter().any(|r| matches!(r.2, Verdict::Fail(_)) && (strict || CORRECTNESS.contains(&r.0)));
    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
