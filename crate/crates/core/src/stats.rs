//! Agreement statistics: Bland-Altman, paired and equivalence t-tests, grade
//! confusion matrices with linearly weighted kappa, and descriptive summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Number of grades on the qualitative scale.
pub const GRADES: usize = 5;

/// Rows: first observer, columns: second observer, both indexed by grade − 1.
pub type Confusion = [[u64; GRADES]; GRADES];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanResult {
    pub bias: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub n: usize,
}

fn differences(pairs: &[(f64, f64)]) -> Result<Vec<f64>> {
    if pairs.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 pairs, got {}", pairs.len())));
    }
    Ok(pairs.iter().map(|(a, b)| a - b).collect())
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Bias and 95% limits of agreement of `a − b`.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltmanResult> {
    let d = differences(pairs)?;
    let (bias, sd_diff) = mean_sd(&d);
    Ok(BlandAltmanResult {
        bias,
        sd_diff,
        loa_low: bias - 1.96 * sd_diff,
        loa_high: bias + 1.96 * sd_diff,
        n: d.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
    pub mean_diff: f64,
    pub sd_diff: f64,
}

fn student(df: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, df).expect("df >= 1")
}

/// Two-sided paired Student t-test on `a − b`.
pub fn paired_t_test(pairs: &[(f64, f64)]) -> Result<TTest> {
    let d = differences(pairs)?;
    let (mean, sd) = mean_sd(&d);
    let df = (d.len() - 1) as f64;
    let (t, p) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (sd / (d.len() as f64).sqrt());
        (t, (2.0 * student(df).cdf(-t.abs())).min(1.0))
    };
    Ok(TTest {
        t,
        p,
        df,
        mean_diff: mean,
        sd_diff: sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TostResult {
    pub equivalent: bool,
    /// One-sided p of H0: mean difference ≤ −margin.
    pub p_lower: f64,
    /// One-sided p of H0: mean difference ≥ +margin.
    pub p_upper: f64,
}

/// Two one-sided paired t-tests against the equivalence band `(−margin, margin)`.
pub fn tost_equivalence(pairs: &[(f64, f64)], margin: f64, alpha: f64) -> Result<TostResult> {
    if !(margin > 0.0) {
        return Err(Error::Argument(format!("equivalence margin {margin} must be positive")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha {alpha} outside (0, 1)")));
    }
    let d = differences(pairs)?;
    let (mean, sd) = mean_sd(&d);
    let (p_lower, p_upper) = if sd == 0.0 {
        let p = |holds: bool| if holds { 0.0 } else { 1.0 };
        (p(mean > -margin), p(mean < margin))
    } else {
        let se = sd / (d.len() as f64).sqrt();
        let dist = student((d.len() - 1) as f64);
        (dist.cdf(-(mean + margin) / se), dist.cdf((mean - margin) / se))
    };
    Ok(TostResult {
        equivalent: p_lower < alpha && p_upper < alpha,
        p_lower,
        p_upper,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub case_id: String,
    pub observer_id: String,
    pub grade: u8,
}

/// Cross-tabulates the grades of exactly two observers (rows: the observer id that
/// sorts first).
pub fn confusion_matrix(records: &[GradeRecord]) -> Result<Confusion> {
    let observers: BTreeSet<&str> = records.iter().map(|r| r.observer_id.as_str()).collect();
    if observers.len() != 2 {
        return Err(Error::Data(format!("expected 2 observers, found {}", observers.len())));
    }
    let mut by_case: BTreeMap<&str, [Option<u8>; 2]> = BTreeMap::new();
    for r in records {
        if !(1..=GRADES as u8).contains(&r.grade) {
            return Err(Error::Data(format!("case {}: grade {} outside 1-5", r.case_id, r.grade)));
        }
        let o = observers.iter().position(|&o| o == r.observer_id).unwrap();
        let slot = &mut by_case.entry(&r.case_id).or_default()[o];
        if slot.replace(r.grade).is_some() {
            return Err(Error::Data(format!(
                "case {} graded twice by {}",
                r.case_id, r.observer_id
            )));
        }
    }
    let mut m = [[0u64; GRADES]; GRADES];
    for (case, grades) in by_case {
        match grades {
            [Some(a), Some(b)] => m[a as usize - 1][b as usize - 1] += 1,
            _ => return Err(Error::Data(format!("case {case} lacks a grade from one observer"))),
        }
    }
    Ok(m)
}

/// One record pair per counted case, ids `case0001…`; the inverse of
/// [`confusion_matrix`] for observers `"1"` and `"2"`.
pub fn expand_confusion(m: &Confusion) -> Vec<GradeRecord> {
    let mut out = Vec::new();
    let mut case = 0;
    for (i, row) in m.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            for _ in 0..count {
                case += 1;
                for (obs, g) in [("1", i), ("2", j)] {
                    out.push(GradeRecord {
                        case_id: format!("case{case:04}"),
                        observer_id: obs.into(),
                        grade: g as u8 + 1,
                    });
                }
            }
        }
    }
    out
}

fn total(m: &Confusion) -> Result<f64> {
    let n: u64 = m.iter().flatten().sum();
    if n == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    Ok(n as f64)
}

fn marginals(m: &Confusion) -> ([f64; GRADES], [f64; GRADES]) {
    let mut rows = [0.0; GRADES];
    let mut cols = [0.0; GRADES];
    for i in 0..GRADES {
        for j in 0..GRADES {
            rows[i] += m[i][j] as f64;
            cols[j] += m[i][j] as f64;
        }
    }
    (rows, cols)
}

/// Cohen's kappa with linear weights `1 − |i − j| / 4`.
pub fn weighted_kappa(m: &Confusion) -> Result<f64> {
    let n = total(m)?;
    let (rows, cols) = marginals(m);
    let w = |i: usize, j: usize| 1.0 - i.abs_diff(j) as f64 / (GRADES - 1) as f64;
    let (mut po, mut pe) = (0.0, 0.0);
    for i in 0..GRADES {
        for j in 0..GRADES {
            po += w(i, j) * m[i][j] as f64 / n;
            pe += w(i, j) * rows[i] * cols[j] / (n * n);
        }
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub confusion: Confusion,
    pub total: u64,
    pub weighted_kappa: f64,
    pub raw_agreement: f64,
    /// Cases both observers graded 3 or better.
    pub joint_leq3_count: u64,
    pub mean_grade_per_observer: [f64; 2],
    /// Cases per grade, per observer.
    pub grade_counts: [[u64; GRADES]; 2],
}

pub fn agreement_summary(m: &Confusion) -> Result<AgreementReport> {
    let n = total(m)?;
    let (rows, cols) = marginals(m);
    let mean = |marg: &[f64; GRADES]| marg.iter().enumerate().map(|(g, c)| (g + 1) as f64 * c).sum::<f64>() / n;
    Ok(AgreementReport {
        confusion: *m,
        total: n as u64,
        weighted_kappa: weighted_kappa(m)?,
        raw_agreement: (0..GRADES).map(|i| m[i][i]).sum::<u64>() as f64 / n,
        joint_leq3_count: m[..3].iter().map(|r| r[..3].iter().sum::<u64>()).sum(),
        mean_grade_per_observer: [mean(&rows), mean(&cols)],
        grade_counts: [rows.map(|c| c as u64), cols.map(|c| c as u64)],
    })
}

/// Reads a 5×5 matrix CSV: header row, then one row per first-observer grade whose
/// first column is the grade.
pub fn read_confusion_csv(path: &Path) -> Result<Confusion> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut m = [[0u64; GRADES]; GRADES];
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("{}: bad count {s:?}", path.display())))
        };
        if rec.len() != GRADES + 1 {
            return Err(Error::Format(format!("{}: expected {} columns", path.display(), GRADES + 1)));
        }
        let g = parse(&rec[0])? as usize;
        if !(1..=GRADES).contains(&g) {
            return Err(Error::Format(format!("{}: row grade {g}", path.display())));
        }
        for j in 0..GRADES {
            m[g - 1][j] = parse(&rec[j + 1])?;
        }
        seen |= 1 << (g - 1);
    }
    if seen != (1 << GRADES) - 1 {
        return Err(Error::Format(format!("{}: missing grade rows", path.display())));
    }
    Ok(m)
}

/// Reads `case_id,observer_id,grade` records.
pub fn read_grades_csv(path: &Path) -> Result<Vec<GradeRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Reads `case_id,a,b` records as `(a, b)` pairs.
pub fn read_pairs_csv(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        case_id: String,
        a: f64,
        b: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rdr.deserialize::<Row>()
        .map(|r| r.map(|r| (r.case_id, r.a, r.b)).map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub n: usize,
    pub median: f64,
    pub iqr_low: f64,
    pub iqr_high: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Quantile by linear interpolation at position `(n − 1)·q` of the sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn describe(samples: &[f64]) -> Result<Description> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples to describe".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mean, sd) = mean_sd(samples);
    Ok(Description {
        n: samples.len(),
        median: quantile(&sorted, 0.5),
        iqr_low: quantile(&sorted, 0.25),
        iqr_high: quantile(&sorted, 0.75),
        mean,
        sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    pub(crate) const TABLE: Confusion = [
        [67, 48, 12, 2, 0],
        [6, 28, 29, 4, 0],
        [0, 6, 18, 15, 0],
        [0, 1, 9, 38, 0],
        [0, 0, 0, 5, 2],
    ];

    /// Upper tail of Student's t by composite Simpson quadrature of the density.
    fn t_sf_oracle(t: f64, df: f64) -> f64 {
        let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        // Symmetric density: upper tail = 1/2 − ∫₀ᵗ pdf.
        let n = 200_000;
        let h = t.abs() / n as f64;
        let mut acc = pdf(0.0) + pdf(t.abs());
        for k in 1..n {
            acc += pdf(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let half = acc * h / 3.0;
        if t >= 0.0 {
            0.5 - half
        } else {
            0.5 + half
        }
    }

    /// Lanczos approximation, independent of the library under test.
    fn ln_gamma(x: f64) -> f64 {
        const G: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    fn pairs_from_diffs(d: &[f64]) -> Vec<(f64, f64)> {
        d.iter().map(|&x| (100.0 + x, 100.0)).collect()
    }

    #[test]
    fn bland_altman_arithmetic() {
        let r = bland_altman(&[(3.0, 3.0), (5.0, 5.0)]).unwrap();
        assert_eq!((r.bias, r.loa_low, r.loa_high), (0.0, 0.0, 0.0));
        let r = bland_altman(&pairs_from_diffs(&[-1.0, 1.0])).unwrap();
        assert_eq!(r.bias, 0.0);
        assert!((r.sd_diff - 2f64.sqrt()).abs() < 1e-12);
        assert!((r.loa_high - 1.96 * 2f64.sqrt()).abs() < 1e-12);
        assert!(bland_altman(&[(1.0, 2.0)]).is_err());
    }

    #[test]
    fn t_test_values() {
        let z = paired_t_test(&[(1.0, 1.0), (2.0, 2.0)]).unwrap();
        assert_eq!((z.t, z.p), (0.0, 1.0));
        let r = paired_t_test(&pairs_from_diffs(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert!((r.t - 4.242_640_687).abs() < 1e-8);
        assert!((r.p - 2.0 * t_sf_oracle(r.t, 4.0)).abs() < 1e-8);
        assert!((r.p - 0.013_235_6).abs() < 1e-6);
        let neg = paired_t_test(&pairs_from_diffs(&[-1.0, -2.0, -3.0, -4.0, -5.0])).unwrap();
        assert_eq!(neg.p, r.p);
    }

    #[test]
    fn library_cdf_matches_quadrature() {
        for (t, df) in [(0.3, 3.0), (1.7, 17.0), (2.5, 5.0), (4.0, 1.0), (12.7, 17.0)] {
            let lib = student(df).cdf(-t);
            assert!((lib - t_sf_oracle(t, df)).abs() < 1e-9, "t={t} df={df}");
        }
    }

    #[test]
    fn tost_cases() {
        let zeros = vec![(50.0, 50.0); 18];
        assert!(tost_equivalence(&zeros, 15.0, 0.05).unwrap().equivalent);
        // Eighteen differences with sample sd exactly 5.
        let unit: Vec<f64> = (0..18).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let scale = 5.0 / mean_sd(&unit).1;
        let around = |m: f64| pairs_from_diffs(&unit.iter().map(|u| m + u * scale).collect::<Vec<_>>());
        let eq = tost_equivalence(&around(0.0), 15.0, 0.05).unwrap();
        assert!(eq.equivalent);
        let t = 15.0 / (5.0 / 18f64.sqrt());
        assert!((eq.p_lower - t_sf_oracle(t, 17.0)).abs() < 1e-6);
        let far = tost_equivalence(&around(20.0), 15.0, 0.05).unwrap();
        assert!(!far.equivalent);
        assert!((far.p_upper - (1.0 - t_sf_oracle(5.0 / (5.0 / 18f64.sqrt()), 17.0))).abs() < 1e-6);
        assert!(tost_equivalence(&zeros, 0.0, 0.05).is_err());
    }

    #[test]
    fn table_reproduction() {
        let m = TABLE;
        let (rows, cols) = marginals(&m);
        assert_eq!(rows, [129.0, 67.0, 39.0, 48.0, 7.0]);
        assert_eq!(cols, [73.0, 83.0, 68.0, 64.0, 2.0]);
        let r = agreement_summary(&m).unwrap();
        assert!((r.weighted_kappa - 0.59).abs() <= 0.005);
        assert_eq!(r.raw_agreement, 153.0 / 290.0);
        assert_eq!(format!("{:.0}%", r.raw_agreement * 100.0), "53%");
        assert_eq!(r.joint_leq3_count, 214);
        assert_eq!(format!("{:.2}", r.mean_grade_per_observer[0]), "2.09");
        assert!((r.mean_grade_per_observer[1] - 709.0 / 290.0).abs() < 1e-12);
        assert_eq!(confusion_matrix(&expand_confusion(&m)).unwrap(), m);
    }

    #[test]
    fn fixture_file_matches() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/grade_confusion.csv");
        assert_eq!(read_confusion_csv(&path).unwrap(), TABLE);
    }

    #[test]
    fn kappa_extremes() {
        let mut diag = [[0u64; 5]; 5];
        for (i, row) in diag.iter_mut().enumerate() {
            row[i] = i as u64 + 1;
        }
        assert!((weighted_kappa(&diag).unwrap() - 1.0).abs() < 1e-12);
        let r = [1u64, 2, 3, 4, 5];
        let c = [2u64, 1, 1, 3, 3];
        let outer: Confusion = std::array::from_fn(|i| std::array::from_fn(|j| r[i] * c[j]));
        assert!(weighted_kappa(&outer).unwrap().abs() < 1e-12);
        assert!(weighted_kappa(&[[0; 5]; 5]).is_err());
    }

    #[test]
    fn confusion_errors() {
        let rec = |c: &str, o: &str, g| GradeRecord {
            case_id: c.into(),
            observer_id: o.into(),
            grade: g,
        };
        let m = confusion_matrix(&[rec("a", "x", 2), rec("a", "y", 3)]).unwrap();
        assert_eq!(m[1][2], 1);
        assert!(confusion_matrix(&[rec("a", "x", 2), rec("a", "y", 3), rec("b", "x", 1)]).is_err());
        assert!(confusion_matrix(&[rec("a", "x", 2), rec("a", "x", 3), rec("a", "y", 1)]).is_err());
        assert!(confusion_matrix(&[rec("a", "x", 6), rec("a", "y", 3)]).is_err());
    }

    #[test]
    fn descriptive() {
        let d = describe(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((d.median, d.iqr_low, d.iqr_high), (2.0, 1.5, 2.5));
        let c = describe(&[4.0; 7]).unwrap();
        assert_eq!((c.median, c.mean, c.sd), (4.0, 4.0, 0.0));
        assert!(describe(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let normal = Normal::new(43.0, 28.0).unwrap();
        let draws: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        assert!((describe(&draws).unwrap().median - 43.0).abs() < 1.0);
    }

    proptest! {
        #[test]
        fn kappa_scale_invariant(cells in proptest::collection::vec(0u64..20, 25), k in 1u64..5) {
            let m: Confusion = std::array::from_fn(|i| std::array::from_fn(|j| cells[i * 5 + j]));
            prop_assume!(m.iter().flatten().sum::<u64>() > 0);
            let scaled = m.map(|r| r.map(|c| c * k));
            let (a, b) = (weighted_kappa(&m).unwrap(), weighted_kappa(&scaled).unwrap());
            prop_assert!((a - b).abs() < 1e-9 || (a.is_nan() && b.is_nan()));
        }

        #[test]
        fn swap_and_monotonicity(d in proptest::collection::vec(-10.0f64..10.0, 2..30), shrink in 0.0f64..1.0) {
            let pairs = pairs_from_diffs(&d);
            let swapped: Vec<_> = pairs.iter().map(|&(a, b)| (b, a)).collect();
            let (x, y) = (bland_altman(&pairs).unwrap(), bland_altman(&swapped).unwrap());
            prop_assert!((x.bias + y.bias).abs() < 1e-9);
            prop_assert!(((x.loa_high - x.loa_low) - (y.loa_high - y.loa_low)).abs() < 1e-9);
            let t = paired_t_test(&pairs).unwrap();
            prop_assert!(t.p > 0.0 && t.p <= 1.0 || t.sd_diff == 0.0);
            // Shift every difference so the mean moves toward zero with the sd unchanged.
            let m = t.mean_diff;
            let closer: Vec<f64> = d.iter().map(|x| x - m * shrink).collect();
            let t2 = paired_t_test(&pairs_from_diffs(&closer)).unwrap();
            prop_assert!(t2.p + 1e-12 >= t.p);
            prop_assert!(tost_equivalence(&pairs, 1e12, 0.05).unwrap().equivalent || t.sd_diff == 0.0);
        }
    }
}
