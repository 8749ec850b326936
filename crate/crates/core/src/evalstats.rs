//! Score aggregation and reporting: oracle-normalized scores, interquartile
//! mean, median, performance profiles, and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(raw - random_ref) / (oracle_ref - random_ref)`, unbounded on both sides.
pub fn normalize_score(raw: f64, random_ref: f64, oracle_ref: f64) -> Result<f64> {
    if !(oracle_ref > random_ref) || !oracle_ref.is_finite() || !random_ref.is_finite() {
        return Err(Error::invalid(format!(
            "reference returns must satisfy oracle > random (got {oracle_ref} vs {random_ref})"
        )));
    }
    Ok((raw - random_ref) / (oracle_ref - random_ref))
}

fn sorted(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to aggregate"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Interquartile mean. Sorted value `i` covers `[i, i + 1)` of `[0, n)`;
/// the mean is taken over `[n/4, 3n/4)`, so values straddling a cut point
/// count fractionally.
pub fn iqm(scores: &[f64]) -> Result<f64> {
    let v = sorted(scores)?;
    let n = v.len() as f64;
    let (lo, hi) = (0.25 * n, 0.75 * n);
    let mut acc = 0.0;
    for (i, x) in v.iter().enumerate() {
        let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        acc += w * x;
    }
    Ok(acc / (hi - lo))
}

pub fn median(scores: &[f64]) -> Result<f64> {
    let v = sorted(scores)?;
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Fraction of scores strictly above each threshold.
pub fn performance_profile(scores: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores for a profile"));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("thresholds must be strictly ascending"));
    }
    let n = scores.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, scores.iter().filter(|&&s| s > t).count() as f64 / n))
        .collect())
}

/// Thresholds 0, 0.05, ..., 1.5.
pub fn default_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 0.05).collect()
}

/// Raw evaluation returns of one task with its reference returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub name: String,
    pub random_return: f64,
    pub oracle_return: f64,
    pub returns: Vec<f64>,
}

impl TaskScores {
    pub fn raw_mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    pub fn normalized(&self) -> Result<f64> {
        normalize_score(self.raw_mean(), self.random_return, self.oracle_return)
    }
}

/// Per task, per evaluation episode raw returns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub tasks: Vec<TaskScores>,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("score matrix has no tasks"));
        }
        for t in &self.tasks {
            if t.returns.is_empty() {
                return Err(Error::invalid(format!("task {} has no returns", t.name)));
            }
            normalize_score(0.0, t.random_return, t.oracle_return)
                .map_err(|e| Error::invalid(format!("task {}: {e}", t.name)))?;
        }
        Ok(())
    }

    pub fn normalized(&self) -> Result<Vec<f64>> {
        self.validate()?;
        self.tasks.iter().map(TaskScores::normalized).collect()
    }
}

/// Where a report came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub name: String,
    pub raw_mean: f64,
    pub normalized: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub iqm: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub per_task: Vec<TaskEntry>,
    pub aggregates: Aggregates,
    /// `(threshold, fraction of tasks above it)`.
    pub profile: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn from_matrix(matrix: &ScoreMatrix, meta: RunMeta, thresholds: &[f64]) -> Result<Self> {
        let norm = matrix.normalized()?;
        let per_task = matrix
            .tasks
            .iter()
            .zip(&norm)
            .map(|(t, &n)| TaskEntry {
                name: t.name.clone(),
                raw_mean: t.raw_mean(),
                normalized: n,
            })
            .collect();
        Self::from_entries(meta, per_task, thresholds)
    }

    pub fn from_entries(meta: RunMeta, per_task: Vec<TaskEntry>, thresholds: &[f64]) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::invalid("report needs at least one task"));
        }
        let norm: Vec<f64> = per_task.iter().map(|t| t.normalized).collect();
        if norm.iter().chain(per_task.iter().map(|t| &t.raw_mean)).any(|v| !v.is_finite()) {
            return Err(Error::invalid("report scores must be finite"));
        }
        Ok(EvalReport {
            meta,
            aggregates: Aggregates {
                iqm: iqm(&norm)?,
                median: median(&norm)?,
            },
            profile: performance_profile(&norm, thresholds)?,
            per_task,
        })
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.per_task.iter().map(|t| t.normalized).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("report json line {} column {}: {e}", e.line(), e.column()),
        })
    }

    /// One row per task.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,raw_mean,normalized\n");
        for t in &self.per_task {
            writeln!(s, "{},{},{}", csv_field(&t.name), t.raw_mean, t.normalized).unwrap();
        }
        s
    }

    /// The performance profile as a step plot.
    pub fn profile_svg(&self) -> String {
        profile_svg(&[(self.meta.label.as_str(), &self.profile)])
    }

    /// Writes `report.json`, `scores.csv`, and `profile.svg` as requested.
    pub fn emit(&self, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for f in formats {
            let (name, body) = match f {
                ReportFormat::Json => ("report.json", self.to_json()),
                ReportFormat::Csv => ("scores.csv", self.to_csv()),
                ReportFormat::Svg => ("profile.svg", self.profile_svg()),
            };
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            out.push(path);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Overlaid step plots of several profiles; one legend entry per curve.
pub fn profile_svg(curves: &[(&str, &[(f64, f64)])]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let x_max = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let x_min = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.0))
        .fold(0.0f64, f64::min);
    let span = (x_max - x_min).max(1e-9);
    let px = |x: f64| pad + (x - x_min) / span * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y * (h - 2.0 * pad);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{:.1},{:.1} L{:.1},{:.1} L{:.1},{:.1}" fill="none" stroke="black"/>"#,
        pad,
        pad,
        pad,
        h - pad,
        w - pad,
        h - pad
    )
    .unwrap();
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">normalized score threshold</text>"#, w / 2.0, h - 8.0).unwrap();
    writeln!(s, r#"<text x="12" y="{:.1}" font-size="11" transform="rotate(-90 12 {:.1})" text-anchor="middle">fraction of tasks above</text>"#, h / 2.0, h / 2.0).unwrap();
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (j, &(x, y)) in curve.iter().enumerate() {
            if j == 0 {
                write!(d, "M{:.1},{:.1}", px(x), py(y)).unwrap();
            } else {
                write!(d, " H{:.1} V{:.1}", px(x), py(y)).unwrap();
            }
        }
        writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{}</text>"#,
            w - pad - 120.0,
            pad + 14.0 * (i as f64 + 1.0),
            xml_escape(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Cross-run table: one row per task with each run's normalized score and
/// its delta from the first run, then the aggregates.
pub fn comparison_csv(runs: &[EvalReport]) -> Result<String> {
    let first = runs.first().ok_or_else(|| Error::invalid("no runs to compare"))?;
    let names: Vec<&str> = first.per_task.iter().map(|t| t.name.as_str()).collect();
    for r in &runs[1..] {
        let other: Vec<&str> = r.per_task.iter().map(|t| t.name.as_str()).collect();
        if other != names {
            return Err(Error::invalid(format!(
                "run `{}` covers a different task suite than `{}`",
                r.meta.label, first.meta.label
            )));
        }
    }
    let mut s = String::from("task");
    for (i, r) in runs.iter().enumerate() {
        write!(s, ",{}", csv_field(&r.meta.label)).unwrap();
        if i > 0 {
            write!(s, ",{}", csv_field(&format!("delta_{}", r.meta.label))).unwrap();
        }
    }
    s.push('\n');
    let mut row = |name: &str, vals: Vec<f64>| {
        s.push_str(&csv_field(name));
        for (i, v) in vals.iter().enumerate() {
            write!(s, ",{v}").unwrap();
            if i > 0 {
                write!(s, ",{}", v - vals[0]).unwrap();
            }
        }
        s.push('\n');
    };
    for (i, name) in names.iter().enumerate() {
        row(name, runs.iter().map(|r| r.per_task[i].normalized).collect());
    }
    row("IQM", runs.iter().map(|r| r.aggregates.iqm).collect());
    row("median", runs.iter().map(|r| r.aggregates.median).collect());
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Trim by expanding each value into four equal quarter-weights and
    /// dropping the n lowest and n highest quarters.
    fn iqm_oracle(xs: &[f64]) -> f64 {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let quarters: Vec<f64> = v.iter().flat_map(|&x| [x; 4]).collect();
        let n = v.len();
        let kept = &quarters[n..3 * n];
        kept.iter().sum::<f64>() / kept.len() as f64
    }

    fn entry(name: &str, n: f64) -> TaskEntry {
        TaskEntry {
            name: name.into(),
            raw_mean: n * 10.0,
            normalized: n,
        }
    }

    fn report(label: &str, scores: &[f64]) -> EvalReport {
        let per_task = scores.iter().enumerate().map(|(i, &s)| entry(&format!("t{i}"), s)).collect();
        EvalReport::from_entries(
            RunMeta {
                label: label.into(),
                config_hash: "abc123".into(),
                seed: 7,
                step: 100,
            },
            per_task,
            &default_thresholds(),
        )
        .unwrap()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_score(5.0, 1.0, 5.0).unwrap(), 1.0);
        assert_eq!(normalize_score(1.0, 1.0, 5.0).unwrap(), 0.0);
        assert_eq!(normalize_score(3.0, 1.0, 5.0).unwrap(), 0.5);
        assert!(normalize_score(9.0, 1.0, 5.0).unwrap() > 1.0);
        assert!(normalize_score(0.0, 1.0, 1.0).is_err());
        assert!(normalize_score(0.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[3.0; 7]).unwrap(), 3.0);
        assert_eq!(iqm(&[4.0]).unwrap(), 4.0);
        // n = 5: [1.25, 3.75) keeps 0.75 of x2, x3, 0.75 of x4
        let v = iqm(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert!((v - (0.75 * 2.0 + 3.0 + 0.75 * 4.0) / 2.5).abs() < 1e-12);
        assert!(iqm(&[]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }

    #[test]
    fn profile_examples() {
        let s = [0.2, 0.5, 0.9];
        let p = performance_profile(&s, &[-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(p, vec![(-1.0, 1.0), (0.5, 1.0 / 3.0), (2.0, 0.0)]);
        assert!(performance_profile(&s, &[0.5, 0.1]).is_err());
    }

    #[test]
    fn report_round_trip_and_byte_stable_emission() {
        let r = report("main", &[0.1, 0.7, 0.4, 1.2, -0.3]);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        let json = r.to_json();
        assert!(json.contains("\"config_hash\": \"abc123\"") && json.contains("\"seed\": 7"));
        let dir = tempfile::tempdir().unwrap();
        let all = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg];
        let paths = r.emit(dir.path(), &all).unwrap();
        let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        r.emit(dir.path(), &all).unwrap();
        let second: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(r.to_csv().lines().count(), 6);
    }

    #[test]
    fn empty_report_is_rejected() {
        let err = EvalReport::from_entries(RunMeta::default(), vec![], &default_thresholds());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        assert!(ScoreMatrix::default().validate().is_err());
    }

    #[test]
    fn matrix_report_uses_raw_means() {
        let m = ScoreMatrix {
            tasks: vec![TaskScores {
                name: "a".into(),
                random_return: 0.0,
                oracle_return: 2.0,
                returns: vec![1.0, 2.0],
            }],
        };
        let r = EvalReport::from_matrix(&m, RunMeta::default(), &[0.5]).unwrap();
        assert_eq!(r.per_task[0].raw_mean, 1.5);
        assert_eq!(r.per_task[0].normalized, 0.75);
        assert_eq!(r.profile, vec![(0.5, 1.0)]);
    }

    #[test]
    fn comparison_needs_matching_suites() {
        let a = report("a", &[0.1, 0.2]);
        let b = report("b", &[0.3, 0.2]);
        let t = comparison_csv(&[a.clone(), b]).unwrap();
        assert_eq!(t.lines().next().unwrap(), "task,a,b,delta_b");
        assert!(t.lines().nth(1).unwrap().starts_with("t0,0.1,0.3,"));
        let c = report("c", &[0.1, 0.2, 0.3]);
        assert!(comparison_csv(&[a, c]).is_err());
    }

    proptest! {
        #[test]
        fn iqm_matches_quarter_expansion(xs in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            prop_assert!((iqm(&xs).unwrap() - iqm_oracle(&xs)).abs() < 1e-9);
        }

        #[test]
        fn iqm_between_quartiles_and_permutation_invariant(
            xs in prop::collection::vec(-10.0f64..10.0, 1..30),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let v = iqm(&xs).unwrap();
            let mut s = xs.clone();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            prop_assert!(v >= s[n / 4] - 1e-12);
            prop_assert!(v <= s[(3 * n).div_ceil(4) - 1] + 1e-12);
            let mut p = xs.clone();
            p.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((iqm(&p).unwrap() - v).abs() < 1e-9);
        }

        #[test]
        fn iqm_is_monotone(xs in prop::collection::vec(-10.0f64..10.0, 1..30), i in any::<prop::sample::Index>(), d in 0.0f64..5.0) {
            let mut ys = xs.clone();
            let k = i.index(ys.len());
            ys[k] += d;
            prop_assert!(iqm(&ys).unwrap() >= iqm(&xs).unwrap() - 1e-12);
        }

        #[test]
        fn normalization_is_affine_equivariant(
            raw in -50.0f64..50.0, lo in -20.0f64..0.0, span in 0.1f64..20.0,
            a in 0.01f64..100.0, b in -100.0f64..100.0,
        ) {
            let hi = lo + span;
            let x = normalize_score(raw, lo, hi).unwrap();
            let y = normalize_score(a * raw + b, a * lo + b, a * hi + b).unwrap();
            prop_assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
        }

        #[test]
        fn profile_matches_counting(
            xs in prop::collection::vec(-1.0f64..2.0, 1..30),
        ) {
            let th = default_thresholds();
            let p = performance_profile(&xs, &th).unwrap();
            for (k, &(t, f)) in p.iter().enumerate() {
                let mut count = 0;
                for &x in &xs {
                    if x > t {
                        count += 1;
                    }
                }
                prop_assert_eq!(f, count as f64 / xs.len() as f64);
                prop_assert!((0.0..=1.0).contains(&f));
                if k > 0 {
                    prop_assert!(f <= p[k - 1].1);
                }
            }
        }

        #[test]
        fn report_json_round_trips(xs in prop::collection::vec(-3.0f64..3.0, 1..12)) {
            let r = report("p", &xs);
            prop_assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        }
    }
}
