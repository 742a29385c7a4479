//! Synthetic cohorts shaped like the clinical datasets, and simulated
//! readers with configurable error and timing profiles.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{id_rng, stream_rng, Exec};
use crate::fusion::{CaseFindings, Diagnosis};
use crate::geometry::RotatedRect;
use crate::inference::{Detection, ImageFindings, StructureLabel, ViewLabel};
use crate::losses::ProbVector;
use crate::stats::special::ln_gamma;

/// Side of the square frame synthetic boxes are placed in (pixels).
pub const FRAME: f64 = 480.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("cohort configuration: {0}")]
    Config(String),
    #[error("reader profile: {0}")]
    Profile(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub control: usize,
    pub cl: usize,
    pub clp: usize,
}

impl ClassCounts {
    pub fn new(control: usize, cl: usize, clp: usize) -> Self {
        Self { control, cl, clp }
    }

    pub fn total(&self) -> usize {
        self.control + self.cl + self.clp
    }

    pub fn get(&self, d: Diagnosis) -> usize {
        match d {
            Diagnosis::Control => self.control,
            Diagnosis::Cl => self.cl,
            Diagnosis::Clp => self.clp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeekDistribution {
    Uniform { min: u8, max: u8 },
    /// Relative weights per week.
    Histogram { weeks: Vec<(u8, f64)> },
}

impl WeekDistribution {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        match self {
            WeekDistribution::Uniform { min, max } => {
                if min > max || *min < 14 || *max > 28 {
                    return bad(format!("week range {min}-{max} must lie within 14-28"));
                }
            }
            WeekDistribution::Histogram { weeks } => {
                if weeks.is_empty() || weeks.iter().all(|w| w.1 <= 0.0) {
                    return bad("week histogram has no mass".into());
                }
                if weeks.iter().any(|w| !(14..=28).contains(&w.0) || !(w.1 >= 0.0 && w.1.is_finite())) {
                    return bad("week histogram entries must be weeks 14-28 with non-negative weights".into());
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u8 {
        match self {
            WeekDistribution::Uniform { min, max } => rng.random_range(*min..=*max),
            WeekDistribution::Histogram { weeks } => {
                let total: f64 = weeks.iter().map(|w| w.1).sum();
                let mut u = rng.random::<f64>() * total;
                for &(week, w) in weeks {
                    if u < w {
                        return week;
                    }
                    u -= w;
                }
                weeks.iter().rev().find(|w| w.1 > 0.0).expect("validated").0
            }
        }
    }
}

/// Images per case: `min + X` with `X` negative binomial (shape `dispersion`)
/// truncated at `max - min`, success probability solved so the mean is met.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewCountConfig {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub dispersion: f64,
}

impl Default for ViewCountConfig {
    fn default() -> Self {
        Self { min: 2, max: 26, mean: 5.0, dispersion: 2.0 }
    }
}

/// Inverse-CDF table of the truncated, shifted negative binomial.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCountTable {
    min: usize,
    cdf: Vec<f64>,
}

fn truncated_nb_pmf(r: f64, p: f64, n: usize) -> Vec<f64> {
    let mut pmf: Vec<f64> = (0..=n)
        .map(|k| {
            let k = k as f64;
            (ln_gamma(k + r) - ln_gamma(k + 1.0) - ln_gamma(r) + r * p.ln() + k * (1.0 - p).ln()).exp()
        })
        .collect();
    let z: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|v| *v /= z);
    pmf
}

fn pmf_mean(pmf: &[f64]) -> f64 {
    pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

impl ViewCountTable {
    pub fn new(cfg: &ViewCountConfig) -> Result<Self, SynthError> {
        if cfg.min < 1 || cfg.max < cfg.min {
            return Err(SynthError::Config(format!("view count support {}-{} is empty", cfg.min, cfg.max)));
        }
        if !(cfg.dispersion > 0.0) {
            return Err(SynthError::Config("view count dispersion must be positive".into()));
        }
        let span = cfg.max - cfg.min;
        let target = cfg.mean - cfg.min as f64;
        if span == 0 {
            if target != 0.0 {
                return Err(SynthError::Config("mean must equal the single supported count".into()));
            }
            return Ok(Self { min: cfg.min, cdf: vec![1.0] });
        }
        // The truncated mean falls from near `span` to 0 as p goes 0 -> 1.
        let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
        let m_lo = pmf_mean(&truncated_nb_pmf(cfg.dispersion, lo, span));
        let m_hi = pmf_mean(&truncated_nb_pmf(cfg.dispersion, hi, span));
        if !(target > m_hi && target < m_lo) {
            return Err(SynthError::Config(format!(
                "mean {} not reachable within views {}-{}",
                cfg.mean, cfg.min, cfg.max
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if pmf_mean(&truncated_nb_pmf(cfg.dispersion, mid, span)) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let pmf = truncated_nb_pmf(cfg.dispersion, 0.5 * (lo + hi), span);
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { min: cfg.min, cdf })
    }

    pub fn mean(&self) -> f64 {
        let mut prev = 0.0;
        let mut m = 0.0;
        for (k, c) in self.cdf.iter().enumerate() {
            m += (self.min + k) as f64 * (c - prev);
            prev = *c;
        }
        m
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.cdf[self.cdf.len() - 1];
        self.min + self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub counts: ClassCounts,
    pub weeks: WeekDistribution,
    #[serde(default)]
    pub views: ViewCountConfig,
    #[serde(default)]
    pub seed: u64,
    /// Case ids are this prefix followed by a zero-padded index.
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_prefix() -> String {
    "C".into()
}

impl CohortConfig {
    pub fn new(counts: ClassCounts, seed: u64) -> Self {
        Self {
            counts,
            weeks: WeekDistribution::Uniform { min: 18, max: 28 },
            views: ViewCountConfig::default(),
            seed,
            id_prefix: default_prefix(),
        }
    }

    /// External validation set: 2980 control, 18 CL, 170 CLP.
    pub fn oc_gt3000(seed: u64) -> Self {
        Self::new(ClassCounts::new(2980, 18, 170), seed)
    }

    /// Early-gestation set (14-17 weeks).
    pub fn early(counts: ClassCounts, seed: u64) -> Self {
        Self { weeks: WeekDistribution::Uniform { min: 14, max: 17 }, ..Self::new(counts, seed) }
    }
}

/// A generated case: ground-truth label plus annotated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCase {
    pub truth: Diagnosis,
    pub findings: CaseFindings,
}

impl CohortCase {
    pub fn case_id(&self) -> &str {
        &self.findings.case_id
    }
}

/// Views a case of the given class must contain.
pub fn key_views(d: Diagnosis) -> [ViewLabel; 2] {
    match d {
        Diagnosis::Control => [ViewLabel::Nlv, ViewLabel::Napv],
        Diagnosis::Cl => [ViewLabel::Clv, ViewLabel::Napv],
        Diagnosis::Clp => [ViewLabel::Clv, ViewLabel::Capv],
    }
}

/// Structures annotated on an image of the given view.
pub fn view_structures(v: ViewLabel) -> &'static [StructureLabel] {
    match v {
        ViewLabel::Nlv => &[StructureLabel::UpperLip],
        ViewLabel::Napv => &[StructureLabel::AlveolarRidge],
        ViewLabel::Clv => &[StructureLabel::CleftLip],
        ViewLabel::Capv => &[StructureLabel::CleftAlveolus, StructureLabel::CleftPalate],
    }
}

fn random_box<R: Rng>(rng: &mut R) -> RotatedRect {
    let w: f64 = rng.random_range(40.0..140.0);
    let h: f64 = rng.random_range(20.0..80.0);
    let margin = 0.5 * (w * w + h * h).sqrt();
    let cx = rng.random_range(margin..FRAME - margin);
    let cy = rng.random_range(margin..FRAME - margin);
    let phi = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
    RotatedRect::new(cx, cy, w, h, phi).expect("positive sides")
}

fn annotated_image<R: Rng>(rng: &mut R, case_id: &str, k: usize, view: ViewLabel, week: u8) -> ImageFindings {
    ImageFindings {
        image_id: format!("{case_id}-{k:02}"),
        case_id: case_id.to_string(),
        view_probs: ProbVector::one_hot(4, view.index()),
        detections: view_structures(view)
            .iter()
            .map(|&label| Detection { label, rect: random_box(rng), confidence: 1.0 })
            .collect(),
        gestational_week: week,
    }
}

fn generate_case(cfg: &CohortConfig, table: &ViewCountTable, case_id: String, truth: Diagnosis) -> CohortCase {
    let mut rng = id_rng(cfg.seed, "case", &case_id);
    let week = cfg.weeks.sample(&mut rng);
    let n = table.sample(&mut rng);
    let keys = key_views(truth);
    let mut views: Vec<ViewLabel> = keys.to_vec();
    views.extend((2..n).map(|_| keys[rng.random_range(0..2)]));
    views.shuffle(&mut rng);
    let images = views.iter().enumerate().map(|(k, &v)| annotated_image(&mut rng, &case_id, k + 1, v, week)).collect();
    CohortCase { truth, findings: CaseFindings { case_id, gestational_week: week, images } }
}

pub fn generate_cohort(cfg: &CohortConfig) -> Result<Vec<CohortCase>, SynthError> {
    generate_cohort_with(cfg, Exec::Parallel)
}

/// Exact class counts, labels shuffled over sequential ids; each case draws
/// from its own `(seed, case id)` stream.
pub fn generate_cohort_with(cfg: &CohortConfig, exec: Exec) -> Result<Vec<CohortCase>, SynthError> {
    cfg.weeks.validate()?;
    let table = ViewCountTable::new(&cfg.views)?;
    let mut labels: Vec<Diagnosis> = Diagnosis::ALL
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d, cfg.counts.get(d)))
        .collect();
    labels.shuffle(&mut stream_rng(cfg.seed, &[0x1abe1]));
    let width = labels.len().to_string().len().max(5);
    let prefix = &cfg.id_prefix;
    Ok(exec.map_range(labels.len(), |i| {
        generate_case(cfg, &table, format!("{prefix}{:0width$}", i + 1), labels[i])
    }))
}

/// Schematic SVG of one synthetic image: face outline and unlabeled shapes
/// at the annotated structure positions.
pub fn render_schematic(image: &ImageFindings) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {f} {f}" width="{f}" height="{f}"><rect width="{f}" height="{f}" fill="#111"/><ellipse cx="240" cy="240" rx="190" ry="210" fill="none" stroke="#666" stroke-width="3"/>"##,
        f = FRAME
    );
    for d in &image.detections {
        let pts: Vec<String> = d.rect.vertices().iter().map(|p| format!("{:.1},{:.1}", p.x, p.y)).collect();
        let _ = write!(s, r##"<polygon points="{}" fill="#999" fill-opacity="0.35" stroke="none"/>"##, pts.join(" "));
    }
    s.push_str("</svg>");
    s
}

/// Lognormal per-case reading time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeDistribution {
    pub mean_seconds: f64,
    /// Coefficient of variation.
    pub cv: f64,
}

impl TimeDistribution {
    fn lognormal(&self, scale: f64) -> LogNormal<f64> {
        let s2 = (1.0 + self.cv * self.cv).ln();
        LogNormal::new((self.mean_seconds * scale).ln() - s2 / 2.0, s2.sqrt()).expect("validated time distribution")
    }
}

/// A simulated reader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderProfile {
    pub name: String,
    /// Row `t` is the distribution of the reader's answer for true class `t`.
    pub confusion: [[f64; 3]; 3],
    pub time: TimeDistribution,
    /// Factor on the error rates when the assistant is shown and correct.
    pub assist_effect: f64,
    /// Probability of adopting a wrong assistant recommendation.
    #[serde(default)]
    pub overreliance: f64,
    /// Factor on the mean reading time when the assistant is shown.
    #[serde(default = "one")]
    pub assist_time_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl ReaderProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Profile(format!("{}: {m}", self.name)));
        for (i, row) in self.confusion.iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("confusion row {i} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("confusion row {i} sums to {sum}"));
            }
        }
        if !(self.time.mean_seconds > 0.0 && self.time.mean_seconds.is_finite() && self.time.cv >= 0.0) {
            return bad("reading time needs a positive mean and non-negative cv".into());
        }
        if !(self.assist_effect > 0.0 && self.assist_effect <= 1.0) {
            return bad(format!("assist_effect {} outside (0, 1]", self.assist_effect));
        }
        if !(0.0..=1.0).contains(&self.overreliance) {
            return bad(format!("overreliance {} outside [0, 1]", self.overreliance));
        }
        if !(self.assist_time_factor > 0.0 && self.assist_time_factor.is_finite()) {
            return bad("assist_time_factor must be positive".into());
        }
        Ok(())
    }

    /// Same profile with every off-diagonal entry multiplied by `factor`.
    pub fn with_error_scale(&self, factor: f64) -> Self {
        let mut p = self.clone();
        for (t, row) in p.confusion.iter_mut().enumerate() {
            let mut off = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j != t {
                    *v *= factor;
                    off += *v;
                }
            }
            row[t] = 1.0 - off;
        }
        p
    }

    pub fn sensitivity(&self, d: Diagnosis) -> f64 {
        self.confusion[d.index()][d.index()]
    }

    /// Junior calibration: uniform per-class sensitivity
    /// 89.91% and 11.93 s per case.
    pub fn junior(name: &str) -> Self {
        let mut p = profile_from_rates(name, [0.8991; 3], TimeDistribution { mean_seconds: 11.93, cv: 0.5 })
            .expect("valid targets");
        p.assist_effect = 0.4;
        p.overreliance = 0.1;
        p.assist_time_factor = 5.31 / 11.93;
        p
    }

    /// Uniform per-class sensitivity 95.89% and 10.54 s per case.
    pub fn senior(name: &str) -> Self {
        let mut p = profile_from_rates(name, [0.9589; 3], TimeDistribution { mean_seconds: 10.54, cv: 0.5 })
            .expect("valid targets");
        p.assist_effect = 0.6;
        p.overreliance = 0.05;
        p
    }
}

/// Profile whose class-`t` row puts `sensitivity[t]` on the diagonal and
/// splits the rest evenly over the two wrong classes.
pub fn profile_from_rates(name: &str, sensitivity: [f64; 3], time: TimeDistribution) -> Result<ReaderProfile, SynthError> {
    if let Some(s) = sensitivity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(SynthError::Profile(format!("{name}: sensitivity target {s} outside [0, 1]")));
    }
    let mut confusion = [[0.0; 3]; 3];
    for (t, row) in confusion.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j == t { sensitivity[t] } else { (1.0 - sensitivity[t]) / 2.0 };
        }
    }
    let p = ReaderProfile {
        name: name.to_string(),
        confusion,
        time,
        assist_effect: 1.0,
        overreliance: 0.0,
        assist_time_factor: 1.0,
    };
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReaderResponse {
    pub diagnosis: Diagnosis,
    pub elapsed_seconds: f64,
    /// Whether the answer matches the shown recommendation; `None` when no
    /// recommendation was shown.
    pub followed_ai: Option<bool>,
}

fn draw_row<R: Rng>(rng: &mut R, row: &[f64; 3]) -> Diagnosis {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return Diagnosis::ALL[j];
        }
    }
    Diagnosis::ALL[row.iter().rposition(|&p| p > 0.0).unwrap_or(2)]
}

/// One read of one case. With a correct recommendation the error rates are
/// scaled by `assist_effect`; a wrong one is adopted with probability
/// `overreliance`, and otherwise the reader answers as unassisted.
pub fn simulate_reader(
    profile: &ReaderProfile,
    case_id: &str,
    truth: Diagnosis,
    assist: Option<Diagnosis>,
    seed: u64,
) -> ReaderResponse {
    let mut rng = id_rng(seed, "read", case_id);
    let unassisted = &profile.confusion[truth.index()];
    let diagnosis = match assist {
        None => draw_row(&mut rng, unassisted),
        Some(ai) if ai == truth => draw_row(&mut rng, &profile.with_error_scale(profile.assist_effect).confusion[truth.index()]),
        Some(ai) => {
            if rng.random::<f64>() < profile.overreliance {
                ai
            } else {
                draw_row(&mut rng, unassisted)
            }
        }
    };
    let scale = if assist.is_some() { profile.assist_time_factor } else { 1.0 };
    let elapsed_seconds = if profile.time.cv == 0.0 {
        profile.time.mean_seconds * scale
    } else {
        profile.time.lognormal(scale).sample(&mut rng)
    };
    ReaderResponse { diagnosis, elapsed_seconds, followed_ai: assist.map(|a| a == diagnosis) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_count_table_hits_mean() {
        let t = ViewCountTable::new(&ViewCountConfig::default()).unwrap();
        assert!((t.mean() - 5.0).abs() < 1e-9);
        let mut rng = stream_rng(1, &[]);
        for _ in 0..1000 {
            let n = t.sample(&mut rng);
            assert!((2..=26).contains(&n));
        }
    }

    #[test]
    fn unreachable_mean() {
        for mean in [1.5, 2.0, 26.0, 30.0] {
            let cfg = ViewCountConfig { mean, ..Default::default() };
            assert!(ViewCountTable::new(&cfg).is_err(), "mean {mean}");
        }
    }

    #[test]
    fn single_clp_case() {
        let cohort = generate_cohort(&CohortConfig::new(ClassCounts::new(0, 0, 1), 4)).unwrap();
        assert_eq!(cohort.len(), 1);
        let views: Vec<ViewLabel> = cohort[0].findings.images.iter().map(|i| i.top_view()).collect();
        assert!(views.contains(&ViewLabel::Clv) && views.contains(&ViewLabel::Capv));
        assert_eq!(cohort[0].case_id(), "C00001");
    }

    #[test]
    fn exact_counts_and_reproducible() {
        let cfg = CohortConfig::new(ClassCounts::new(40, 3, 7), 11);
        let a = generate_cohort_with(&cfg, Exec::Sequential).unwrap();
        let b = generate_cohort_with(&cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        for d in Diagnosis::ALL {
            assert_eq!(a.iter().filter(|c| c.truth == d).count(), cfg.counts.get(d));
        }
        for c in &a {
            c.findings.validate().unwrap();
            for img in &c.findings.images {
                img.validate().unwrap();
                for det in &img.detections {
                    let bb = det.rect.aabb();
                    assert!(bb.x1 >= 0.0 && bb.y1 >= 0.0 && bb.x2 <= FRAME && bb.y2 <= FRAME);
                }
            }
        }
    }

    #[test]
    fn bad_week_config() {
        let mut cfg = CohortConfig::new(ClassCounts::new(1, 0, 0), 0);
        cfg.weeks = WeekDistribution::Uniform { min: 20, max: 30 };
        assert!(generate_cohort(&cfg).is_err());
        cfg.weeks = WeekDistribution::Histogram { weeks: vec![(22, 0.0)] };
        assert!(generate_cohort(&cfg).is_err());
        cfg.weeks = WeekDistribution::Histogram { weeks: vec![(22, 1.0), (23, 0.0)] };
        let c = generate_cohort(&cfg).unwrap();
        assert_eq!(c[0].findings.gestational_week, 22);
    }

    #[test]
    fn identity_reader_always_right() {
        let p = profile_from_rates("r", [1.0; 3], TimeDistribution { mean_seconds: 5.0, cv: 0.3 }).unwrap();
        for i in 0..200 {
            let truth = Diagnosis::ALL[i % 3];
            let r = simulate_reader(&p, &format!("c{i}"), truth, None, 3);
            assert_eq!(r.diagnosis, truth);
            assert!(r.elapsed_seconds > 0.0);
        }
    }

    #[test]
    fn profile_errors() {
        let t = TimeDistribution { mean_seconds: 5.0, cv: 0.3 };
        assert!(profile_from_rates("r", [1.2, 1.0, 1.0], t).is_err());
        let p = profile_from_rates("r", [0.9, 0.8, 0.7], t).unwrap();
        for (a, b) in p.confusion[1].iter().zip([0.1, 0.8, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut bad = p.clone();
        bad.assist_effect = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn overreliant_reader_follows_wrong_ai() {
        let mut p = profile_from_rates("r", [1.0; 3], TimeDistribution { mean_seconds: 5.0, cv: 0.0 }).unwrap();
        p.overreliance = 1.0;
        p.assist_time_factor = 0.5;
        let r = simulate_reader(&p, "c", Diagnosis::Control, Some(Diagnosis::Cl), 0);
        assert_eq!(r.diagnosis, Diagnosis::Cl);
        assert_eq!(r.followed_ai, Some(true));
        assert_eq!(r.elapsed_seconds, 2.5);
    }

    #[test]
    fn schematic_has_one_shape_per_detection() {
        let c = generate_cohort(&CohortConfig::new(ClassCounts::new(0, 0, 1), 4)).unwrap();
        let img = &c[0].findings.images[0];
        let svg = render_schematic(img);
        assert_eq!(svg.matches("<polygon").count(), img.detections.len());
    }
}
