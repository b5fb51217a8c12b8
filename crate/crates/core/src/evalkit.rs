//! Evaluation metrics: phone error rate, MOS aggregation with Student-t
//! confidence intervals, paired t-tests, intelligibility ratios and the
//! stacked bar chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{MelSpectrogram, RatingRecord, RatingTest};
use crate::error::{Error, Result};
use crate::stats;

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Phone error rate in percent. Insertions can push it above 100.
pub fn per<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("PER needs a non-empty reference"));
    }
    Ok(100.0 * edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceClass {
    Long,
    Short,
}

impl std::str::FromStr for SentenceClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "long" => Ok(Self::Long),
            "short" => Ok(Self::Short),
            other => Err(format!("class must be long or short, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerPair {
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub class: SentenceClass,
}

/// Pooled counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerCounts {
    pub pairs: usize,
    pub edits: usize,
    pub reference_phones: usize,
}

impl PerCounts {
    fn add(&mut self, edits: usize, len: usize) {
        self.pairs += 1;
        self.edits += edits;
        self.reference_phones += len;
    }

    /// `100 * edits / reference phones`, absent for an empty class.
    pub fn per(&self) -> Option<f64> {
        (self.reference_phones > 0).then(|| 100.0 * self.edits as f64 / self.reference_phones as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerResult {
    pub long_per: Option<f64>,
    pub short_per: Option<f64>,
    pub overall_per: f64,
    pub long: PerCounts,
    pub short: PerCounts,
}

/// Corpus-level PER: edits and reference lengths are summed within each
/// class before dividing.
pub fn per_breakdown(pairs: &[PerPair]) -> Result<PerResult> {
    if pairs.is_empty() {
        return Err(Error::invalid("PER breakdown needs at least one pair"));
    }
    let mut long = PerCounts::default();
    let mut short = PerCounts::default();
    for pair in pairs {
        if pair.reference.is_empty() {
            return Err(Error::invalid("PER needs a non-empty reference"));
        }
        let edits = edit_distance(&pair.reference, &pair.hypothesis);
        match pair.class {
            SentenceClass::Long => long.add(edits, pair.reference.len()),
            SentenceClass::Short => short.add(edits, pair.reference.len()),
        }
    }
    let overall = 100.0 * (long.edits + short.edits) as f64 / (long.reference_phones + short.reference_phones) as f64;
    Ok(PerResult {
        long_per: long.per(),
        short_per: short.per(),
        overall_per: overall,
        long,
        short,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosSummary {
    pub mean: f64,
    /// `t(0.975, n-1) * s / sqrt(n)`; absent for a single score.
    pub ci95_halfwidth: Option<f64>,
    pub n: usize,
}

pub fn mos_aggregate(scores: &[f64]) -> Result<MosSummary> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty score list"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::non_finite("MOS score"));
    }
    let n = scores.len();
    let ci95_halfwidth =
        (n > 1).then(|| stats::t_critical(0.05, (n - 1) as f64) * stats::sample_std(scores) / (n as f64).sqrt());
    Ok(MosSummary {
        mean: stats::mean(scores),
        ci95_halfwidth,
        n,
    })
}

/// Counts of intelligibility scores 1 to 5.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub counts: [u64; 5],
}

impl ScoreHistogram {
    pub fn new(counts: [u64; 5]) -> Self {
        Self { counts }
    }

    /// Tallies integer scores; anything outside 1..=5 is rejected.
    pub fn from_scores(scores: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut counts = [0u64; 5];
        for s in scores {
            if s.fract() != 0.0 || !(1.0..=5.0).contains(&s) {
                return Err(Error::invalid(format!("intelligibility score {s} is not an integer in 1..=5")));
            }
            counts[s as usize - 1] += 1;
        }
        Ok(Self { counts })
    }

    /// Count of score `s` (1-based).
    pub fn count(&self, s: usize) -> u64 {
        self.counts[s - 1]
    }

    pub fn n_total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Fully-conveyed ratio `(N4 + N5) / N`.
pub fn fcr(hist: &ScoreHistogram) -> Result<f64> {
    let n = hist.n_total();
    if n == 0 {
        return Err(Error::invalid("FCR of an empty histogram"));
    }
    Ok((hist.count(4) + hist.count(5)) as f64 / n as f64)
}

/// "Though makes sense" ratio `N3 / (N1 + N2 + N3)`; absent when no score
/// is at or below 3.
pub fn tmsr(hist: &ScoreHistogram) -> Option<f64> {
    let low = hist.count(1) + hist.count(2) + hist.count(3);
    (low > 0).then(|| hist.count(3) as f64 / low as f64)
}

/// Two-sided p-value of the paired t-test, absent when the differences have
/// zero variance.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired t-test on lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("paired t-test input"));
    }
    let n = d.len() as f64;
    let sd = stats::sample_std(&d);
    if sd == 0.0 {
        return Ok(None);
    }
    let t = stats::mean(&d) / (sd / n.sqrt());
    Ok(Some(stats::t_two_sided_p(t, n - 1.0)))
}

/// One decimal place percentage: `0.494 -> "49.4%"`.
pub fn format_percent(ratio: f64) -> String {
    format!("{:.1}%", 100.0 * ratio)
}

const SCORE_COLORS: [&str; 5] = ["#d7191c", "#fdae61", "#ffffbf", "#a6d96a", "#1a9641"];
const LABEL_WIDTH: f64 = 140.0;
const BAR_WIDTH: f64 = 500.0;
const BAR_HEIGHT: f64 = 24.0;
const BAR_GAP: f64 = 10.0;
const MARGIN: f64 = 10.0;

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Horizontal stacked bars, one per system, segments ordered score 1 to 5
/// with widths proportional to counts.
pub fn stacked_bar_chart(tables: &[(String, ScoreHistogram)]) -> Result<String> {
    if tables.is_empty() {
        return Err(Error::invalid("chart needs at least one system"));
    }
    if let Some((name, _)) = tables.iter().find(|(_, h)| h.n_total() == 0) {
        return Err(Error::invalid(format!("system {name} has an empty histogram")));
    }
    let bars_height = tables.len() as f64 * (BAR_HEIGHT + BAR_GAP);
    let legend_y = MARGIN + bars_height + 10.0;
    let width = LABEL_WIDTH + BAR_WIDTH + 2.0 * MARGIN;
    let height = legend_y + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##);
    for (row, (name, hist)) in tables.iter().enumerate() {
        let y = MARGIN + row as f64 * (BAR_HEIGHT + BAR_GAP);
        let total = hist.n_total() as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{}</text>"#,
            LABEL_WIDTH + MARGIN - 6.0,
            y + BAR_HEIGHT * 0.7,
            escape_xml(name)
        );
        let mut x = LABEL_WIDTH + MARGIN;
        for (s, &count) in hist.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let w = BAR_WIDTH * count as f64 / total;
            let _ = writeln!(
                svg,
                r#"<rect class="segment" data-system="{}" data-score="{}" data-count="{count}" x="{x:.3}" y="{y:.3}" width="{w:.3}" height="{BAR_HEIGHT}" fill="{}"/>"#,
                escape_xml(name),
                s + 1,
                SCORE_COLORS[s]
            );
            x += w;
        }
    }
    for (s, color) in SCORE_COLORS.iter().enumerate() {
        let x = LABEL_WIDTH + MARGIN + s as f64 * 70.0;
        let _ = writeln!(
            svg,
            r#"<rect class="legend" data-score="{}" x="{x}" y="{legend_y}" width="12" height="12" fill="{color}"/>"#,
            s + 1
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12">score {}</text>"#,
            x + 16.0,
            legend_y + 11.0,
            s + 1
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_stacked_bar_chart(tables: &[(String, ScoreHistogram)], path: &Path) -> Result<()> {
    let svg = stacked_bar_chart(tables)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn parse_err(origin: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: origin.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn tab_lines(text: &str) -> impl Iterator<Item = (usize, &str, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            return None;
        }
        let (key, value) = line.split_once('\t').unwrap_or((line, ""));
        Some((i + 1, key, value))
    })
}

/// Parses `utt_id<TAB>space-separated phones` lines.
pub fn parse_phone_file(text: &str, origin: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (line, utt, phones) in tab_lines(text) {
        if utt.is_empty() {
            return Err(parse_err(origin, line, "missing utt_id"));
        }
        let phones: Vec<String> = phones.split_whitespace().map(str::to_owned).collect();
        if out.insert(utt.to_owned(), phones).is_some() {
            return Err(parse_err(origin, line, format!("duplicate utt_id {utt}")));
        }
    }
    Ok(out)
}

/// Parses `utt_id<TAB>long|short` lines.
pub fn parse_class_file(text: &str, origin: &Path) -> Result<BTreeMap<String, SentenceClass>> {
    let mut out = BTreeMap::new();
    for (line, utt, class) in tab_lines(text) {
        let class: SentenceClass = class.trim().parse().map_err(|m: String| parse_err(origin, line, m))?;
        if out.insert(utt.to_owned(), class).is_some() {
            return Err(parse_err(origin, line, format!("duplicate utt_id {utt}")));
        }
    }
    Ok(out)
}

/// Joins reference phones, hypothesis phones and classes by utterance.
/// Every hypothesis needs a reference and a class.
pub fn join_per_pairs(
    references: &BTreeMap<String, Vec<String>>,
    hypotheses: &BTreeMap<String, Vec<String>>,
    classes: &BTreeMap<String, SentenceClass>,
) -> Result<Vec<PerPair>> {
    hypotheses
        .iter()
        .map(|(utt, hyp)| {
            let reference = references.get(utt).ok_or_else(|| Error::Entry {
                utt_id: utt.clone(),
                message: "no reference phones".into(),
            })?;
            if reference.is_empty() {
                return Err(Error::Entry {
                    utt_id: utt.clone(),
                    message: "empty reference phones".into(),
                });
            }
            let class = *classes.get(utt).ok_or_else(|| Error::Entry {
                utt_id: utt.clone(),
                message: "no long/short class".into(),
            })?;
            Ok(PerPair {
                reference: reference.clone(),
                hypothesis: hyp.clone(),
                class,
            })
        })
        .collect()
}

/// Source of hypothesis phones for PER. Any recognizer can be plugged in.
pub trait PhoneRecognizer {
    fn recognize(&self, utt_id: &str, mel: &MelSpectrogram) -> Result<Vec<String>>;
}

/// Metrics for one system as written to the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mos_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mos_ci95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mos_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_mos_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_mos_ci95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_mos_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_overall: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_long: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_short: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intelligibility_counts: Option<[u64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fcr: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tmsr: Option<String>,
}

impl SystemMetrics {
    pub fn set_mos(&mut self, summary: &MosSummary) {
        self.mos_mean = Some(summary.mean);
        self.mos_ci95 = summary.ci95_halfwidth;
        self.mos_n = Some(summary.n);
    }

    /// Summary of MOS-predictor scores of synthesized speech.
    pub fn set_predicted_mos(&mut self, summary: &MosSummary) {
        self.predicted_mos_mean = Some(summary.mean);
        self.predicted_mos_ci95 = summary.ci95_halfwidth;
        self.predicted_mos_n = Some(summary.n);
    }

    /// PER values are already percentages.
    pub fn set_per(&mut self, result: &PerResult) {
        let pct = |v: f64| format!("{v:.1}%");
        self.per_overall = Some(pct(result.overall_per));
        self.per_long = result.long_per.map(pct);
        self.per_short = result.short_per.map(pct);
    }

    pub fn set_intelligibility(&mut self, hist: &ScoreHistogram) -> Result<()> {
        self.intelligibility_counts = Some(hist.counts);
        self.fcr = Some(format_percent(fcr(hist)?));
        self.tmsr = tmsr(hist).map(format_percent);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub system_a: String,
    pub system_b: String,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

/// The metric report: one table per system plus paired comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub systems: BTreeMap<String, SystemMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paired_t_tests: Vec<PairedComparison>,
}

impl MetricReport {
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| parse_err(origin, 0, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    /// Adds naturalness MOS, intelligibility histograms and pairwise
    /// t-tests (over per-utterance mean naturalness on shared utterances).
    pub fn add_ratings(&mut self, records: &[RatingRecord]) -> Result<()> {
        let mut natural: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut intel: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut per_utt: BTreeMap<&str, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
        for r in records {
            match r.test {
                RatingTest::Naturalness => {
                    natural.entry(&r.system_id).or_default().push(r.score);
                    let slot = per_utt.entry(&r.system_id).or_default().entry(&r.utt_id).or_default();
                    slot.0 += r.score;
                    slot.1 += 1;
                }
                RatingTest::Intelligibility => intel.entry(&r.system_id).or_default().push(r.score),
            }
        }
        for (system, scores) in &natural {
            self.systems.entry(system.to_string()).or_default().set_mos(&mos_aggregate(scores)?);
        }
        for (system, scores) in &intel {
            let hist = ScoreHistogram::from_scores(scores.iter().copied())?;
            self.systems.entry(system.to_string()).or_default().set_intelligibility(&hist)?;
        }
        let systems: Vec<&str> = per_utt.keys().copied().collect();
        for (i, a) in systems.iter().enumerate() {
            for b in &systems[i + 1..] {
                let (ua, ub) = (&per_utt[a], &per_utt[b]);
                let (xs, ys): (Vec<f64>, Vec<f64>) = ua
                    .iter()
                    .filter_map(|(utt, &(sa, na))| ub.get(utt).map(|&(sb, nb)| (sa / na as f64, sb / nb as f64)))
                    .unzip();
                if xs.len() < 2 {
                    continue;
                }
                self.paired_t_tests.push(PairedComparison {
                    system_a: a.to_string(),
                    system_b: b.to_string(),
                    n: xs.len(),
                    p_value: paired_t_test(&xs, &ys)?,
                });
            }
        }
        Ok(())
    }
}

/// Intelligibility histograms per system, for charting.
pub fn intelligibility_histograms(records: &[RatingRecord]) -> Result<Vec<(String, ScoreHistogram)>> {
    let mut scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.test == RatingTest::Intelligibility) {
        scores.entry(&r.system_id).or_default().push(r.score);
    }
    scores
        .into_iter()
        .map(|(s, v)| Ok((s.to_owned(), ScoreHistogram::from_scores(v)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phones(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn per_examples() {
        assert_eq!(per(&phones("a b c"), &phones("a b c")).unwrap(), 0.0);
        assert_eq!(per(&phones("a b c d"), &[]).unwrap(), 100.0);
        assert!((per(&phones("a b c"), &phones("a c")).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(per(&phones("a"), &phones("x y z")).unwrap(), 300.0);
        assert!(per::<String>(&[], &phones("a")).is_err());
    }

    #[test]
    fn breakdown_pools_and_reports_absent_classes() {
        let pairs = vec![PerPair {
            reference: phones("a b c d"),
            hypothesis: phones("a b d"),
            class: SentenceClass::Long,
        }];
        let r = per_breakdown(&pairs).unwrap();
        assert_eq!(r.long_per, Some(25.0));
        assert_eq!(r.overall_per, 25.0);
        assert_eq!(r.short_per, None);
    }

    #[test]
    fn mos_examples() {
        let s = mos_aggregate(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.ci95_halfwidth, s.n), (3.0, Some(0.0), 3));
        assert_eq!(mos_aggregate(&[4.0]).unwrap().ci95_halfwidth, None);
        assert!(mos_aggregate(&[]).is_err());
    }

    #[test]
    fn intelligibility_ratios() {
        assert_eq!(fcr(&ScoreHistogram::new([0, 0, 0, 0, 9])).unwrap(), 1.0);
        assert_eq!(fcr(&ScoreHistogram::new([9, 0, 0, 0, 0])).unwrap(), 0.0);
        assert!(fcr(&ScoreHistogram::default()).is_err());
        let h = ScoreHistogram::new([100, 53, 100, 147, 100]);
        assert_eq!(format_percent(fcr(&h).unwrap()), "49.4%");
        assert_eq!(tmsr(&ScoreHistogram::new([10, 0, 0, 3, 3])), Some(0.0));
        assert_eq!(tmsr(&ScoreHistogram::new([0, 0, 0, 3, 3])), None);
    }

    #[test]
    fn paired_t_undefined_for_constant_differences() {
        assert_eq!(paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert_eq!(paired_t_test(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn chart_single_solid_segment() {
        let svg = stacked_bar_chart(&[("A".into(), ScoreHistogram::new([0, 0, 0, 0, 4]))]).unwrap();
        assert_eq!(svg.matches(r#"class="segment""#).count(), 1);
        assert!(svg.contains(r#"width="500.000""#));
        assert!(stacked_bar_chart(&[]).is_err());
    }

    #[test]
    fn phone_file_errors_carry_line_numbers() {
        let err = parse_class_file("u1\tlong\nu2\tmedium\n", Path::new("c.tsv")).unwrap_err();
        assert!(err.to_string().starts_with("c.tsv:2:"), "{err}");
        let p = parse_phone_file("# header\nu1\ta b\nu2\t\n", Path::new("p.tsv")).unwrap();
        assert_eq!(p["u1"], phones("a b"));
        assert!(p["u2"].is_empty());
    }
}
