use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingTest {
    Naturalness,
    Intelligibility,
}

impl RatingTest {
    /// Naturalness uses half-point steps on 1..=5, intelligibility whole points.
    pub fn accepts(self, score: f64) -> bool {
        if !(1.0..=5.0).contains(&score) {
            return false;
        }
        match self {
            RatingTest::Naturalness => (score * 2.0).fract() == 0.0,
            RatingTest::Intelligibility => score.fract() == 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub system_id: String,
    pub utt_id: String,
    pub rater_id: String,
    pub test: RatingTest,
    pub score: f64,
}

/// Parses a ratings CSV with header `system_id,utt_id,rater_id,test,score`.
pub fn parse_ratings(text: &str, origin: &Path) -> Result<Vec<RatingRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let expected = ["system_id", "utt_id", "rater_id", "test", "score"];
    if !headers.is_empty() && headers.iter().collect::<Vec<_>>() != expected {
        return Err(err(1, format!("expected header {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for result in reader.deserialize::<RatingRecord>() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = out.len() + 2;
        if !record.test.accepts(record.score) {
            return Err(err(
                line,
                format!("score {} out of range for {:?}", record.score, record.test),
            ));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text, path)
}

pub fn write_ratings(path: &Path, records: &[RatingRecord]) -> Result<()> {
    let mut out = String::from("system_id,utt_id,rater_id,test,score\n");
    for r in records {
        let test = match r.test {
            RatingTest::Naturalness => "naturalness",
            RatingTest::Intelligibility => "intelligibility",
        };
        out.push_str(&format!("{},{},{},{},{}\n", r.system_id, r.utt_id, r.rater_id, test, r.score));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-utterance MOS: the mean naturalness score over all raters.
pub fn mos_labels(records: &[RatingRecord]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.test == RatingTest::Naturalness) {
        let slot = acc.entry(r.utt_id.clone()).or_default();
        slot.0 += r.score;
        slot.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "system_id,utt_id,rater_id,test,score\n";

    fn parse(body: &str) -> Result<Vec<RatingRecord>> {
        parse_ratings(&format!("{HEADER}{body}"), Path::new("r.csv"))
    }

    #[test]
    fn empty_table() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn naturalness_half_steps_only() {
        assert!(parse("s,u,r,naturalness,4.5\n").is_ok());
        let err = parse("s,u,r,naturalness,4.5\ns,u,r2,naturalness,5.5\n").unwrap_err();
        assert!(err.to_string().starts_with("r.csv:3:"), "{err}");
        assert!(parse("s,u,r,naturalness,4.25\n").is_err());
    }

    #[test]
    fn intelligibility_whole_points_only() {
        assert!(parse("s,u,r,intelligibility,3\n").is_ok());
        assert!(parse("s,u,r,intelligibility,3.5\n").is_err());
        assert!(parse("s,u,r,intelligibility,0\n").is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("s,u,r,naturalness,4\ns,u,r,loudness,4\n").unwrap_err();
        assert!(err.to_string().starts_with("r.csv:3:"), "{err}");
        assert!(parse_ratings("a,b\n1,2\n", Path::new("x")).is_err());
    }

    #[test]
    fn five_hundred_rows_for_one_system() {
        let mut body = String::new();
        for u in 0..25 {
            for r in 0..20 {
                body.push_str(&format!("sys,utt{u},rater{r},naturalness,{}\n", 1.0 + ((u + r) % 9) as f64 * 0.5));
            }
        }
        assert_eq!(parse(&body).unwrap().len(), 500);
    }

    #[test]
    fn labels_average_naturalness_only() {
        let recs = parse("s,a,r1,naturalness,4\ns,a,r2,naturalness,3\ns,a,r3,intelligibility,1\n").unwrap();
        assert_eq!(mos_labels(&recs)["a"], 3.5);
    }
}
