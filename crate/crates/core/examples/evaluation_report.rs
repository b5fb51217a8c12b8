//! Builds a metric report from hand-written ratings and phone strings:
//! MOS with confidence intervals, PER by class, FCR/TMSR and a paired t-test.
//!
//! cargo run --example evaluation_report

use percept_tts::dataio::{RatingRecord, RatingTest};
use percept_tts::evalkit::{per_breakdown, MetricReport, PerPair, SentenceClass};

fn phones(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() -> percept_tts::Result<()> {
    let mut records = Vec::new();
    let natural = [("baseline", [3.0f64, 3.5, 2.5, 3.0, 4.0]), ("perceptual", [3.5, 4.0, 3.0, 3.5, 4.5])];
    for (system, scores) in natural {
        for (i, score) in scores.into_iter().enumerate() {
            for (test, value) in [(RatingTest::Naturalness, score), (RatingTest::Intelligibility, score.round())] {
                records.push(RatingRecord {
                    system_id: system.into(),
                    utt_id: format!("utt{i}"),
                    rater_id: "r0".into(),
                    test,
                    score: value,
                });
            }
        }
    }
    let mut report = MetricReport::default();
    report.add_ratings(&records)?;

    let pairs = [
        ("a b c d e f g h", "a b c d e f g", SentenceClass::Long),
        ("a b c", "a x c", SentenceClass::Short),
        ("d e f", "d e f", SentenceClass::Short),
    ];
    let pairs: Vec<PerPair> = pairs
        .iter()
        .map(|(r, h, class)| PerPair {
            reference: phones(r),
            hypothesis: phones(h),
            class: *class,
        })
        .collect();
    report.systems.entry("perceptual".into()).or_default().set_per(&per_breakdown(&pairs)?);
    print!("{}", report.to_text()?);
    Ok(())
}
