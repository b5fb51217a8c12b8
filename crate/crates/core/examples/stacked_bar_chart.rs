//! Draws the intelligibility stacked bar chart for three made-up systems.
//!
//! cargo run --example stacked_bar_chart -- [out.svg]

use std::path::PathBuf;

use percept_tts::evalkit::{fcr, format_percent, tmsr, write_stacked_bar_chart, ScoreHistogram};

fn main() -> percept_tts::Result<()> {
    let path = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "intelligibility.svg".into()));
    let tables = vec![
        ("ground truth".to_string(), ScoreHistogram::new([0, 2, 4, 30, 464])),
        ("baseline".to_string(), ScoreHistogram::new([20, 40, 98, 150, 192])),
        ("perceptual".to_string(), ScoreHistogram::new([6, 18, 61, 170, 245])),
    ];
    for (name, hist) in &tables {
        let t = tmsr(hist).map_or("n/a".into(), format_percent);
        println!("{name:<13} fcr={} tmsr={t}", format_percent(fcr(hist)?));
    }
    write_stacked_bar_chart(&tables, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
