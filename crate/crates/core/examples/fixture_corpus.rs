//! Writes the synthetic tone corpus used by the pipeline smoke test.
//!
//! cargo run --example fixture_corpus -- <dir> [n_utts] [seed]

use std::path::PathBuf;

use percept_tts::fixtures::write_fixture_corpus;

fn main() -> percept_tts::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "fixture-corpus".into()));
    let n: usize = args.next().map_or(20, |s| s.parse().expect("n_utts must be an integer"));
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed must be an integer"));
    let corpus = write_fixture_corpus(&root, n, seed)?;
    println!("tts manifest       {}", corpus.tts_manifest.display());
    println!("mos manifest       {}", corpus.mos_manifest.display());
    println!("mos ratings        {}", corpus.mos_ratings.display());
    println!("eval ratings       {}", corpus.eval_ratings.display());
    println!("per reference      {}", corpus.per_reference.display());
    for (system, path) in &corpus.per_hypotheses {
        println!("per hyp {system:<11}{}", path.display());
    }
    println!("classes            {}", corpus.classes.display());
    Ok(())
}
