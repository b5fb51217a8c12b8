//! Extracts a log-mel spectrogram from a WAV file, or from a synthetic tone
//! when no path is given.
//!
//! cargo run --example mel_extraction -- [input.wav]

use percept_tts::dataio::{read_wav, MelConfig, MelExtractor, N_MELS};
use percept_tts::fixtures::{render_text, FIXTURE_SAMPLE_RATE};

fn main() -> percept_tts::Result<()> {
    let config = MelConfig::default();
    let (wave, sr) = match std::env::args().nth(1) {
        Some(path) => read_wav(std::path::Path::new(&path))?,
        None => (render_text("abc", 2000, 400), FIXTURE_SAMPLE_RATE),
    };
    let mel = MelExtractor::new(&config)?.extract(&wave, sr)?;
    println!(
        "{} samples at {sr} Hz -> {} frames x {N_MELS} bins (hop {})",
        wave.len(),
        mel.n_frames(),
        mel.hop_length()
    );
    let mean = mel.mean_frame();
    let loudest = (0..N_MELS).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap_or(0);
    println!("loudest bin on average: {loudest} ({:.2} log-energy)", mean[loudest]);
    let min = mel.as_slice().iter().copied().fold(f32::INFINITY, f32::min);
    println!("floor value: {min:.2} (config floor {:.2})", config.log_floor_value());
    Ok(())
}
