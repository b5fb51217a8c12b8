//! Prints the λ schedule and the blended loss it produces.
//!
//! cargo run --example lambda_schedule -- [lambda0] [decay] [lambda_min]

use percept_tts::perceptual::{combined_loss, perceptual_loss, LambdaSchedule};

fn main() -> percept_tts::Result<()> {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("schedule values must be numbers"))
        .collect();
    let schedule = match args[..] {
        [l0, decay, floor] => LambdaSchedule::new(l0, decay, floor)?,
        _ => LambdaSchedule::TRANSFORMER,
    };
    println!(
        "lambda0={} decay={} lambda_min={}",
        schedule.lambda0, schedule.decay_per_epoch, schedule.lambda_min
    );
    // A fixed conventional loss of 0.8 and predicted scores averaging 3.5.
    let l_per = perceptual_loss(&[3.2, 3.5, 3.8], 5.0)?;
    println!("{:>6} {:>10} {:>10}", "epoch", "lambda", "total");
    for epoch in [0, 1, 2, 5, 10, 25, 50, 75, 100, 200] {
        let lambda = schedule.lambda_at(epoch)?;
        println!("{epoch:>6} {lambda:>10.3} {:>10.5}", combined_loss(0.8, l_per, lambda)?);
    }
    Ok(())
}
