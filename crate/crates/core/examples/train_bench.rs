//! Quick throughput probe: one epoch of encoder training on a
//! default-sized per-category slice, extrapolated.

use gazedec_core::encoder::{train_encoder, EncoderTrainConfig};
use gazedec_core::rng::Stream;
use gazedec_core::stimuli::{render_exemplar, ALL_CATEGORIES};
use std::time::Instant;

fn main() {
    let mut rng = Stream::new(1).split("bench");
    let mut data = Vec::new();
    for _ in 0..50 {
        for &c in &ALL_CATEGORIES {
            data.push((render_exemplar(c, rng.next_u64()).pixels, c));
        }
    }
    let (train, val) = data.split_at(400);
    let cfg = EncoderTrainConfig {
        epochs: 2,
        ..EncoderTrainConfig::default()
    };
    let t0 = Instant::now();
    let (_, hist) = train_encoder(train, val, &cfg, 7).unwrap();
    let dt = t0.elapsed();
    println!(
        "2 epochs x 400 samples: {:?}  (losses {:?}, val acc {:?})",
        dt, hist.epoch_loss, hist.epoch_val_accuracy
    );
    println!(
        "extrapolated 30 epochs x 5000: {:.1} s",
        dt.as_secs_f64() * (30.0 / 2.0) * (5000.0 / 400.0)
    );
}
