// Rough throughput probe: one training epoch + prediction at CIFAR shape.
use std::time::Instant;
use uefilter::data::{generate_synthetic, SynthSpec};
use uefilter::trainer::{train, ClassifierConfig, TrainItem};

fn main() {
    let n = 2000;
    let ds = generate_synthetic(&SynthSpec {
        num_samples: n,
        num_classes: 10,
        seed: 0,
        ..SynthSpec::default()
    })
    .unwrap();
    let items: Vec<TrainItem> = ds.samples().iter().map(TrainItem::from_record).collect();
    let config = ClassifierConfig {
        epochs: 1,
        ..ClassifierConfig::for_classes(10)
    };
    let t0 = Instant::now();
    let model = train(&items, ds.image_shape(), &config).unwrap();
    let train_dt = t0.elapsed();
    let images: Vec<&[f32]> = ds.samples().iter().map(|s| s.image.pixels()).collect();
    let t1 = Instant::now();
    let preds = model.predict(&images).unwrap();
    let pred_dt = t1.elapsed();
    println!(
        "epoch over {n}: {:.2}s ({:.1} img/s) | predict {n}: {:.2}s ({:.1} img/s) | first pred {}",
        train_dt.as_secs_f64(),
        n as f64 / train_dt.as_secs_f64(),
        pred_dt.as_secs_f64(),
        n as f64 / pred_dt.as_secs_f64(),
        preds[0]
    );
}
