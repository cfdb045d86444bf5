//! Scratch calibration harness (not part of the shipped API).

use gmm_translate::eval::{default_threshold, structure_metrics, translate_image, Direction};
use gmm_translate::losses::KlEstimator;
use gmm_translate::phantom_data::{build_dataset, load_dataset, PhantomSpec};
use gmm_translate::training::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let k: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let d: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lambda1: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let ds_dir = std::path::Path::new("/tmp/calib_ds");
    if !ds_dir.join("manifest.json").exists() {
        println!("building dataset...");
        let t = Instant::now();
        build_dataset(&PhantomSpec::default(), 70, 70, 5, 20, ds_dir, 1).unwrap();
        println!("dataset built in {:.1}s", t.elapsed().as_secs_f64());
    }
    let dataset = load_dataset(ds_dir).unwrap();

    let mut cfg = TrainConfig {
        k,
        latent_dim: d,
        patch_size: 32,
        channel_widths: vec![8, 16, 32],
        patches_per_image: 4,
        batch_size: 4,
        steps,
        learning_rate_gen: 1e-3,
        learning_rate_disc: 2e-3,
        kl_estimator: KlEstimator::Matched,
        seed,
        checkpoint_interval: 100000,
        ..TrainConfig::default()
    };
    cfg.weights.lambda1 = lambda1;
    cfg.weights.lambda3 = lambda1;

    let t = Instant::now();
    let artifacts = train(&dataset, &cfg, None, None).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    println!(
        "K={k} seed={seed} d={d} l1={lambda1}: {steps} steps in {train_secs:.1}s ({:.3}s/step)",
        train_secs / steps as f64
    );
    for i in [0, steps / 4, steps / 2, 3 * steps / 4, steps - 1] {
        let r = &artifacts.log[i].report;
        println!(
            "  step {:4}: vae {:6.1}/{:6.1} gan {:5.2}/{:5.2} cc {:6.1}/{:6.1} disc {:5.2}/{:5.2}",
            artifacts.log[i].step, r.vae_1, r.vae_2, r.gan_1, r.gan_2, r.cc_1, r.cc_2, r.disc_1, r.disc_2
        );
    }

    let t = Instant::now();
    let thr = default_threshold(&PhantomSpec::default());
    let mut retention = 0.0;
    let mut dice = 0.0;
    let mut vessel_frac = 0.0;
    for pair in &dataset.test {
        let tr = translate_image(&artifacts.checkpoint.bundle, &pair.image_a, Direction::OneToTwo, 16).unwrap();
        let m = structure_metrics(&tr.output, pair, Direction::OneToTwo, thr).unwrap();
        retention += m.plaque_retention;
        dice += m.dice;
        // vessel enhancement progress: (mean_t - mean_a) / (mean_b - mean_a) on vessel pixels
        let (mut ma, mut mb, mut mt, mut n) = (0.0, 0.0, 0.0, 0usize);
        for ((r, c), &lab) in pair.organ_masks.indexed_iter() {
            if lab == gmm_translate::phantom_data::LABEL_VESSEL && pair.plaque_mask[[r, c]] == 0 {
                ma += pair.image_a[[r, c]];
                mb += pair.image_b[[r, c]];
                mt += tr.output[[r, c]];
                n += 1;
            }
        }
        let (ma, mb, mt) = (ma / n as f64, mb / n as f64, mt / n as f64);
        vessel_frac += (mt - ma) / (mb - ma);
    }
    let n = dataset.test.len() as f64;
    println!(
        "  eval ({:.1}s): retention {:.3}, dice {:.3}, vessel-shift fraction {:.3}",
        t.elapsed().as_secs_f64(),
        retention / n,
        dice / n,
        vessel_frac / n
    );
}
