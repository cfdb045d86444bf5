//! Scratch diagnostic for translation failure modes.

use gmm_translate::autodiff::Tape;
use gmm_translate::eval::{translate_image, Direction};
use gmm_translate::gmm_latent::softmax1;
use gmm_translate::losses::KlEstimator;
use gmm_translate::networks::{encode, insert_bundle, encode_graph, generate_graph, stack_patches, Domain};
use gmm_translate::patches::{extract_patches, make_grid, stitch};
use gmm_translate::phantom_data::load_dataset;
use gmm_translate::training::{train, TrainConfig};

fn stats(name: &str, img: &ndarray::Array2<f64>) {
    let mut v: Vec<f64> = img.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    println!(
        "  {name}: min {:.3} p25 {:.3} med {:.3} p75 {:.3} max {:.3} mean {:.3}",
        v[0],
        v[n / 4],
        v[n / 2],
        v[3 * n / 4],
        v[n - 1],
        img.mean().unwrap()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let k: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let d: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lambda0: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr_disc: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let widths: Vec<usize> = args
        .get(6)
        .map(|w| w.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![8, 16, 32]);
    let lambda1: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr_gen: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(0);

    let dataset = load_dataset(std::path::Path::new("/tmp/calib_ds")).unwrap();
    let mut cfg = TrainConfig {
        k,
        latent_dim: d,
        patch_size: 32,
        channel_widths: widths,
        patches_per_image: 4,
        batch_size: batch,
        steps,
        learning_rate_gen: lr_gen,
        learning_rate_disc: lr_disc,
        kl_estimator: KlEstimator::Matched,
        temperature_end: 0.1,
        seed,
        checkpoint_interval: 100000,
        ..TrainConfig::default()
    };
    cfg.weights.lambda0 = lambda0;
    cfg.weights.lambda1 = lambda1;
    cfg.weights.lambda3 = lambda1;
    println!("cfg: K={k} d={d} l0={lambda0} l1={lambda1} lrG={lr_gen} lrD={lr_disc} batch={batch} seed={seed} widths={:?} steps={steps}", cfg.channel_widths);

    let artifacts = train(&dataset, &cfg, None, None).unwrap();
    let bundle = &artifacts.checkpoint.bundle;
    let pair = &dataset.test[0];

    stats("input a", &pair.image_a);
    stats("target b", &pair.image_b);

    // (1) mixture concentration over 64 random-ish patches
    let grid = make_grid(256, 256, 32, 32).unwrap();
    let tiles = extract_patches(&pair.image_a, &grid).unwrap();
    let mut max_w = Vec::new();
    for t in &tiles {
        let q = encode(bundle, Domain::D1, t).unwrap();
        let w = softmax1(&q.mixture_logits.view());
        max_w.push(w.fold(0.0f64, |m, &x| m.max(x)));
    }
    max_w.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "  assignment max-weight: min {:.3} med {:.3} max {:.3}",
        max_w[0],
        max_w[max_w.len() / 2],
        max_w[max_w.len() - 1]
    );

    // (2) same-domain reconstruction through the inference convention
    let mut recon_tiles = Vec::new();
    for chunk in tiles.chunks(64) {
        let mut tape = Tape::new();
        let bv = insert_bundle(&mut tape, bundle, false);
        let x = tape.constant(stack_patches(chunk).unwrap());
        let q = encode_graph(&mut tape, &bv, Domain::D1, x);
        let logits = tape.value(q.mixture_logits).clone();
        let means = tape.value(q.comp_means).clone();
        let (kk, dd) = (cfg.k, cfg.latent_dim);
        let mut z = ndarray::Array2::<f64>::zeros((chunk.len(), dd));
        for b in 0..chunk.len() {
            let row: Vec<f64> = (0..kk).map(|k| logits[[b, k]]).collect();
            let best = (0..kk).max_by(|&i, &j| row[i].partial_cmp(&row[j]).unwrap()).unwrap();
            for di in 0..dd {
                z[[b, di]] = means[[b, best, di]];
            }
        }
        let zv = tape.constant(z.into_dyn());
        let out = generate_graph(&mut tape, &bv, Domain::D1, zv);
        let arr = tape.value(out).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        for b in 0..chunk.len() {
            recon_tiles.push(arr.index_axis(ndarray::Axis(0), b).index_axis(ndarray::Axis(0), 0).to_owned());
        }
    }
    let recon = stitch(&recon_tiles, &grid).unwrap();
    let mae = (&recon - &pair.image_a).mapv(f64::abs).mean().unwrap();
    stats("recon a->a (inference path)", &recon);
    println!("  recon MAE vs input: {mae:.4}");

    // (3) translation output stats
    let tr = translate_image(bundle, &pair.image_a, Direction::OneToTwo, 16).unwrap();
    stats("translated 1->2", &tr.output);
    println!(
        "  mean patch realness: {:.3}",
        tr.patch_scores.iter().sum::<f64>() / tr.patch_scores.len() as f64
    );

    // (3b) vessel + retention quick check over 5 test pairs
    let thr = gmm_translate::eval::default_threshold(&gmm_translate::phantom_data::PhantomSpec::default());
    let (mut vf, mut ret, mut dice) = (0.0, 0.0, 0.0);
    for pair in dataset.test.iter().take(5) {
        let tr = translate_image(bundle, &pair.image_a, Direction::OneToTwo, 16).unwrap();
        let m = gmm_translate::eval::structure_metrics(&tr.output, pair, Direction::OneToTwo, thr).unwrap();
        ret += m.plaque_retention;
        dice += m.dice;
        let (mut ma, mut mb, mut mt, mut n) = (0.0, 0.0, 0.0, 0usize);
        for ((r, c), &lab) in pair.organ_masks.indexed_iter() {
            if lab == gmm_translate::phantom_data::LABEL_VESSEL && pair.plaque_mask[[r, c]] == 0 {
                ma += pair.image_a[[r, c]];
                mb += pair.image_b[[r, c]];
                mt += tr.output[[r, c]];
                n += 1;
            }
        }
        vf += (mt / n as f64 - ma / n as f64) / (mb / n as f64 - ma / n as f64);
    }
    println!("  5-pair: retention {:.3} dice {:.3} vessel-frac {:.3}", ret / 5.0, dice / 5.0, vf / 5.0);

    // (3b2) domain-2 self-reconstruction through the inference path
    {
        let tiles_b = extract_patches(&pair.image_b, &grid).unwrap();
        let mut recon_tiles = Vec::new();
        for chunk in tiles_b.chunks(64) {
            let mut tape = Tape::new();
            let bv = insert_bundle(&mut tape, bundle, false);
            let x = tape.constant(stack_patches(chunk).unwrap());
            let q = encode_graph(&mut tape, &bv, Domain::D2, x);
            let logits = tape.value(q.mixture_logits).clone();
            let means = tape.value(q.comp_means).clone();
            let (kk, dd) = (cfg.k, cfg.latent_dim);
            let mut z = ndarray::Array2::<f64>::zeros((chunk.len(), dd));
            for b in 0..chunk.len() {
                let row: Vec<f64> = (0..kk).map(|k| logits[[b, k]]).collect();
                let best = (0..kk).max_by(|&i, &j| row[i].partial_cmp(&row[j]).unwrap()).unwrap();
                for di in 0..dd {
                    z[[b, di]] = means[[b, best, di]];
                }
            }
            let zv = tape.constant(z.into_dyn());
            let out = generate_graph(&mut tape, &bv, Domain::D2, zv);
            let arr = tape.value(out).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
            for b in 0..chunk.len() {
                recon_tiles.push(arr.index_axis(ndarray::Axis(0), b).index_axis(ndarray::Axis(0), 0).to_owned());
            }
        }
        let recon_b = stitch(&recon_tiles, &grid).unwrap();
        let mae_b = (&recon_b - &pair.image_b).mapv(f64::abs).mean().unwrap();
        stats("recon b->b (inference path)", &recon_b);
        println!("  recon b MAE vs target: {mae_b:.4}");
    }

    // (3c) encoder/generator divergence on identical content
    {
        let mut code_diff = 0.0;
        let mut route_agree = 0usize;
        let mut g_diff = 0.0;
        let mut n = 0usize;
        for t in tiles.iter().take(32) {
            let q1 = encode(bundle, Domain::D1, t).unwrap();
            let q2 = encode(bundle, Domain::D2, t).unwrap();
            let b1 = {
                let w = softmax1(&q1.mixture_logits.view());
                (0..w.len()).max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap()).unwrap()
            };
            let b2 = {
                let w = softmax1(&q2.mixture_logits.view());
                (0..w.len()).max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap()).unwrap()
            };
            if b1 == b2 { route_agree += 1; }
            code_diff += (&q1.comp_means.row(b1) - &q2.comp_means.row(b2)).mapv(f64::abs).mean().unwrap();
            // render E_1's chosen mean through both generators
            let z = gmm_translate::gmm_latent::LatentSample {
                z: q1.comp_means.row(b1).to_owned(),
                soft_assignment: ndarray::Array1::from_elem(cfg.k, 1.0 / cfg.k as f64),
                temperature: 1.0,
            };
            let r1 = gmm_translate::networks::generate(bundle, Domain::D1, &z).unwrap();
            let r2 = gmm_translate::networks::generate(bundle, Domain::D2, &z).unwrap();
            g_diff += (&r1 - &r2).mapv(f64::abs).mean().unwrap();
            n += 1;
        }
        println!(
            "  E1-vs-E2 mean-code |diff| {:.4}, route agreement {}/{}, G1-vs-G2 render |diff| {:.4}",
            code_diff / n as f64, route_agree, n, g_diff / n as f64
        );
    }

    // (4) domain variances
    println!(
        "  domain lv1 range [{:.2}, {:.2}], prior lv range [{:.2}, {:.2}]",
        bundle.domain_log_vars_1.fold(f64::INFINITY, |m, &x| m.min(x)),
        bundle.domain_log_vars_1.fold(f64::NEG_INFINITY, |m, &x| m.max(x)),
        bundle.prior.log_vars.fold(f64::INFINITY, |m, &x| m.min(x)),
        bundle.prior.log_vars.fold(f64::NEG_INFINITY, |m, &x| m.max(x)),
    );
}
