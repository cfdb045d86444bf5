//! Whole-image translation, fine-structure preservation metrics,
//! small-structure detection scoring, quality-control filtering, and
//! latent-cluster export.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::networks::{
    discriminate_logit_graph, encode_graph, generate_graph, insert_bundle, stack_patches, Domain,
    ModelBundle,
};
use crate::patches::{extract_patches, make_grid, sample_random_patches, stitch};
use crate::phantom_data::{PhantomPair, PhantomSpec};
use crate::SeedStream;
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Translation direction between the two domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "1to2")]
    OneToTwo,
    #[serde(rename = "2to1")]
    TwoToOne,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::OneToTwo => Domain::D1,
            Direction::TwoToOne => Domain::D2,
        }
    }

    pub fn target(self) -> Domain {
        self.source().other()
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1to2" => Ok(Direction::OneToTwo),
            "2to1" => Ok(Direction::TwoToOne),
            other => Err(Error::config(format!(
                "direction must be 1to2 or 2to1, got '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::OneToTwo => "1to2",
            Direction::TwoToOne => "2to1",
        }
    }
}

/// A stitched whole-image translation with per-patch discriminator scores.
#[derive(Debug, Clone)]
pub struct TranslationResult {
    pub output: Array2<f64>,
    pub direction: Direction,
    pub stride: usize,
    pub patch_scores: Vec<f64>,
}

const FORWARD_CHUNK: usize = 128;

/// Deterministic batched inference: encode in the source domain, take the
/// most probable component's posterior mean, decode in the target domain.
/// Returns the decoded patches and the target-domain discriminator scores.
fn translate_patches(
    bundle: &ModelBundle,
    direction: Direction,
    patches: &[Array2<f64>],
) -> Result<(Vec<Array2<f64>>, Vec<f64>)> {
    let ps = bundle.spec.patch_size;
    let (k, d) = (bundle.spec.num_components, bundle.spec.latent_dim);
    let mut outputs = Vec::with_capacity(patches.len());
    let mut scores = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(FORWARD_CHUNK) {
        let mut tape = Tape::new();
        let bv = insert_bundle(&mut tape, bundle, false);
        let x = tape.constant(stack_patches(chunk)?);
        let q = encode_graph(&mut tape, &bv, direction.source(), x);
        let logits = tape
            .value(q.mixture_logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let means = tape
            .value(q.comp_means)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let mut z = Array2::<f64>::zeros((chunk.len(), d));
        for b in 0..chunk.len() {
            let row = logits.row(b);
            let best = (0..k)
                .max_by(|&i, &j| row[i].partial_cmp(&row[j]).unwrap())
                .unwrap();
            z.row_mut(b).assign(&means.slice(ndarray::s![b, best, ..]));
        }
        let zv = tape.constant(z.into_dyn());
        let out = generate_graph(&mut tape, &bv, direction.target(), zv);
        let out_arr = tape
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let logit = discriminate_logit_graph(&mut tape, &bv, direction.target(), out);
        for b in 0..chunk.len() {
            outputs.push(
                out_arr
                    .index_axis(Axis(0), b)
                    .index_axis(Axis(0), 0)
                    .to_owned(),
            );
            let l = tape.value(logit)[[b]].clamp(-36.0, 36.0);
            scores.push(1.0 / (1.0 + (-l).exp()));
        }
        debug_assert_eq!(outputs.last().unwrap().dim(), (ps, ps));
    }
    Ok((outputs, scores))
}

/// Tile, translate each patch deterministically, and stitch with blending.
pub fn translate_image(
    bundle: &ModelBundle,
    image: &Array2<f64>,
    direction: Direction,
    stride: usize,
) -> Result<TranslationResult> {
    bundle.validate()?;
    if !bundle.all_finite() {
        return Err(Error::Model("bundle contains non-finite parameters".into()));
    }
    let (h, w) = image.dim();
    let grid = make_grid(h, w, bundle.spec.patch_size, stride)?;
    let tiles = extract_patches(image, &grid)?;
    let (translated, patch_scores) = translate_patches(bundle, direction, &tiles)?;
    let output = stitch(&translated, &grid)?;
    Ok(TranslationResult {
        output,
        direction,
        stride,
        patch_scores,
    })
}

// ---------------------------------------------------------------------------
// Structure metrics
// ---------------------------------------------------------------------------

/// Detection/segmentation scores for tiny bright structures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub plaque_retention: f64,
    pub plaque_mae: f64,
    // raw counts so dice = 2tp/(2tp+fp+fn) stays recomputable
    pub tp_pixels: usize,
    pub pred_pixels: usize,
    pub gt_pixels: usize,
    pub pred_components: usize,
    pub gt_components: usize,
    pub matched_pred_components: usize,
    pub matched_gt_components: usize,
}

/// 8-connected components of a binary mask; returns pixel lists.
pub fn connected_components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut comps = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || seen[[r, c]] {
                continue;
            }
            let mut stack = vec![(r, c)];
            let mut pixels = Vec::new();
            seen[[r, c]] = true;
            while let Some((pr, pc)) = stack.pop() {
                pixels.push((pr, pc));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (pr as i64 + dr, pc as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask[[nr, nc]] && !seen[[nr, nc]] {
                            seen[[nr, nc]] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            comps.push(pixels);
        }
    }
    comps
}

/// Score a translated image against ground truth: threshold, extract
/// 8-connected components, match to ground-truth plaques by any-pixel
/// overlap. Component-level precision/recall, pixel-level Dice, per-plaque
/// peak-intensity retention, and MAE over plaque pixels vs the target image.
pub fn structure_metrics(
    translated: &Array2<f64>,
    ground_truth: &PhantomPair,
    direction: Direction,
    threshold: f64,
) -> Result<StructureMetrics> {
    if translated.dim() != ground_truth.plaque_mask.dim() {
        return Err(Error::contract(format!(
            "translated {:?} does not match masks {:?}",
            translated.dim(),
            ground_truth.plaque_mask.dim()
        )));
    }
    let gt_mask = ground_truth.plaque_mask.mapv(|x| x == 1);
    let pred_mask = translated.mapv(|x| x >= threshold);
    let gt_comps = connected_components(&gt_mask);
    let pred_comps = connected_components(&pred_mask);

    let matched_pred = pred_comps
        .iter()
        .filter(|comp| comp.iter().any(|&(r, c)| gt_mask[[r, c]]))
        .count();
    let matched_gt = gt_comps
        .iter()
        .filter(|comp| comp.iter().any(|&(r, c)| pred_mask[[r, c]]))
        .count();

    let tp_pixels = pred_mask
        .iter()
        .zip(gt_mask.iter())
        .filter(|(p, g)| **p && **g)
        .count();
    let pred_pixels = pred_mask.iter().filter(|&&p| p).count();
    let gt_pixels = gt_mask.iter().filter(|&&g| g).count();

    // undefined-as-0 conventions for empty denominators
    let precision = if pred_comps.is_empty() {
        0.0
    } else {
        matched_pred as f64 / pred_comps.len() as f64
    };
    let recall = if gt_comps.is_empty() {
        0.0
    } else {
        matched_gt as f64 / gt_comps.len() as f64
    };
    let dice = if pred_pixels + gt_pixels == 0 {
        0.0
    } else {
        2.0 * tp_pixels as f64 / (pred_pixels + gt_pixels) as f64
    };
    let retained = gt_comps
        .iter()
        .filter(|comp| {
            comp.iter()
                .map(|&(r, c)| translated[[r, c]])
                .fold(f64::NEG_INFINITY, f64::max)
                >= threshold
        })
        .count();
    let plaque_retention = if gt_comps.is_empty() {
        0.0
    } else {
        retained as f64 / gt_comps.len() as f64
    };
    let target_image = match direction {
        Direction::OneToTwo => &ground_truth.image_b,
        Direction::TwoToOne => &ground_truth.image_a,
    };
    let plaque_mae = if gt_pixels == 0 {
        0.0
    } else {
        let mut acc = 0.0;
        for ((r, c), &g) in gt_mask.indexed_iter() {
            if g {
                acc += (translated[[r, c]] - target_image[[r, c]]).abs();
            }
        }
        acc / gt_pixels as f64
    };

    Ok(StructureMetrics {
        precision,
        recall,
        dice,
        plaque_retention,
        plaque_mae,
        tp_pixels,
        pred_pixels,
        gt_pixels,
        pred_components: pred_comps.len(),
        gt_components: gt_comps.len(),
        matched_pred_components: matched_pred,
        matched_gt_components: matched_gt,
    })
}

/// Default detection threshold: midpoint between the organ and plaque
/// intensity ranges.
pub fn default_threshold(spec: &PhantomSpec) -> f64 {
    0.5 * (spec.organ_intensity.1 + spec.plaque_intensity.0)
}

// ---------------------------------------------------------------------------
// Quality control
// ---------------------------------------------------------------------------

/// Calibration for the quality scorer: average high-frequency energy of real
/// target-domain images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityRef {
    pub hf_mean: f64,
}

/// Mean squared 3x3-Laplacian response over the image interior.
pub fn high_frequency_energy(img: &Array2<f64>) -> f64 {
    let (h, w) = img.dim();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let lap = img[[r - 1, c]] + img[[r + 1, c]] + img[[r, c - 1]] + img[[r, c + 1]]
                - 4.0 * img[[r, c]];
            acc += lap * lap;
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

/// Build the scorer reference from real target-domain images.
pub fn quality_reference(real_images: &[Array2<f64>]) -> Result<QualityRef> {
    if real_images.is_empty() {
        return Err(Error::contract("quality_reference: no images"));
    }
    let hf_mean =
        real_images.iter().map(high_frequency_energy).sum::<f64>() / real_images.len() as f64;
    Ok(QualityRef { hf_mean })
}

/// Quality score in [0,1]: mean patch-discriminator realness in the target
/// domain, damped by normalized excess high-frequency energy relative to the
/// real-domain average.
pub fn quality_score(
    bundle: &ModelBundle,
    image: &Array2<f64>,
    target_domain: Domain,
    qref: &QualityRef,
    stride: usize,
) -> Result<f64> {
    let (h, w) = image.dim();
    let grid = make_grid(h, w, bundle.spec.patch_size, stride)?;
    let tiles = extract_patches(image, &grid)?;
    let mut scores = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(FORWARD_CHUNK) {
        let mut tape = Tape::new();
        let bv = insert_bundle(&mut tape, bundle, false);
        let x = tape.constant(stack_patches(chunk)?);
        let logit = discriminate_logit_graph(&mut tape, &bv, target_domain, x);
        for b in 0..chunk.len() {
            let l = tape.value(logit)[[b]].clamp(-36.0, 36.0);
            scores.push(1.0 / (1.0 + (-l).exp()));
        }
    }
    let mean_d = scores.iter().sum::<f64>() / scores.len() as f64;
    let hf = high_frequency_energy(image);
    let excess = (hf / qref.hf_mean.max(1e-12) - 1.0).max(0.0);
    Ok((mean_d * (-excess).exp()).clamp(0.0, 1.0))
}

/// Keep images scoring at or above the threshold. Returns `(kept, removed)`
/// index lists; together they partition the input exactly.
pub fn filter_synthetic(
    bundle: &ModelBundle,
    images: &[Array2<f64>],
    target_domain: Domain,
    qref: &QualityRef,
    stride: usize,
    score_threshold: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let s = quality_score(bundle, img, target_domain, qref, stride)?;
        if s >= score_threshold {
            kept.push(i);
        } else {
            removed.push(i);
        }
    }
    Ok((kept, removed))
}

// ---------------------------------------------------------------------------
// Latent cluster export
// ---------------------------------------------------------------------------

/// One row of the cluster dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRow {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub component: usize,
    pub entropy: f64,
    pub z: Vec<f64>,
}

/// Sample random patches, encode them, and export (image id, anchor, argmax
/// component, mixture entropy, that component's posterior mean) as CSV.
pub fn latent_cluster_dump(
    bundle: &ModelBundle,
    images: &[Array2<f64>],
    domain: Domain,
    n_patches: usize,
    rng: &mut SeedStream,
    out_path: &Path,
) -> Result<Vec<ClusterRow>> {
    if images.is_empty() || n_patches == 0 {
        return Err(Error::contract("latent_cluster_dump: nothing to sample"));
    }
    let ps = bundle.spec.patch_size;
    let (k, d) = (bundle.spec.num_components, bundle.spec.latent_dim);
    let mut picks = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let img_idx = rng.random_range(0..images.len());
        let (patch, anchor) = sample_random_patches(&images[img_idx], 1, ps, rng)?.pop().unwrap();
        picks.push((img_idx, anchor, patch));
    }
    let mut rows = Vec::with_capacity(n_patches);
    for chunk in picks.chunks(FORWARD_CHUNK) {
        let patches: Vec<Array2<f64>> = chunk.iter().map(|(_, _, p)| p.clone()).collect();
        let mut tape = Tape::new();
        let bv = insert_bundle(&mut tape, bundle, false);
        let x = tape.constant(stack_patches(&patches)?);
        let q = encode_graph(&mut tape, &bv, domain, x);
        let logits = tape
            .value(q.mixture_logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let means: Array3<f64> = tape
            .value(q.comp_means)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        for (b, (img_idx, (r, c), _)) in chunk.iter().enumerate() {
            let w = crate::gmm_latent::softmax1(&logits.row(b));
            let component = (0..k)
                .max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap())
                .unwrap();
            let entropy = -w
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>();
            let z = (0..d).map(|j| means[[b, component, j]]).collect();
            rows.push(ClusterRow {
                image: *img_idx,
                row: *r,
                col: *c,
                component,
                entropy,
                z,
            });
        }
    }
    let mut file = std::fs::File::create(out_path)?;
    write!(file, "image,row,col,component,entropy")?;
    for j in 0..d {
        write!(file, ",z{j}")?;
    }
    writeln!(file)?;
    for row in &rows {
        write!(
            file,
            "{},{},{},{},{}",
            row.image, row.row, row.col, row.component, row.entropy
        )?;
        for v in &row.z {
            write!(file, ",{v}")?;
        }
        writeln!(file)?;
    }
    Ok(rows)
}
