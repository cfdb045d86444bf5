//! Synthetic two-domain dataset generator standing in for non-contrast /
//! contrast-enhanced scans, with ground-truth masks enabling quantitative
//! fine-structure evaluation; plus image and mask file I/O.
//!
//! Each phantom is a body ellipse with smooth organ blobs, a sinuous vessel,
//! and a few tiny bright plaques sitting on or near the vessel. Domain 2 is
//! domain 1 with an additive intensity shift on vessel pixels; plaques keep
//! the same intensity in both domains. Noise is drawn independently per
//! domain.

use crate::error::{Error, Result};
use crate::SeedStream;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_BODY: u8 = 1;
pub const LABEL_VESSEL: u8 = 2;
/// Organ blobs are labeled LABEL_ORGAN_BASE, LABEL_ORGAN_BASE+1, ...
pub const LABEL_ORGAN_BASE: u8 = 3;

const BACKGROUND_INTENSITY: f64 = 0.02;
const BODY_INTENSITY: f64 = 0.25;
/// Vessel half-width in pixels.
const VESSEL_RADIUS: f64 = 2.0;

/// Generator parameters. Ranges are inclusive `(lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub num_organs: (usize, usize),
    pub organ_intensity: (f64, f64),
    /// Additive contrast enhancement applied to vessel pixels in domain 2 only.
    pub vessel_intensity_shift: f64,
    pub num_plaques: (usize, usize),
    /// Plaque radius range in pixels (structures span ~2r pixels).
    pub plaque_radius: (f64, f64),
    pub plaque_intensity: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 256,
            num_organs: (3, 6),
            organ_intensity: (0.20, 0.50),
            vessel_intensity_shift: 0.15,
            num_plaques: (1, 3),
            plaque_radius: (1.0, 2.0),
            plaque_intensity: (0.90, 1.00),
            noise_sigma: 0.01,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::config("image_size must be >= 32"));
        }
        let ok_range = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok_range(self.organ_intensity.0, self.organ_intensity.1)
            || self.organ_intensity.0 < 0.0
            || self.organ_intensity.1 > 1.0
        {
            return Err(Error::config("organ_intensity must be a range within [0,1]"));
        }
        if !ok_range(self.plaque_intensity.0, self.plaque_intensity.1)
            || self.plaque_intensity.0 < 0.0
            || self.plaque_intensity.1 > 1.0
        {
            return Err(Error::config("plaque_intensity must be a range within [0,1]"));
        }
        // plaques must be the brightest structures
        if self.plaque_intensity.0 <= self.organ_intensity.1 {
            return Err(Error::config(
                "plaque_intensity range must lie strictly above organ_intensity range",
            ));
        }
        if self.num_organs.0 > self.num_organs.1 || self.num_plaques.0 > self.num_plaques.1 {
            return Err(Error::config("count ranges must satisfy lo <= hi"));
        }
        if !ok_range(self.plaque_radius.0, self.plaque_radius.1) || self.plaque_radius.0 <= 0.0 {
            return Err(Error::config("plaque_radius must be a positive range"));
        }
        if !(0.0..=1.0).contains(&self.vessel_intensity_shift) {
            return Err(Error::config("vessel_intensity_shift must be in [0,1]"));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        Ok(())
    }

    /// The vessel's un-enhanced intensity (top of the organ range).
    pub fn vessel_intensity(&self) -> f64 {
        self.organ_intensity.1
    }
}

/// Cross-domain image pair with ground-truth masks, for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub image_a: Array2<f64>,
    pub image_b: Array2<f64>,
    pub plaque_mask: Array2<u8>,
    pub organ_masks: Array2<u8>,
    pub seed: u64,
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft-edged ellipse coverage in [0,1] at a pixel: 1 inside, 0 outside,
/// smooth over ~1.5 px at the boundary.
fn ellipse_alpha(r: f64, c: f64, cy: f64, cx: f64, ry: f64, rx: f64, theta: f64) -> f64 {
    let (dy, dx) = (r - cy, c - cx);
    let (s, co) = theta.sin_cos();
    let u = (dx * co + dy * s) / rx;
    let v = (-dx * s + dy * co) / ry;
    let rho = (u * u + v * v).sqrt();
    // signed distance approximation in pixels
    let scale = rx.min(ry);
    smoothstep((1.0 - rho) * scale / 1.5 + 0.5)
}

struct Canvas {
    intensity: Array2<f64>,
    labels: Array2<u8>,
    vessel_alpha: Array2<f64>,
    plaque_mask: Array2<u8>,
}

/// Deterministically generate one cross-domain pair.
pub fn generate_phantom_pair(spec: &PhantomSpec, seed: u64) -> Result<PhantomPair> {
    spec.validate()?;
    let mut rng = SeedStream::seed_from_u64(seed);
    let n = spec.image_size;
    let nf = n as f64;
    let mut canvas = Canvas {
        intensity: Array2::from_elem((n, n), BACKGROUND_INTENSITY),
        labels: Array2::from_elem((n, n), LABEL_BACKGROUND),
        vessel_alpha: Array2::zeros((n, n)),
        plaque_mask: Array2::zeros((n, n)),
    };

    // body ellipse
    let body_cy = nf * 0.5;
    let body_cx = nf * 0.5;
    let body_ry = nf * rng.random_range(0.38..0.44);
    let body_rx = nf * rng.random_range(0.32..0.38);
    for r in 0..n {
        for c in 0..n {
            let a = ellipse_alpha(r as f64, c as f64, body_cy, body_cx, body_ry, body_rx, 0.0);
            if a > 0.0 {
                let p = &mut canvas.intensity[[r, c]];
                *p = *p * (1.0 - a) + BODY_INTENSITY * a;
                if a > 0.5 {
                    canvas.labels[[r, c]] = LABEL_BODY;
                }
            }
        }
    }

    // organ blobs
    let n_organs = rng.random_range(spec.num_organs.0..=spec.num_organs.1);
    for oi in 0..n_organs {
        let cy = body_cy + nf * rng.random_range(-0.22..0.22);
        let cx = body_cx + nf * rng.random_range(-0.20..0.20);
        let ry = nf * rng.random_range(0.05..0.14);
        let rx = nf * rng.random_range(0.05..0.14);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let intensity = rng.random_range(spec.organ_intensity.0..=spec.organ_intensity.1);
        let label = LABEL_ORGAN_BASE.saturating_add(oi as u8);
        let (r0, r1) = clip_band(cy, ry.max(rx) + 2.0, n);
        let (c0, c1) = clip_band(cx, ry.max(rx) + 2.0, n);
        for r in r0..r1 {
            for c in c0..c1 {
                let a = ellipse_alpha(r as f64, c as f64, cy, cx, ry, rx, theta);
                if a > 0.0 {
                    let p = &mut canvas.intensity[[r, c]];
                    *p = *p * (1.0 - a) + intensity * a;
                    if a > 0.5 {
                        canvas.labels[[r, c]] = label;
                    }
                }
            }
        }
    }

    // vessel: a sinuous near-vertical curve through the body
    let amp = nf * rng.random_range(0.03..0.08);
    let freq = rng.random_range(0.8..1.6);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let cx0 = body_cx + nf * rng.random_range(-0.08..0.08);
    let r_top = (nf * 0.14) as usize;
    let r_bot = (nf * 0.86) as usize;
    let vessel_col =
        |r: f64| cx0 + amp * (std::f64::consts::TAU * freq * r / nf + phase).sin();
    let vessel_intensity = spec.vessel_intensity();
    for r in r_top..r_bot {
        let vc = vessel_col(r as f64);
        let c0 = (vc - VESSEL_RADIUS - 2.0).floor().max(0.0) as usize;
        let c1 = ((vc + VESSEL_RADIUS + 2.0).ceil() as usize).min(n);
        for c in c0..c1 {
            let d = (c as f64 - vc).abs();
            let a = smoothstep((VESSEL_RADIUS - d) / 1.0 + 0.5);
            if a > 0.0 {
                let p = &mut canvas.intensity[[r, c]];
                *p = *p * (1.0 - a) + vessel_intensity * a;
                canvas.vessel_alpha[[r, c]] = canvas.vessel_alpha[[r, c]].max(a);
                if a > 0.5 {
                    canvas.labels[[r, c]] = LABEL_VESSEL;
                }
            }
        }
    }

    // plaques on/near the vessel, far enough apart, hard-edged
    let n_plaques = rng.random_range(spec.num_plaques.0..=spec.num_plaques.1);
    let mut centers: Vec<(f64, f64, f64)> = Vec::new(); // (row, col, radius)
    let mut attempts = 0;
    while centers.len() < n_plaques {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Generation(format!(
                "could not place {n_plaques} plaques after 1000 attempts (seed {seed})"
            )));
        }
        let pr = rng.random_range(r_top as f64 + 4.0..r_bot as f64 - 4.0);
        let jitter: f64 = rng.random_range(-1.5..1.5);
        let pc = vessel_col(pr) + jitter;
        let radius = rng.random_range(spec.plaque_radius.0..=spec.plaque_radius.1);
        if pc < radius + 1.0 || pc > nf - radius - 1.0 {
            continue;
        }
        if centers
            .iter()
            .any(|&(r0, c0, _)| ((pr - r0).powi(2) + (pc - c0).powi(2)).sqrt() < 8.0)
        {
            continue;
        }
        centers.push((pr, pc, radius));
    }
    for &(pr, pc, radius) in &centers {
        let intensity = rng.random_range(spec.plaque_intensity.0..=spec.plaque_intensity.1);
        let (r0, r1) = clip_band(pr, radius + 1.0, n);
        let (c0, c1) = clip_band(pc, radius + 1.0, n);
        for r in r0..r1 {
            for c in c0..c1 {
                let d = ((r as f64 - pr).powi(2) + (c as f64 - pc).powi(2)).sqrt();
                if d <= radius {
                    canvas.intensity[[r, c]] = intensity;
                    canvas.plaque_mask[[r, c]] = 1;
                }
            }
        }
    }

    // domains: b = a + shift on vessel pixels (plaques invariant), then
    // independent per-domain noise
    let shift = spec.vessel_intensity_shift;
    let mut image_a = canvas.intensity.clone();
    let mut image_b = Array2::from_shape_fn((n, n), |(r, c)| {
        let plaque = canvas.plaque_mask[[r, c]] as f64;
        canvas.intensity[[r, c]] + shift * canvas.vessel_alpha[[r, c]] * (1.0 - plaque)
    });
    if spec.noise_sigma > 0.0 {
        for p in image_a.iter_mut() {
            *p += spec.noise_sigma
                * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        for p in image_b.iter_mut() {
            *p += spec.noise_sigma
                * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
    }
    image_a.mapv_inplace(|x| x.clamp(0.0, 1.0));
    image_b.mapv_inplace(|x| x.clamp(0.0, 1.0));

    Ok(PhantomPair {
        image_a,
        image_b,
        plaque_mask: canvas.plaque_mask,
        organ_masks: canvas.labels,
        seed,
    })
}

fn clip_band(center: f64, half: f64, n: usize) -> (usize, usize) {
    let lo = (center - half).floor().max(0.0) as usize;
    let hi = ((center + half).ceil() as usize + 1).min(n);
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Image I/O (16-bit grayscale PNG, [0,1] <-> [0,65535])
// ---------------------------------------------------------------------------

/// Write an intensity image; values outside [0,1] are clamped with a warning.
pub fn write_image(img: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let mut clamped = 0usize;
    let data: Vec<u16> = img
        .iter()
        .map(|&x| {
            if !(0.0..=1.0).contains(&x) {
                clamped += 1;
            }
            (x.clamp(0.0, 1.0) * 65535.0).round() as u16
        })
        .collect();
    if clamped > 0 {
        log::warn!(
            "write_image: clamped {clamped} out-of-range intensities in {}",
            path.display()
        );
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, data)
        .expect("buffer size matches dims");
    buf.save(path)?;
    Ok(())
}

/// Read an intensity image written by [`write_image`].
pub fn read_image(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => other.to_luma16(),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let raw = gray.into_raw();
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        raw[r * w + c] as f64 / 65535.0
    }))
}

/// Write a label/mask image (values stored verbatim as 16-bit samples).
pub fn write_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u16> = mask.iter().map(|&x| x as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, data)
        .expect("buffer size matches dims");
    buf.save(path)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => other.to_luma16(),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let raw = gray.into_raw();
    Ok(Array2::from_shape_fn((h, w), |(r, c)| raw[r * w + c] as u8))
}

// ---------------------------------------------------------------------------
// Dataset building and loading
// ---------------------------------------------------------------------------

/// One dataset record: the generation seed, its split role, and the files
/// written for it (paths relative to the dataset root).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed: u64,
    pub role: String,
    pub files: Vec<String>,
}

/// Parsed `manifest.json` (a flat array of records).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn count(&self, role: &str) -> usize {
        self.records.iter().filter(|r| r.role == role).count()
    }

    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(root.join("manifest.json"))?;
        let records: Vec<DatasetRecord> =
            serde_json::from_str(&text).map_err(|e| Error::parse(format!("manifest.json: {e}")))?;
        Ok(DatasetManifest { records })
    }
}

/// Build an unpaired training set plus paired validation/test splits.
///
/// `train_a` holds `image_a` renders from one seed block and `train_b` holds
/// `image_b` renders from a disjoint block, so training never sees a pair.
/// Validation and test keep full pairs and masks.
pub fn build_dataset(
    spec: &PhantomSpec,
    n_train_a: usize,
    n_train_b: usize,
    n_val: usize,
    n_test: usize,
    root: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_train_a == 0 || n_train_b == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::config("all split counts must be >= 1"));
    }
    for sub in ["train_a", "train_b", "val", "test"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let mut records = Vec::new();
    let mut next_seed = seed;
    let mut alloc = |count: usize| -> Vec<u64> {
        let v: Vec<u64> = (0..count as u64).map(|i| next_seed + i).collect();
        next_seed += count as u64;
        v
    };
    let seeds_a = alloc(n_train_a);
    let seeds_b = alloc(n_train_b);
    let seeds_val = alloc(n_val);
    let seeds_test = alloc(n_test);

    // generation is parallel over seeds; files and the manifest are written
    // by this single thread in a fixed order
    let gen_all = |seeds: &[u64]| -> Result<Vec<PhantomPair>> {
        seeds
            .par_iter()
            .map(|&s| generate_phantom_pair(spec, s))
            .collect()
    };
    let pairs_a = gen_all(&seeds_a)?;
    let pairs_b = gen_all(&seeds_b)?;
    let pairs_val = gen_all(&seeds_val)?;
    let pairs_test = gen_all(&seeds_test)?;
    for (i, pair) in pairs_a.iter().enumerate() {
        let rel = format!("train_a/{i:04}.png");
        write_image(&pair.image_a, &root.join(&rel))?;
        records.push(DatasetRecord {
            seed: pair.seed,
            role: "train_a".into(),
            files: vec![rel],
        });
    }
    for (i, pair) in pairs_b.iter().enumerate() {
        let rel = format!("train_b/{i:04}.png");
        write_image(&pair.image_b, &root.join(&rel))?;
        records.push(DatasetRecord {
            seed: pair.seed,
            role: "train_b".into(),
            files: vec![rel],
        });
    }
    for (role, pairs) in [("val", &pairs_val), ("test", &pairs_test)] {
        for (i, pair) in pairs.iter().enumerate() {
            let base = format!("{role}/{i:04}");
            let files = vec![
                format!("{base}_a.png"),
                format!("{base}_b.png"),
                format!("{base}_plaque.png"),
                format!("{base}_organs.png"),
            ];
            write_image(&pair.image_a, &root.join(&files[0]))?;
            write_image(&pair.image_b, &root.join(&files[1]))?;
            write_mask(&pair.plaque_mask, &root.join(&files[2]))?;
            write_mask(&pair.organ_masks, &root.join(&files[3]))?;
            records.push(DatasetRecord {
                seed: pair.seed,
                role: role.to_string(),
                files,
            });
        }
    }
    let manifest = DatasetManifest { records };
    let json = serde_json::to_string_pretty(&manifest.records)?;
    fs::write(root.join("manifest.json"), json)?;
    Ok(manifest)
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub train_a: Vec<Array2<f64>>,
    pub train_b: Vec<Array2<f64>>,
    pub val: Vec<PhantomPair>,
    pub test: Vec<PhantomPair>,
}

/// Load every split referenced by `root/manifest.json`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(root)?;
    let mut ds = Dataset {
        root: root.to_path_buf(),
        train_a: Vec::new(),
        train_b: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for rec in &manifest.records {
        match rec.role.as_str() {
            "train_a" => ds.train_a.push(read_image(&root.join(&rec.files[0]))?),
            "train_b" => ds.train_b.push(read_image(&root.join(&rec.files[0]))?),
            "val" | "test" => {
                if rec.files.len() != 4 {
                    return Err(Error::parse(format!(
                        "{} record for seed {} must list 4 files",
                        rec.role, rec.seed
                    )));
                }
                let pair = PhantomPair {
                    image_a: read_image(&root.join(&rec.files[0]))?,
                    image_b: read_image(&root.join(&rec.files[1]))?,
                    plaque_mask: read_mask(&root.join(&rec.files[2]))?,
                    organ_masks: read_mask(&root.join(&rec.files[3]))?,
                    seed: rec.seed,
                };
                if rec.role == "val" {
                    ds.val.push(pair);
                } else {
                    ds.test.push(pair);
                }
            }
            other => return Err(Error::parse(format!("unknown role '{other}' in manifest"))),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            image_size: 64,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn degenerate_spec_makes_identical_domains() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            vessel_intensity_shift: 0.0,
            ..small_spec()
        };
        let pair = generate_phantom_pair(&spec, 5).unwrap();
        assert_eq!(pair.image_a, pair.image_b);
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let spec = small_spec();
        let a = generate_phantom_pair(&spec, 11).unwrap();
        let b = generate_phantom_pair(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_pair(&spec, 12).unwrap();
        assert_ne!(a.image_a, c.image_a);
    }

    #[test]
    fn plaque_pixel_counts_stay_in_expected_band() {
        let spec = PhantomSpec::default();
        for seed in 0..100 {
            let pair = generate_phantom_pair(&spec, seed).unwrap();
            let count = pair.plaque_mask.iter().filter(|&&x| x == 1).count();
            assert!(
                (4..=64).contains(&count),
                "seed {seed}: plaque pixel count {count}"
            );
        }
    }

    #[test]
    fn plaque_pixels_are_bright_in_both_domains() {
        let spec = PhantomSpec::default();
        let tol = 6.0 * spec.noise_sigma;
        for seed in 0..10 {
            let pair = generate_phantom_pair(&spec, seed).unwrap();
            for ((r, c), &m) in pair.plaque_mask.indexed_iter() {
                if m == 1 {
                    assert!(pair.image_a[[r, c]] >= spec.plaque_intensity.0 - tol);
                    assert!(pair.image_b[[r, c]] >= spec.plaque_intensity.0 - tol);
                }
            }
        }
    }

    #[test]
    fn plaques_outshine_the_vessel() {
        // the structure the model must preserve is measurably brighter than
        // its surroundings in both domains
        let spec = PhantomSpec::default();
        for seed in 0..10 {
            let pair = generate_phantom_pair(&spec, seed).unwrap();
            let mean_over = |img: &Array2<f64>, pred: &dyn Fn(usize, usize) -> bool| {
                let mut sum = 0.0;
                let mut n = 0usize;
                for ((r, c), &v) in img.indexed_iter() {
                    if pred(r, c) {
                        sum += v;
                        n += 1;
                    }
                }
                sum / n as f64
            };
            for img in [&pair.image_a, &pair.image_b] {
                let plaque_mean = mean_over(img, &|r, c| pair.plaque_mask[[r, c]] == 1);
                let vessel_mean = mean_over(img, &|r, c| {
                    pair.organ_masks[[r, c]] == LABEL_VESSEL && pair.plaque_mask[[r, c]] == 0
                });
                assert!(
                    plaque_mean - vessel_mean >= 0.1,
                    "seed {seed}: plaque {plaque_mean} vs vessel {vessel_mean}"
                );
            }
        }
    }

    #[test]
    fn domains_differ_only_on_vessel_pixels_without_noise() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let pair = generate_phantom_pair(&spec, 21).unwrap();
        for ((r, c), &a) in pair.image_a.indexed_iter() {
            let b = pair.image_b[[r, c]];
            if pair.plaque_mask[[r, c]] == 1 {
                assert_eq!(a, b, "plaque pixel changed across domains");
            } else if (a - b).abs() > 1e-12 {
                // any differing pixel must be (soft) vessel
                assert!(b > a, "vessel enhancement must brighten");
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = PhantomSpec {
            plaque_intensity: (0.4, 0.6), // not above organ range
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate_phantom_pair(&spec, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn image_roundtrip_within_quantization() {
        let dir = TempDir::new().unwrap();
        let spec = small_spec();
        let pair = generate_phantom_pair(&spec, 3).unwrap();
        let path = dir.path().join("img.png");
        write_image(&pair.image_a, &path).unwrap();
        let back = read_image(&path).unwrap();
        let max_err = pair
            .image_a
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.6e-5, "quantization error {max_err}");

        let zeros = Array2::<f64>::zeros((16, 16));
        let zp = dir.path().join("zeros.png");
        write_image(&zeros, &zp).unwrap();
        assert_eq!(read_image(&zp).unwrap(), zeros);
    }

    #[test]
    fn out_of_range_intensities_clamp() {
        let dir = TempDir::new().unwrap();
        let img = Array2::from_elem((4, 4), 1.5);
        let path = dir.path().join("hot.png");
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert!(back.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn malformed_file_is_parse_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png at all").unwrap();
        assert!(matches!(read_image(&path).unwrap_err(), Error::Parse(_)));
    }

    #[test]
    fn dataset_build_writes_unpaired_splits_and_manifest() {
        let dir = TempDir::new().unwrap();
        let spec = small_spec();
        let manifest = build_dataset(&spec, 4, 3, 2, 2, dir.path(), 100).unwrap();
        assert_eq!(manifest.records.len(), 4 + 3 + 2 + 2);
        assert_eq!(manifest.count("train_a"), 4);
        assert_eq!(manifest.count("train_b"), 3);

        // seed sets are disjoint across every split
        let mut seen = std::collections::HashSet::new();
        for rec in &manifest.records {
            assert!(seen.insert(rec.seed), "seed {} reused", rec.seed);
        }

        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train_a.len(), 4);
        assert_eq!(ds.train_b.len(), 3);
        assert_eq!(ds.val.len(), 2);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.val[0].image_a.dim(), (64, 64));
    }

    #[test]
    fn dataset_build_is_byte_deterministic() {
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let spec = PhantomSpec {
            image_size: 48,
            ..PhantomSpec::default()
        };
        build_dataset(&spec, 2, 2, 1, 1, d1.path(), 7).unwrap();
        build_dataset(&spec, 2, 2, 1, 1, d2.path(), 7).unwrap();
        let mut files1: Vec<_> = walk(d1.path());
        let mut files2: Vec<_> = walk(d2.path());
        files1.sort();
        files2.sort();
        assert_eq!(files1.len(), files2.len());
        for (a, b) in files1.iter().zip(files2.iter()) {
            assert_eq!(
                std::fs::read(d1.path().join(a)).unwrap(),
                std::fs::read(d2.path().join(b)).unwrap(),
                "{a} differs"
            );
        }
    }

    fn walk(root: &Path) -> Vec<String> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(root).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name().into_string().unwrap();
            if entry.file_type().unwrap().is_dir() {
                for sub in walk(&entry.path()) {
                    out.push(format!("{name}/{sub}"));
                }
            } else {
                out.push(name);
            }
        }
        out
    }
}
