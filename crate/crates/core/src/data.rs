//! Dataset ingestion and batching: folder loading with id/camera naming,
//! a synthetic labeled-image generator for desk runs, the P×K identity
//! sampler, and flip/erase augmentation with z-score normalization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Raw pixels in `[0, 1]`, channel-major.
#[derive(Debug, Clone)]
pub struct ImageData {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageData {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[c * self.height * self.width + y * self.width + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[c * self.height * self.width + y * self.width + x] = v;
    }
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub image: ImageData,
    pub vehicle_id: u32,
    pub camera_id: u32,
}

#[derive(Debug)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Files skipped because their names did not parse.
    pub skipped_files: usize,
}

impl Dataset {
    pub fn labels(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.vehicle_id).collect()
    }

    pub fn cameras(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.camera_id).collect()
    }

    /// Distinct vehicle ids, in first-seen order.
    pub fn distinct_ids(&self) -> Vec<u32> {
        let mut ids = Vec::new();
        for r in &self.records {
            if !ids.contains(&r.vehicle_id) {
                ids.push(r.vehicle_id);
            }
        }
        ids
    }
}

/// Parses `<id>_c<cam>_<anything>.<ext>` naming; `None` when malformed.
pub fn parse_record_name(name: &str) -> Option<(u32, u32)> {
    let stem = name.rsplit_once('.').map(|(s, _)| s)?;
    let mut parts = stem.split('_');
    let id: u32 = parts.next()?.parse().ok()?;
    let cam_part = parts.next()?;
    let cam: u32 = cam_part.strip_prefix('c')?.parse().ok()?;
    Some((id, cam))
}

/// Loads every parseable PNG from a flat folder. Malformed names are
/// skipped and counted; an empty result is an explicit error.
pub fn load_folder(root: &Path) -> Result<Dataset> {
    let mut entries: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .collect();
    entries.sort();

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for path in entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            skipped += 1;
            continue;
        };
        let Some((vehicle_id, camera_id)) = parse_record_name(name) else {
            skipped += 1;
            continue;
        };
        if !name.to_ascii_lowercase().ends_with(".png") {
            skipped += 1;
            continue;
        }
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut pixels = vec![0.0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        records.push(DatasetRecord {
            image: ImageData {
                channels: 3,
                height: h,
                width: w,
                pixels,
            },
            vehicle_id,
            camera_id,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no usable records under {}",
            root.display()
        )));
    }
    Ok(Dataset {
        records,
        skipped_files: skipped,
    })
}

/// Generator spec for the synthetic labeled-image set.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub id_count: usize,
    pub images_per_id: usize,
    pub height: usize,
    pub width: usize,
    /// Uniform per-pixel noise amplitude within an id.
    pub jitter: f32,
    pub cameras: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(seed: u64) -> Self {
        SyntheticSpec {
            id_count: 8,
            images_per_id: 6,
            height: 32,
            width: 32,
            jitter: 0.05,
            cameras: 4,
            seed,
        }
    }
}

/// Deterministic synthetic dataset: each id gets a distinct colored-block
/// base pattern; its images are the base plus bounded jitter. Camera ids
/// round-robin.
pub fn synth_dataset(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = 4usize;
    let (h, w) = (spec.height, spec.width);
    let mut records = Vec::with_capacity(spec.id_count * spec.images_per_id);
    for id in 0..spec.id_count {
        // base pattern: a cells×cells layout of random colors
        let colors: Vec<[f32; 3]> = (0..cells * cells)
            .map(|_| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()])
            .collect();
        let mut base = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * cells / h) * cells + (x * cells / w);
                for c in 0..3 {
                    base[c * h * w + y * w + x] = colors[cell][c];
                }
            }
        }
        for img_i in 0..spec.images_per_id {
            let pixels: Vec<f32> = base
                .iter()
                .map(|&v| {
                    let noised = v + rng.gen_range(-spec.jitter..=spec.jitter);
                    noised.clamp(0.0, 1.0)
                })
                .collect();
            records.push(DatasetRecord {
                image: ImageData {
                    channels: 3,
                    height: h,
                    width: w,
                    pixels,
                },
                vehicle_id: id as u32,
                camera_id: (img_i % spec.cameras.max(1)) as u32,
            });
        }
    }
    Dataset {
        records,
        skipped_files: 0,
    }
}

/// Per-channel dataset statistics for z-score normalization, computed once
/// per run over the raw pixels.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub fn channel_stats(records: &[DatasetRecord]) -> ChannelStats {
    let channels = records.first().map(|r| r.image.channels).unwrap_or(0);
    let mut sum = vec![0.0f64; channels];
    let mut sumsq = vec![0.0f64; channels];
    let mut count = vec![0u64; channels];
    for r in records {
        let plane = r.image.height * r.image.width;
        for c in 0..channels {
            for v in &r.image.pixels[c * plane..(c + 1) * plane] {
                sum[c] += *v as f64;
                sumsq[c] += (*v as f64) * (*v as f64);
                count[c] += 1;
            }
        }
    }
    let mean: Vec<f32> = (0..channels)
        .map(|c| (sum[c] / count[c] as f64) as f32)
        .collect();
    let std: Vec<f32> = (0..channels)
        .map(|c| {
            let m = sum[c] / count[c] as f64;
            let var = sumsq[c] / count[c] as f64 - m * m;
            (var.max(0.0).sqrt() as f32).max(1e-6)
        })
        .collect();
    ChannelStats { mean, std }
}

/// z-scores an image into a `[C, H, W]` tensor.
pub fn normalize(img: &ImageData, stats: &ChannelStats) -> Result<Tensor> {
    let plane = img.height * img.width;
    let mut data = Vec::with_capacity(img.pixels.len());
    for c in 0..img.channels {
        for v in &img.pixels[c * plane..(c + 1) * plane] {
            data.push((v - stats.mean[c]) / stats.std[c]);
        }
    }
    Tensor::from_vec(&[img.channels, img.height, img.width], data)
}

/// Mirrors the image left-right. An involution: applied twice it is the
/// identity.
pub fn flip_horizontal(img: &ImageData) -> ImageData {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.get(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

/// Augmentation probabilities.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub flip_p: f32,
    pub erase_p: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            erase_p: 0.5,
        }
    }
}

/// Horizontal flip and random erasing on raw pixels. Erasing replaces a
/// rectangle covering 2–33% of the image (aspect ratio 0.3–3.33) with
/// uniform noise. The caller applies z-score normalization afterwards.
pub fn augment(img: &ImageData, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> ImageData {
    let mut out = if rng.gen::<f32>() < cfg.flip_p {
        flip_horizontal(img)
    } else {
        img.clone()
    };
    if rng.gen::<f32>() < cfg.erase_p {
        let area = (img.height * img.width) as f32;
        for _ in 0..10 {
            let target = area * rng.gen_range(0.02..0.33);
            let aspect = rng.gen_range(0.3..3.33f32);
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= img.height || ew >= img.width {
                continue;
            }
            let y0 = rng.gen_range(0..=img.height - eh);
            let x0 = rng.gen_range(0..=img.width - ew);
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    for c in 0..img.channels {
                        out.set(c, y, x, rng.gen::<f32>());
                    }
                }
            }
            break;
        }
    }
    out
}

/// One P×K mini-batch: record indices plus how many images were re-drawn
/// because their id held fewer than K images.
#[derive(Debug, Clone)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub with_replacement: usize,
}

/// Identity-balanced batch sampler: every batch holds exactly `p_ids`
/// distinct ids with `k_imgs` images each, every epoch covers each id at
/// least once, and the sequence is a pure function of the seed.
pub struct PkSampler {
    groups: Vec<(u32, Vec<usize>)>,
    p_ids: usize,
    k_imgs: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(labels: &[u32], p_ids: usize, k_imgs: usize, seed: u64) -> Result<Self> {
        let mut groups: Vec<(u32, Vec<usize>)> = Vec::new();
        for (i, &id) in labels.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| *g == id) {
                Some((_, v)) => v.push(i),
                None => groups.push((id, vec![i])),
            }
        }
        if p_ids == 0 || k_imgs == 0 {
            return Err(Error::Config("batch.p_ids and batch.k_imgs must be positive".into()));
        }
        if groups.len() < p_ids {
            return Err(Error::Config(format!(
                "{} distinct ids cannot fill batches of {} ids",
                groups.len(),
                p_ids
            )));
        }
        Ok(PkSampler {
            groups,
            p_ids,
            k_imgs,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Batches for one epoch. A trailing partial group is completed with
    /// ids from the front of the shuffled order, keeping ids distinct
    /// within the batch.
    pub fn next_epoch(&mut self) -> Vec<PkBatch> {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut self.rng);

        let mut batches = Vec::new();
        let mut cursor = 0usize;
        while cursor < order.len() {
            let mut chosen: Vec<usize> = order[cursor..(cursor + self.p_ids).min(order.len())].to_vec();
            cursor += self.p_ids;
            if chosen.len() < self.p_ids {
                for &extra in &order {
                    if chosen.len() == self.p_ids {
                        break;
                    }
                    if !chosen.contains(&extra) {
                        chosen.push(extra);
                    }
                }
            }
            let mut indices = Vec::with_capacity(self.p_ids * self.k_imgs);
            let mut with_replacement = 0usize;
            for &gi in &chosen {
                let mut imgs = self.groups[gi].1.clone();
                imgs.shuffle(&mut self.rng);
                for t in 0..self.k_imgs {
                    if t >= imgs.len() {
                        with_replacement += 1;
                        indices.push(imgs[t % imgs.len()]);
                    } else {
                        indices.push(imgs[t]);
                    }
                }
            }
            batches.push(PkBatch {
                indices,
                with_replacement,
            });
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn parse_veri_style_names() {
        assert_eq!(parse_record_name("0001_c001_0001.png"), Some((1, 1)));
        assert_eq!(parse_record_name("123_c07_whatever_x.png"), Some((123, 7)));
        assert_eq!(parse_record_name("nonsense.png"), None);
        assert_eq!(parse_record_name("12_x07_a.png"), None);
        assert_eq!(parse_record_name("12"), None);
    }

    #[test]
    fn load_folder_counts_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let png = |path: &Path| {
            let img = image::RgbImage::from_fn(8, 8, |x, y| {
                image::Rgb([(x * 30) as u8, (y * 30) as u8, 128])
            });
            img.save(path).unwrap();
        };
        png(&dir.path().join("0001_c001_0001.png"));
        png(&dir.path().join("0001_c002_0002.png"));
        png(&dir.path().join("0002_c001_0001.png"));
        png(&dir.path().join("badname.png"));

        let ds = load_folder(dir.path()).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert_eq!(ds.skipped_files, 1);
        assert_eq!(ds.records[0].vehicle_id, 1);
        assert_eq!(ds.records[0].camera_id, 1);
    }

    #[test]
    fn load_folder_empty_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_folder(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn synth_zero_jitter_gives_identical_images() {
        let mut spec = SyntheticSpec::desk(5);
        spec.jitter = 0.0;
        let ds = synth_dataset(&spec);
        assert_eq!(ds.records.len(), 48);
        let a = &ds.records[0].image.pixels;
        let b = &ds.records[1].image.pixels;
        assert_eq!(a, b);
        // different ids differ
        let c = &ds.records[6].image.pixels;
        assert_ne!(a, c);
    }

    #[test]
    fn synth_count_and_determinism() {
        let ds1 = synth_dataset(&SyntheticSpec::desk(7));
        let ds2 = synth_dataset(&SyntheticSpec::desk(7));
        assert_eq!(ds1.records.len(), 8 * 6);
        for (a, b) in ds1.records.iter().zip(&ds2.records) {
            assert_eq!(a.image.pixels, b.image.pixels);
            assert_eq!(a.camera_id, b.camera_id);
        }
    }

    #[test]
    fn synth_is_nearest_neighbor_separable_at_low_jitter() {
        let ds = synth_dataset(&SyntheticSpec::desk(11));
        // brute-force 1-NN on raw pixels classifies every image correctly
        let n = ds.records.len();
        for i in 0..n {
            let mut best = usize::MAX;
            let mut best_d = f64::MAX;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d: f64 = ds.records[i]
                    .image
                    .pixels
                    .iter()
                    .zip(&ds.records[j].image.pixels)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(ds.records[i].vehicle_id, ds.records[best].vehicle_id);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let ds = synth_dataset(&SyntheticSpec::desk(3));
        let img = &ds.records[0].image;
        let back = flip_horizontal(&flip_horizontal(img));
        assert_eq!(img.pixels, back.pixels);
    }

    #[test]
    fn augment_off_is_identity_before_normalization() {
        let ds = synth_dataset(&SyntheticSpec::desk(4));
        let cfg = AugmentConfig {
            flip_p: 0.0,
            erase_p: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&ds.records[0].image, &cfg, &mut rng);
        assert_eq!(out.pixels, ds.records[0].image.pixels);
    }

    #[test]
    fn augment_is_seed_reproducible() {
        let ds = synth_dataset(&SyntheticSpec::desk(5));
        let cfg = AugmentConfig::default();
        let run = |seed: u64| -> Vec<Vec<f32>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ds.records
                .iter()
                .map(|r| augment(&r.image, &cfg, &mut rng).pixels)
                .collect()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn channel_stats_and_normalize() {
        let ds = synth_dataset(&SyntheticSpec::desk(6));
        let stats = channel_stats(&ds.records);
        assert_eq!(stats.mean.len(), 3);
        let t = normalize(&ds.records[0].image, &stats).unwrap();
        assert_eq!(t.shape(), [3, 32, 32]);

        // normalizing the whole set gives ~zero mean per channel
        let mut sum = [0.0f64; 3];
        let mut count = 0u64;
        for r in &ds.records {
            let t = normalize(&r.image, &stats).unwrap();
            for c in 0..3 {
                for v in &t.data()[c * 1024..(c + 1) * 1024] {
                    sum[c] += *v as f64;
                }
            }
            count += 1024;
        }
        for s in sum {
            assert!((s / count as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn pk_batches_satisfy_structure() {
        let ds = synth_dataset(&SyntheticSpec::desk(8));
        let labels = ds.labels();
        let mut sampler = PkSampler::new(&labels, 4, 3, 13).unwrap();
        for _ in 0..3 {
            for batch in sampler.next_epoch() {
                assert_eq!(batch.indices.len(), 12);
                let mut per_id: std::collections::HashMap<u32, usize> = Default::default();
                for &i in &batch.indices {
                    *per_id.entry(labels[i]).or_default() += 1;
                }
                assert_eq!(per_id.len(), 4);
                assert!(per_id.values().all(|&c| c == 3));
                assert_eq!(batch.with_replacement, 0);
            }
        }
    }

    #[test]
    fn pk_epoch_covers_every_id() {
        let ds = synth_dataset(&SyntheticSpec::desk(9));
        let labels = ds.labels();
        let mut sampler = PkSampler::new(&labels, 3, 2, 17).unwrap();
        let mut seen: HashSet<u32> = HashSet::new();
        for batch in sampler.next_epoch() {
            for &i in &batch.indices {
                seen.insert(labels[i]);
            }
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn pk_short_ids_sampled_with_replacement() {
        let labels = vec![0, 0, 1, 2, 2, 2];
        let mut sampler = PkSampler::new(&labels, 3, 3, 3).unwrap();
        let batches = sampler.next_epoch();
        let total_replaced: usize = batches.iter().map(|b| b.with_replacement).sum();
        assert!(total_replaced > 0);
        for b in &batches {
            assert_eq!(b.indices.len(), 9);
        }
    }

    #[test]
    fn pk_sampler_deterministic() {
        let labels: Vec<u32> = (0..24).map(|i| i % 6).collect();
        let run = |seed: u64| {
            let mut s = PkSampler::new(&labels, 3, 2, seed).unwrap();
            let mut all = Vec::new();
            for _ in 0..4 {
                for b in s.next_epoch() {
                    all.extend(b.indices);
                }
            }
            all
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn pk_rejects_too_few_ids() {
        let labels = vec![0, 0, 1, 1];
        assert!(PkSampler::new(&labels, 3, 2, 1).is_err());
    }
}
