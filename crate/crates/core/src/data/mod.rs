//! Procedural shapes dataset: rendering, storage, simulated detections and
//! mini-batch assembly.

mod detections;
mod render;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use detections::{simulate_detections, split, NoiseConfig, SplitTag};
pub use render::{rasterize, render_sample, tight_rect, DatasetConfig, Sample, ShapeKind};

use crate::layout::{CategorySet, Layout, LayoutError, LayoutFile};
use crate::objectives::Batch;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("dataset index: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("dataset: {0}")]
    Format(String),
}

/// A layout as the trainer sees it, with per-box confidences for detected
/// layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLayout {
    /// Foreground boxes only.
    pub layout: Layout,
    pub confidences: Option<Vec<f64>>,
}

/// How unlabeled samples get their layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiSetup {
    pub noise: NoiseConfig,
    pub tau: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub categories: CategorySet,
    pub samples: Vec<Sample>,
    pub splits: Vec<SplitTag>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    id: String,
    image: String,
    layout: String,
    masks: Vec<String>,
    split: SplitTag,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexDoc {
    format: String,
    version: u32,
    seed: u64,
    resolution: usize,
    categories: CategorySet,
    config: DatasetConfig,
    samples: Vec<IndexEntry>,
}

const INDEX_FORMAT: &str = "isla-shapes";

impl Dataset {
    /// Renders `n` samples; sample `i` draws from its own stream derived
    /// from `seed`, so generation order does not matter.
    pub fn generate(config: DatasetConfig, n: usize, seed: u64) -> Result<Self, DataError> {
        config.validate().map_err(DataError::Format)?;
        if n == 0 {
            return Err(DataError::Format("dataset needs at least one sample".into()));
        }
        let samples = (0..n)
            .map(|i| render_sample(&config, &mut rng::stream(rng::split(seed, i as u64))))
            .collect();
        Ok(Dataset { config, seed, categories: CategorySet::shapes(), samples, splits: vec![SplitTag::Supervised; n] })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        for sub in ["images", "masks", "layouts"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let r = self.resolution() as u32;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (s, &split)) in self.samples.iter().zip(&self.splits).enumerate() {
            let id = format!("{i:04}");
            let image = format!("images/{id}.png");
            image::save_buffer_with_format(dir.join(&image), &s.image, r, r, image::ColorType::Rgb8, image::ImageFormat::Png)?;
            let mut masks = Vec::with_capacity(s.masks.len());
            for (k, m) in s.masks.iter().enumerate() {
                let name = format!("masks/{id}_{k}.png");
                let pixels: Vec<u8> = m.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
                image::save_buffer_with_format(dir.join(&name), &pixels, r, r, image::ColorType::L8, image::ImageFormat::Png)?;
                masks.push(name);
            }
            let layout = format!("layouts/{id}.json");
            let file = LayoutFile { categories: self.categories.clone(), layout: s.layout.clone(), style: None };
            std::fs::write(dir.join(&layout), file.to_string_pretty())?;
            entries.push(IndexEntry { id, image, layout, masks, split });
        }
        let doc = IndexDoc {
            format: INDEX_FORMAT.into(),
            version: 1,
            seed: self.seed,
            resolution: self.resolution(),
            categories: self.categories.clone(),
            config: self.config.clone(),
            samples: entries,
        };
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let doc: IndexDoc = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        if doc.format != INDEX_FORMAT {
            return Err(DataError::Format(format!("unknown index format `{}`", doc.format)));
        }
        let r = doc.resolution;
        let mut samples = Vec::with_capacity(doc.samples.len());
        let mut splits = Vec::with_capacity(doc.samples.len());
        for e in &doc.samples {
            let image = image::open(dir.join(&e.image))?.to_rgb8();
            if image.dimensions() != (r as u32, r as u32) {
                return Err(DataError::Format(format!("{} is not {r}×{r}", e.image)));
            }
            let file = LayoutFile::parse(&std::fs::read_to_string(dir.join(&e.layout))?)?;
            if file.layout.boxes.len() != e.masks.len() {
                return Err(DataError::Format(format!("sample {}: {} masks for {} boxes", e.id, e.masks.len(), file.layout.boxes.len())));
            }
            let masks = e
                .masks
                .iter()
                .map(|m| Ok(image::open(dir.join(m))?.to_luma8().into_raw().iter().map(|&v| u8::from(v >= 128)).collect()))
                .collect::<Result<Vec<Vec<u8>>, DataError>>()?;
            samples.push(Sample { image: image.into_raw(), layout: file.layout, masks });
            splits.push(e.split);
        }
        Ok(Dataset { config: doc.config, seed: doc.seed, categories: doc.categories, samples, splits })
    }

    /// Sample `i` as a `3×R×R` tensor in `[−1, 1]`.
    pub fn image_tensor(&self, i: usize) -> Tensor<f32> {
        let r = self.resolution();
        let img = &self.samples[i].image;
        Tensor::from_fn(&[3, r, r], |k| {
            let (ch, p) = (k / (r * r), k % (r * r));
            img[p * 3 + ch] as f32 / 127.5 - 1.0
        })
    }

    /// Layouts used for training. With `semi`, unlabeled samples lose their
    /// annotations and get simulated detections instead.
    pub fn training_layouts(&self, semi: Option<&SemiSetup>) -> Vec<TrainLayout> {
        self.samples
            .iter()
            .zip(&self.splits)
            .enumerate()
            .map(|(i, (s, &tag))| match (semi, tag) {
                (Some(cfg), SplitTag::Unlabeled) => {
                    let d = simulate_detections(&s.layout, &cfg.noise, rng::split(cfg.seed, i as u64), cfg.tau);
                    let conf = d.boxes.iter().map(|b| b.confidence.unwrap_or(1.0)).collect();
                    TrainLayout { layout: d, confidences: Some(conf) }
                }
                _ => TrainLayout { layout: s.layout.clone(), confidences: None },
            })
            .collect()
    }

    /// Stacks the chosen samples into a batch with background-augmented
    /// layouts. Confidences are attached when any chosen layout has them;
    /// annotated layouts then count as fully confident.
    pub fn batch(&self, indices: &[usize], layouts: &[TrainLayout]) -> Result<Batch, DataError> {
        let r = self.resolution();
        let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
        let mut with_bg = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image_tensor(i).data());
            with_bg.push(layouts[i].layout.with_background()?);
        }
        let confidences = indices.iter().any(|&i| layouts[i].confidences.is_some()).then(|| {
            indices
                .iter()
                .map(|&i| layouts[i].confidences.clone().unwrap_or_else(|| vec![1.0; layouts[i].layout.boxes.len()]))
                .collect()
        });
        let images = Tensor::new(&[indices.len(), 3, r, r], data).map_err(|e| DataError::Format(e.to_string()))?;
        Ok(Batch { images, layouts: with_bg, confidences })
    }
}

/// Sample indices for training step `step`: consecutive windows over an
/// endless sequence of per-epoch shuffles of `0..n`.
pub fn batch_indices(n: usize, batch_size: usize, step: u64, seed: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|k| {
            let pos = step * batch_size as u64 + k;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng::stream(rng::split(seed, epoch)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// Renders and writes a dataset in one go.
pub fn make_dataset(config: DatasetConfig, n: usize, seed: u64, dir: &Path) -> Result<Dataset, DataError> {
    let ds = Dataset::generate(config, n, seed)?;
    ds.save(dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "images", "masks", "layouts"] {
            let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names.into_iter().filter(|p| p.is_file()) {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
        out
    }

    #[test]
    fn same_seed_writes_identical_bytes_and_loads_back() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ds = make_dataset(DatasetConfig::default(), 6, 11, a.path()).unwrap();
        make_dataset(DatasetConfig::default(), 6, 11, b.path()).unwrap();
        let files = read_all(a.path());
        assert_eq!(files, read_all(b.path()));
        assert!(files.iter().any(|(n, _)| n == "index.json"));
        let back = Dataset::load(a.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn single_circle_sample_has_a_disk_mask() {
        let cfg = DatasetConfig { min_objects: 1, max_objects: 1, shapes: vec![ShapeKind::Circle], ..Default::default() };
        let ds = Dataset::generate(cfg, 1, 3).unwrap();
        let s = &ds.samples[0];
        assert_eq!(s.layout.boxes.len(), 1);
        let rect = crate::layout::box_to_pixels(&s.layout.boxes[0].bbox, 32, 32);
        let area: usize = s.masks[0].iter().map(|&v| v as usize).sum();
        let disk = std::f64::consts::PI * (rect.width() as f64 / 2.0).powi(2);
        assert!((area as f64 - disk).abs() < 2.0 * rect.width() as f64, "{area} vs {disk}");
    }

    #[test]
    fn image_tensor_is_in_unit_range() {
        let ds = Dataset::generate(DatasetConfig::default(), 2, 1).unwrap();
        let t = ds.image_tensor(1);
        assert_eq!(t.shape(), &[3, 32, 32]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(t.data()[0], ds.samples[1].image[0] as f32 / 127.5 - 1.0);
    }

    #[test]
    fn zero_noise_semi_batches_are_fully_confident() {
        let mut ds = Dataset::generate(DatasetConfig::default(), 8, 2).unwrap();
        ds.splits = split(8, 0.5, 1);
        let semi = SemiSetup { noise: NoiseConfig::default(), tau: 0.5, seed: 4 };
        let layouts = ds.training_layouts(Some(&semi));
        let plain = ds.training_layouts(None);
        for (a, b) in layouts.iter().zip(&plain) {
            assert_eq!(a.layout.boxes.len(), b.layout.boxes.len());
            for (x, y) in a.layout.boxes.iter().zip(&b.layout.boxes) {
                assert_eq!(x.bbox, y.bbox);
            }
        }
        let batch = ds.batch(&[0, 1, 2, 3], &layouts).unwrap();
        assert_eq!(batch.images.shape(), &[4, 3, 32, 32]);
        assert!(batch.layouts.iter().all(|l| l.has_background()));
        let conf = batch.confidences.unwrap();
        assert!(conf.iter().flatten().all(|&c| c == 1.0));
        assert!(ds.batch(&[0, 1], &plain).unwrap().confidences.is_none());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..8).flat_map(|s| batch_indices(64, 8, s, 5)).collect();
        seen.sort();
        assert_eq!(seen, (0..64).collect::<Vec<_>>());
        assert_eq!(batch_indices(64, 8, 3, 5), batch_indices(64, 8, 3, 5));
        assert_eq!(batch_indices(3, 8, 0, 1).len(), 8);
    }
}
