//! Synthetic image/caption corpus with a controlled fraction of mismatched pairs.
//!
//! Every sample belongs to a latent class and carries one colour and one size
//! attribute. Its patch vectors are the class prototype plus Gaussian noise,
//! with the attribute prototypes added to a few random patches. Captions name
//! the size, colour and class. A corrupted pair gets a caption generated for a
//! different class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorlab::Tensor;

use crate::corpus::store::{Corpus, Sample, SplitName};
use crate::error::{Error, Result};

pub const CLASS_NOUNS: [&str; 16] = [
    "airport", "beach", "bridge", "desert", "farmland", "forest", "harbor", "stadium", "church",
    "meadow", "mountain", "parking", "playground", "pond", "railway", "river",
];
pub const COLORS: [&str; 8] = ["red", "green", "white", "gray", "brown", "blue", "yellow", "dark"];
pub const SIZES: [&str; 4] = ["large", "small", "dense", "sparse"];
const OPENERS: [&str; 4] = ["there is", "this is", "we can see", "here is"];
const TAILS: [&str; 4] = ["", "in it", "here", "there"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub captions_per_sample: usize,
    /// Patch count N.
    pub patches: usize,
    /// Patch feature dimension d_in.
    pub dim: usize,
    pub corruption_rate: f64,
    /// When false only training pairs are corrupted.
    pub corrupt_eval_splits: bool,
    pub noise_std: f64,
    pub prototype_scale: f64,
    pub attribute_scale: f64,
    /// Patches per sample that carry each attribute signal.
    pub attribute_patches: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            samples_per_class: 64,
            captions_per_sample: 1,
            patches: 16,
            dim: 16,
            corruption_rate: 0.1,
            corrupt_eval_splits: true,
            noise_std: 0.5,
            prototype_scale: 1.0,
            attribute_scale: 1.0,
            attribute_patches: 4,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > CLASS_NOUNS.len() {
            return bad(format!("classes must be in 2..={}", CLASS_NOUNS.len()));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return bad(format!("corruption rate {} outside [0,1)", self.corruption_rate));
        }
        if self.samples_per_class == 0 || self.captions_per_sample == 0 {
            return bad("samples_per_class and captions_per_sample must be positive".into());
        }
        if self.patches == 0 || self.dim == 0 {
            return bad("patches and dim must be positive".into());
        }
        if self.attribute_patches > self.patches {
            return bad("attribute_patches exceeds patches".into());
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(v >= 0.0 && t >= 0.0 && v + t < 1.0) {
            return bad("split fractions must be non-negative and leave a train split".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }

    /// Per-class split sizes (train, val, test).
    fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.samples_per_class as f64;
        let val = (n * self.val_fraction).round() as usize;
        let test = (n * self.test_fraction).round() as usize;
        let val = val.min(self.samples_per_class - 1);
        let test = test.min(self.samples_per_class - 1 - val);
        (self.samples_per_class - val - test, val, test)
    }
}

/// One mismatched pair, identified by sample and caption index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedPair {
    pub sample_id: String,
    pub split: SplitName,
    pub caption_index: usize,
    pub image_class: String,
    pub caption_class: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub config: SynthConfig,
    pub num_samples: usize,
    pub num_pairs: usize,
    pub split_sizes: [usize; 3],
    pub num_corrupted: usize,
    pub corrupted: Vec<CorruptedPair>,
}

impl Manifest {
    pub fn is_corrupted(&self, sample_id: &str, caption_index: usize) -> bool {
        self.corrupted
            .iter()
            .any(|c| c.sample_id == sample_id && c.caption_index == caption_index)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    Tensor::randn(&[dim], scale, rng).into_data()
}

fn caption(rng: &mut ChaCha8Rng, class: &str, size: &str, color: &str) -> String {
    let opener = OPENERS[rng.random_range(0..OPENERS.len())];
    let tail = TAILS[rng.random_range(0..TAILS.len())];
    let mut s = format!("{opener} a {size} {color} {class}");
    if !tail.is_empty() {
        s.push(' ');
        s.push_str(tail);
    }
    s
}

/// Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let class_protos: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| gaussian_vec(&mut rng, d, cfg.prototype_scale))
        .collect();
    let color_protos: Vec<Vec<f64>> = (0..COLORS.len())
        .map(|_| gaussian_vec(&mut rng, d, cfg.attribute_scale))
        .collect();
    let size_protos: Vec<Vec<f64>> = (0..SIZES.len())
        .map(|_| gaussian_vec(&mut rng, d, cfg.attribute_scale))
        .collect();

    let (n_train, n_val, _) = cfg.split_sizes();
    let mut corpus = Corpus::default();
    let mut corrupted = Vec::new();
    let mut serial = 0usize;
    for (c, proto) in class_protos.iter().enumerate() {
        let class = CLASS_NOUNS[c];
        let mut order: Vec<usize> = (0..cfg.samples_per_class).collect();
        order.shuffle(&mut rng);
        let mut split_of = vec![SplitName::Test; cfg.samples_per_class];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_train {
                SplitName::Train
            } else if rank < n_train + n_val {
                SplitName::Val
            } else {
                SplitName::Test
            };
        }
        for split in split_of {
            let color = rng.random_range(0..COLORS.len());
            let size = rng.random_range(0..SIZES.len());
            let mut data = Vec::with_capacity(cfg.patches * d);
            for _ in 0..cfg.patches {
                let noise = gaussian_vec(&mut rng, d, cfg.noise_std);
                data.extend(proto.iter().zip(noise).map(|(p, e)| p + e));
            }
            let mut patch_ids: Vec<usize> = (0..cfg.patches).collect();
            for attr in [&color_protos[color], &size_protos[size]] {
                patch_ids.shuffle(&mut rng);
                for &p in &patch_ids[..cfg.attribute_patches] {
                    for (x, a) in data[p * d..(p + 1) * d].iter_mut().zip(attr) {
                        *x += a;
                    }
                }
            }
            let sample_id = format!("syn{serial:05}");
            serial += 1;
            let mut captions = Vec::with_capacity(cfg.captions_per_sample);
            for j in 0..cfg.captions_per_sample {
                let corrupt = rng.random::<f64>() < cfg.corruption_rate;
                if corrupt && (cfg.corrupt_eval_splits || split == SplitName::Train) {
                    let other = (c + rng.random_range(1..cfg.classes)) % cfg.classes;
                    let size = SIZES[rng.random_range(0..SIZES.len())];
                    let color = COLORS[rng.random_range(0..COLORS.len())];
                    captions.push(caption(&mut rng, CLASS_NOUNS[other], size, color));
                    corrupted.push(CorruptedPair {
                        sample_id: sample_id.clone(),
                        split,
                        caption_index: j,
                        image_class: class.to_string(),
                        caption_class: CLASS_NOUNS[other].to_string(),
                    });
                } else {
                    captions.push(caption(&mut rng, class, SIZES[size], COLORS[color]));
                }
            }
            corpus.split_mut(split).push(Sample {
                sample_id,
                captions,
                class: Some(class.to_string()),
                features: Tensor::new(&[cfg.patches, d], data)?,
            });
        }
    }
    let split_sizes = [corpus.train.len(), corpus.val.len(), corpus.test.len()];
    let num_samples = split_sizes.iter().sum();
    corpus.manifest = Some(Manifest {
        generator: "synthetic-v1".into(),
        config: cfg.clone(),
        num_samples,
        num_pairs: num_samples * cfg.captions_per_sample,
        split_sizes,
        num_corrupted: corrupted.len(),
        corrupted,
    });
    Ok(corpus)
}
