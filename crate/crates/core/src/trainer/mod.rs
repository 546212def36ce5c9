//! The training loop: seeded batching, similarity banks and elimination,
//! the scheduled loss, AdamW with clipping, EMA weights and checkpoints.

mod optim;

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorlab::{Graph, ParamStore};

pub use optim::{clip_grad_norm, decays, global_norm, lr_at, AdamW, EmaState};

use crate::alignment::{batch_similarity, eliminate, BankKind, Scheme, SimilarityBank, Thresholds};
use crate::config::RunConfig;
use crate::corpus::{
    compute_keywords, default_stoplist, keyword_ids, mask_keywords, pairs, tokenize, Corpus, KeywordList,
    MaskedSequence, PairRef, Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objective::{total_loss, LossBreakdown, LossInputs};

pub const LIVE_CHECKPOINT: &str = "live.ebkt";
pub const EMA_CHECKPOINT: &str = "ema.ebkt";
pub const SIDECAR: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub max_grad_norm: f64,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            lr: 1.5e-5,
            weight_decay: 0.7,
            warmup_iters: 200,
            max_grad_norm: 50.0,
            ema_decay: 0.99,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size < 2 {
            return bad("epochs must be positive and batch_size at least 2");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("lr and max_grad_norm must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0,1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0,1) and eps be positive");
        }
        Ok(())
    }
}

/// Tokenized training pairs with their keyword-masked variants.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub vocab: Vocabulary,
    pub keywords: KeywordList,
    pub pairs: Vec<PairRef>,
    pub tokens: Vec<Vec<usize>>,
    pub masked: Vec<MaskedSequence>,
}

impl TrainingData {
    /// The vocabulary and, unless given, the keywords come from the training
    /// split only.
    pub fn prepare(corpus: &Corpus, keywords: Option<KeywordList>, cfg: &RunConfig) -> Result<Self> {
        let train = &corpus.train;
        let captions: Vec<&str> = train
            .iter()
            .flat_map(|s| s.captions.iter().map(String::as_str))
            .collect();
        if captions.is_empty() {
            return Err(Error::EmptyCorpus(0));
        }
        let vocab = Vocabulary::build(captions.iter().copied());
        let keywords = match keywords {
            Some(k) => k,
            None => compute_keywords(
                &[("train".to_string(), captions.iter().map(|s| s.to_string()).collect())],
                cfg.keywords_k,
                &default_stoplist(),
            )?,
        };
        let kw = keyword_ids(&keywords, &vocab);
        let pairs = pairs(train);
        let mut tokens = Vec::with_capacity(pairs.len());
        let mut masked = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let t = tokenize(&train[p.sample].captions[p.caption], &vocab, cfg.model.max_len)?;
            masked.push(mask_keywords(&t, &kw));
            tokens.push(t);
        }
        Ok(Self {
            vocab,
            keywords,
            pairs,
            tokens,
            masked,
        })
    }
}

/// Per-step record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub info_g: f64,
    pub info_l: f64,
    /// Absent when the keyword loss is disabled.
    pub mlm: Option<f64>,
    pub total: f64,
    #[serde(rename = "R_g")]
    pub r_g: usize,
    #[serde(rename = "R_l")]
    pub r_l: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Losses averaged over steps; eliminated counts summed.
    pub mean: LossBreakdown,
    /// Mean keyword loss over steps that had masked slots.
    pub mean_mlm: Option<f64>,
    pub thresholds: Thresholds,
    /// Pair indices whose global / local rows were dropped this epoch.
    pub eliminated_global: Vec<usize>,
    pub eliminated_local: Vec<usize>,
}

impl EpochReport {
    /// Pairs dropped from at least one loss path.
    pub fn eliminated_any(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .eliminated_global
            .iter()
            .chain(&self.eliminated_local)
            .copied()
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Everything needed to reload a run for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub config: RunConfig,
    pub config_hash: String,
    /// Model dimensions with the vocabulary size filled in.
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub keywords: Vec<String>,
    pub epochs_completed: usize,
}

impl Sidecar {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(SIDECAR))?)?)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub ema: EmaState,
    pub data: TrainingData,
    pub epochs: Vec<EpochReport>,
    pub log: Vec<StepLog>,
    pub sidecar: Sidecar,
}

/// Epoch-seeded shuffle split into batches. A trailing batch of one is
/// merged into its predecessor, since contrastive losses need two pairs.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(last);
        }
    }
    batches
}

struct Banks {
    global: SimilarityBank,
    local: SimilarityBank,
    joint: Option<SimilarityBank>,
}

impl Banks {
    fn new(epoch: usize, len: usize, scheme: Scheme) -> Self {
        Self {
            global: SimilarityBank::new(epoch, BankKind::Global, len),
            local: SimilarityBank::new(epoch, BankKind::Local, len),
            joint: (scheme == Scheme::Joint).then(|| SimilarityBank::new(epoch, BankKind::Joint, len)),
        }
    }

    fn thresholds(&self, cfg: &RunConfig) -> Result<Thresholds> {
        let r = cfg.eba.drop_ratio;
        match &self.joint {
            Some(j) => Thresholds::joint(j, r, cfg.alpha, cfg.beta),
            None => Thresholds::split(&self.global, &self.local, r),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for bank in [Some(&self.global), Some(&self.local), self.joint.as_ref()].into_iter().flatten() {
            let kind = match bank.kind {
                BankKind::Global => "global",
                BankKind::Local => "local",
                BankKind::Joint => "joint",
            };
            bank.save(&dir.join(format!("epoch{:03}_{kind}.ebkb", bank.epoch)))?;
        }
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Trains on the corpus' training split. With `out_dir`, checkpoints, banks
/// and logs are written there after every epoch.
pub fn train(
    corpus: &Corpus,
    keywords: Option<KeywordList>,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainingData::prepare(corpus, keywords, cfg)?;
    let l = data.pairs.len();
    if l < 2 {
        return Err(Error::Config(format!("training needs at least 2 pairs, got {l}")));
    }
    let feat_shape = corpus.train[0].features.shape().to_vec();
    let mut mcfg = cfg.model.clone();
    if feat_shape != [mcfg.patches, mcfg.d_in] {
        return Err(Error::Config(format!(
            "corpus patches are {feat_shape:?}, model expects [{}, {}]",
            mcfg.patches, mcfg.d_in
        )));
    }
    mcfg.vocab_size = data.vocab.len();
    let tc = &cfg.train;
    let mut model = Model::init(mcfg.clone(), &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    let mut ema = EmaState::new(&model.params, tc.ema_decay)?;
    let mut opt = AdamW::new(tc);
    let mut sidecar = Sidecar {
        format: "ebaker-run-v1".into(),
        config: cfg.clone(),
        config_hash: cfg.hash()?,
        model: mcfg,
        vocab: data.vocab.clone(),
        keywords: data.keywords.keywords.clone(),
        epochs_completed: 0,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        File::create(dir.join(TRAIN_LOG))?;
        File::create(dir.join(EPOCH_LOG))?;
    }

    let scheme = cfg.eba.scheme;
    let steps_per_epoch = epoch_batches(l, tc.batch_size, tc.seed, 0).len();
    let total_iters = steps_per_epoch * tc.epochs;
    let mut thresholds = Thresholds::inactive(scheme, cfg.alpha, cfg.beta);
    let mut iter = 0usize;
    let mut log = Vec::new();
    let mut reports = Vec::new();
    let use_ker = cfg.loss.mlm_weight != 0.0;

    for epoch in 0..tc.epochs {
        let eliminating = cfg.eba.enabled && epoch >= cfg.loss.drop_epoch && thresholds.is_active();
        let mut banks = Banks::new(epoch, l, scheme);
        let mut epoch_log = Vec::new();
        let mut elim_g = Vec::new();
        let mut elim_l = Vec::new();
        for batch in epoch_batches(l, tc.batch_size, tc.seed, epoch) {
            let mut g = Graph::new();
            let images: Vec<_> = batch
                .iter()
                .map(|&i| &corpus.train[data.pairs[i].sample].features)
                .collect();
            let texts: Vec<&[usize]> = batch.iter().map(|&i| data.tokens[i].as_slice()).collect();
            let vision = model.encode_images(&mut g, &images)?;
            let text = model.encode_texts(&mut g, &texts)?;
            let (sg, sl) = batch_similarity(&mut g, &vision, &text)?;
            let b = batch.len();
            let diag_g: Vec<f64> = (0..b).map(|i| g.value(sg).at(i, i)).collect();
            let diag_l: Vec<f64> = (0..b).map(|i| g.value(sl).at(i, i)).collect();
            for (k, &pair) in batch.iter().enumerate() {
                banks.global.record(pair, diag_g[k])?;
                banks.local.record(pair, diag_l[k])?;
                if let Some(j) = banks.joint.as_mut() {
                    j.record(pair, cfg.alpha * diag_g[k] + cfg.beta * diag_l[k])?;
                }
            }
            let mask = if eliminating {
                let m = eliminate(&diag_g, &diag_l, &thresholds, scheme)?;
                elim_g.extend((0..b).filter(|&k| !m.keep_global[k]).map(|k| batch[k]));
                elim_l.extend((0..b).filter(|&k| !m.keep_local[k]).map(|k| batch[k]));
                Some(m)
            } else {
                None
            };

            let mut targets = Vec::new();
            let logits = if use_ker {
                let masked: Vec<&[usize]> = batch.iter().map(|&i| data.masked[i].ids.as_slice()).collect();
                let positions: Vec<Vec<usize>> = batch
                    .iter()
                    .map(|&i| data.masked[i].masked_positions.iter().map(|p| p - 1).collect())
                    .collect();
                for &i in &batch {
                    targets.extend_from_slice(&data.masked[i].masked_targets);
                }
                let mtext = model.encode_texts(&mut g, &masked)?;
                model.ker_forward(&mut g, &mtext, &vision, &positions)?
            } else {
                g.constant(tensorlab::Tensor::zeros(&[0, model.cfg.vocab_size]))
            };
            let inv_temp = {
                let lt = g.param(&model.params, crate::model::LOG_TEMP)?;
                let neg = g.scale(lt, -1.0);
                g.exp(neg)
            };
            let parts = LossInputs {
                sim_global: sg,
                sim_local: sl,
                inv_temp,
                mlm_logits: logits,
                mlm_targets: &targets,
            };
            let (loss, parts_out) = total_loss(&mut g, &parts, epoch, &cfg.loss, mask.as_ref())?;
            g.backward(loss)?;
            g.check_finite()?;
            let mut grads = g.param_grads();
            clip_grad_norm(&mut grads, tc.max_grad_norm)?;
            opt.step(&mut model.params, &grads, lr_at(iter, total_iters, tc))?;
            ema.update(&model.params)?;

            epoch_log.push(StepLog {
                epoch,
                step: iter,
                info_g: parts_out.info_global,
                info_l: parts_out.info_local,
                mlm: (use_ker && !targets.is_empty()).then_some(parts_out.mlm),
                total: parts_out.total,
                r_g: parts_out.r_global,
                r_l: parts_out.r_local,
            });
            iter += 1;
        }
        elim_g.sort_unstable();
        elim_l.sort_unstable();
        let n = epoch_log.len() as f64;
        let report = EpochReport {
            epoch,
            steps: epoch_log.len(),
            mean: LossBreakdown {
                info_global: epoch_log.iter().map(|s| s.info_g).sum::<f64>() / n,
                info_local: epoch_log.iter().map(|s| s.info_l).sum::<f64>() / n,
                mlm: epoch_log.iter().filter_map(|s| s.mlm).sum::<f64>() / n,
                total: epoch_log.iter().map(|s| s.total).sum::<f64>() / n,
                r_global: epoch_log.iter().map(|s| s.r_g).sum(),
                r_local: epoch_log.iter().map(|s| s.r_l).sum(),
            },
            mean_mlm: mean(epoch_log.iter().filter_map(|s| s.mlm)),
            thresholds: if eliminating {
                thresholds.clone()
            } else {
                Thresholds::inactive(scheme, cfg.alpha, cfg.beta)
            },
            eliminated_global: elim_g,
            eliminated_local: elim_l,
        };
        log::info!(
            "epoch {epoch}: total {:.4} info_g {:.4} info_l {:.4} mlm {:?} R_g {} R_l {}",
            report.mean.total,
            report.mean.info_global,
            report.mean.info_local,
            report.mean_mlm,
            report.mean.r_global,
            report.mean.r_local
        );
        if cfg.eba.enabled && cfg.eba.drop_ratio > 0.0 {
            thresholds = banks.thresholds(cfg)?;
        }
        sidecar.epochs_completed = epoch + 1;
        if let Some(dir) = out_dir {
            banks.save(&dir.join("banks"))?;
            model.params.save(dir.join(LIVE_CHECKPOINT))?;
            ema.shadow.save(dir.join(EMA_CHECKPOINT))?;
            fs::write(dir.join(SIDECAR), serde_json::to_string_pretty(&sidecar)? + "\n")?;
            append_jsonl(&dir.join(TRAIN_LOG), &epoch_log)?;
            append_jsonl(&dir.join(EPOCH_LOG), std::slice::from_ref(&report))?;
        }
        log.extend(epoch_log);
        reports.push(report);
    }
    Ok(TrainOutcome {
        model,
        ema,
        data,
        epochs: reports,
        log,
        sidecar,
    })
}

fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::OpenOptions::new().append(true).create(true).open(path)?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// The checkpoint a run evaluates with by default: the EMA weights unless
/// the run config turned that off.
pub fn default_checkpoint(dir: &Path) -> Result<PathBuf> {
    let sidecar = Sidecar::load(dir)?;
    let name = if sidecar.config.eval_with_ema { EMA_CHECKPOINT } else { LIVE_CHECKPOINT };
    Ok(dir.join(name))
}

/// A trained model reloaded from a checkpoint file and its run sidecar.
pub struct Checkpoint {
    pub path: PathBuf,
    /// First 16 hex digits of the SHA-256 of the checkpoint bytes.
    pub id: String,
    pub model: Model,
    pub sidecar: Sidecar,
}

impl Checkpoint {
    /// Loads `path` (live or EMA weights); the sidecar is read from the same
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        use sha2::{Digest, Sha256};
        let dir = path.parent().unwrap_or(Path::new("."));
        let sidecar = Sidecar::load(dir)?;
        let bytes = fs::read(path)?;
        let id = hex::encode(&Sha256::digest(&bytes)[..8]);
        let params = ParamStore::read_from(bytes.as_slice())?;
        let model = Model::from_params(sidecar.model.clone(), params)?;
        Ok(Self {
            path: path.to_path_buf(),
            id,
            model,
            sidecar,
        })
    }
}
