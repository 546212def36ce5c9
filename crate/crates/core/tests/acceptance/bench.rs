//! The synthetic benchmark shared by the directional criteria. Each
//! configuration is trained once per seed and cached. Keywords come from the
//! training captions with the default stoplist, as `train` does on its own.

use std::collections::HashMap;
use std::time::Instant;

use ebaker::config::RunConfig;
use ebaker::corpus::{generate_synthetic, Corpus, SynthConfig};
use ebaker::eval::{split_similarity, EvalOptions, Metrics, SplitSimilarity};
use ebaker::model::Model;
use ebaker::trainer::{train, TrainOutcome};

pub const SEEDS: [u64; 3] = [1, 2, 3];

/// Desk-scale settings for the from-scratch towers; everything else keeps the
/// library defaults.
pub const BASE_CONFIG: &str = include_str!("../../../../configs/synthetic.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Arm {
    pub eba: bool,
    pub ker: bool,
}

pub const NO_EBA: Arm = Arm { eba: false, ker: true };
pub const FULL: Arm = Arm { eba: true, ker: true };
pub const NO_KER: Arm = Arm { eba: false, ker: false };

pub struct Run {
    pub outcome: TrainOutcome,
    pub corpus: Corpus,
    pub sims: SplitSimilarity,
    pub seconds: f64,
}

impl Run {
    pub fn model(&self) -> Model {
        let o = &self.outcome;
        Model::from_params(o.sidecar.model.clone(), o.ema.shadow.clone()).expect("EMA shadow matches config")
    }

    pub fn metrics(&self, opts: &EvalOptions) -> Metrics {
        self.sims.metrics(opts).expect("metrics")
    }

    pub fn m_r(&self) -> f64 {
        self.metrics(&EvalOptions { alpha: 0.6, beta: 0.4, sar: None }).m_r
    }

    /// Fraction of the pairs eliminated in the final epoch (by either path)
    /// that the manifest lists as corrupted, with the counts.
    pub fn final_precision(&self) -> (f64, usize, usize) {
        let last = self.outcome.epochs.last().expect("at least one epoch");
        let manifest = self.corpus.manifest.as_ref().expect("synthetic manifest");
        let gone = last.eliminated_any();
        let hits = gone
            .iter()
            .filter(|&&p| {
                let pair = self.outcome.data.pairs[p];
                manifest.is_corrupted(&self.corpus.train[pair.sample].sample_id, pair.caption)
            })
            .count();
        let frac = if gone.is_empty() { 0.0 } else { hits as f64 / gone.len() as f64 };
        (frac, hits, gone.len())
    }
}

pub fn corpus(seed: u64) -> Corpus {
    generate_synthetic(&SynthConfig { seed, corrupt_eval_splits: false, ..Default::default() }).expect("synthetic corpus")
}

pub fn config(arm: Arm, seed: u64) -> RunConfig {
    let mut cfg: RunConfig = serde_json::from_str(BASE_CONFIG).expect("benchmark config");
    cfg.eba.enabled = arm.eba;
    if !arm.ker {
        cfg.loss.mlm_weight = 0.0;
    }
    cfg.train.seed = seed;
    cfg
}

#[derive(Default)]
pub struct Bench {
    runs: HashMap<(Arm, u64), Run>,
}

impl Bench {
    pub fn run(&mut self, arm: Arm, seed: u64) -> &Run {
        self.runs.entry((arm, seed)).or_insert_with(|| {
            let corpus = corpus(seed);
            let start = Instant::now();
            let outcome = train(&corpus, None, &config(arm, seed), None).expect("training");
            let seconds = start.elapsed().as_secs_f64();
            let model = Model::from_params(outcome.sidecar.model.clone(), outcome.ema.shadow.clone())
                .expect("EMA shadow matches config");
            let sims = split_similarity(&model, &outcome.data.vocab, &corpus.test).expect("test similarities");
            Run { outcome, corpus, sims, seconds }
        })
    }

    /// Test mR of each seed, in seed order.
    pub fn m_rs(&mut self, arm: Arm) -> Vec<f64> {
        SEEDS.iter().map(|&s| self.run(arm, s).m_r()).collect()
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
