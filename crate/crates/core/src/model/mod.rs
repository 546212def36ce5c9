//! Twin-tower encoders producing global and local features, and the keyword
//! reasoning head that predicts masked keywords from the image.
//!
//! All batch entry points work on a flat row layout: the rows of every sample
//! are stacked, and per-sample row counts travel alongside.

mod config;
mod layers;

use rand::Rng;
use tensorlab::{AttnLayout, Graph, ParamStore, Tensor, Var};

pub use config::ModelConfig;
use layers::{Ctx, Init, Layout};

use crate::corpus::EOS;
use crate::error::{Error, Result};

pub const LOG_TEMP: &str = "loss.log_temp";

/// Graph nodes for a batch of encoded samples.
#[derive(Clone, Debug)]
pub struct BatchFeatures {
    /// `B × d_out`.
    pub global: Var,
    /// Local rows of every sample, stacked: `Σ local_lens × d_out`.
    pub locals: Var,
    pub local_lens: Vec<usize>,
    /// Every output row in encoder order (global included):
    /// `Σ token_lens × d_out`.
    pub tokens: Var,
    pub token_lens: Vec<usize>,
}

impl BatchFeatures {
    pub fn len(&self) -> usize {
        self.local_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local_lens.is_empty()
    }

    /// Per-sample feature values, detached from the graph.
    pub fn packs(&self, g: &Graph) -> Vec<FeaturePack> {
        let global = g.value(self.global);
        let locals = g.value(self.locals);
        let mut off = 0;
        self.local_lens
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                let pack = FeaturePack {
                    global: global.row(b).to_vec(),
                    locals: locals.slice_rows(off, off + n),
                };
                off += n;
                pack
            })
            .collect()
    }
}

/// One sample's global feature and its local feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    pub global: Vec<f64>,
    pub locals: Tensor,
}

/// Rows of `[SOS] words… [EOS]`, with any trailing padding stripped.
/// Stripping pads is equivalent to masking them as keys, since the causal
/// mask already hides them from every real position.
pub fn content_len(tokens: &[usize]) -> Result<usize> {
    tokens
        .iter()
        .position(|&t| t == EOS)
        .map(|p| p + 1)
        .ok_or(Error::MissingEos)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    fn layout(cfg: &ModelConfig) -> Layout {
        let mut l = Layout::default();
        let (dm, dk) = (cfg.d_model, cfg.d_out);

        l.linear("vision.patch", cfg.d_in, dm, true);
        l.push("vision.cls".into(), &[1, dm], Init::Normal);
        l.push("vision.pos".into(), &[cfg.patches + 1, dm], Init::Normal);
        l.layer_norm("vision.ln_pre", dm);
        for i in 0..cfg.layers {
            l.block(&format!("vision.block{i}"), dm, cfg.mlp_ratio);
        }
        l.layer_norm("vision.ln_post", dm);
        l.linear("vision.proj", dm, dk, false);

        l.push("text.token_embedding".into(), &[cfg.vocab_size, dm], Init::Normal);
        l.push("text.pos".into(), &[cfg.max_len, dm], Init::Normal);
        for i in 0..cfg.layers {
            l.block(&format!("text.block{i}"), dm, cfg.mlp_ratio);
        }
        l.layer_norm("text.ln_final", dm);
        l.linear("text.proj", dm, dk, false);

        l.layer_norm("ker.ln_q", dk);
        l.layer_norm("ker.ln_kv", dk);
        l.attention("ker.cross", dk);
        for i in 0..cfg.ker_blocks {
            l.block(&format!("ker.block{i}"), dk, cfg.mlp_ratio);
        }
        l.layer_norm("ker.ln_post", dk);
        l.linear("ker.mlm.l1", dk, dk, true);
        l.layer_norm("ker.mlm.ln", dk);
        l.linear("ker.mlm.l2", dk, cfg.vocab_size, true);

        l.push(LOG_TEMP.into(), &[1], Init::Const(cfg.init_temperature.ln()));
        l
    }

    /// Truncated-normal weights, zero biases, unit LayerNorm gains.
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let params = Self::layout(&cfg).materialize(cfg.init_std, rng);
        Ok(Self { cfg, params })
    }

    /// Pairs `params` with `cfg`, checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let layout = Self::layout(&cfg);
        if layout.0.len() != params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                layout.0.len()
            )));
        }
        for spec in &layout.0 {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "{} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::Shape(format!("checkpoint lacks {}", spec.name))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(LOG_TEMP).map_or(f64::NAN, |t| t.item().exp())
    }

    fn ctx(&self) -> Ctx<'_> {
        Ctx {
            store: &self.params,
            eps: self.cfg.ln_eps,
        }
    }

    /// Vision tower over a batch of `N × d_in` patch matrices. The global
    /// feature comes from the `[CLS]` row.
    pub fn encode_images(&self, g: &mut Graph, images: &[&Tensor]) -> Result<BatchFeatures> {
        let cfg = &self.cfg;
        let (n, b) = (cfg.patches, images.len());
        let mut data = Vec::with_capacity(b * n * cfg.d_in);
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [n, cfg.d_in] {
                return Err(Error::Shape(format!(
                    "image {i} has shape {:?}, encoder expects [{n}, {}]",
                    img.shape(),
                    cfg.d_in
                )));
            }
            data.extend_from_slice(img.data());
        }
        let c = self.ctx();
        let x = g.constant(Tensor::new(&[b * n, cfg.d_in], data)?);
        let patches = c.linear(g, "vision.patch", x, true)?;
        let cls = c.p(g, "vision.cls")?;
        let stacked = g.concat_rows(&[cls, patches])?;
        let seq = n + 1;
        let mut order = Vec::with_capacity(b * seq);
        let mut pos_idx = Vec::with_capacity(b * seq);
        for s in 0..b {
            order.push(0);
            order.extend((0..n).map(|i| 1 + s * n + i));
            pos_idx.extend(0..seq);
        }
        let tokens = g.gather_rows(stacked, &order)?;
        let pos_table = c.p(g, "vision.pos")?;
        let pos = g.gather_rows(pos_table, &pos_idx)?;
        let mut h = g.add(tokens, pos)?;
        h = c.layer_norm(g, "vision.ln_pre", h)?;
        let layout = AttnLayout::segments(vec![seq; b], vec![seq; b]);
        for i in 0..cfg.layers {
            h = c.block(g, &format!("vision.block{i}"), h, cfg.heads, &layout)?;
        }
        h = c.layer_norm(g, "vision.ln_post", h)?;
        let out = c.linear(g, "vision.proj", h, false)?;

        let global_idx: Vec<usize> = (0..b).map(|s| s * seq).collect();
        let local_idx: Vec<usize> = (0..b)
            .flat_map(|s| (1..seq).map(move |i| s * seq + i))
            .collect();
        Ok(BatchFeatures {
            global: g.gather_rows(out, &global_idx)?,
            locals: g.gather_rows(out, &local_idx)?,
            local_lens: vec![n; b],
            tokens: out,
            token_lens: vec![seq; b],
        })
    }

    /// Causal text tower. The global feature is the `[EOS]` row; locals are
    /// the word rows between `[SOS]` and `[EOS]`.
    pub fn encode_texts(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<BatchFeatures> {
        let cfg = &self.cfg;
        let mut ids = Vec::new();
        let mut pos_idx = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let len = content_len(seq)?;
            if len > cfg.max_len {
                return Err(Error::Shape(format!(
                    "sequence of {len} tokens exceeds max_len {}",
                    cfg.max_len
                )));
            }
            ids.extend_from_slice(&seq[..len]);
            pos_idx.extend(0..len);
            lens.push(len);
        }
        let c = self.ctx();
        let table = c.p(g, "text.token_embedding")?;
        let emb = g.embedding(table, &ids)?;
        let pos_table = c.p(g, "text.pos")?;
        let pos = g.gather_rows(pos_table, &pos_idx)?;
        let mut h = g.add(emb, pos)?;
        let layout = AttnLayout::segments(lens.clone(), lens.clone()).causal();
        for i in 0..cfg.layers {
            h = c.block(g, &format!("text.block{i}"), h, cfg.heads, &layout)?;
        }
        h = c.layer_norm(g, "text.ln_final", h)?;
        let out = c.linear(g, "text.proj", h, false)?;

        let mut global_idx = Vec::with_capacity(lens.len());
        let mut local_idx = Vec::new();
        let mut off = 0;
        for &len in &lens {
            global_idx.push(off + len - 1);
            local_idx.extend(off + 1..off + len - 1);
            off += len;
        }
        Ok(BatchFeatures {
            global: g.gather_rows(out, &global_idx)?,
            locals: g.gather_rows(out, &local_idx)?,
            local_lens: lens.iter().map(|l| l.saturating_sub(2)).collect(),
            tokens: out,
            token_lens: lens,
        })
    }

    /// Keyword reasoning head: masked text locals attend to every vision row,
    /// pass through the KER blocks, and the rows at `masked[b]` (indices into
    /// sample `b`'s locals) are mapped to vocabulary logits, `M × V`.
    pub fn ker_forward(
        &self,
        g: &mut Graph,
        text: &BatchFeatures,
        vision: &BatchFeatures,
        masked: &[Vec<usize>],
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let b = text.len();
        if vision.len() != b || masked.len() != b {
            return Err(Error::Shape(format!(
                "KER got {b} texts, {} images, {} mask lists",
                vision.len(),
                masked.len()
            )));
        }
        let mut rows = Vec::new();
        let mut off = 0;
        for (s, (pos, &w)) in masked.iter().zip(&text.local_lens).enumerate() {
            if let Some(&p) = pos.iter().find(|&&p| p >= w) {
                return Err(Error::Shape(format!(
                    "masked position {p} outside the {w} locals of sample {s}"
                )));
            }
            rows.extend(pos.iter().map(|p| off + p));
            off += w;
        }
        if rows.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[0, cfg.vocab_size])));
        }
        let c = self.ctx();
        let q = c.layer_norm(g, "ker.ln_q", text.locals)?;
        let kv = c.layer_norm(g, "ker.ln_kv", vision.tokens)?;
        let cross = AttnLayout::segments(text.local_lens.clone(), vision.token_lens.clone());
        let mut h = c.attention(g, "ker.cross", q, kv, cfg.ker_heads, &cross)?;
        let own = AttnLayout::segments(text.local_lens.clone(), text.local_lens.clone());
        for i in 0..cfg.ker_blocks {
            h = c.block(g, &format!("ker.block{i}"), h, cfg.ker_heads, &own)?;
        }
        h = c.layer_norm(g, "ker.ln_post", h)?;
        let o = g.gather_rows(h, &rows)?;
        let o = c.linear(g, "ker.mlm.l1", o, true)?;
        let o = g.quick_gelu(o);
        let o = c.layer_norm(g, "ker.mlm.ln", o)?;
        c.linear(g, "ker.mlm.l2", o, true)
    }

    /// Learned temperature as a graph node, `exp(loss.log_temp)`.
    pub fn temperature_var(&self, g: &mut Graph) -> Result<Var> {
        let lt = g.param(&self.params, LOG_TEMP)?;
        Ok(g.exp(lt))
    }

    pub fn encode_image(&self, patches: &Tensor) -> Result<FeaturePack> {
        let mut g = Graph::new();
        let f = self.encode_images(&mut g, &[patches])?;
        Ok(f.packs(&g).remove(0))
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<FeaturePack> {
        let mut g = Graph::new();
        let f = self.encode_texts(&mut g, &[tokens])?;
        Ok(f.packs(&g).remove(0))
    }

    /// Encodes many images in chunks of `chunk` to bound graph size.
    pub fn encode_image_packs(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<FeaturePack>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let f = self.encode_images(&mut g, part)?;
            out.extend(f.packs(&g));
        }
        Ok(out)
    }

    pub fn encode_text_packs(&self, seqs: &[&[usize]], chunk: usize) -> Result<Vec<FeaturePack>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let f = self.encode_texts(&mut g, part)?;
            out.extend(f.packs(&g));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_in: 8,
            patches: 16,
            d_model: 16,
            d_out: 32,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            max_len: 12,
            vocab_size: 100,
            ker_blocks: 1,
            ker_heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn canonical_names_exist() {
        let m = Model::init(ModelConfig { vocab_size: 20, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for name in [
            "vision.block0.attn.wq",
            "vision.block1.mlp.proj.bias",
            "text.token_embedding",
            "ker.block3.ln2.gain",
            "ker.mlm.l2.bias",
            LOG_TEMP,
        ] {
            assert!(m.params.contains(name), "{name}");
        }
        assert!((m.temperature() - 0.07).abs() < 1e-15);
        assert!(Model::from_params(m.cfg.clone(), m.params.clone()).is_ok());
    }

    #[test]
    fn shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(tiny(), &mut rng).unwrap();
        let img = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let f = m.encode_image(&img).unwrap();
        assert_eq!(f.global.len(), 32);
        assert_eq!(f.locals.shape(), &[16, 32]);
        assert!(m.encode_image(&Tensor::zeros(&[15, 8])).is_err());

        let t = m.encode_text(&[1, 7, 8, 9, 2, 0, 0]).unwrap();
        assert_eq!(t.global.len(), 32);
        assert_eq!(t.locals.shape(), &[3, 32]);
        assert!(matches!(m.encode_text(&[1, 7, 8]), Err(Error::MissingEos)));
    }

    #[test]
    fn ker_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::init(tiny(), &mut rng).unwrap();
        let img = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let mut seq = vec![1];
        seq.extend(5..15);
        seq[1] = crate::corpus::MASK;
        seq.truncate(11);
        seq.push(2);
        let mut g = Graph::new();
        let v = m.encode_images(&mut g, &[&img]).unwrap();
        let t = m.encode_texts(&mut g, &[&seq]).unwrap();
        assert_eq!(t.local_lens, vec![10]);
        let logits = m.ker_forward(&mut g, &t, &v, &[vec![0, 4, 9]]).unwrap();
        assert_eq!(g.value(logits).shape(), &[3, 100]);
        let none = m.ker_forward(&mut g, &t, &v, &[vec![]]).unwrap();
        assert_eq!(g.value(none).shape(), &[0, 100]);
        assert!(m.ker_forward(&mut g, &t, &v, &[vec![10]]).is_err());
    }
}
