//! Patch embedding, sinusoidal positions, pre-norm transformer encoder and
//! decoder, and the linear classification head.
//!
//! Token matrices carry several clips stacked row-wise; every clip in a batch
//! has the same sequence length, which attention and pooling use to keep
//! clips separate.

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{param_count, DecoderConfig, EncoderConfig, ModelConfig, Scale};

use crate::patch::{MaskPlan, PatchGrid};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(·)`.
pub fn sinusoidal_pos_encoding<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    assert!(d % 2 == 0, "position encoding width must be even");
    Tensor::from_fn([n, d], |idx| {
        let (pos, c) = (idx / d, idx % d);
        let pair = (c / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Vec<T> {
    idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect()
}

/// A model configuration and its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Result of a masked-reconstruction forward pass.
pub struct PretrainForward {
    /// Per-element mean squared error over masked patches (the objective).
    pub loss: Var,
    /// Decoder output for masked rows, `(batch·N) × patch_dim`.
    pub recon: Var,
    /// Decoder output for every row, `(batch·n) × patch_dim`.
    pub recon_all: Var,
    /// Encoder output for survivors, before the decoder projection.
    pub encoded: Var,
    /// Mask-token leaf.
    pub mask_token: Var,
}

impl<T: Scalar> Model<T> {
    /// Fresh model: truncated-normal (±2σ) weights and mask token, zero biases,
    /// unit LayerNorm gains.
    pub fn new(config: ModelConfig, seed: u64) -> std::result::Result<Self, TensorError> {
        config.validate().map_err(TensorError::Contract)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("finite std");
        let bound = 2.0 * config.init_std;
        let mut trunc = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= bound {
                    break T::lit(v);
                }
            })
        };
        let mut params = ParamStore::new();
        let linear = |params: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, w: Tensor<T>| {
            debug_assert_eq!(w.shape(), &[fan_in, fan_out]);
            params.insert(format!("{name}.weight"), w)?;
            params.insert(format!("{name}.bias"), Tensor::zeros([fan_out]))?;
            Ok::<_, TensorError>(())
        };
        let norm = |params: &mut ParamStore<T>, name: &str, d: usize| {
            params.insert(format!("{name}.gamma"), Tensor::full([d], T::one()))?;
            params.insert(format!("{name}.beta"), Tensor::zeros([d]))?;
            Ok::<_, TensorError>(())
        };

        let e = config.encoder.clone();
        linear(&mut params, "encoder.patch_embed", e.patch_dim, e.emb, trunc(&[e.patch_dim, e.emb]))?;
        for i in 0..e.depth {
            let pre = format!("encoder.blocks.{i}");
            norm(&mut params, &format!("{pre}.norm1"), e.emb)?;
            for proj in ["q", "k", "v", "proj"] {
                linear(&mut params, &format!("{pre}.attn.{proj}"), e.emb, e.emb, trunc(&[e.emb, e.emb]))?;
            }
            norm(&mut params, &format!("{pre}.norm2"), e.emb)?;
            linear(&mut params, &format!("{pre}.mlp.fc1"), e.emb, e.ffn, trunc(&[e.emb, e.ffn]))?;
            linear(&mut params, &format!("{pre}.mlp.fc2"), e.ffn, e.emb, trunc(&[e.ffn, e.emb]))?;
        }
        norm(&mut params, "encoder.norm", e.emb)?;

        if let Some(d) = config.decoder.clone() {
            linear(&mut params, "decoder.embed", e.emb, d.emb, trunc(&[e.emb, d.emb]))?;
            params.insert("decoder.mask_token", trunc(&[d.emb]))?;
            for i in 0..d.depth {
                let pre = format!("decoder.blocks.{i}");
                norm(&mut params, &format!("{pre}.norm1"), d.emb)?;
                for proj in ["q", "k", "v", "proj"] {
                    linear(&mut params, &format!("{pre}.attn.{proj}"), d.emb, d.emb, trunc(&[d.emb, d.emb]))?;
                }
                norm(&mut params, &format!("{pre}.norm2"), d.emb)?;
                linear(&mut params, &format!("{pre}.mlp.fc1"), d.emb, d.ffn, trunc(&[d.emb, d.ffn]))?;
                linear(&mut params, &format!("{pre}.mlp.fc2"), d.ffn, d.emb, trunc(&[d.ffn, d.emb]))?;
            }
            norm(&mut params, "decoder.norm", d.emb)?;
            linear(&mut params, "decoder.pred", d.emb, d.out_dim, trunc(&[d.emb, d.out_dim]))?;
        }
        if let Some(c) = config.num_classes {
            linear(&mut params, "head", e.emb, c, trunc(&[e.emb, c]))?;
        }
        Ok(Self { config, params })
    }

    fn p(&self, g: &Graph<T>, name: &str) -> Result<Var> {
        let id = self.params.id(name).ok_or_else(|| TensorError::Contract(format!("model has no parameter {name}")))?;
        Ok(g.param(&self.params, id))
    }

    fn linear(&self, g: &Graph<T>, x: Var, name: &str) -> Result<Var> {
        let w = self.p(g, &format!("{name}.weight"))?;
        let b = self.p(g, &format!("{name}.bias"))?;
        g.linear(x, w, b)
    }

    fn norm(&self, g: &Graph<T>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{name}.gamma"))?;
        let beta = self.p(g, &format!("{name}.beta"))?;
        g.layer_norm(x, gamma, beta, T::lit(self.config.ln_eps))
    }

    /// LN → MHA → residual; LN → FFN(GELU) → residual.
    fn block(&self, g: &Graph<T>, x: Var, prefix: &str, heads: usize, seq_len: usize) -> Result<Var> {
        let h = self.norm(g, x, &format!("{prefix}.norm1"))?;
        let q = self.linear(g, h, &format!("{prefix}.attn.q"))?;
        let k = self.linear(g, h, &format!("{prefix}.attn.k"))?;
        let v = self.linear(g, h, &format!("{prefix}.attn.v"))?;
        let a = g.attention(q, k, v, heads, seq_len)?;
        let a = self.linear(g, a, &format!("{prefix}.attn.proj"))?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, &format!("{prefix}.norm2"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc1"))?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc2"))?;
        g.add(x, h)
    }

    /// Affine projection of flattened patches to encoder width.
    pub fn patch_embed(&self, g: &Graph<T>, patches: Var) -> Result<Var> {
        let cols = *g.shape(patches).last().expect("rank >= 1");
        if cols != self.config.encoder.patch_dim {
            return Err(TensorError::Contract(format!(
                "patch vectors have length {cols}, expected {}",
                self.config.encoder.patch_dim
            )));
        }
        self.linear(g, patches, "encoder.patch_embed")
    }

    /// Encoder blocks and final LayerNorm. No positional information is added here.
    pub fn encoder_forward(&self, g: &Graph<T>, tokens: Var, seq_len: usize) -> Result<Var> {
        let e = &self.config.encoder;
        let mut x = tokens;
        for i in 0..e.depth {
            x = self.block(g, x, &format!("encoder.blocks.{i}"), e.heads, seq_len)?;
        }
        self.norm(g, x, "encoder.norm")
    }

    /// Decoder blocks, final LayerNorm and the per-patch output projection.
    /// The input already holds mask tokens and decoder positions.
    pub fn decoder_forward(&self, g: &Graph<T>, full_seq: Var, seq_len: usize) -> Result<Var> {
        let d = self.decoder_config()?;
        let mut x = full_seq;
        for i in 0..d.depth {
            x = self.block(g, x, &format!("decoder.blocks.{i}"), d.heads, seq_len)?;
        }
        let x = self.norm(g, x, "decoder.norm")?;
        self.linear(g, x, "decoder.pred")
    }

    /// Mean over each clip's tokens, then the linear head.
    pub fn classifier_forward(&self, g: &Graph<T>, tokens: Var, seq_len: usize) -> Result<Var> {
        if self.config.num_classes.is_none() {
            return Err(TensorError::Contract("model has no classification head".into()));
        }
        let pooled = g.mean_segments(tokens, seq_len)?;
        self.linear(g, pooled, "head")
    }

    fn decoder_config(&self) -> Result<&DecoderConfig> {
        self.config.decoder.as_ref().ok_or_else(|| TensorError::Contract("model has no decoder".into()))
    }

    /// Masked reconstruction for a batch of equally sized grids, one plan each.
    ///
    /// Embeds survivors only (embedding is row-wise, so this equals embedding
    /// all patches and then dropping the masked ones), adds encoder positions,
    /// encodes, projects to decoder width, scatters the mask token into masked
    /// slots, adds decoder positions, decodes, and scores masked rows.
    pub fn pretrain_forward(&self, g: &Graph<T>, grids: &[PatchGrid<T>], plans: &[MaskPlan]) -> Result<PretrainForward> {
        self.pretrain_forward_with_targets(g, grids, grids, plans)
    }

    /// As [`Model::pretrain_forward`], scoring against `targets` instead of
    /// the input grids. Only masked rows of `targets` are read.
    pub fn pretrain_forward_with_targets(
        &self,
        g: &Graph<T>,
        grids: &[PatchGrid<T>],
        targets: &[PatchGrid<T>],
        plans: &[MaskPlan],
    ) -> Result<PretrainForward> {
        let d = self.decoder_config()?.clone();
        let e = &self.config.encoder;
        let first = grids.first().ok_or_else(|| TensorError::Contract("empty batch".into()))?;
        let n = first.n();
        if plans.len() != grids.len() || targets.len() != grids.len() {
            return Err(TensorError::Contract(format!("{} grids but {} plans", grids.len(), plans.len())));
        }
        let m = plans[0].num_survivors();
        let masked = plans[0].num_masked();
        for ((grid, target), plan) in grids.iter().zip(targets).zip(plans) {
            if grid.n() != n || plan.n != n || plan.num_survivors() != m || target.patches.shape() != grid.patches.shape() {
                return Err(TensorError::Contract("batch grids and plans must share n and N".into()));
            }
        }
        if m == 0 || masked == 0 {
            return Err(TensorError::Contract(format!("need survivors and masked patches, got {m} / {masked}")));
        }
        let pd = first.patch_dim();
        let batch = grids.len();

        let pe_enc = sinusoidal_pos_encoding::<T>(n, e.emb);
        let pe_dec = sinusoidal_pos_encoding::<T>(n, d.emb);

        let mut surv = Vec::with_capacity(batch * m * pd);
        let mut surv_pe = Vec::with_capacity(batch * m * e.emb);
        let mut target_rows = Vec::with_capacity(batch * masked * pd);
        let mut fill = Vec::with_capacity(batch * n);
        let mut masked_rows = Vec::with_capacity(batch * masked);
        for (b, ((grid, target), plan)) in grids.iter().zip(targets).zip(plans).enumerate() {
            surv.extend(gather_rows(&grid.patches, &plan.survivor_idx));
            surv_pe.extend(gather_rows(&pe_enc, &plan.survivor_idx));
            target_rows.extend(gather_rows(&target.patches, &plan.masked_idx));
            fill.extend(plan.fill_source().into_iter().map(|s| s.map(|k| b * m + k)));
            masked_rows.extend(plan.masked_idx.iter().map(|&i| b * n + i));
        }
        let surv = g.constant(Tensor::new([batch * m, pd], surv)?);
        let surv_pe = g.constant(Tensor::new([batch * m, e.emb], surv_pe)?);
        let target_rows = Tensor::new([batch * masked, pd], target_rows)?;
        let dec_pe: Vec<T> = (0..batch).flat_map(|_| pe_dec.data().iter().copied()).collect();
        let dec_pe = g.constant(Tensor::new([batch * n, d.emb], dec_pe)?);

        let tokens = self.patch_embed(g, surv)?;
        let tokens = g.add(tokens, surv_pe)?;
        let encoded = self.encoder_forward(g, tokens, m)?;
        let projected = self.linear(g, encoded, "decoder.embed")?;
        let mask_token = self.p(g, "decoder.mask_token")?;
        let full = g.fill_rows(projected, mask_token, &fill)?;
        let full = g.add(full, dec_pe)?;
        let recon_all = self.decoder_forward(g, full, n)?;
        let recon = g.gather_rows(recon_all, &masked_rows)?;
        let loss = g.mse(recon, &target_rows)?;
        Ok(PretrainForward { loss, recon, recon_all, encoded, mask_token })
    }

    /// Unmasked encoding of every patch: embed, add positions, encode.
    pub fn encode_grids(&self, g: &Graph<T>, grids: &[PatchGrid<T>]) -> Result<(Var, usize)> {
        let first = grids.first().ok_or_else(|| TensorError::Contract("empty batch".into()))?;
        let (n, pd) = (first.n(), first.patch_dim());
        if grids.iter().any(|gr| gr.n() != n) {
            return Err(TensorError::Contract("batch grids must share n".into()));
        }
        let emb = self.config.encoder.emb;
        let pe = sinusoidal_pos_encoding::<T>(n, emb);
        let patches: Vec<T> = grids.iter().flat_map(|gr| gr.patches.data().iter().copied()).collect();
        let pe: Vec<T> = (0..grids.len()).flat_map(|_| pe.data().iter().copied()).collect();
        let x = g.constant(Tensor::new([grids.len() * n, pd], patches)?);
        let pe = g.constant(Tensor::new([grids.len() * n, emb], pe)?);
        let tokens = self.patch_embed(g, x)?;
        let tokens = g.add(tokens, pe)?;
        Ok((self.encoder_forward(g, tokens, n)?, n))
    }

    /// Classification logits, `batch × num_classes`.
    pub fn classify(&self, g: &Graph<T>, grids: &[PatchGrid<T>]) -> Result<Var> {
        let (enc, n) = self.encode_grids(g, grids)?;
        self.classifier_forward(g, enc, n)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::random_mask_seeded;
    use rand::RngExt;

    fn micro(decoder: bool, classes: Option<usize>) -> ModelConfig {
        ModelConfig {
            patch: 2,
            encoder: EncoderConfig { depth: 2, heads: 2, emb: 8, ffn: 12, patch_dim: 4 },
            decoder: decoder.then_some(DecoderConfig { depth: 1, heads: 2, emb: 6, ffn: 10, out_dim: 4 }),
            num_classes: classes,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }

    fn grid(n: usize, seed: u64) -> PatchGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchGrid { patches: Tensor::from_fn([n, 4], |_| rng.random_range(-1.0..1.0)), rows: 1, cols: n, p: 2 }
    }

    #[test]
    fn store_matches_closed_form_count() {
        for (dec, cls) in [(true, None), (false, Some(3)), (true, Some(5))] {
            let cfg = micro(dec, cls);
            let m = Model::<f64>::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.num_params(), param_count(&cfg, true));
        }
        let tiny = ModelConfig::pretrain(Scale::Tiny, 16);
        let m = Model::<f32>::new(tiny.clone(), 0).unwrap();
        assert_eq!(m.num_params(), param_count(&tiny, true));
        let enc_only: usize = m.params.iter().filter(|(_, p)| p.name.starts_with("encoder.")).map(|(_, p)| p.value.len()).sum();
        assert_eq!(enc_only, param_count(&tiny, false));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Model::<f32>::new(micro(true, None), 7).unwrap();
        let b = Model::<f32>::new(micro(true, None), 7).unwrap();
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value, pb.value);
            if pa.name.ends_with(".weight") || pa.name.ends_with("mask_token") {
                assert!(pa.value.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
            }
        }
        assert_eq!(a.params.by_name("decoder.mask_token").unwrap().value.shape(), &[6]);
    }

    #[test]
    fn position_encoding_properties() {
        let pe = sinusoidal_pos_encoding::<f64>(10, 8);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        let d: f64 = pe.row(3).iter().zip(pe.row(7)).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(d.sqrt() > 0.0);
    }

    #[test]
    fn patch_embed_linearity_and_zero() {
        let m = Model::<f64>::new(micro(false, None), 1).unwrap();
        let g = Graph::new();
        let zero = g.constant(Tensor::zeros([3, 4]));
        let out = g.value(m.patch_embed(&g, zero).unwrap());
        assert!(out.data().iter().all(|&v| v == 0.0));

        let a = grid(3, 1).patches;
        let b = grid(3, 2).patches;
        let sum = crate::tensor::ops::add(&a, &b).unwrap();
        let ea = g.value(m.patch_embed(&g, g.constant(a)).unwrap());
        let eb = g.value(m.patch_embed(&g, g.constant(b)).unwrap());
        let es = g.value(m.patch_embed(&g, g.constant(sum)).unwrap());
        // biases are zero at init
        let lhs = crate::tensor::ops::add(&ea, &eb).unwrap();
        assert!(lhs.max_abs_diff(&es) < 1e-12);

        let bad = g.constant(Tensor::zeros([2, 5]));
        assert!(m.patch_embed(&g, bad).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant_and_deterministic() {
        let m = Model::<f64>::new(micro(false, None), 3).unwrap();
        let x = grid(5, 4).patches;
        let perm = [3usize, 0, 4, 1, 2];
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |t: Tensor<f64>| {
            let g = Graph::new();
            let tok = m.patch_embed(&g, g.constant(t)).unwrap();
            g.value(m.encoder_forward(&g, tok, 5).unwrap())
        };
        let out = run(x.clone());
        let pout = run(px);
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in pout.row(r).iter().zip(out.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert_eq!(run(x.clone()), out);
        assert_eq!(out.shape(), &[5, 8]);
    }

    #[test]
    fn pretrain_forward_shapes_and_gradient_reach() {
        let m = Model::<f64>::new(micro(true, None), 5).unwrap();
        let grids = vec![grid(20, 1), grid(20, 2)];
        let plans = vec![random_mask_seeded(20, 0.75, 1).unwrap(), random_mask_seeded(20, 0.75, 2).unwrap()];
        let g = Graph::new();
        let out = m.pretrain_forward(&g, &grids, &plans).unwrap();
        assert_eq!(g.shape(out.recon_all), vec![40, 4]);
        assert_eq!(g.shape(out.recon), vec![30, 4]);
        assert_eq!(g.shape(out.encoded), vec![10, 8]);
        let grads = g.backward(out.loss).unwrap();
        assert!(grads.wrt(out.encoded).unwrap().data().iter().any(|&v| v != 0.0));
        assert!(grads.wrt(out.mask_token).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn classifier_shapes() {
        let m = Model::<f64>::new(micro(false, Some(527)), 0).unwrap();
        let g = Graph::new();
        let logits = m.classify(&g, &[grid(4, 0)]).unwrap();
        assert_eq!(g.shape(logits), vec![1, 527]);

        // single token: pooling is the identity, zero features give the bias
        let zero = g.constant(Tensor::zeros([1, 8]));
        let l = g.value(m.classifier_forward(&g, zero, 1).unwrap());
        assert!(l.data().iter().all(|&v| v == 0.0));
    }
}
