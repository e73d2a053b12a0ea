//! CNN-fronted transformer encoder/decoder without positional encoding.
//!
//! Position information comes from the VGG-like convolutional front-end on
//! the encoder side and a causal 1-D convolution over embeddings on the
//! decoder side. All blocks are post-norm: `x = layer_norm(x + sublayer(x))`.

pub mod attention;
pub mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::SOS_ID;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::numerics::{Tape, Tensor, Var};

use attention::{causal_mask, multi_head};

pub const LN_EPS: f64 = 1e-6;

/// Architecture hyper-parameters.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub dropout_p: f64,
    /// Output channels of the two convolution blocks.
    pub cnn_channels: (usize, usize),
}

impl ModelConfig {
    /// Desk-scale default, sized for CPU experiments.
    pub fn desk(vocab_size: usize, input_dim: usize) -> Self {
        ModelConfig {
            d_model: 256,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 2,
            d_ff: 1024,
            vocab_size,
            input_dim,
            dropout_p: 0.1,
            cnn_channels: (32, 64),
        }
    }

    /// Full-size preset used for the 960 h experiments this architecture
    /// was designed around.
    pub fn full_960h(vocab_size: usize, input_dim: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            n_enc_layers: 12,
            n_dec_layers: 6,
            d_ff: 2048,
            vocab_size,
            input_dim,
            dropout_p: 0.1,
            cnn_channels: (32, 64),
        }
    }

    /// Miniature preset for gradient checks and overfit harnesses.
    pub fn tiny(vocab_size: usize, input_dim: usize) -> Self {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_ff: 32,
            vocab_size,
            input_dim,
            dropout_p: 0.0,
            cnn_channels: (2, 4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.vocab_size,
            self.input_dim,
            self.cnn_channels.0,
            self.cnn_channels.1,
        ]
        .iter()
        .all(|&v| v > 0);
        if !all_positive {
            return Err(Error::Config("model dims must all be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.input_dim < 4 {
            return Err(Error::Config(format!(
                "input_dim {} too small for two 2x pooling stages",
                self.input_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Frequency extent after the two ceil-mode poolings.
    fn pooled_freq(&self) -> usize {
        ceil_div(ceil_div(self.input_dim, 2), 2)
    }

    /// Flattened channels x freq width feeding the d_model projection.
    fn frontend_flat_dim(&self) -> usize {
        self.cnn_channels.1 * self.pooled_freq()
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Encoder frame count for `t` input frames (two ceil-mode 2x poolings).
pub fn subsampled_len(t: usize) -> usize {
    ceil_div(ceil_div(t, 2), 2)
}

/// Original frame index -> encoder frame index under 4x subsampling.
pub fn subsample_map(t_orig: usize) -> usize {
    t_orig / 4
}

/// Named parameter store; iteration order is the sorted name order, which
/// makes checkpoints and optimizer traversals deterministic.
#[derive(Clone, Debug, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    /// Panics on a missing name: lookups are internal wiring, so a miss is
    /// a bug in model construction rather than a runtime condition.
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

/// Forward-pass mode: training applies dropout from the supplied stream.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

/// Model = config + parameters. Forward passes are free functions over a
/// caller-owned tape so training and decoding control tape lifetime.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
}

/// Encoder states handle plus the frame bookkeeping decoders need.
pub struct EncoderOutput {
    pub states: Var,
    pub t_prime: usize,
}

impl Model {
    /// Deterministic Xavier-uniform initialization from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let d = cfg.d_model;
        let (c1, c2) = cfg.cnn_channels;

        let mat = |p: &mut Params, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let scale = (6.0 / (rows + cols) as f64).sqrt();
            p.insert(name, Tensor::rand_uniform(&[rows, cols], scale, rng));
        };
        let zeros = |p: &mut Params, name: String, len: usize| {
            p.insert(name, Tensor::zeros(&[len]));
        };
        let ones = |p: &mut Params, name: String, len: usize| {
            p.insert(name, Tensor::full(&[len], 1.0));
        };

        // Front-end: two blocks of (conv3x3, ln, relu, conv3x3, ln, relu, pool).
        let freqs = [cfg.input_dim, cfg.input_dim, ceil_div(cfg.input_dim, 2), ceil_div(cfg.input_dim, 2)];
        let chans = [(1, c1), (c1, c1), (c1, c2), (c2, c2)];
        for (i, &(cin, cout)) in chans.iter().enumerate() {
            let block = i / 2;
            let conv = i % 2;
            let fan_in = cin * 9;
            let fan_out = cout * 9;
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            p.insert(
                format!("cnn.b{block}.conv{conv}.w"),
                Tensor::rand_uniform(&[cout, cin, 3, 3], scale, &mut rng),
            );
            zeros(&mut p, format!("cnn.b{block}.conv{conv}.b"), cout);
            ones(&mut p, format!("cnn.b{block}.ln{conv}.g"), freqs[i]);
            zeros(&mut p, format!("cnn.b{block}.ln{conv}.b"), freqs[i]);
        }
        mat(&mut p, "cnn.proj.w".into(), cfg.frontend_flat_dim(), d, &mut rng);
        zeros(&mut p, "cnn.proj.b".into(), d);

        let mha = |p: &mut Params, prefix: String, rng: &mut ChaCha8Rng| {
            for which in ["q", "k", "v", "o"] {
                mat(p, format!("{prefix}.w{which}"), d, d, rng);
                zeros(p, format!("{prefix}.b{which}"), d);
            }
        };
        let ff = |p: &mut Params, prefix: String, rng: &mut ChaCha8Rng| {
            mat(p, format!("{prefix}.w1"), d, cfg.d_ff, rng);
            zeros(p, format!("{prefix}.b1"), cfg.d_ff);
            mat(p, format!("{prefix}.w2"), cfg.d_ff, d, rng);
            zeros(p, format!("{prefix}.b2"), d);
        };
        let ln = |p: &mut Params, prefix: String| {
            p.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
        };

        for l in 0..cfg.n_enc_layers {
            mha(&mut p, format!("enc.l{l}.attn"), &mut rng);
            ln(&mut p, format!("enc.l{l}.ln1"));
            ff(&mut p, format!("enc.l{l}.ff"), &mut rng);
            ln(&mut p, format!("enc.l{l}.ln2"));
        }

        let emb_scale = (6.0 / (cfg.vocab_size + d) as f64).sqrt();
        p.insert("dec.embed", Tensor::rand_uniform(&[cfg.vocab_size, d], emb_scale, &mut rng));
        let conv_scale = (6.0 / (d * 3 + d * 3) as f64).sqrt();
        p.insert("dec.conv.w", Tensor::rand_uniform(&[d, d, 3], conv_scale, &mut rng));
        zeros(&mut p, "dec.conv.b".into(), d);
        for l in 0..cfg.n_dec_layers {
            mha(&mut p, format!("dec.l{l}.self"), &mut rng);
            ln(&mut p, format!("dec.l{l}.ln1"));
            mha(&mut p, format!("dec.l{l}.cross"), &mut rng);
            ln(&mut p, format!("dec.l{l}.ln2"));
            ff(&mut p, format!("dec.l{l}.ff"), &mut rng);
            ln(&mut p, format!("dec.l{l}.ln3"));
        }
        mat(&mut p, "dec.out.w".into(), d, cfg.vocab_size, &mut rng);
        zeros(&mut p, "dec.out.b".into(), cfg.vocab_size);

        mat(&mut p, "ctc.w".into(), d, cfg.vocab_size, &mut rng);
        zeros(&mut p, "ctc.b".into(), cfg.vocab_size);

        Ok(Model { cfg, params: p })
    }

    fn maybe_dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode) -> Result<Var> {
        match mode {
            Mode::Train { rng } if self.cfg.dropout_p > 0.0 => {
                tape.dropout(x, self.cfg.dropout_p, *rng)
            }
            _ => Ok(x),
        }
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = tape.param(&format!("{prefix}.g"), self.params.get(&format!("{prefix}.g")));
        let b = tape.param(&format!("{prefix}.b"), self.params.get(&format!("{prefix}.b")));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w1 = tape.param(&format!("{prefix}.w1"), self.params.get(&format!("{prefix}.w1")));
        let b1 = tape.param(&format!("{prefix}.b1"), self.params.get(&format!("{prefix}.b1")));
        let w2 = tape.param(&format!("{prefix}.w2"), self.params.get(&format!("{prefix}.w2")));
        let b2 = tape.param(&format!("{prefix}.b2"), self.params.get(&format!("{prefix}.b2")));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        tape.add_bias(h, b2)
    }

    /// One front-end conv block: conv -> ln -> relu -> conv -> ln -> relu
    /// -> 2x2 ceil-mode max pool. Layer norm runs over the frequency axis.
    fn conv_block(&self, tape: &mut Tape, x: Var, block: usize) -> Result<Var> {
        let mut cur = x;
        for conv in 0..2 {
            let w = tape.param(
                &format!("cnn.b{block}.conv{conv}.w"),
                self.params.get(&format!("cnn.b{block}.conv{conv}.w")),
            );
            let b = tape.param(
                &format!("cnn.b{block}.conv{conv}.b"),
                self.params.get(&format!("cnn.b{block}.conv{conv}.b")),
            );
            cur = tape.conv2d(cur, w, b, 1, 1)?;
            let shape = tape.value(cur).shape().to_vec();
            let (c, h, wdim) = (shape[0], shape[1], shape[2]);
            let flat = tape.reshape(cur, vec![c * h, wdim])?;
            let g = tape.param(
                &format!("cnn.b{block}.ln{conv}.g"),
                self.params.get(&format!("cnn.b{block}.ln{conv}.g")),
            );
            let bb = tape.param(
                &format!("cnn.b{block}.ln{conv}.b"),
                self.params.get(&format!("cnn.b{block}.ln{conv}.b")),
            );
            let normed = tape.layer_norm(flat, g, bb, LN_EPS)?;
            let back = tape.reshape(normed, vec![c, h, wdim])?;
            cur = tape.relu(back);
        }
        tape.max_pool2d(cur, 2, 2)
    }

    /// VGG-like front-end: T x D features to ceil(T/4) x d_model states.
    pub fn cnn_frontend(&self, tape: &mut Tape, feat: &FeatureMatrix) -> Result<Var> {
        let (t, d) = (feat.rows(), feat.cols());
        if t < 4 {
            return Err(Error::Input(format!("{}: {t} frames < 4 required by front-end", feat.utt_id())));
        }
        if d != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                op: "cnn_frontend",
                lhs: vec![t, d],
                rhs: vec![t, self.cfg.input_dim],
            });
        }
        let x = tape.constant(feat.to_tensor());
        let x = tape.reshape(x, vec![1, t, d])?;
        let x = self.conv_block(tape, x, 0)?;
        let x = self.conv_block(tape, x, 1)?;
        let x = tape.merge_channels(x)?;
        let w = tape.param("cnn.proj.w", self.params.get("cnn.proj.w"));
        let b = tape.param("cnn.proj.b", self.params.get("cnn.proj.b"));
        let x = tape.matmul(x, w)?;
        tape.add_bias(x, b)
    }

    /// The position-free transformer stack on already-projected states;
    /// exposed separately so its permutation-equivariance is testable.
    pub fn encoder_stack(&self, tape: &mut Tape, mut x: Var, mode: &mut Mode) -> Result<Var> {
        for l in 0..self.cfg.n_enc_layers {
            let prefix = format!("enc.l{l}");
            let a = multi_head(tape, &self.params, &format!("{prefix}.attn"), self.cfg.n_heads, x, x, None)?;
            let a = self.maybe_dropout(tape, a, mode)?;
            let r = tape.add(x, a)?;
            x = self.layer_norm(tape, r, &format!("{prefix}.ln1"))?;
            let f = self.feed_forward(tape, x, &format!("{prefix}.ff"))?;
            let f = self.maybe_dropout(tape, f, mode)?;
            let r = tape.add(x, f)?;
            x = self.layer_norm(tape, r, &format!("{prefix}.ln2"))?;
        }
        Ok(x)
    }

    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        feat: &FeatureMatrix,
        mode: &mut Mode,
    ) -> Result<EncoderOutput> {
        let x = self.cnn_frontend(tape, feat)?;
        let states = self.encoder_stack(tape, x, mode)?;
        let t_prime = tape.value(states).rows();
        debug_assert_eq!(t_prime, subsampled_len(feat.rows()));
        Ok(EncoderOutput { states, t_prime })
    }

    /// Teacher-forced decoder: embedding, causal 1-D conv (kernel 3), then
    /// decoder blocks; returns unnormalized vocab logits per prefix position.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        prefix: &[usize],
        enc_states: Var,
        mode: &mut Mode,
    ) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::Contract("decoder prefix is empty".into()));
        }
        if prefix[0] != SOS_ID {
            return Err(Error::Contract(format!(
                "decoder prefix must start with sos (id {SOS_ID}), got {}",
                prefix[0]
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocab")));
        }
        let emb = tape.param("dec.embed", self.params.get("dec.embed"));
        let e = tape.gather_rows(emb, prefix)?;
        let cw = tape.param("dec.conv.w", self.params.get("dec.conv.w"));
        let cb = tape.param("dec.conv.b", self.params.get("dec.conv.b"));
        let conv = tape.conv1d_causal(e, cw, cb)?;
        let mut y = tape.relu(conv);

        let mask = causal_mask(tape, prefix.len());
        for l in 0..self.cfg.n_dec_layers {
            let prefix_name = format!("dec.l{l}");
            let a = multi_head(
                tape,
                &self.params,
                &format!("{prefix_name}.self"),
                self.cfg.n_heads,
                y,
                y,
                Some(mask),
            )?;
            let a = self.maybe_dropout(tape, a, mode)?;
            let r = tape.add(y, a)?;
            y = self.layer_norm(tape, r, &format!("{prefix_name}.ln1"))?;

            let c = multi_head(
                tape,
                &self.params,
                &format!("{prefix_name}.cross"),
                self.cfg.n_heads,
                y,
                enc_states,
                None,
            )?;
            let c = self.maybe_dropout(tape, c, mode)?;
            let r = tape.add(y, c)?;
            y = self.layer_norm(tape, r, &format!("{prefix_name}.ln2"))?;

            let f = self.feed_forward(tape, y, &format!("{prefix_name}.ff"))?;
            let f = self.maybe_dropout(tape, f, mode)?;
            let r = tape.add(y, f)?;
            y = self.layer_norm(tape, r, &format!("{prefix_name}.ln3"))?;
        }
        let w = tape.param("dec.out.w", self.params.get("dec.out.w"));
        let b = tape.param("dec.out.b", self.params.get("dec.out.b"));
        let logits = tape.matmul(y, w)?;
        tape.add_bias(logits, b)
    }

    /// Per-frame log-probabilities over the vocab (blank is id 0).
    pub fn ctc_head(&self, tape: &mut Tape, enc_states: Var) -> Result<Var> {
        let w = tape.param("ctc.w", self.params.get("ctc.w"));
        let b = tape.param("ctc.b", self.params.get("ctc.b"));
        let logits = tape.matmul(enc_states, w)?;
        let logits = tape.add_bias(logits, b)?;
        tape.log_softmax(logits, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn feat(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        FeatureMatrix::new(format!("f{seed}"), t, d, data, 10.0).unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        Model::new(ModelConfig::tiny(12, 8), seed).unwrap()
    }

    #[test]
    fn frontend_shapes_follow_ceil_formula() {
        let m = tiny_model(1);
        for t in [4usize, 8, 9, 10, 31] {
            let mut tape = Tape::new();
            let out = m.cnn_frontend(&mut tape, &feat(t, 8, t as u64)).unwrap();
            assert_eq!(
                tape.value(out).shape(),
                &[subsampled_len(t), 16],
                "T={t}"
            );
        }
        // The documented example: 8 frames in, 2 rows out.
        assert_eq!(subsampled_len(8), 2);
        let mut tape = Tape::new();
        assert!(m.cnn_frontend(&mut tape, &feat(3, 8, 99)).is_err());
    }

    #[test]
    fn frontend_finite_on_zero_input() {
        let m = tiny_model(2);
        let z = FeatureMatrix::new("z".into(), 8, 8, vec![0.0; 64], 10.0).unwrap();
        let mut tape = Tape::new();
        let out = m.cnn_frontend(&mut tape, &z).unwrap();
        assert!(tape.value(out).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frontend_is_position_sensitive() {
        // Shifting the input by one frame must change the output: the
        // front-end is what injects position information.
        let m = tiny_model(3);
        let f = feat(12, 8, 7);
        let mut shifted_data = f.data()[8..].to_vec();
        shifted_data.extend_from_slice(&f.data()[..8]);
        let shifted = FeatureMatrix::new("s".into(), 12, 8, shifted_data, 10.0).unwrap();

        let mut t1 = Tape::new();
        let o1 = m.cnn_frontend(&mut t1, &f).unwrap();
        let mut t2 = Tape::new();
        let o2 = m.cnn_frontend(&mut t2, &shifted).unwrap();
        let diff = t1
            .value(o1)
            .data()
            .iter()
            .zip(t2.value(o2).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "shifted input produced identical output");
    }

    #[test]
    fn encoder_stack_is_permutation_equivariant() {
        let m = tiny_model(4);
        let rows = 6;
        let x = Tensor::rand_uniform(&[rows, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let perm = [3usize, 0, 5, 1, 4, 2];

        let mut t1 = Tape::new();
        let xv = t1.leaf(x.clone());
        let base = m.encoder_stack(&mut t1, xv, &mut Mode::Eval).unwrap();

        let mut pdata = Vec::new();
        for &p in &perm {
            pdata.extend_from_slice(x.row(p));
        }
        let px = Tensor::from_vec(vec![rows, 16], pdata).unwrap();
        let mut t2 = Tape::new();
        let pxv = t2.leaf(px);
        let pout = m.encoder_stack(&mut t2, pxv, &mut Mode::Eval).unwrap();

        for (new_row, &old_row) in perm.iter().enumerate() {
            for (a, b) in t2.value(pout).row(new_row).iter().zip(t1.value(base).row(old_row)) {
                assert!((a - b).abs() < 1e-9, "row {new_row}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn full_encoder_is_not_permutation_equivariant() {
        let m = tiny_model(5);
        let f = feat(16, 8, 11);
        // Reverse the frames.
        let mut rev = Vec::new();
        for t in (0..16).rev() {
            rev.extend_from_slice(f.row(t));
        }
        let fr = FeatureMatrix::new("r".into(), 16, 8, rev, 10.0).unwrap();

        let mut t1 = Tape::new();
        let e1 = m.encoder_forward(&mut t1, &f, &mut Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let e2 = m.encoder_forward(&mut t2, &fr, &mut Mode::Eval).unwrap();

        // If the whole model were permutation-equivariant, reversed input
        // would give exactly reversed output rows.
        let tp = e1.t_prime;
        let mut max_dev = 0.0f64;
        for r in 0..tp {
            for (a, b) in t1.value(e1.states).row(r).iter().zip(t2.value(e2.states).row(tp - 1 - r)) {
                max_dev = max_dev.max((a - b).abs());
            }
        }
        assert!(max_dev > 1e-6, "front-end failed to break permutation symmetry");
    }

    #[test]
    fn decoder_shapes_and_prefix_contract() {
        let m = tiny_model(6);
        let mut tape = Tape::new();
        let enc = m.encoder_forward(&mut tape, &feat(8, 8, 12), &mut Mode::Eval).unwrap();
        let logits = m
            .decoder_forward(&mut tape, &[SOS_ID], enc.states, &mut Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, 12]);

        assert!(m.decoder_forward(&mut tape, &[], enc.states, &mut Mode::Eval).is_err());
        assert!(m.decoder_forward(&mut tape, &[5, 6], enc.states, &mut Mode::Eval).is_err());
        assert!(m
            .decoder_forward(&mut tape, &[SOS_ID, 99], enc.states, &mut Mode::Eval)
            .is_err());
    }

    #[test]
    fn decoder_causality_is_exact() {
        let m = tiny_model(7);
        let f = feat(10, 8, 13);
        let base_prefix = vec![SOS_ID, 4, 5, 6, 7];
        let mut t1 = Tape::new();
        let enc1 = m.encoder_forward(&mut t1, &f, &mut Mode::Eval).unwrap();
        let l1 = m.decoder_forward(&mut t1, &base_prefix, enc1.states, &mut Mode::Eval).unwrap();

        // Change position 3; logits at positions 0..3 must be bit-identical.
        let mut changed = base_prefix.clone();
        changed[3] = 9;
        let mut t2 = Tape::new();
        let enc2 = m.encoder_forward(&mut t2, &f, &mut Mode::Eval).unwrap();
        let l2 = m.decoder_forward(&mut t2, &changed, enc2.states, &mut Mode::Eval).unwrap();

        for pos in 0..3 {
            assert_eq!(
                t1.value(l1).row(pos),
                t2.value(l2).row(pos),
                "position {pos} saw a future change"
            );
        }
        assert_ne!(t1.value(l1).row(4), t2.value(l2).row(4), "position 4 should change");
    }

    #[test]
    fn ctc_head_normalizes_rows() {
        let m = tiny_model(8);
        let f = feat(9, 8, 14);
        let mut tape = Tape::new();
        let enc = m.encoder_forward(&mut tape, &f, &mut Mode::Eval).unwrap();
        let logp = m.ctc_head(&mut tape, enc.states).unwrap();
        assert_eq!(tape.value(logp).shape(), &[enc.t_prime, 12]);
        for r in 0..enc.t_prime {
            let lse = crate::numerics::kernels::log_sum_exp(tape.value(logp).row(r));
            assert!(lse.abs() < 1e-9, "row {r} logsumexp {lse}");
        }
    }

    #[test]
    fn zero_ctc_weights_give_uniform() {
        let mut m = tiny_model(9);
        let d = m.cfg.d_model;
        let v = m.cfg.vocab_size;
        m.params.insert("ctc.w", Tensor::zeros(&[d, v]));
        m.params.insert("ctc.b", Tensor::zeros(&[v]));
        let mut tape = Tape::new();
        let enc = m.encoder_forward(&mut tape, &feat(8, 8, 15), &mut Mode::Eval).unwrap();
        let logp = m.ctc_head(&mut tape, enc.states).unwrap();
        let expect = -(v as f64).ln();
        for &p in tape.value(logp).data() {
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny_model(10);
        let f = feat(12, 8, 16);
        let run = || {
            let mut tape = Tape::new();
            let enc = m.encoder_forward(&mut tape, &f, &mut Mode::Eval).unwrap();
            let logits = m
                .decoder_forward(&mut tape, &[SOS_ID, 4, 5], enc.states, &mut Mode::Eval)
                .unwrap();
            tape.value(logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_only_active_in_train_mode() {
        let mut m = tiny_model(11);
        m.cfg.dropout_p = 0.5;
        let f = feat(8, 8, 17);
        let mut t1 = Tape::new();
        let e1 = m.encoder_forward(&mut t1, &f, &mut Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let e2 = m.encoder_forward(&mut t2, &f, &mut Mode::Eval).unwrap();
        assert_eq!(t1.value(e1.states).data(), t2.value(e2.states).data());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t3 = Tape::new();
        let e3 = m
            .encoder_forward(&mut t3, &f, &mut Mode::Train { rng: &mut rng })
            .unwrap();
        assert_ne!(t1.value(e1.states).data(), t3.value(e3.states).data());
    }
}
