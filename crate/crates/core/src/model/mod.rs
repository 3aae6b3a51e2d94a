//! Encoder-decoder transformer with a weight-shared attribute extractor.
//!
//! The extractor is the encoder itself: an exemplar is prefixed with the
//! EXTRACT token and the final-layer output at position 0 is the attribute
//! vector. Attribute vectors are added to every encoder output position
//! (after the final encoder norm) before the decoder reads them.

mod decode;
mod layers;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView1, Axis, ScalarOperand};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, EXTRACT, PAD};

pub use decode::{DecoderState, EncodedSource};
use layers::{Attn, AttnShape, Dropout, Lin, Norm};

/// Floating-point element type of model arrays (f32 for training, f64 for
/// gradient checks).
pub trait Real:
    ndarray::LinalgScalar
    + num_traits::Float
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_len: 66,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.max_len < 66 {
            return fail("max_len must be at least 66");
        }
        if self.vocab_size <= EXTRACT as usize {
            return fail("vocab_size must cover the special tokens");
        }
        if self.d_ff == 0 || self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return fail("layer sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0,1)");
        }
        Ok(())
    }
}

/// Fixed-width attribute vector of length `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector<T = f32>(pub Array1<T>);

impl<T: Real> AttributeVector<T> {
    pub fn zeros(dim: usize) -> Self {
        AttributeVector(Array1::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> T {
        self.0.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice().expect("contiguous")
    }
}

impl<T: Real> std::ops::Neg for &AttributeVector<T> {
    type Output = AttributeVector<T>;
    fn neg(self) -> AttributeVector<T> {
        AttributeVector(self.0.mapv(|v| -v))
    }
}

struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff1: Lin,
    ff2: Lin,
}

struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff1: Lin,
    ff2: Lin,
}

/// Parameter ids and shapes, derived deterministically from the config.
struct Layout {
    tok: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
    out: Lin,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    kinds: Vec<InitKind>,
}

#[derive(Clone, Copy)]
enum InitKind {
    Embedding,
    Weight,
    /// Uniform with std 1/fan_in, so initial logits are near zero.
    Output,
    /// Sinusoid table of amplitude 0.3, deterministic.
    Positions,
    Zero,
    One,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut l = Layout {
            tok: 0,
            enc_pos: 0,
            dec_pos: 0,
            enc: Vec::new(),
            enc_norm: Norm { g: 0, b: 0 },
            dec: Vec::new(),
            dec_norm: Norm { g: 0, b: 0 },
            out: Lin { w: 0, b: 0 },
            names: Vec::new(),
            shapes: Vec::new(),
            kinds: Vec::new(),
        };
        let d = cfg.d_model;
        l.tok = l.add("embed.tokens", (cfg.vocab_size, d), InitKind::Embedding);
        l.enc_pos = l.add("embed.enc_positions", (cfg.max_len, d), InitKind::Positions);
        l.dec_pos = l.add("embed.dec_positions", (cfg.max_len, d), InitKind::Positions);
        for i in 0..cfg.n_enc_layers {
            let p = format!("encoder.{i}");
            let layer = EncLayer {
                ln1: l.norm(&format!("{p}.ln1"), d),
                attn: l.attn(&format!("{p}.attn"), d),
                ln2: l.norm(&format!("{p}.ln2"), d),
                ff1: l.lin(&format!("{p}.ff1"), d, cfg.d_ff),
                ff2: l.lin(&format!("{p}.ff2"), cfg.d_ff, d),
            };
            l.enc.push(layer);
        }
        l.enc_norm = l.norm("encoder.final_norm", d);
        for i in 0..cfg.n_dec_layers {
            let p = format!("decoder.{i}");
            let layer = DecLayer {
                ln1: l.norm(&format!("{p}.ln1"), d),
                self_attn: l.attn(&format!("{p}.self_attn"), d),
                ln2: l.norm(&format!("{p}.ln2"), d),
                cross: l.attn(&format!("{p}.cross_attn"), d),
                ln3: l.norm(&format!("{p}.ln3"), d),
                ff1: l.lin(&format!("{p}.ff1"), d, cfg.d_ff),
                ff2: l.lin(&format!("{p}.ff2"), cfg.d_ff, d),
            };
            l.dec.push(layer);
        }
        l.dec_norm = l.norm("decoder.final_norm", d);
        l.out = Lin {
            w: l.add("lm_head.weight", (d, cfg.vocab_size), InitKind::Output),
            b: l.add("lm_head.bias", (1, cfg.vocab_size), InitKind::Zero),
        };
        l
    }

    fn add(&mut self, name: &str, shape: (usize, usize), kind: InitKind) -> usize {
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.kinds.push(kind);
        self.names.len() - 1
    }

    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        Lin {
            w: self.add(&format!("{name}.weight"), (fan_in, fan_out), InitKind::Weight),
            b: self.add(&format!("{name}.bias"), (1, fan_out), InitKind::Zero),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.add(&format!("{name}.gain"), (1, d), InitKind::One),
            b: self.add(&format!("{name}.bias"), (1, d), InitKind::Zero),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), d, d),
            k: self.lin(&format!("{name}.k"), d, d),
            v: self.lin(&format!("{name}.v"), d, d),
            o: self.lin(&format!("{name}.o"), d, d),
        }
    }
}

/// Every learnable array of the model, in layout order. Gradients use the
/// same container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros_like(other: &Params<T>) -> Self {
        Params {
            names: other.names.clone(),
            tensors: other.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn global_norm(&self) -> T {
        self.tensors.iter().flat_map(|t| t.iter()).fold(T::zero(), |a, &v| a + v * v).sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.mapv(|v| U::from(v).unwrap())).collect(),
        }
    }
}

fn normal(rng: &mut dyn RngCore) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Right-padded batch of token sequences.
pub(crate) struct Padded {
    ids: Vec<TokenId>,
    batch: usize,
    len: usize,
    lens: Vec<usize>,
}

impl Padded {
    fn new(seqs: &[&[TokenId]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(len * seqs.len());
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Padded { ids, batch: seqs.len(), len, lens: seqs.iter().map(|s| s.len().max(1)).collect() }
    }
}

struct EncLayerCache<T> {
    ln1: layers::NormCache<T>,
    attn: layers::AttnCache<T>,
    drop1: Dropout<T>,
    ln2: layers::NormCache<T>,
    ff: layers::FfCache<T>,
    drop2: Dropout<T>,
}

struct EncCache<T> {
    ids: Vec<TokenId>,
    batch: usize,
    len: usize,
    lens: Vec<usize>,
    layers: Vec<EncLayerCache<T>>,
    norm: layers::NormCache<T>,
}

struct DecLayerCache<T> {
    ln1: layers::NormCache<T>,
    self_attn: layers::AttnCache<T>,
    drop1: Dropout<T>,
    ln2: layers::NormCache<T>,
    cross: layers::AttnCache<T>,
    drop2: Dropout<T>,
    ln3: layers::NormCache<T>,
    ff: layers::FfCache<T>,
    drop3: Dropout<T>,
}

struct DecCache<T> {
    ids: Vec<TokenId>,
    batch: usize,
    len: usize,
    layers: Vec<DecLayerCache<T>>,
    norm: layers::NormCache<T>,
    hidden: Array2<T>,
}

/// How the attribute vector for each example is obtained.
pub enum AttrSource<'a, T> {
    /// No injection at all (plain encoder-decoder).
    Disabled,
    /// Explicit vectors, one per example; no gradient flows into them.
    Fixed(&'a [AttributeVector<T>]),
    /// Extract from these exemplars inside the graph (gradients flow into the
    /// shared encoder).
    Exemplars(&'a [&'a [TokenId]]),
}

/// One training batch: encoder inputs, decoder targets (EOS included) and the
/// attribute source.
pub struct GraphBatch<'a, T> {
    pub inputs: &'a [&'a [TokenId]],
    pub targets: &'a [&'a [TokenId]],
    pub attr: AttrSource<'a, T>,
}

pub struct LossAndGrads<T> {
    pub loss: T,
    pub tokens: usize,
    pub grads: Params<T>,
}

pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    layout: Layout,
    pub params: Params<T>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model::from_params(self.config.clone(), self.params.clone()).expect("layout is valid")
    }
}

impl<T: Real> Model<T> {
    /// Randomly initialized model: Xavier-uniform weights, N(0, 0.3²)
    /// token embeddings, sinusoid-initialized (still trained) positions, a
    /// small output projection, unit gains, zero biases.
    pub fn new(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut tensors = Vec::with_capacity(layout.shapes.len());
        for (&(r, c), kind) in layout.shapes.iter().zip(&layout.kinds) {
            let t = match kind {
                InitKind::Zero => Array2::zeros((r, c)),
                InitKind::One => Array2::ones((r, c)),
                InitKind::Embedding => Array2::from_shape_simple_fn((r, c), || T::from(0.3 * normal(rng)).unwrap()),
                InitKind::Weight => {
                    let bound = (6.0 / (r + c) as f64).sqrt();
                    Array2::from_shape_simple_fn((r, c), || T::from(rng.gen_range(-bound..bound)).unwrap())
                }
                InitKind::Positions => Array2::from_shape_fn((r, c), |(p, i)| {
                    let angle = p as f64 / 10000f64.powf((i - i % 2) as f64 / c as f64);
                    T::from(0.3 * if i % 2 == 0 { angle.sin() } else { angle.cos() }).unwrap()
                }),
                InitKind::Output => {
                    let bound = 3f64.sqrt() / r as f64;
                    Array2::from_shape_simple_fn((r, c), || T::from(rng.gen_range(-bound..bound)).unwrap())
                }
            };
            tensors.push(t);
        }
        let params = Params { names: layout.names.clone(), tensors };
        Ok(Model { config, layout, params })
    }

    /// Wraps existing parameters, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.names != layout.names {
            return Err(Error::Shape("parameter names do not match the model layout".into()));
        }
        for ((name, t), shape) in params.names.iter().zip(&params.tensors).zip(&layout.shapes) {
            if t.dim() != *shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", t.dim())));
            }
        }
        Ok(Model { config, layout, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::TooLong { len, max: self.config.max_len });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        self.check_len(ids.len())?;
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id: bad, size: self.config.vocab_size });
        }
        Ok(())
    }

    fn embed(&self, pos_table: usize, batch: &Padded) -> Array2<T> {
        let p = &self.params.tensors;
        let d = self.config.d_model;
        let mut x = Array2::zeros((batch.batch * batch.len, d));
        for (r, mut row) in x.outer_iter_mut().enumerate() {
            let tok = batch.ids[r] as usize;
            let t = r % batch.len;
            row.assign(&p[self.layout.tok].row(tok));
            row += &p[pos_table].row(t);
        }
        x
    }

    fn embed_back(&self, grads: &mut Params<T>, pos_table: usize, ids: &[TokenId], len: usize, dx: &Array2<T>) {
        for (r, row) in dx.outer_iter().enumerate() {
            let mut g = grads.tensors[self.layout.tok].row_mut(ids[r] as usize);
            g += &row;
            let mut gp = grads.tensors[pos_table].row_mut(r % len);
            gp += &row;
        }
    }

    fn encoder_forward(&self, batch: &Padded, mut rng: Option<&mut (dyn RngCore + '_)>) -> (Array2<T>, EncCache<T>) {
        let p = &self.params.tensors;
        let rate = self.config.dropout;
        let mut x = self.embed(self.layout.enc_pos, batch);
        let mut caches = Vec::with_capacity(self.layout.enc.len());
        let sh = AttnShape {
            batch: batch.batch,
            q_len: batch.len,
            k_len: batch.len,
            heads: self.config.n_heads,
            key_lens: &batch.lens,
            causal: false,
        };
        for l in &self.layout.enc {
            let (a, ln1) = layers::layer_norm(p, l.ln1, &x);
            let (mut h, attn) = layers::attention(p, l.attn, &a, None, sh);
            let drop1 = Dropout::apply(&mut h, rate, rng.as_deref_mut());
            x += &h;
            let (b, ln2) = layers::layer_norm(p, l.ln2, &x);
            let (mut f, ff) = layers::feed_forward(p, l.ff1, l.ff2, &b);
            let drop2 = Dropout::apply(&mut f, rate, rng.as_deref_mut());
            x += &f;
            caches.push(EncLayerCache { ln1, attn, drop1, ln2, ff, drop2 });
        }
        let (out, norm) = layers::layer_norm(p, self.layout.enc_norm, &x);
        let cache = EncCache {
            ids: batch.ids.clone(),
            batch: batch.batch,
            len: batch.len,
            lens: batch.lens.clone(),
            layers: caches,
            norm,
        };
        (out, cache)
    }

    fn encoder_backward(&self, c: &EncCache<T>, d_out: &Array2<T>, grads: &mut Params<T>) {
        let p = &self.params.tensors;
        let sh = AttnShape {
            batch: c.batch,
            q_len: c.len,
            k_len: c.len,
            heads: self.config.n_heads,
            key_lens: &c.lens,
            causal: false,
        };
        let mut dx = layers::layer_norm_back(p, &mut grads.tensors, self.layout.enc_norm, &c.norm, d_out);
        for (l, lc) in self.layout.enc.iter().zip(&c.layers).rev() {
            let mut df = dx.clone();
            lc.drop2.back(&mut df);
            let db = layers::feed_forward_back(p, &mut grads.tensors, l.ff1, l.ff2, &lc.ff, &df);
            dx += &layers::layer_norm_back(p, &mut grads.tensors, l.ln2, &lc.ln2, &db);
            let mut dh = dx.clone();
            lc.drop1.back(&mut dh);
            let (da, _) = layers::attention_back(p, &mut grads.tensors, l.attn, &lc.attn, sh, &dh);
            dx += &layers::layer_norm_back(p, &mut grads.tensors, l.ln1, &lc.ln1, &da);
        }
        self.embed_back(grads, self.layout.enc_pos, &c.ids, c.len, &dx);
    }

    fn decoder_forward(
        &self,
        dec_in: &Padded,
        enc: &Array2<T>,
        src_len: usize,
        src_lens: &[usize],
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> (Array2<T>, DecCache<T>) {
        let p = &self.params.tensors;
        let rate = self.config.dropout;
        let mut y = self.embed(self.layout.dec_pos, dec_in);
        let self_lens = vec![dec_in.len; dec_in.batch];
        let self_sh = AttnShape {
            batch: dec_in.batch,
            q_len: dec_in.len,
            k_len: dec_in.len,
            heads: self.config.n_heads,
            key_lens: &self_lens,
            causal: true,
        };
        let cross_sh = AttnShape {
            batch: dec_in.batch,
            q_len: dec_in.len,
            k_len: src_len,
            heads: self.config.n_heads,
            key_lens: src_lens,
            causal: false,
        };
        let mut caches = Vec::with_capacity(self.layout.dec.len());
        for l in &self.layout.dec {
            let (a, ln1) = layers::layer_norm(p, l.ln1, &y);
            let (mut h, self_attn) = layers::attention(p, l.self_attn, &a, None, self_sh);
            let drop1 = Dropout::apply(&mut h, rate, rng.as_deref_mut());
            y += &h;
            let (b, ln2) = layers::layer_norm(p, l.ln2, &y);
            let (mut h2, cross) = layers::attention(p, l.cross, &b, Some(enc), cross_sh);
            let drop2 = Dropout::apply(&mut h2, rate, rng.as_deref_mut());
            y += &h2;
            let (c, ln3) = layers::layer_norm(p, l.ln3, &y);
            let (mut f, ff) = layers::feed_forward(p, l.ff1, l.ff2, &c);
            let drop3 = Dropout::apply(&mut f, rate, rng.as_deref_mut());
            y += &f;
            caches.push(DecLayerCache { ln1, self_attn, drop1, ln2, cross, drop2, ln3, ff, drop3 });
        }
        let (hidden, norm) = layers::layer_norm(p, self.layout.dec_norm, &y);
        let logits = layers::linear(p, self.layout.out, &hidden.view());
        let cache = DecCache { ids: dec_in.ids.clone(), batch: dec_in.batch, len: dec_in.len, layers: caches, norm, hidden };
        (logits, cache)
    }

    /// Returns the gradient with respect to the (attribute-injected) encoder output.
    fn decoder_backward(
        &self,
        c: &DecCache<T>,
        d_logits: &Array2<T>,
        src_len: usize,
        src_lens: &[usize],
        grads: &mut Params<T>,
    ) -> Array2<T> {
        let p = &self.params.tensors;
        let self_lens = vec![c.len; c.batch];
        let self_sh = AttnShape {
            batch: c.batch,
            q_len: c.len,
            k_len: c.len,
            heads: self.config.n_heads,
            key_lens: &self_lens,
            causal: true,
        };
        let cross_sh = AttnShape {
            batch: c.batch,
            q_len: c.len,
            k_len: src_len,
            heads: self.config.n_heads,
            key_lens: src_lens,
            causal: false,
        };
        let dh = layers::linear_back(p, &mut grads.tensors, self.layout.out, &c.hidden.view(), &d_logits.view());
        let mut dy = layers::layer_norm_back(p, &mut grads.tensors, self.layout.dec_norm, &c.norm, &dh);
        let mut d_enc = Array2::zeros((c.batch * src_len, self.config.d_model));
        for (l, lc) in self.layout.dec.iter().zip(&c.layers).rev() {
            let mut df = dy.clone();
            lc.drop3.back(&mut df);
            let dc = layers::feed_forward_back(p, &mut grads.tensors, l.ff1, l.ff2, &lc.ff, &df);
            dy += &layers::layer_norm_back(p, &mut grads.tensors, l.ln3, &lc.ln3, &dc);
            let mut dh2 = dy.clone();
            lc.drop2.back(&mut dh2);
            let (db, dkv) = layers::attention_back(p, &mut grads.tensors, l.cross, &lc.cross, cross_sh, &dh2);
            d_enc += &dkv.expect("cross attention returns a key/value gradient");
            dy += &layers::layer_norm_back(p, &mut grads.tensors, l.ln2, &lc.ln2, &db);
            let mut dh1 = dy.clone();
            lc.drop1.back(&mut dh1);
            let (da, _) = layers::attention_back(p, &mut grads.tensors, l.self_attn, &lc.self_attn, self_sh, &dh1);
            dy += &layers::layer_norm_back(p, &mut grads.tensors, l.ln1, &lc.ln1, &da);
        }
        self.embed_back(grads, self.layout.dec_pos, &c.ids, c.len, &dy);
        d_enc
    }

    /// Encoder outputs (final norm applied, no attribute) for one sequence.
    pub fn encode(&self, input_ids: &[TokenId]) -> Result<Array2<T>> {
        self.check_ids(input_ids)?;
        if input_ids.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
        }
        let batch = Padded::new(&[input_ids]);
        Ok(self.encoder_forward(&batch, None).0)
    }

    fn extraction_inputs(&self, exemplars: &[&[TokenId]]) -> Result<Vec<Vec<TokenId>>> {
        exemplars
            .iter()
            .map(|e| {
                let mut ids = Vec::with_capacity(e.len() + 1);
                ids.push(EXTRACT);
                ids.extend_from_slice(e);
                self.check_ids(&ids)?;
                Ok(ids)
            })
            .collect()
    }

    /// Attribute vectors for a batch of exemplars (one per exemplar).
    pub fn extract_batch(&self, exemplars: &[&[TokenId]]) -> Result<Vec<AttributeVector<T>>> {
        if exemplars.is_empty() {
            return Ok(Vec::new());
        }
        let inputs = self.extraction_inputs(exemplars)?;
        let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let batch = Padded::new(&refs);
        let (out, _) = self.encoder_forward(&batch, None);
        Ok((0..batch.batch).map(|b| AttributeVector(out.row(b * batch.len).to_owned())).collect())
    }

    pub fn extract_attribute(&self, exemplar_ids: &[TokenId]) -> Result<AttributeVector<T>> {
        Ok(self.extract_batch(&[exemplar_ids])?.remove(0))
    }

    /// Mean of the per-exemplar attribute vectors.
    pub fn extract_attribute_set(&self, exemplars: &[&[TokenId]]) -> Result<AttributeVector<T>> {
        if exemplars.is_empty() {
            return Err(Error::InvalidArgument("exemplar set must not be empty".into()));
        }
        let vectors = self.extract_batch(exemplars)?;
        let mut sum = Array1::zeros(self.config.d_model);
        for v in &vectors {
            sum += &v.0;
        }
        Ok(AttributeVector(sum / T::from(vectors.len()).unwrap()))
    }

    fn inject(&self, enc: &mut Array2<T>, len: usize, attrs: &[ArrayView1<T>]) {
        for (b, a) in attrs.iter().enumerate() {
            let mut rows = enc.slice_mut(s![b * len..(b + 1) * len, ..]);
            rows += a;
        }
    }

    fn decoder_inputs(targets: &[&[TokenId]]) -> Vec<Vec<TokenId>> {
        targets
            .iter()
            .map(|t| {
                let mut v = Vec::with_capacity(t.len());
                v.push(PAD);
                v.extend_from_slice(&t[..t.len().saturating_sub(1)]);
                v
            })
            .collect()
    }

    /// Teacher-forced logits `[target_len, vocab]` for one example. `attr =
    /// None` disables injection.
    pub fn forward(
        &self,
        input_ids: &[TokenId],
        attr: Option<&AttributeVector<T>>,
        target_ids: &[TokenId],
    ) -> Result<Array2<T>> {
        self.check_ids(input_ids)?;
        self.check_ids(target_ids)?;
        if input_ids.is_empty() || target_ids.is_empty() {
            return Err(Error::InvalidArgument("input and target must be non-empty".into()));
        }
        if let Some(a) = attr {
            if a.dim() != self.config.d_model {
                return Err(Error::Shape(format!(
                    "attribute vector has length {}, model dimension is {}",
                    a.dim(),
                    self.config.d_model
                )));
            }
        }
        let src = Padded::new(&[input_ids]);
        let (mut enc, _) = self.encoder_forward(&src, None);
        if let Some(a) = attr {
            self.inject(&mut enc, src.len, &[a.0.view()]);
        }
        let dec_in = Self::decoder_inputs(&[target_ids]);
        let dec = Padded::new(&[dec_in[0].as_slice()]);
        let (logits, _) = self.decoder_forward(&dec, &enc, src.len, &src.lens, None);
        Ok(logits)
    }

    /// Loss and parameter gradients for a batch.
    pub fn loss_and_grads(&self, batch: &GraphBatch<'_, T>, rng: Option<&mut (dyn RngCore + '_)>) -> Result<LossAndGrads<T>> {
        self.run_graph(batch, true, rng)
    }

    /// Loss only (no gradient bookkeeping beyond the forward caches).
    pub fn batch_loss(&self, batch: &GraphBatch<'_, T>) -> Result<T> {
        Ok(self.run_graph(batch, false, None)?.loss)
    }

    fn run_graph(
        &self,
        batch: &GraphBatch<'_, T>,
        backward: bool,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<LossAndGrads<T>> {
        let n = batch.inputs.len();
        if n == 0 || batch.targets.len() != n {
            return Err(Error::Shape(format!("{} inputs vs {} targets", n, batch.targets.len())));
        }
        for (i, t) in batch.inputs.iter().zip(batch.targets) {
            self.check_ids(i)?;
            self.check_ids(t)?;
            if t.is_empty() {
                return Err(Error::InvalidArgument("empty target".into()));
            }
        }
        let mut grads = Params::zeros_like(&self.params);

        // Attribute vectors, possibly extracted in-graph.
        let mut extract = None;
        let attrs: Option<Array2<T>> = match &batch.attr {
            AttrSource::Disabled => None,
            AttrSource::Fixed(vs) => {
                if vs.len() != n {
                    return Err(Error::Shape("one attribute vector per example is required".into()));
                }
                let mut m = Array2::zeros((n, self.config.d_model));
                for (i, v) in vs.iter().enumerate() {
                    if v.dim() != self.config.d_model {
                        return Err(Error::Shape("attribute vector length differs from d_model".into()));
                    }
                    m.row_mut(i).assign(&v.0);
                }
                Some(m)
            }
            AttrSource::Exemplars(ex) => {
                if ex.len() != n {
                    return Err(Error::Shape("one exemplar per example is required".into()));
                }
                let inputs = self.extraction_inputs(ex)?;
                let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
                let eb = Padded::new(&refs);
                let (out, cache) = self.encoder_forward(&eb, rng.as_deref_mut());
                let m = Array2::from_shape_fn((n, self.config.d_model), |(b, j)| out[[b * eb.len, j]]);
                extract = Some((cache, eb.len));
                Some(m)
            }
        };

        let src = Padded::new(batch.inputs);
        let (mut enc, enc_cache) = self.encoder_forward(&src, rng.as_deref_mut());
        if let Some(a) = &attrs {
            let rows: Vec<ArrayView1<T>> = a.outer_iter().collect();
            self.inject(&mut enc, src.len, &rows);
        }
        let dec_inputs = Self::decoder_inputs(batch.targets);
        let dec_refs: Vec<&[TokenId]> = dec_inputs.iter().map(Vec::as_slice).collect();
        let dec = Padded::new(&dec_refs);
        let (logits, dec_cache) = self.decoder_forward(&dec, &enc, src.len, &src.lens, rng.as_deref_mut());

        let tgt = Padded::new(batch.targets);
        let (loss, count, d_logits) = cross_entropy(&logits, &tgt.ids, backward)?;
        if !backward {
            return Ok(LossAndGrads { loss, tokens: count, grads });
        }
        let d_enc = self.decoder_backward(&dec_cache, &d_logits, src.len, &src.lens, &mut grads);
        self.encoder_backward(&enc_cache, &d_enc, &mut grads);
        if let Some((cache, len)) = extract {
            let mut d_ex = Array2::zeros((n * len, self.config.d_model));
            for b in 0..n {
                let rows = d_enc.slice(s![b * src.len..(b + 1) * src.len, ..]);
                d_ex.row_mut(b * len).assign(&rows.sum_axis(Axis(0)));
            }
            self.encoder_backward(&cache, &d_ex, &mut grads);
        }
        Ok(LossAndGrads { loss, tokens: count, grads })
    }

    /// Cross-entropy of teacher-forced logits against `target_ids`.
    pub fn loss(&self, logits: &Array2<T>, target_ids: &[TokenId]) -> Result<T> {
        if logits.nrows() != target_ids.len() || logits.ncols() != self.config.vocab_size {
            return Err(Error::Shape(format!(
                "logits {:?} vs {} targets over a vocabulary of {}",
                logits.dim(),
                target_ids.len(),
                self.config.vocab_size
            )));
        }
        Ok(cross_entropy(logits, target_ids, false)?.0)
    }
}

/// Mean token cross-entropy over non-PAD targets, with the gradient w.r.t.
/// the logits when requested.
pub fn cross_entropy<T: Real>(logits: &Array2<T>, targets: &[TokenId], grad: bool) -> Result<(T, usize, Array2<T>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows vs {} targets", logits.nrows(), targets.len())));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(Error::InvalidArgument("target has no non-PAD token".into()));
    }
    let inv = T::one() / T::from(count).unwrap();
    let mut total = T::zero();
    let mut d = if grad { Array2::zeros(logits.dim()) } else { Array2::zeros((0, 0)) };
    for (r, row) in logits.outer_iter().enumerate() {
        let t = targets[r];
        if t == PAD {
            continue;
        }
        if t as usize >= row.len() {
            return Err(Error::TokenOutOfRange { id: t, size: row.len() });
        }
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let lse = max + sum.ln();
        total += lse - row[t as usize];
        if grad {
            let mut dr = d.row_mut(r);
            for (j, &v) in row.iter().enumerate() {
                dr[j] = (v - lse).exp() * inv;
            }
            dr[t as usize] -= inv;
        }
    }
    Ok((total * inv, count, d))
}
