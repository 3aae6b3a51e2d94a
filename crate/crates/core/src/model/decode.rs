//! Incremental decoding with per-hypothesis self-attention key/value caches.

use ndarray::{s, Array1, Array2, ArrayView1};

use super::layers::{self, Attn};
use super::{AttributeVector, Model, Padded, Real};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, PAD};

/// Encoder output for one source (attribute already injected) plus the
/// cross-attention keys and values of every decoder layer.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    pub memory: Array2<T>,
    cross_k: Vec<Array2<T>>,
    cross_v: Vec<Array2<T>>,
}

impl<T> EncodedSource<T> {
    pub fn len(&self) -> usize {
        self.memory.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder-side cache for one hypothesis.
#[derive(Clone, Debug, Default)]
pub struct DecoderState<T> {
    pos: usize,
    next: TokenId,
    self_k: Vec<Array2<T>>,
    self_v: Vec<Array2<T>>,
}

impl<T> DecoderState<T> {
    /// Number of tokens already fed to the decoder.
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn row_linear<T: Real>(p: &[Array2<T>], l: layers::Lin, x: &Array2<T>) -> Array2<T> {
    layers::linear(p, l, &x.view())
}

impl<T: Real> Model<T> {
    /// Runs the encoder once, injects `attr` (None disables injection) and
    /// precomputes cross-attention keys/values.
    pub fn prepare_source(&self, input_ids: &[TokenId], attr: Option<&AttributeVector<T>>) -> Result<EncodedSource<T>> {
        let mut memory = self.encode(input_ids)?;
        if let Some(a) = attr {
            if a.dim() != self.config.d_model {
                return Err(Error::Shape(format!(
                    "attribute vector has length {}, model dimension is {}",
                    a.dim(),
                    self.config.d_model
                )));
            }
            memory += &a.0;
        }
        let p = &self.params.tensors;
        let cross_k = self.layout.dec.iter().map(|l| row_linear(p, l.cross.k, &memory)).collect();
        let cross_v = self.layout.dec.iter().map(|l| row_linear(p, l.cross.v, &memory)).collect();
        Ok(EncodedSource { memory, cross_k, cross_v })
    }

    pub fn start_state(&self) -> DecoderState<T> {
        let d = self.config.d_model;
        let n = self.layout.dec.len();
        DecoderState {
            pos: 0,
            next: PAD,
            self_k: vec![Array2::zeros((0, d)); n],
            self_v: vec![Array2::zeros((0, d)); n],
        }
    }

    /// Records `token` as the next decoder input of `state`.
    pub fn advance(&self, state: &mut DecoderState<T>, token: TokenId) {
        state.next = token;
    }

    /// Next-token logits for a batch of hypotheses; `srcs[i]` is the source
    /// of `states[i]`. Each state consumes its pending input token.
    pub fn decode_step(&self, srcs: &[&EncodedSource<T>], states: &mut [DecoderState<T>]) -> Result<Array2<T>> {
        if srcs.len() != states.len() {
            return Err(Error::Shape("one source per decoder state is required".into()));
        }
        let n = states.len();
        let d = self.config.d_model;
        if n == 0 {
            return Ok(Array2::zeros((0, self.config.vocab_size)));
        }
        for st in states.iter() {
            if st.pos >= self.config.max_len {
                return Err(Error::TooLong { len: st.pos + 1, max: self.config.max_len });
            }
            if st.next as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange { id: st.next, size: self.config.vocab_size });
            }
        }
        let p = &self.params.tensors;
        let mut y = Array2::zeros((n, d));
        for (i, st) in states.iter().enumerate() {
            let mut row = y.row_mut(i);
            row.assign(&p[self.layout.tok].row(st.next as usize));
            row += &p[self.layout.dec_pos].row(st.pos);
        }
        for (li, l) in self.layout.dec.iter().enumerate() {
            let a = layers::layer_norm_apply(p, l.ln1, &y);
            let q = row_linear(p, l.self_attn.q, &a);
            let k = row_linear(p, l.self_attn.k, &a);
            let v = row_linear(p, l.self_attn.v, &a);
            let mut ctx = Array2::zeros((n, d));
            for (i, st) in states.iter_mut().enumerate() {
                st.self_k[li].push_row(k.row(i)).expect("width matches");
                st.self_v[li].push_row(v.row(i)).expect("width matches");
                let c = self.attend(q.row(i), &st.self_k[li], &st.self_v[li]);
                ctx.row_mut(i).assign(&c);
            }
            y += &row_linear(p, l.self_attn.o, &ctx);

            let b = layers::layer_norm_apply(p, l.ln2, &y);
            y += &self.cross_step(p, l.cross, &b, srcs, li);

            let c = layers::layer_norm_apply(p, l.ln3, &y);
            y += &layers::feed_forward(p, l.ff1, l.ff2, &c).0;
        }
        for st in states.iter_mut() {
            st.pos += 1;
        }
        let h = layers::layer_norm_apply(p, self.layout.dec_norm, &y);
        Ok(row_linear(p, self.layout.out, &h))
    }

    fn cross_step(
        &self,
        p: &[Array2<T>],
        a: Attn,
        x: &Array2<T>,
        srcs: &[&EncodedSource<T>],
        layer: usize,
    ) -> Array2<T> {
        let q = row_linear(p, a.q, x);
        let mut ctx = Array2::zeros(x.dim());
        for (i, src) in srcs.iter().enumerate() {
            let c = self.attend(q.row(i), &src.cross_k[layer], &src.cross_v[layer]);
            ctx.row_mut(i).assign(&c);
        }
        row_linear(p, a.o, &ctx)
    }

    /// Unmasked multi-head attention of one query row over all cached keys.
    fn attend(&self, q: ArrayView1<T>, k: &Array2<T>, v: &Array2<T>) -> Array1<T> {
        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let scale = T::one() / T::from(dh).unwrap().sqrt();
        let mut out = Array1::zeros(d);
        for h in 0..self.config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut sc = kh.dot(&q.slice(s![cols.clone()])) * scale;
            let max = sc.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
            sc.mapv_inplace(|x| (x - max).exp());
            let sum = sc.sum();
            sc /= sum;
            out.slice_mut(s![cols]).assign(&vh.t().dot(&sc));
        }
        out
    }

    /// Teacher-forced logits computed through the full (non-incremental)
    /// decoder for an already prepared source.
    pub fn forward_prepared(&self, src: &EncodedSource<T>, target_ids: &[TokenId]) -> Result<Array2<T>> {
        self.check_ids(target_ids)?;
        let dec_in = Self::decoder_inputs(&[target_ids]);
        let dec = Padded::new(&[dec_in[0].as_slice()]);
        let lens = [src.len()];
        Ok(self.decoder_forward(&dec, &src.memory, src.len(), &lens, None).0)
    }
}
