use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gru::{self, GruCache, GruGrads, GruParams};
use super::linalg::{affine_rows, affine_rows_backward, reversed_rows};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Mat;

/// Architecture metadata. One encoder per input modality; multiple
/// encoders are fused by element-wise addition before the heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub inputs: Vec<usize>,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Config("architecture needs at least one encoder".into()));
        }
        if self.inputs.contains(&0) || self.hidden == 0 || self.embed == 0 || self.classes == 0 {
            return Err(Error::Config("architecture dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        Layout::new(self).len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderSlots {
    pub in_dim: usize,
    pub in_w: Range<usize>,
    pub in_b: Range<usize>,
    pub fwd: Range<usize>,
    pub bwd: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub encoders: Vec<EncoderSlots>,
    pub coarse_w: Range<usize>,
    pub coarse_b: Range<usize>,
    pub fine_w: Range<usize>,
    pub fine_b: Range<usize>,
    pub len: usize,
}

fn gru_block_len(in_dim: usize, hidden: usize) -> usize {
    3 * hidden * in_dim + 3 * hidden * hidden + 6 * hidden
}

fn split_gru(block: &[f64], in_dim: usize, hidden: usize) -> GruParams<'_> {
    let (wx, rest) = block.split_at(3 * hidden * in_dim);
    let (wh, rest) = rest.split_at(3 * hidden * hidden);
    let (bx, bh) = rest.split_at(3 * hidden);
    GruParams { wx, wh, bx, bh }
}

fn split_gru_mut(block: &mut [f64], in_dim: usize, hidden: usize) -> GruGrads<'_> {
    let (wx, rest) = block.split_at_mut(3 * hidden * in_dim);
    let (wh, rest) = rest.split_at_mut(3 * hidden * hidden);
    let (bx, bh) = rest.split_at_mut(3 * hidden);
    GruGrads { wx, wh, bx, bh }
}

impl Layout {
    pub fn new(arch: &Arch) -> Self {
        let mut next = 0usize;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let h = arch.hidden;
        let e = arch.embed;
        let encoders = arch
            .inputs
            .iter()
            .map(|&in_dim| EncoderSlots {
                in_dim,
                in_w: take(h * in_dim),
                in_b: take(h),
                fwd: take(gru_block_len(h, h)),
                bwd: take(gru_block_len(h, h)),
                out_w: take(e * 2 * h),
                out_b: take(e),
            })
            .collect();
        let coarse_w = take(2 * e);
        let coarse_b = take(2);
        let fine_w = take(arch.classes * e);
        let fine_b = take(arch.classes);
        Self {
            encoders,
            coarse_w,
            coarse_b,
            fine_w,
            fine_b,
            len: next,
        }
    }

    /// Every parameter range with its fan-in, or `None` for biases.
    fn init_ranges(&self, arch: &Arch) -> Vec<(Range<usize>, Option<usize>)> {
        let h = arch.hidden;
        let mut out = Vec::new();
        for enc in &self.encoders {
            out.push((enc.in_w.clone(), Some(enc.in_dim)));
            out.push((enc.in_b.clone(), None));
            for block in [&enc.fwd, &enc.bwd] {
                let wx = block.start..block.start + 3 * h * h;
                let wh = wx.end..wx.end + 3 * h * h;
                out.push((wx, Some(h)));
                out.push((wh.clone(), Some(h)));
                out.push((wh.end..block.end, None));
            }
            out.push((enc.out_w.clone(), Some(2 * h)));
            out.push((enc.out_b.clone(), None));
        }
        out.push((self.coarse_w.clone(), Some(arch.embed)));
        out.push((self.coarse_b.clone(), None));
        out.push((self.fine_w.clone(), Some(arch.embed)));
        out.push((self.fine_b.clone(), None));
        out
    }
}

/// Per-frame embeddings, T x D_e.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings(pub Mat);

impl Embeddings {
    pub fn frames(&self) -> usize {
        self.0.rows
    }

    pub fn dim(&self) -> usize {
        self.0.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Flat parameter vector, its architecture and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: Arch,
    pub params: Vec<f64>,
    pub opt: OptState,
    pub(crate) layout: Layout,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    x: Mat,
    u: Mat,
    u_rev: Mat,
    fwd: GruCache,
    bwd: GruCache,
    cat: Mat,
}

/// Encoder activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedPass {
    pub embeddings: Embeddings,
    encoders: Vec<EncoderCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embed: EmbedPass,
    /// T x 2 raw logits.
    pub coarse: Mat,
    /// T x C raw logits.
    pub fine: Mat,
}

impl ModelState {
    /// Weights uniform in +-1/sqrt(fan_in), biases zero.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (range, fan_in) in layout.init_ranges(&arch) {
            if let Some(fan_in) = fan_in {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for p in &mut params[range] {
                    *p = rng.gen_range(-bound..bound);
                }
            }
        }
        Ok(Self {
            opt: OptState::new(layout.len),
            arch,
            params,
            layout,
        })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.len {
            return Err(shape_err(format!(
                "{} parameters given, architecture needs {}",
                params.len(),
                layout.len
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self {
            opt: OptState::new(layout.len),
            arch,
            params,
            layout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Forgets optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.opt = OptState::new(self.params.len());
    }

    /// Range of the parameters belonging to encoder `i`.
    pub fn encoder_range(&self, i: usize) -> Range<usize> {
        let e = &self.layout.encoders[i];
        e.in_w.start..e.out_b.end
    }

    /// Range of the coarse and fine head parameters.
    pub fn heads_range(&self) -> Range<usize> {
        self.layout.coarse_w.start..self.layout.fine_b.end
    }

    fn check_inputs(&self, inputs: &[&Mat]) -> Result<usize> {
        if inputs.len() != self.arch.inputs.len() {
            return Err(shape_err(format!(
                "model has {} encoders, got {} inputs",
                self.arch.inputs.len(),
                inputs.len()
            )));
        }
        let frames = inputs[0].rows;
        for (x, &d) in inputs.iter().zip(&self.arch.inputs) {
            if x.cols != d || x.rows != frames {
                return Err(shape_err(format!(
                    "input {}x{} does not match expected {frames}x{d}",
                    x.rows, x.cols
                )));
            }
            if !x.is_finite() {
                return Err(Error::Numeric("non-finite input feature".into()));
            }
        }
        Ok(frames)
    }

    fn encode_one(&self, slots: &EncoderSlots, x: &Mat) -> (Mat, EncoderCache) {
        let p = &self.params;
        let h = self.arch.hidden;
        let mut u = affine_rows(x, &p[slots.in_w.clone()], &p[slots.in_b.clone()]);
        u.data.iter_mut().for_each(|v| *v = v.tanh());
        let fwd = gru::forward(&split_gru(&p[slots.fwd.clone()], h, h), &u, h);
        let u_rev = reversed_rows(&u);
        let bwd = gru::forward(&split_gru(&p[slots.bwd.clone()], h, h), &u_rev, h);
        let hf = fwd.outputs();
        let hb = reversed_rows(&bwd.outputs());
        let mut cat = Mat::zeros(x.rows, 2 * h);
        for t in 0..x.rows {
            let row = cat.row_mut(t);
            row[..h].copy_from_slice(hf.row(t));
            row[h..].copy_from_slice(hb.row(t));
        }
        let emb = affine_rows(&cat, &p[slots.out_w.clone()], &p[slots.out_b.clone()]);
        let cache = EncoderCache {
            x: x.clone(),
            u,
            u_rev,
            fwd,
            bwd,
            cat,
        };
        (emb, cache)
    }

    /// Encodes every modality and sums the embeddings.
    pub fn forward_embeddings(&self, inputs: &[&Mat]) -> Result<EmbedPass> {
        let frames = self.check_inputs(inputs)?;
        let mut total = Mat::zeros(frames, self.arch.embed);
        let mut encoders = Vec::with_capacity(inputs.len());
        for (slots, x) in self.layout.encoders.iter().zip(inputs) {
            let (emb, cache) = self.encode_one(slots, x);
            total.data.iter_mut().zip(&emb.data).for_each(|(a, b)| *a += b);
            encoders.push(cache);
        }
        Ok(EmbedPass {
            embeddings: Embeddings(total),
            encoders,
        })
    }

    pub(crate) fn heads(&self, e: &Mat) -> (Mat, Mat) {
        let p = &self.params;
        let l = &self.layout;
        let coarse = affine_rows(e, &p[l.coarse_w.clone()], &p[l.coarse_b.clone()]);
        let fine = affine_rows(e, &p[l.fine_w.clone()], &p[l.fine_b.clone()]);
        (coarse, fine)
    }

    pub fn forward(&self, inputs: &[&Mat]) -> Result<ForwardPass> {
        let embed = self.forward_embeddings(inputs)?;
        let (coarse, fine) = self.heads(&embed.embeddings.0);
        Ok(ForwardPass { embed, coarse, fine })
    }

    /// Accumulates parameter gradients of a loss whose gradient w.r.t. the
    /// fused embeddings is `d_emb`.
    pub fn backward_embeddings(&self, pass: &EmbedPass, d_emb: &Mat, grads: &mut [f64]) {
        let h = self.arch.hidden;
        let p = &self.params;
        for (slots, cache) in self.layout.encoders.iter().zip(&pass.encoders) {
            let (dw, db) = two_mut(grads, &slots.out_w, &slots.out_b);
            let d_cat = affine_rows_backward(&cache.cat, &p[slots.out_w.clone()], d_emb, dw, db, true)
                .expect("dx requested");
            let t_len = d_cat.rows;
            let mut dhf = Mat::zeros(t_len, h);
            let mut dhb_rev = Mat::zeros(t_len, h);
            for t in 0..t_len {
                let row = d_cat.row(t);
                dhf.row_mut(t).copy_from_slice(&row[..h]);
                dhb_rev.row_mut(t_len - 1 - t).copy_from_slice(&row[h..]);
            }
            let du_f = gru::backward(
                &split_gru(&p[slots.fwd.clone()], h, h),
                &mut split_gru_mut(&mut grads[slots.fwd.clone()], h, h),
                &cache.u,
                &cache.fwd,
                &dhf,
            );
            let du_b_rev = gru::backward(
                &split_gru(&p[slots.bwd.clone()], h, h),
                &mut split_gru_mut(&mut grads[slots.bwd.clone()], h, h),
                &cache.u_rev,
                &cache.bwd,
                &dhb_rev,
            );
            let mut da = du_f;
            for t in 0..t_len {
                let src = du_b_rev.row(t_len - 1 - t).to_vec();
                let u = cache.u.row(t).to_vec();
                for ((d, s), uv) in da.row_mut(t).iter_mut().zip(src).zip(u) {
                    *d = (*d + s) * (1.0 - uv * uv);
                }
            }
            let (dw, db) = two_mut(grads, &slots.in_w, &slots.in_b);
            affine_rows_backward(&cache.x, &p[slots.in_w.clone()], &da, dw, db, false);
        }
    }

    /// Gradient w.r.t. the embeddings of a loss on the head logits;
    /// accumulates the head parameter gradients.
    pub(crate) fn backward_heads(&self, e: &Mat, d_coarse: &Mat, d_fine: &Mat, grads: &mut [f64]) -> Mat {
        let p = &self.params;
        let l = &self.layout;
        let (dw, db) = two_mut(grads, &l.coarse_w, &l.coarse_b);
        let mut d_emb = affine_rows_backward(e, &p[l.coarse_w.clone()], d_coarse, dw, db, true).expect("dx requested");
        let (dw, db) = two_mut(grads, &l.fine_w, &l.fine_b);
        let d_fine_emb = affine_rows_backward(e, &p[l.fine_w.clone()], d_fine, dw, db, true).expect("dx requested");
        d_emb.data.iter_mut().zip(&d_fine_emb.data).for_each(|(a, b)| *a += b);
        d_emb
    }

    /// Backpropagates gradients w.r.t. both logit matrices through heads
    /// and encoders.
    pub fn backward(&self, pass: &ForwardPass, d_coarse: &Mat, d_fine: &Mat, grads: &mut [f64]) {
        let d_emb = self.backward_heads(&pass.embed.embeddings.0, d_coarse, d_fine, grads);
        self.backward_embeddings(&pass.embed, &d_emb, grads);
    }
}

/// Two disjoint mutable windows of one buffer, `a` before `b`.
fn two_mut<'a>(buf: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.len()])
}
