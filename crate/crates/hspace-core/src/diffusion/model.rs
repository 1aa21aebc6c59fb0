//! The conditional denoiser: a small U-shaped network whose middle-block
//! output activation is the h-space. Concept vectors are injected there,
//! additively, before decoding.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::{self, Conv2d, EmbeddingPool, FilmBlock, GroupNorm, Linear, Params};
use crate::rng::rng_from_seed;
use crate::scalar::{fl, Scalar};
use crate::world::{PromptSpec, Vocabulary};

/// Architecture-defining hyperparameters. The vocabulary is part of the
/// architecture: it fixes the embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserHyper {
    pub resolution: usize,
    pub stem: usize,
    pub level1: usize,
    pub level2: usize,
    pub mid: usize,
    pub d_cond: usize,
    pub d_emb: usize,
    pub d_time: usize,
    pub groups: usize,
    pub vocab: Vec<String>,
}

impl DenoiserHyper {
    pub fn default_for_vocab(vocab: &Vocabulary) -> Self {
        Self {
            resolution: 32,
            stem: 16,
            level1: 32,
            level2: 48,
            mid: 64,
            d_cond: 64,
            d_emb: 128,
            d_time: 64,
            groups: 8,
            vocab: vocab.tokens().to_vec(),
        }
    }

    /// `(channels, height, width)` of the h-space activation.
    pub fn h_shape(&self) -> (usize, usize, usize) {
        (self.mid, self.resolution / 8, self.resolution / 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 8 != 0 || self.resolution < 16 {
            return Err(Error::Config(format!(
                "resolution {} must be a multiple of 8, at least 16",
                self.resolution
            )));
        }
        if self.vocab.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(())
    }
}

/// Concept offset applied to the h-space activation: one shared vector for
/// the whole batch, or one per sample.
pub enum HOffset<'a, F: Scalar> {
    Shared(ArrayView3<'a, F>),
    PerSample(ArrayView4<'a, F>),
}

/// Instrumentation hook exposing the middle-block activation before and
/// after the offset is added.
#[derive(Debug, Default)]
pub struct HTap<F: Scalar> {
    pub h_before: Option<Array4<F>>,
    pub h_after: Option<Array4<F>>,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel<F: Scalar> {
    pub hyper: DenoiserHyper,
    pub embed: EmbeddingPool<F>,
    pub cond_proj: Linear<F>,
    pub time_l1: Linear<F>,
    pub time_l2: Linear<F>,
    pub conv_in: Conv2d<F>,
    pub down1: Conv2d<F>,
    pub enc1: FilmBlock<F>,
    pub down2: Conv2d<F>,
    pub enc2: FilmBlock<F>,
    pub mid_down: Conv2d<F>,
    pub mid_block: FilmBlock<F>,
    pub mid_up: Conv2d<F>,
    pub dec2: FilmBlock<F>,
    pub up1: Conv2d<F>,
    pub dec1: FilmBlock<F>,
    pub up2: Conv2d<F>,
    pub out_norm: GroupNorm<F>,
    pub conv_out: Conv2d<F>,
    vocab: Vocabulary,
}

pub struct DenoiserCache<F: Scalar> {
    time_l1: nn::linear::LinearCache<F>,
    silu_t: Array2<F>,
    time_l2: nn::linear::LinearCache<F>,
    cond_proj: nn::linear::LinearCache<F>,
    silu_emb: Array2<F>,
    conv_in: nn::conv::Conv2dCache<F>,
    down1: nn::conv::Conv2dCache<F>,
    enc1: nn::film::FilmBlockCache<F>,
    down2: nn::conv::Conv2dCache<F>,
    enc2: nn::film::FilmBlockCache<F>,
    mid_down: nn::conv::Conv2dCache<F>,
    mid_block: nn::film::FilmBlockCache<F>,
    mid_up: nn::conv::Conv2dCache<F>,
    dec2: nn::film::FilmBlockCache<F>,
    up1: nn::conv::Conv2dCache<F>,
    dec1: nn::film::FilmBlockCache<F>,
    up2: nn::conv::Conv2dCache<F>,
    out_norm: nn::norm::GroupNormCache<F>,
    silu_out: Array4<F>,
    conv_out: nn::conv::Conv2dCache<F>,
}


fn concat_channels<F: Scalar>(parts: &[ndarray::ArrayView4<F>]) -> Array4<F> {
    let (b, _, h, w) = parts[0].dim();
    let hw = h * w;
    let c_total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::<F>::zeros((b, c_total, h, w));
    let os = out.as_slice_mut().unwrap();
    let mut c_off = 0usize;
    for p in parts {
        let c = p.dim().1;
        let p_std = p.as_standard_layout();
        let ps = p_std.as_slice().unwrap();
        for bi in 0..b {
            let dst = (bi * c_total + c_off) * hw;
            let src = bi * c * hw;
            os[dst..dst + c * hw].copy_from_slice(&ps[src..src + c * hw]);
        }
        c_off += c;
    }
    out
}

/// Splits a `(b, c_total, h, w)` gradient at channel `c_split`.
fn split_channels<F: Scalar>(x: &Array4<F>, c_split: usize) -> (Array4<F>, Array4<F>) {
    let (b, c_total, h, w) = x.dim();
    let hw = h * w;
    let c2 = c_total - c_split;
    let mut a = Array4::<F>::zeros((b, c_split, h, w));
    let mut bb = Array4::<F>::zeros((b, c2, h, w));
    let xs = x.as_slice().unwrap();
    let asl = a.as_slice_mut().unwrap();
    let bsl = bb.as_slice_mut().unwrap();
    for bi in 0..b {
        let src = bi * c_total * hw;
        asl[bi * c_split * hw..(bi + 1) * c_split * hw]
            .copy_from_slice(&xs[src..src + c_split * hw]);
        bsl[bi * c2 * hw..(bi + 1) * c2 * hw]
            .copy_from_slice(&xs[src + c_split * hw..src + c_total * hw]);
    }
    (a, bb)
}

impl<F: Scalar> DenoiserModel<F> {
    pub fn new(hyper: DenoiserHyper, init_seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = rng_from_seed(init_seed);
        let r = &mut rng;
        let h = &hyper;
        let vocab = Vocabulary::from_tokens(h.vocab.clone());
        Ok(Self {
            embed: EmbeddingPool::new(nn::init::embedding(r, h.vocab.len(), h.d_cond)),
            cond_proj: Linear::new(
                nn::init::linear_kaiming(r, h.d_emb, h.d_cond),
                nn::init::zeros1(h.d_emb),
            ),
            time_l1: Linear::new(
                nn::init::linear_kaiming(r, h.d_emb, h.d_time),
                nn::init::zeros1(h.d_emb),
            ),
            time_l2: Linear::new(
                nn::init::linear_kaiming(r, h.d_emb, h.d_emb),
                nn::init::zeros1(h.d_emb),
            ),
            conv_in: Conv2d::new(
                nn::init::conv_kaiming(r, h.stem, 3, 3, 3),
                nn::init::zeros1(h.stem),
                1,
                1,
            ),
            down1: Conv2d::new(
                nn::init::conv_kaiming(r, h.level1, h.stem, 3, 3),
                nn::init::zeros1(h.level1),
                2,
                1,
            ),
            enc1: FilmBlock::new(r, h.level1, h.level1, h.d_emb, h.groups),
            down2: Conv2d::new(
                nn::init::conv_kaiming(r, h.level2, h.level1, 3, 3),
                nn::init::zeros1(h.level2),
                2,
                1,
            ),
            enc2: FilmBlock::new(r, h.level2, h.level2, h.d_emb, h.groups),
            mid_down: Conv2d::new(
                nn::init::conv_kaiming(r, h.mid, h.level2, 3, 3),
                nn::init::zeros1(h.mid),
                2,
                1,
            ),
            mid_block: FilmBlock::new(r, h.mid, h.mid, h.d_emb, h.groups),
            mid_up: Conv2d::new(
                nn::init::conv_kaiming(r, h.level2, h.mid, 3, 3),
                nn::init::zeros1(h.level2),
                1,
                1,
            ),
            dec2: FilmBlock::new(r, 2 * h.level2, h.level2, h.d_emb, h.groups),
            up1: Conv2d::new(
                nn::init::conv_kaiming(r, h.level1, h.level2, 3, 3),
                nn::init::zeros1(h.level1),
                1,
                1,
            ),
            dec1: FilmBlock::new(r, 2 * h.level1, h.level1, h.d_emb, h.groups),
            up2: Conv2d::new(
                nn::init::conv_kaiming(r, h.stem, h.level1, 3, 3),
                nn::init::zeros1(h.stem),
                1,
                1,
            ),
            out_norm: GroupNorm::new(2 * h.stem, h.groups),
            conv_out: Conv2d::new(
                // zero init: the untrained model predicts zero noise
                nn::init::conv_zero(3, 2 * h.stem, 3, 3),
                nn::init::zeros1(3),
                1,
                1,
            ),
            hyper,
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn h_shape(&self) -> (usize, usize, usize) {
        self.hyper.h_shape()
    }

    pub fn zero_offset(&self) -> Array3<F> {
        Array3::zeros(self.h_shape())
    }

    /// Hash over the architecture (hyperparameters incl. vocabulary and all
    /// parameter names/shapes). Identifies compatibility, not weights.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"hspace-denoiser-v1;");
        h.update(serde_json::to_string(&self.hyper).unwrap().as_bytes());
        for (name, view) in self.named() {
            h.update(name.as_bytes());
            h.update(format!("{:?};", view.shape()).as_bytes());
        }
        crate::world::hex(&h.finalize()[..16])
    }

    /// Hash over the parameter values (used by the frozen-model guarantee).
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, view) in self.named() {
            h.update(name.as_bytes());
            for v in view.iter() {
                h.update(v.to_f32_lossy().to_le_bytes());
            }
        }
        crate::world::hex(&h.finalize()[..16])
    }

    /// Pools the learned token embeddings (mean). The empty prompt yields the
    /// all-zero null conditioning.
    pub fn embed_tokens(&self, tokens: &[String]) -> Result<Array1<F>> {
        let ids = self.vocab.ids(tokens)?;
        let pooled = self.embed.forward(&[ids]);
        Ok(pooled.row(0).to_owned())
    }

    /// Conditioning vector for a prompt's positive tokens.
    pub fn embed_prompt(&self, prompt: &PromptSpec) -> Result<Array1<F>> {
        self.embed_tokens(&prompt.positive)
    }

    /// The distinguished null conditioning (all zeros).
    pub fn null_cond(&self) -> Array1<F> {
        Array1::zeros(self.hyper.d_cond)
    }

    fn sinusoid(&self, ts: &[usize]) -> Array2<F> {
        let d = self.hyper.d_time;
        let half = d / 2;
        let mut out = Array2::<F>::zeros((ts.len(), d));
        for (bi, &t) in ts.iter().enumerate() {
            for k in 0..half {
                let w = (-(10_000.0f64.ln()) * k as f64 / (half.max(2) - 1) as f64).exp();
                let arg = t as f64 * w;
                out[(bi, k)] = fl(arg.sin());
                out[(bi, half + k)] = fl(arg.cos());
            }
        }
        out
    }

    fn check_offset(&self, offset: &HOffset<F>, batch: usize) -> Result<()> {
        let want = self.h_shape();
        match offset {
            HOffset::Shared(o) => {
                if o.dim() != want {
                    return Err(Error::HSpace(format!(
                        "offset shape {:?} does not match h-space {:?}",
                        o.dim(),
                        want
                    )));
                }
            }
            HOffset::PerSample(o) => {
                let (b, c, hh, ww) = o.dim();
                if b != batch || (c, hh, ww) != want {
                    return Err(Error::HSpace(format!(
                        "per-sample offset shape {:?} does not match batch {} x {:?}",
                        o.dim(),
                        batch,
                        want
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full forward pass. The middle-block output `h` is replaced by
    /// `h + offset` before decoding; `tap` captures both sides when given.
    pub fn forward(
        &self,
        x: &ArrayView4<F>,
        ts: &[usize],
        cond: &Array2<F>,
        offset: &HOffset<F>,
        mut tap: Option<&mut HTap<F>>,
    ) -> Result<(Array4<F>, DenoiserCache<F>)> {
        let (b, c, hh, ww) = x.dim();
        if c != 3 || hh != self.hyper.resolution || ww != self.hyper.resolution {
            return Err(Error::Shape(format!(
                "input shape {:?}, expected ({}, 3, {}, {})",
                x.dim(),
                b,
                self.hyper.resolution,
                self.hyper.resolution
            )));
        }
        if ts.len() != b || cond.dim() != (b, self.hyper.d_cond) {
            return Err(Error::Shape(
                "timestep/conditioning batch size mismatch".into(),
            ));
        }
        self.check_offset(offset, b)?;

        let sin = self.sinusoid(ts);
        let (t1, time_l1_c) = self.time_l1.forward(&sin.view());
        let (t1s, silu_t) = nn::silu_own(t1);
        let (t2, time_l2_c) = self.time_l2.forward(&t1s.view());
        let (cp, cond_proj_c) = self.cond_proj.forward(&cond.view());
        let (emb, silu_emb) = nn::silu_own(t2 + cp);

        let (h0, conv_in_c) = self.conv_in.forward(x);
        let (d1, down1_c) = self.down1.forward(&h0.view());
        let (s1, enc1_c) = self.enc1.forward(&d1.view(), &emb.view());
        let (d2, down2_c) = self.down2.forward(&s1.view());
        let (s2, enc2_c) = self.enc2.forward(&d2.view(), &emb.view());
        let (m0, mid_down_c) = self.mid_down.forward(&s2.view());
        let (h, mid_block_c) = self.mid_block.forward(&m0.view(), &emb.view());

        let mut ha = h.clone();
        match offset {
            HOffset::Shared(o) => {
                for mut img in ha.axis_iter_mut(Axis(0)) {
                    img += o;
                }
            }
            HOffset::PerSample(o) => {
                ha += o;
            }
        }
        if let Some(t) = tap.as_deref_mut() {
            t.h_before = Some(h.clone());
            t.h_after = Some(ha.clone());
        }

        let u2 = nn::upsample2(&ha.view());
        let (u2c, mid_up_c) = self.mid_up.forward(&u2.view());
        let cat2 = concat_channels(&[u2c.view(), s2.view()]);
        let (o2, dec2_c) = self.dec2.forward(&cat2.view(), &emb.view());
        let u1 = nn::upsample2(&o2.view());
        let (u1c, up1_c) = self.up1.forward(&u1.view());
        let cat1 = concat_channels(&[u1c.view(), s1.view()]);
        let (o1, dec1_c) = self.dec1.forward(&cat1.view(), &emb.view());
        let u0 = nn::upsample2(&o1.view());
        let (u0c, up2_c) = self.up2.forward(&u0.view());
        let cat0 = concat_channels(&[u0c.view(), h0.view()]);
        let (on, out_norm_c) = self.out_norm.forward(&cat0.view());
        let (os, silu_out) = nn::silu_own(on);
        let (out, conv_out_c) = self.conv_out.forward(&os.view());

        Ok((
            out,
            DenoiserCache {
                time_l1: time_l1_c,
                silu_t,
                time_l2: time_l2_c,
                cond_proj: cond_proj_c,
                silu_emb,
                conv_in: conv_in_c,
                down1: down1_c,
                enc1: enc1_c,
                down2: down2_c,
                enc2: enc2_c,
                mid_down: mid_down_c,
                mid_block: mid_block_c,
                mid_up: mid_up_c,
                dec2: dec2_c,
                up1: up1_c,
                dec1: dec1_c,
                up2: up2_c,
                out_norm: out_norm_c,
                silu_out,
                conv_out: conv_out_c,
            },
        ))
    }

    /// Noise prediction with an h-space offset (forward pass only; no
    /// backward caches are built).
    pub fn predict_noise(
        &self,
        x: &ArrayView4<F>,
        ts: &[usize],
        cond: &Array2<F>,
        offset: &HOffset<F>,
    ) -> Result<Array4<F>> {
        self.forward_infer(x, ts, cond, offset, None)
    }

    /// Cache-free forward pass for sampling and evaluation.
    pub fn forward_infer(
        &self,
        x: &ArrayView4<F>,
        ts: &[usize],
        cond: &Array2<F>,
        offset: &HOffset<F>,
        mut tap: Option<&mut HTap<F>>,
    ) -> Result<Array4<F>> {
        let (b, c, hh, ww) = x.dim();
        if c != 3 || hh != self.hyper.resolution || ww != self.hyper.resolution {
            return Err(Error::Shape(format!(
                "input shape {:?}, expected ({}, 3, {}, {})",
                x.dim(),
                b,
                self.hyper.resolution,
                self.hyper.resolution
            )));
        }
        if ts.len() != b || cond.dim() != (b, self.hyper.d_cond) {
            return Err(Error::Shape(
                "timestep/conditioning batch size mismatch".into(),
            ));
        }
        self.check_offset(offset, b)?;

        let sin = self.sinusoid(ts);
        let (t1, _) = self.time_l1.forward(&sin.view());
        let (t1s, _) = nn::silu_own(t1);
        let (t2, _) = self.time_l2.forward(&t1s.view());
        let (cp, _) = self.cond_proj.forward(&cond.view());
        let (emb, _) = nn::silu_own(t2 + cp);

        let h0 = self.conv_in.infer(x);
        let d1 = self.down1.infer(&h0.view());
        let s1 = self.enc1.infer(&d1.view(), &emb.view());
        drop(d1);
        let d2 = self.down2.infer(&s1.view());
        let s2 = self.enc2.infer(&d2.view(), &emb.view());
        drop(d2);
        let m0 = self.mid_down.infer(&s2.view());
        let h = self.mid_block.infer(&m0.view(), &emb.view());
        drop(m0);

        let mut ha = h;
        match offset {
            HOffset::Shared(o) => {
                if let Some(t) = tap.as_deref_mut() {
                    t.h_before = Some(ha.clone());
                }
                for mut img in ha.axis_iter_mut(Axis(0)) {
                    img += o;
                }
            }
            HOffset::PerSample(o) => {
                if let Some(t) = tap.as_deref_mut() {
                    t.h_before = Some(ha.clone());
                }
                ha += o;
            }
        }
        if let Some(t) = tap.as_deref_mut() {
            t.h_after = Some(ha.clone());
        }

        let u2 = nn::upsample2(&ha.view());
        drop(ha);
        let u2c = self.mid_up.infer(&u2.view());
        drop(u2);
        let cat2 = concat_channels(&[u2c.view(), s2.view()]);
        drop(u2c);
        drop(s2);
        let o2 = self.dec2.infer(&cat2.view(), &emb.view());
        drop(cat2);
        let u1 = nn::upsample2(&o2.view());
        drop(o2);
        let u1c = self.up1.infer(&u1.view());
        drop(u1);
        let cat1 = concat_channels(&[u1c.view(), s1.view()]);
        drop(u1c);
        drop(s1);
        let o1 = self.dec1.infer(&cat1.view(), &emb.view());
        drop(cat1);
        let u0 = nn::upsample2(&o1.view());
        drop(o1);
        let u0c = self.up2.infer(&u0.view());
        drop(u0);
        let cat0 = concat_channels(&[u0c.view(), h0.view()]);
        drop(u0c);
        drop(h0);
        let on = self.out_norm.infer(&cat0.view());
        drop(cat0);
        let os = on.mapv_into(|v| v * (F::one() / (F::one() + (-v).exp())));
        Ok(self.conv_out.infer(&os.view()))
    }

    /// Full backward pass: accumulates parameter gradients into `grads` and
    /// returns the conditioning gradient `(B, d_cond)` for the embedding
    /// update (callers feed it to `embed.backward` with the token lists).
    pub fn backward_params(
        &self,
        cache: &DenoiserCache<F>,
        dout: &ArrayView4<F>,
        grads: &mut DenoiserModel<F>,
    ) -> Array2<F> {
        let dos = self
            .conv_out
            .backward(&cache.conv_out, dout, Some(&mut grads.conv_out));
        let don = nn::silu_backward(&cache.silu_out, &dos.view());
        let dcat0 = self
            .out_norm
            .backward(&cache.out_norm, &don.view(), Some(&mut grads.out_norm));
        let stem = self.hyper.stem;
        let (du0c, dh0_a) = split_channels(&dcat0, stem);
        let du0 = self
            .up2
            .backward(&cache.up2, &du0c.view(), Some(&mut grads.up2));
        let do1 = nn::upsample2_backward(&du0.view());
        let (dcat1, demb_d1) = self
            .dec1
            .backward(&cache.dec1, &do1.view(), Some(&mut grads.dec1));
        let l1 = self.hyper.level1;
        let (du1c, ds1_a) = split_channels(&dcat1, l1);
        let du1 = self
            .up1
            .backward(&cache.up1, &du1c.view(), Some(&mut grads.up1));
        let do2 = nn::upsample2_backward(&du1.view());
        let (dcat2, demb_d2) = self
            .dec2
            .backward(&cache.dec2, &do2.view(), Some(&mut grads.dec2));
        let l2 = self.hyper.level2;
        let (du2c, ds2_a) = split_channels(&dcat2, l2);
        let du2 = self
            .mid_up
            .backward(&cache.mid_up, &du2c.view(), Some(&mut grads.mid_up));
        let dha = nn::upsample2_backward(&du2.view());
        // ha = h + offset: identity into the block
        let (dm0, demb_mid) =
            self.mid_block
                .backward(&cache.mid_block, &dha.view(), Some(&mut grads.mid_block));
        let ds2_b = self
            .mid_down
            .backward(&cache.mid_down, &dm0.view(), Some(&mut grads.mid_down));
        let ds2 = ds2_a + ds2_b;
        let (dd2, demb_e2) = self
            .enc2
            .backward(&cache.enc2, &ds2.view(), Some(&mut grads.enc2));
        let ds1_b = self
            .down2
            .backward(&cache.down2, &dd2.view(), Some(&mut grads.down2));
        let ds1 = ds1_a + ds1_b;
        let (dd1, demb_e1) = self
            .enc1
            .backward(&cache.enc1, &ds1.view(), Some(&mut grads.enc1));
        let dh0_b = self
            .down1
            .backward(&cache.down1, &dd1.view(), Some(&mut grads.down1));
        let dh0 = dh0_a + dh0_b;
        let _ = self
            .conv_in
            .backward(&cache.conv_in, &dh0.view(), Some(&mut grads.conv_in));

        let demb_act = demb_d1 + demb_d2 + demb_mid + demb_e2 + demb_e1;
        let demb = nn::silu_backward(&cache.silu_emb, &demb_act.view());
        let dt1s = self
            .time_l2
            .backward(&cache.time_l2, &demb.view(), Some(&mut grads.time_l2));
        let dt1 = nn::silu_backward(&cache.silu_t, &dt1s.view());
        let _ = self
            .time_l1
            .backward(&cache.time_l1, &dt1.view(), Some(&mut grads.time_l1));
        self.cond_proj
            .backward(&cache.cond_proj, &demb.view(), Some(&mut grads.cond_proj))
    }

    /// Decoder-only backward: gradient of the loss w.r.t. the (offset-added)
    /// h-space activation, with every parameter left untouched. This is the
    /// concept-vector gradient path.
    pub fn backward_to_h(&self, cache: &DenoiserCache<F>, dout: &ArrayView4<F>) -> Array4<F> {
        let dos = self.conv_out.backward(&cache.conv_out, dout, None);
        let don = nn::silu_backward(&cache.silu_out, &dos.view());
        let dcat0 = self.out_norm.backward(&cache.out_norm, &don.view(), None);
        let stem = self.hyper.stem;
        let du0c = dcat0.slice(ndarray::s![.., 0..stem, .., ..]).to_owned();
        let du0 = self.up2.backward(&cache.up2, &du0c.view(), None);
        let do1 = nn::upsample2_backward(&du0.view());
        let (dcat1, _) = self.dec1.backward(&cache.dec1, &do1.view(), None);
        let l1 = self.hyper.level1;
        let du1c = dcat1.slice(ndarray::s![.., 0..l1, .., ..]).to_owned();
        let du1 = self.up1.backward(&cache.up1, &du1c.view(), None);
        let do2 = nn::upsample2_backward(&du1.view());
        let (dcat2, _) = self.dec2.backward(&cache.dec2, &do2.view(), None);
        let l2 = self.hyper.level2;
        let du2c = dcat2.slice(ndarray::s![.., 0..l2, .., ..]).to_owned();
        let du2 = self.mid_up.backward(&cache.mid_up, &du2c.view(), None);
        nn::upsample2_backward(&du2.view())
    }
}

impl<F: Scalar> Params<F> for DenoiserModel<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        self.embed.visit(&join(prefix, "embed"), out);
        self.cond_proj.visit(&join(prefix, "cond_proj"), out);
        self.time_l1.visit(&join(prefix, "time_l1"), out);
        self.time_l2.visit(&join(prefix, "time_l2"), out);
        self.conv_in.visit(&join(prefix, "conv_in"), out);
        self.down1.visit(&join(prefix, "down1"), out);
        self.enc1.visit(&join(prefix, "enc1"), out);
        self.down2.visit(&join(prefix, "down2"), out);
        self.enc2.visit(&join(prefix, "enc2"), out);
        self.mid_down.visit(&join(prefix, "mid_down"), out);
        self.mid_block.visit(&join(prefix, "mid"), out);
        self.mid_up.visit(&join(prefix, "mid_up"), out);
        self.dec2.visit(&join(prefix, "dec2"), out);
        self.up1.visit(&join(prefix, "up1"), out);
        self.dec1.visit(&join(prefix, "dec1"), out);
        self.up2.visit(&join(prefix, "up2"), out);
        self.out_norm.visit(&join(prefix, "out_norm"), out);
        self.conv_out.visit(&join(prefix, "conv_out"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        self.embed.visit_mut(&join(prefix, "embed"), out);
        self.cond_proj.visit_mut(&join(prefix, "cond_proj"), out);
        self.time_l1.visit_mut(&join(prefix, "time_l1"), out);
        self.time_l2.visit_mut(&join(prefix, "time_l2"), out);
        self.conv_in.visit_mut(&join(prefix, "conv_in"), out);
        self.down1.visit_mut(&join(prefix, "down1"), out);
        self.enc1.visit_mut(&join(prefix, "enc1"), out);
        self.down2.visit_mut(&join(prefix, "down2"), out);
        self.enc2.visit_mut(&join(prefix, "enc2"), out);
        self.mid_down.visit_mut(&join(prefix, "mid_down"), out);
        self.mid_block.visit_mut(&join(prefix, "mid"), out);
        self.mid_up.visit_mut(&join(prefix, "mid_up"), out);
        self.dec2.visit_mut(&join(prefix, "dec2"), out);
        self.up1.visit_mut(&join(prefix, "up1"), out);
        self.dec1.visit_mut(&join(prefix, "dec1"), out);
        self.up2.visit_mut(&join(prefix, "up2"), out);
        self.out_norm.visit_mut(&join(prefix, "out_norm"), out);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), out);
    }
}

#[cfg(test)]
pub(crate) fn tiny_hyper(vocab: &Vocabulary) -> DenoiserHyper {
    DenoiserHyper {
        resolution: 16,
        stem: 4,
        level1: 4,
        level2: 8,
        mid: 8,
        d_cond: 6,
        d_emb: 8,
        d_time: 8,
        groups: 2,
        vocab: vocab.tokens().to_vec(),
    }
}
