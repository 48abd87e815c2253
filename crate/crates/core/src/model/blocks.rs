//! The architecture's building blocks as functions of recorded variables.
//! Parameters are passed in explicitly so each block can be exercised (and
//! gradient-checked) in isolation.

use crate::error::{shape_err, Result};
use crate::tensor::{concat, Tensor, Var};

/// Splits `f[B,C,H,W]` into a half-resolution low-frequency part (2x2/2
/// average pooling) and the full-resolution residual
/// `f_h = f - upsample(f_l)`, so `upsample(f_l) + f_h` reproduces `f`.
pub fn freq_separate<'t>(f: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = f.shape();
    if shape.len() != 4 {
        return Err(shape_err!("freq_separate: expected [B,C,H,W], got {shape:?}"));
    }
    let (h, w) = (shape[2], shape[3]);
    if h < 2 || w < 2 {
        return Err(shape_err!(
            "freq_separate: spatial extent {h}x{w} is too small to split"
        ));
    }
    let low = f.avg_pool2d(2, 2)?;
    let high = f.sub(&low.bilinear_upsample(h, w)?)?;
    Ok((low, high))
}

/// Residual depthwise 3x3 enhancement: `f_h + dwconv(f_h)`.
pub fn enhance_high<'t>(f_h: &Var<'t>, kernel: &Var<'t>) -> Result<Var<'t>> {
    f_h.add(&f_h.depthwise_conv2d(kernel, 1, 1)?)
}

/// Squeeze-excitation bottleneck weights.
#[derive(Clone, Copy, Debug)]
pub struct SeVars<'t> {
    /// `[C, C/r]`
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    /// `[C/r, C]`
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// Channel attention: `f_l ⊙ sigmoid(W2·relu(W1·gap(f_l)))`.
pub fn refine_low<'t>(f_l: &Var<'t>, se: &SeVars<'t>) -> Result<Var<'t>> {
    let squeezed = f_l.global_avg_pool()?;
    let hidden = squeezed.matmul(&se.w1)?.add_row_bias(&se.b1)?.relu()?;
    let gate = hidden.matmul(&se.w2)?.add_row_bias(&se.b2)?.sigmoid()?;
    f_l.scale_channels(&gate)
}

#[derive(Clone, Debug)]
pub struct FimVars<'t> {
    /// Depthwise `[C,1,3,3]` kernels enhancing each modality's high band.
    pub high_h: Var<'t>,
    pub high_x: Var<'t>,
    pub low_h: SeVars<'t>,
    pub low_x: SeVars<'t>,
    /// `[1,2,3,3,3]`: recombination over (channel-as-depth, H, W).
    pub fuse_h_w: Var<'t>,
    pub fuse_h_b: Var<'t>,
    /// `[C,2C,3,3]`
    pub fuse_x_w: Var<'t>,
    pub fuse_x_b: Var<'t>,
}

/// One frequency interaction block.
///
/// Low bands fuse into the hyperspectral branch, high bands into the
/// SAR/LiDAR branch:
/// ```text
/// Fl_H' = Fl_H + Fl_X            Fh_X' = Fh_H + Fh_X
/// F_H'  = relu(Conv3d([up(Fl_H'), Fh_H]))
/// F_X'  = relu(Conv2d([up(Fl_X),  Fh_X']))
/// ```
/// The low bands are upsampled to full resolution before concatenation.
pub fn fim_forward<'t>(
    f_h: &Var<'t>,
    f_x: &Var<'t>,
    p: &FimVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (sh, sx) = (f_h.shape(), f_x.shape());
    if sh != sx {
        return Err(shape_err!(
            "fim: hyperspectral features {sh:?} and SAR/LiDAR features {sx:?} differ"
        ));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);

    let (low_h, high_h) = freq_separate(f_h)?;
    let (low_x, high_x) = freq_separate(f_x)?;
    let high_h = enhance_high(&high_h, &p.high_h)?;
    let high_x = enhance_high(&high_x, &p.high_x)?;
    let low_h = refine_low(&low_h, &p.low_h)?;
    let low_x = refine_low(&low_x, &p.low_x)?;

    let low_h_fused = low_h.add(&low_x)?;
    let high_x_fused = high_h.add(&high_x)?;

    let as_volume = |v: &Var<'t>| v.reshape(&[b, 1, c, h, w]);
    let stacked = concat(
        &[as_volume(&low_h_fused.bilinear_upsample(h, w)?)?, as_volume(&high_h)?],
        1,
    )?;
    let out_h = stacked
        .conv3d(&p.fuse_h_w, Some(&p.fuse_h_b), 1, 1)?
        .reshape(&[b, c, h, w])?
        .relu()?;

    let joined = concat(&[low_x.bilinear_upsample(h, w)?, high_x_fused], 1)?;
    let out_x = joined.conv2d(&p.fuse_x_w, Some(&p.fuse_x_b), 1, 1)?.relu()?;
    Ok((out_h, out_x))
}

/// Per-modality 3x3 conv + relu; stands in for a frequency block in the
/// `NoFim` ablation.
#[derive(Clone, Copy, Debug)]
pub struct PlainVars<'t> {
    pub h_w: Var<'t>,
    pub h_b: Var<'t>,
    pub x_w: Var<'t>,
    pub x_b: Var<'t>,
}

pub fn plain_forward<'t>(
    f_h: &Var<'t>,
    f_x: &Var<'t>,
    p: &PlainVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        f_h.conv2d(&p.h_w, Some(&p.h_b), 1, 1)?.relu()?,
        f_x.conv2d(&p.x_w, Some(&p.x_b), 1, 1)?.relu()?,
    ))
}

#[derive(Clone, Debug)]
pub enum BlockVars<'t> {
    Fim(FimVars<'t>),
    Plain(PlainVars<'t>),
}

#[derive(Clone, Debug)]
pub struct EncoderVars<'t> {
    /// `[HSI_STEM_MAPS,1,3,3,3]`
    pub stem_h3_w: Var<'t>,
    pub stem_h3_b: Var<'t>,
    /// `[C, HSI_STEM_MAPS * n_pca, 3, 3]`
    pub stem_h2_w: Var<'t>,
    pub stem_h2_b: Var<'t>,
    /// `[C, aux_channels, 3, 3]`
    pub stem_x_w: Var<'t>,
    pub stem_x_b: Var<'t>,
    pub blocks: Vec<BlockVars<'t>>,
    /// `[d_model, C, 3, 3]`
    pub proj_h_w: Var<'t>,
    pub proj_h_b: Var<'t>,
    pub proj_x_w: Var<'t>,
    pub proj_x_b: Var<'t>,
}

/// `[B,C,k,k]` feature map → `[B,k²,C]` tokens in row-major pixel order.
pub fn map_to_tokens<'t>(map: &Var<'t>) -> Result<Var<'t>> {
    let s = map.shape();
    map.reshape(&[s[0], s[1], s[2] * s[3]])?.transpose_last2()
}

/// `[B,T,C]` tokens → `[B,C,k,k]` feature map.
pub fn tokens_to_map<'t>(tokens: &Var<'t>, k: usize) -> Result<Var<'t>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != k * k {
        return Err(shape_err!("{s:?} does not hold {k}x{k} tokens"));
    }
    tokens.transpose_last2()?.reshape(&[s[0], s[2], k, k])
}

/// Stems, the stacked blocks and the projections, ending in one token per
/// pixel for each modality.
///
/// `i_h` is `[B,1,N_p,k,k]`; the 3-D stem convolves spectrum and space
/// jointly, then the spectral axis is folded into channels. `i_x` is
/// `[B,C_aux,k,k]`.
pub fn encoder_forward<'t>(
    i_h: &Var<'t>,
    i_x: &Var<'t>,
    p: &EncoderVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let sh = i_h.shape();
    let sx = i_x.shape();
    if sh.len() != 5 || sh[1] != 1 || sx.len() != 4 || sx[0] != sh[0] || sx[2..] != sh[3..] {
        return Err(shape_err!(
            "encoder: incompatible inputs {sh:?} (HSI) and {sx:?} (SAR/LiDAR)"
        ));
    }
    let (b, depth, k) = (sh[0], sh[2], sh[3]);
    let h = i_h.conv3d(&p.stem_h3_w, Some(&p.stem_h3_b), 1, 1)?.relu()?;
    let maps = h.shape()[1];
    let mut f_h = h
        .reshape(&[b, maps * depth, k, k])?
        .conv2d(&p.stem_h2_w, Some(&p.stem_h2_b), 1, 1)?
        .relu()?;
    let mut f_x = i_x.conv2d(&p.stem_x_w, Some(&p.stem_x_b), 1, 1)?.relu()?;
    for block in &p.blocks {
        (f_h, f_x) = match block {
            BlockVars::Fim(v) => fim_forward(&f_h, &f_x, v)?,
            BlockVars::Plain(v) => plain_forward(&f_h, &f_x, v)?,
        };
    }
    let f_h = f_h.conv2d(&p.proj_h_w, Some(&p.proj_h_b), 1, 1)?;
    let f_x = f_x.conv2d(&p.proj_x_w, Some(&p.proj_x_b), 1, 1)?;
    Ok((map_to_tokens(&f_h)?, map_to_tokens(&f_x)?))
}

/// Query/key/value projections of one compensation direction, each `[d,d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct PicmVars<'t> {
    /// Hyperspectral prototype `[T,d]`, queries the SAR/LiDAR tokens.
    pub proto_h: Var<'t>,
    /// SAR/LiDAR prototype `[T,d]`, queries the hyperspectral tokens.
    pub proto_x: Var<'t>,
    /// Builds the compensated SAR/LiDAR feature from hyperspectral tokens.
    pub comp_x: AttnVars<'t>,
    /// Builds the compensated hyperspectral feature from SAR/LiDAR tokens.
    pub comp_h: AttnVars<'t>,
}

/// Prototype cross-attention: `softmax((P·Wq)(F·Wk)ᵀ/√d)·(F·Wv)` for every
/// sample. The prototype is shared by the batch.
///
/// Returns the attended features `[B,T,d]` and the attention matrix
/// `[B,T,T]` (rows index prototype tokens, columns index feature tokens).
pub fn prototype_attention<'t>(
    prototype: &Var<'t>,
    feats: &Var<'t>,
    w: &AttnVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let ps = prototype.shape();
    let fs = feats.shape();
    if fs.len() != 3 || ps.len() != 2 || ps[0] != fs[1] || ps[1] != fs[2] {
        return Err(shape_err!(
            "prototype {ps:?} does not match token features {fs:?} (need [T,d] vs [B,T,d])"
        ));
    }
    let (b, t, d) = (fs[0], fs[1], fs[2]);
    let flat = feats.reshape(&[b * t, d])?;
    let q = prototype.matmul(&w.wq)?.expand_batch(b)?;
    let k = flat.matmul(&w.wk)?.reshape(&[b, t, d])?;
    let v = flat.matmul(&w.wv)?.reshape(&[b, t, d])?;
    let logits = q.bmm(&k.transpose_last2()?)?.scale(1.0 / (d as f64).sqrt())?;
    let attn = logits.reshape(&[b * t, t])?.softmax_rows()?.reshape(&[b, t, t])?;
    Ok((attn.bmm(&v)?, attn))
}

#[derive(Clone, Debug)]
pub struct PicmOutput<'t> {
    pub i_h: Var<'t>,
    pub i_x: Var<'t>,
    pub f_hat_x: Var<'t>,
    pub f_hat_h: Var<'t>,
    pub attn_x: Var<'t>,
    pub attn_h: Var<'t>,
}

/// Cross-modal compensation: `I_H = F_H + F̂_X`, `I_X = F_X + F̂_H`, where
/// `F̂_X` is the SAR/LiDAR prototype attending over hyperspectral tokens and
/// `F̂_H` the hyperspectral prototype attending over SAR/LiDAR tokens.
pub fn picm_forward<'t>(f_h: &Var<'t>, f_x: &Var<'t>, p: &PicmVars<'t>) -> Result<PicmOutput<'t>> {
    let (f_hat_x, attn_x) = prototype_attention(&p.proto_x, f_h, &p.comp_x)?;
    let (f_hat_h, attn_h) = prototype_attention(&p.proto_h, f_x, &p.comp_h)?;
    Ok(PicmOutput {
        i_h: f_h.add(&f_hat_x)?,
        i_x: f_x.add(&f_hat_h)?,
        f_hat_x,
        f_hat_h,
        attn_x,
        attn_h,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars<'t> {
    /// Depthwise `[2d,1,3,3]`.
    pub dw1: Var<'t>,
    pub dw2: Var<'t>,
    /// `[2d, K]`
    pub fc_w: Var<'t>,
    pub fc_b: Var<'t>,
}

/// Concatenates the refined tokens, restores the `k×k` grid, applies two
/// depthwise 3x3 convolutions with a relu between, pools globally and maps
/// to class logits.
pub fn refine_head<'t>(i_h: &Var<'t>, i_x: &Var<'t>, p: &HeadVars<'t>, k: usize) -> Result<Var<'t>> {
    let fused = concat(&[*i_h, *i_x], 2)?;
    let map = tokens_to_map(&fused, k)?;
    let refined = map
        .depthwise_conv2d(&p.dw1, 1, 1)?
        .relu()?
        .depthwise_conv2d(&p.dw2, 1, 1)?;
    refined
        .global_avg_pool()?
        .matmul(&p.fc_w)?
        .add_row_bias(&p.fc_b)
}

/// Batch mean of per-sample Frobenius distances between `f` and `f_hat`.
pub fn consistency_loss<'t>(f: &Var<'t>, f_hat: &Var<'t>) -> Result<Var<'t>> {
    let s = f.shape();
    if s != f_hat.shape() {
        return Err(shape_err!(
            "consistency loss: {s:?} vs {:?}",
            f_hat.shape()
        ));
    }
    let per_sample: usize = s[1..].iter().product();
    f.sub(f_hat)?
        .reshape(&[s[0], per_sample])?
        .row_norms()?
        .mean()
}

/// The three loss components and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub ce: Var<'t>,
    pub cyc_x: Var<'t>,
    pub cyc_h: Var<'t>,
    pub total: Var<'t>,
}

/// `L = L_ce + λ1·‖F_X − F̂_X‖ + λ2·‖F_H − F̂_H‖`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<'t>(
    logits: &Var<'t>,
    labels: &[usize],
    f_h: &Var<'t>,
    f_x: &Var<'t>,
    f_hat_h: &Var<'t>,
    f_hat_x: &Var<'t>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms<'t>> {
    let ce = logits.cross_entropy(labels)?;
    let cyc_x = consistency_loss(f_x, f_hat_x)?;
    let cyc_h = consistency_loss(f_h, f_hat_h)?;
    let total = ce
        .add(&cyc_x.scale(lambda1)?)?
        .add(&cyc_h.scale(lambda2)?)?;
    Ok(LossTerms {
        ce,
        cyc_x,
        cyc_h,
        total,
    })
}

/// Loss for configurations without compensation: the consistency terms are
/// recorded as constant zeros.
pub fn ce_only_loss<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<LossTerms<'t>> {
    let ce = logits.cross_entropy(labels)?;
    let zero = logits.tape().constant(Tensor::scalar(0.0));
    Ok(LossTerms {
        ce,
        cyc_x: zero,
        cyc_h: zero,
        total: ce,
    })
}
