use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{
    ce_only_loss, encoder_forward, picm_forward, refine_head, total_loss, AttnVars, BlockVars,
    EncoderVars, FimVars, HeadVars, LossTerms, PicmOutput, PicmVars, PlainVars, SeVars,
};
use super::config::{Inputs, ModelConfig, Variant, HSI_STEM_MAPS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Gradients, ParamSet, Tape, Tensor, Var};

/// The full network: configuration plus every trainable tensor by name.
#[derive(Clone, Debug, PartialEq)]
pub struct PicnetModel {
    config: ModelConfig,
    params: ParamSet,
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn se(&self, prefix: &str) -> Result<SeVars<'t>> {
        Ok(SeVars {
            w1: self.get(&format!("{prefix}.w1"))?,
            b1: self.get(&format!("{prefix}.b1"))?,
            w2: self.get(&format!("{prefix}.w2"))?,
            b2: self.get(&format!("{prefix}.b2"))?,
        })
    }

    fn attn(&self, prefix: &str) -> Result<AttnVars<'t>> {
        Ok(AttnVars {
            wq: self.get(&format!("{prefix}.wq"))?,
            wk: self.get(&format!("{prefix}.wk"))?,
            wv: self.get(&format!("{prefix}.wv"))?,
        })
    }

    pub fn fim(&self, i: usize) -> Result<FimVars<'t>> {
        let p = format!("fim.{i}");
        Ok(FimVars {
            high_h: self.get(&format!("{p}.high_h"))?,
            high_x: self.get(&format!("{p}.high_x"))?,
            low_h: self.se(&format!("{p}.low_h"))?,
            low_x: self.se(&format!("{p}.low_x"))?,
            fuse_h_w: self.get(&format!("{p}.fuse_h.w"))?,
            fuse_h_b: self.get(&format!("{p}.fuse_h.b"))?,
            fuse_x_w: self.get(&format!("{p}.fuse_x.w"))?,
            fuse_x_b: self.get(&format!("{p}.fuse_x.b"))?,
        })
    }

    pub fn encoder(&self, config: &ModelConfig) -> Result<EncoderVars<'t>> {
        let blocks = (0..config.n_fim)
            .map(|i| match config.variant {
                Variant::NoFim => Ok(BlockVars::Plain(PlainVars {
                    h_w: self.get(&format!("plain.{i}.h.w"))?,
                    h_b: self.get(&format!("plain.{i}.h.b"))?,
                    x_w: self.get(&format!("plain.{i}.x.w"))?,
                    x_b: self.get(&format!("plain.{i}.x.b"))?,
                })),
                _ => self.fim(i).map(BlockVars::Fim),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderVars {
            stem_h3_w: self.get("stem_h.conv3d.w")?,
            stem_h3_b: self.get("stem_h.conv3d.b")?,
            stem_h2_w: self.get("stem_h.conv2d.w")?,
            stem_h2_b: self.get("stem_h.conv2d.b")?,
            stem_x_w: self.get("stem_x.w")?,
            stem_x_b: self.get("stem_x.b")?,
            blocks,
            proj_h_w: self.get("proj_h.w")?,
            proj_h_b: self.get("proj_h.b")?,
            proj_x_w: self.get("proj_x.w")?,
            proj_x_b: self.get("proj_x.b")?,
        })
    }

    pub fn picm(&self) -> Result<PicmVars<'t>> {
        Ok(PicmVars {
            proto_h: self.get("picm.proto_h")?,
            proto_x: self.get("picm.proto_x")?,
            comp_x: self.attn("picm.comp_x")?,
            comp_h: self.attn("picm.comp_h")?,
        })
    }

    pub fn head(&self) -> Result<HeadVars<'t>> {
        Ok(HeadVars {
            dw1: self.get("head.dw1")?,
            dw2: self.get("head.dw2")?,
            fc_w: self.get("head.fc.w")?,
            fc_b: self.get("head.fc.b")?,
        })
    }
}

/// Everything a forward pass produces that the losses and tests look at.
pub struct ForwardPass<'t> {
    pub logits: Var<'t>,
    /// Encoder tokens `[B,T,d]` before compensation.
    pub f_h: Var<'t>,
    pub f_x: Var<'t>,
    /// `None` for the `NoPicm` variant.
    pub picm: Option<PicmOutput<'t>>,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut ParamSet,
}

impl Init<'_> {
    /// Uniform in `±sqrt(6 / fan_in)` (He initialization for relu layers).
    fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.params.insert(name, t)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.params.insert(name, t)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.params.insert(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.params.insert(name, Tensor::ones(shape))
    }
}

impl PicnetModel {
    /// Builds and initializes the network. All configuration errors surface
    /// here, never during a forward pass.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: &mut params,
        };
        let c = config.c_h;
        let d = config.d_model;
        let t = config.tokens();
        let r = c / config.se_reduction;
        let stem_in = HSI_STEM_MAPS * config.n_pca;

        init.he("stem_h.conv3d.w", &[HSI_STEM_MAPS, 1, 3, 3, 3], 27)?;
        init.zeros("stem_h.conv3d.b", &[HSI_STEM_MAPS])?;
        init.he("stem_h.conv2d.w", &[c, stem_in, 3, 3], stem_in * 9)?;
        init.zeros("stem_h.conv2d.b", &[c])?;
        init.he("stem_x.w", &[c, config.aux_channels, 3, 3], config.aux_channels * 9)?;
        init.zeros("stem_x.b", &[c])?;

        for i in 0..config.n_fim {
            match config.variant {
                Variant::NoFim => {
                    for m in ["h", "x"] {
                        init.he(&format!("plain.{i}.{m}.w"), &[c, c, 3, 3], c * 9)?;
                        init.zeros(&format!("plain.{i}.{m}.b"), &[c])?;
                    }
                }
                _ => {
                    let p = format!("fim.{i}");
                    init.he(&format!("{p}.high_h"), &[c, 1, 3, 3], 9)?;
                    init.he(&format!("{p}.high_x"), &[c, 1, 3, 3], 9)?;
                    for m in ["low_h", "low_x"] {
                        init.xavier(&format!("{p}.{m}.w1"), &[c, r], c, r)?;
                        init.zeros(&format!("{p}.{m}.b1"), &[r])?;
                        init.xavier(&format!("{p}.{m}.w2"), &[r, c], r, c)?;
                        init.zeros(&format!("{p}.{m}.b2"), &[c])?;
                    }
                    init.he(&format!("{p}.fuse_h.w"), &[1, 2, 3, 3, 3], 54)?;
                    init.zeros(&format!("{p}.fuse_h.b"), &[1])?;
                    init.he(&format!("{p}.fuse_x.w"), &[c, 2 * c, 3, 3], 2 * c * 9)?;
                    init.zeros(&format!("{p}.fuse_x.b"), &[c])?;
                }
            }
        }

        init.xavier("proj_h.w", &[d, c, 3, 3], c * 9, d * 9)?;
        init.zeros("proj_h.b", &[d])?;
        init.xavier("proj_x.w", &[d, c, 3, 3], c * 9, d * 9)?;
        init.zeros("proj_x.b", &[d])?;

        if config.variant != Variant::NoPicm {
            init.ones("picm.proto_h", &[t, d])?;
            init.ones("picm.proto_x", &[t, d])?;
            for dir in ["comp_x", "comp_h"] {
                for w in ["wq", "wk", "wv"] {
                    init.xavier(&format!("picm.{dir}.{w}"), &[d, d], d, d)?;
                }
            }
        }

        init.he("head.dw1", &[2 * d, 1, 3, 3], 9)?;
        init.he("head.dw2", &[2 * d, 1, 3, 3], 9)?;
        init.xavier("head.fc.w", &[2 * d, config.n_classes], 2 * d, config.n_classes)?;
        init.zeros("head.fc.b", &[config.n_classes])?;

        Ok(PicnetModel { config, params })
    }

    /// Reassembles a model from stored tensors, checking every slot.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = PicnetModel::new(config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> =
            reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            return Err(shape_err!(
                "stored parameters do not match the configuration: expected {expected:?}, got {got:?}"
            ));
        }
        Ok(PicnetModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), tape.param(t)))
                .collect(),
        }
    }

    /// Runs the network on `x_h[B,1,N_p,k,k]` and `x_aux[B,C_aux,k,k]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        x_h: &Tensor,
        x_aux: &Tensor,
    ) -> Result<ForwardPass<'t>> {
        let cfg = &self.config;
        let k = cfg.patch;
        let b = x_h.shape().first().copied().unwrap_or(0);
        if x_h.shape() != [b, 1, cfg.n_pca, k, k] {
            return Err(shape_err!(
                "hyperspectral batch {:?} does not match [B,1,{},{k},{k}]",
                x_h.shape(),
                cfg.n_pca
            ));
        }
        if x_aux.shape() != [b, cfg.aux_channels, k, k] {
            return Err(shape_err!(
                "SAR/LiDAR batch {:?} does not match [{b},{},{k},{k}]",
                x_aux.shape(),
                cfg.aux_channels
            ));
        }
        let keep = |x: &Tensor, on: bool| if on { x.clone() } else { Tensor::zeros(x.shape()) };
        let i_h = tape.constant(keep(x_h, cfg.inputs != Inputs::AuxOnly));
        let i_x = tape.constant(keep(x_aux, cfg.inputs != Inputs::HsiOnly));
        let (f_h, f_x) = encoder_forward(&i_h, &i_x, &bound.encoder(cfg)?)?;
        let head = bound.head()?;
        match cfg.variant {
            Variant::NoPicm => Ok(ForwardPass {
                logits: refine_head(&f_h, &f_x, &head, k)?,
                f_h,
                f_x,
                picm: None,
            }),
            _ => {
                let out = picm_forward(&f_h, &f_x, &bound.picm()?)?;
                Ok(ForwardPass {
                    logits: refine_head(&out.i_h, &out.i_x, &head, k)?,
                    f_h,
                    f_x,
                    picm: Some(out),
                })
            }
        }
    }

    /// Composite training loss for a forward pass.
    pub fn loss<'t>(&self, pass: &ForwardPass<'t>, labels: &[usize]) -> Result<LossTerms<'t>> {
        self.loss_weighted(pass, labels, self.config.lambda1, self.config.lambda2)
    }

    pub fn loss_weighted<'t>(
        &self,
        pass: &ForwardPass<'t>,
        labels: &[usize],
        lambda1: f64,
        lambda2: f64,
    ) -> Result<LossTerms<'t>> {
        match &pass.picm {
            Some(p) => total_loss(
                &pass.logits,
                labels,
                &pass.f_h,
                &pass.f_x,
                &p.f_hat_h,
                &p.f_hat_x,
                lambda1,
                lambda2,
            ),
            None => ce_only_loss(&pass.logits, labels),
        }
    }

    /// Copies gradients from a reverse sweep into the parameter tensors.
    pub fn store_grads(&mut self, bound: &Bound<'_>, grads: &Gradients) -> Result<()> {
        for (name, var) in bound.iter() {
            let g = grads.tensor(var).into_data();
            self.params.get_mut(name)?.set_grad(g)?;
        }
        Ok(())
    }

    /// Logits without keeping anything beyond the forward tape.
    pub fn predict_logits(&self, x_h: &Tensor, x_aux: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        Ok(self.forward(&tape, &bound, x_h, x_aux)?.logits.value())
    }
}
