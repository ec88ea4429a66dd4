//! The assembled change-detection network.

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{EncoderConfig, Encoder};
use crate::decoder::{Decoder, DecoderConfig, DecoderKind, Heads, Pam, PredictionSet};
use crate::enhancement::Enhancer;
use crate::error::{invalid, Result};
use crate::grid::{TokenGrid, PYRAMID_LEVELS};
use crate::nn::{ParamBuilder, ParamDecl, ParamStore, Session};
use crate::scalar::Scalar;

/// Per-channel normalization applied to `[0, 1]` RGB input.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub use_dfe: bool,
    pub use_pam: bool,
    pub decoder_kind: DecoderKind,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
            use_dfe: true,
            use_pam: true,
            decoder_kind: DecoderKind::Pcp,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            encoder: EncoderConfig::full(),
            decoder: DecoderConfig::full(),
            use_dfe: true,
            use_pam: true,
            decoder_kind: DecoderKind::Pcp,
        }
    }

    /// The channel gate only exists in the progressive decoder.
    pub fn gated(&self) -> bool {
        self.use_pam && self.decoder_kind == DecoderKind::Pcp
    }
}

/// Parameter-free description of the network: layer wiring and tensor names.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub enhancer: Option<Enhancer>,
    pub pams: Vec<Pam>,
    pub decoder: Decoder,
    pub heads: Heads,
    pub decls: Vec<ParamDecl>,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut pb = ParamBuilder::new();
        let encoder = Encoder::new(&mut pb, &cfg.encoder)?;
        let c = cfg.encoder.reduce_to;
        let enhancer = cfg.use_dfe.then(|| Enhancer::new(&mut pb, c));
        let pam_in = if cfg.use_dfe { 4 * c } else { 2 * c };
        let pams = (0..PYRAMID_LEVELS)
            .map(|k| Pam::new(&mut pb, &format!("pam.{k}"), pam_in, c, cfg.gated()))
            .collect();
        let decoder = Decoder::new(&mut pb, &cfg.decoder, c, cfg.decoder_kind)?;
        let heads = Heads::new(&mut pb, c);
        Ok(Architecture {
            cfg: cfg.clone(),
            encoder,
            enhancer,
            pams,
            decoder,
            heads,
            decls: pb.into_decls(),
        })
    }

    /// Attention-module outputs `F_A` for all five levels.
    pub fn attended<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        image_a: Var<'g, T>,
        image_b: Var<'g, T>,
    ) -> Result<Vec<TokenGrid<'g, T>>> {
        let (pa, pb) = self.encoder.encode_siamese(s, image_a, image_b)?;
        match &self.enhancer {
            Some(enhancer) => enhancer
                .enhance_pyramid(s, &pa, &pb)?
                .iter()
                .zip(&self.pams)
                .map(|(level, pam)| pam.pam(s, level))
                .collect(),
            None => pa
                .levels
                .iter()
                .zip(&pb.levels)
                .zip(&self.pams)
                .map(|((&a, &b), pam)| pam.forward(s, a.with_var(Var::concat_last(&[a.var, b.var]))))
                .collect(),
        }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        image_a: Var<'g, T>,
        image_b: Var<'g, T>,
    ) -> Result<PredictionSet<'g, T>> {
        let shape = image_a.shape();
        let attended = self.attended(s, image_a, image_b)?;
        let decoded = self.decoder.decode(s, &attended)?;
        self.heads.predict(s, &decoded, (shape[1], shape[2]))
    }
}

/// Architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct Ftn<T> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Ftn<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(cfg)?;
        let store = ParamStore::init(&arch.decls, seed);
        Ok(Ftn { arch, store })
    }

    /// Wraps an existing store, checking it holds every declared tensor.
    pub fn with_store(cfg: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let arch = Architecture::new(cfg)?;
        for d in &arch.decls {
            match store.get(&d.name) {
                Some(e) if e.value.shape() == d.shape.as_slice() => {}
                Some(e) => {
                    return Err(crate::FtnError::ShapeConflict {
                        name: d.name.clone(),
                        expected: d.shape.clone(),
                        found: e.value.shape().to_vec(),
                    })
                }
                None => return Err(invalid(format!("parameter store lacks '{}'", d.name))),
            }
        }
        Ok(Ftn { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    pub fn session<'g>(&'g self, graph: &'g Graph<T>, train: bool) -> Session<'g, T> {
        Session::new(graph, &self.store, train)
    }

    pub fn forward<'g>(
        &self,
        s: &Session<'g, T>,
        image_a: Var<'g, T>,
        image_b: Var<'g, T>,
    ) -> Result<PredictionSet<'g, T>> {
        self.arch.forward(s, image_a, image_b)
    }

    /// Eval-mode change probabilities `[B, H, W]` from the fused head.
    pub fn predict_probabilities(&self, image_a: &ArrayD<T>, image_b: &ArrayD<T>) -> Result<Array3<T>> {
        let graph = Graph::new();
        let s = self.session(&graph, false);
        let preds = self.forward(&s, graph.constant(image_a.clone()), graph.constant(image_b.clone()))?;
        let probs = preds.fused_logits.sigmoid().value();
        let shape = probs.shape().to_vec();
        Ok((*probs)
            .clone()
            .into_shape_with_order((shape[0], shape[1], shape[2]))
            .unwrap())
    }
}

/// Stacks `[H, W, 3]` rasters in `[0, 1]` into a normalized `[B, H, W, 3]` batch.
pub fn image_batch<T: Scalar>(images: &[&Array3<f32>]) -> Result<ArrayD<T>> {
    let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
    let (h, w, c) = first.dim();
    if c != 3 {
        return Err(invalid(format!("expected RGB rasters, got {c} channels")));
    }
    let mut out = ArrayD::<T>::zeros(IxDyn(&[images.len(), h, w, 3]));
    for (b, img) in images.iter().enumerate() {
        if img.dim() != (h, w, 3) {
            return Err(invalid("images in a batch must share dimensions"));
        }
        let mut slot = out.index_axis_mut(Axis(0), b);
        for ((y, x, ch), &v) in img.indexed_iter() {
            slot[[y, x, ch]] = T::lit(((v - PIXEL_MEAN[ch]) / PIXEL_STD[ch]) as f64);
        }
    }
    Ok(out)
}
