//! Model configuration, parameter layout and the [`Model`] container.

use serde::{Deserialize, Serialize};

use crate::attention::{GatingIds, GroundingIds, LocalAttnIds, SoftAttnIds};
use crate::autodiff::{dropout_mask, init_gaussian, init_zero, ParamId, ParamStore, RngState, GAUSSIAN_STD};
use crate::encoder::{EncoderIds, GruCellIds};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Image attention mechanism of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageAttention {
    /// Text-only decoder.
    None,
    Soft,
    Hard,
    Local,
}

impl std::str::FromStr for ImageAttention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "text" => Ok(Self::None),
            "soft" => Ok(Self::Soft),
            "hard" | "stochastic" => Ok(Self::Hard),
            "local" => Ok(Self::Local),
            other => Err(Error::Config(format!("unknown image attention {other:?}"))),
        }
    }
}

impl std::fmt::Display for ImageAttention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Soft => "soft",
            Self::Hard => "hard",
            Self::Local => "local",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    /// Width of the deep-output hidden layer.
    pub out_dim: usize,
    /// Image annotation width `D`.
    pub img_dim: usize,
    pub image_attention: ImageAttention,
    pub gating: bool,
    /// Double the image attention width to `2D`.
    pub doubling: bool,
    pub grounding: bool,
    /// Hidden width of the grounding 1×1 convolutions.
    pub grounding_hidden: usize,
    /// Local window half-width; `None` derives it from `L`.
    pub local_half_width: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            embed_dim: 620,
            enc_hidden: 1024,
            dec_hidden: 1024,
            out_dim: 620,
            img_dim: 1024,
            image_attention: ImageAttention::Soft,
            gating: false,
            doubling: false,
            grounding: false,
            grounding_hidden: 512,
            local_half_width: None,
        }
    }
}

impl ModelConfig {
    pub fn is_multimodal(&self) -> bool {
        self.image_attention != ImageAttention::None
    }

    /// Width of the text annotations (`2H`).
    pub fn text_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    /// Width of the image attention space.
    pub fn image_attn_dim(&self) -> usize {
        if self.doubling {
            2 * self.img_dim
        } else {
            self.img_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("out_dim", self.out_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.src_vocab < 3 || self.tgt_vocab < 3 {
            return Err(Error::Config("vocabularies must hold the three reserved tokens".into()));
        }
        if self.is_multimodal() {
            if self.img_dim == 0 {
                return Err(Error::Config("img_dim must be positive for multimodal models".into()));
            }
            if self.grounding && self.grounding_hidden == 0 {
                return Err(Error::Config("grounding_hidden must be positive".into()));
            }
        } else if self.gating || self.doubling || self.grounding {
            return Err(Error::Config("gating, doubling and grounding need an image attention".into()));
        }
        if self.local_half_width == Some(0) {
            return Err(Error::Config("local_half_width must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DeepOutputIds {
    pub l_s: ParamId,
    pub l_c: ParamId,
    pub l_i: Option<ParamId>,
    pub l_w: ParamId,
    pub b_t: ParamId,
    pub l_o: ParamId,
    pub b_o: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub tgt_emb: ParamId,
    pub rec1: GruCellIds,
    /// Input blocks: text context, then (multimodal) image context.
    pub rec2: GruCellIds,
    pub text_attn: SoftAttnIds,
    pub image_attn: Option<SoftAttnIds>,
    pub local: Option<LocalAttnIds>,
    pub gating: Option<GatingIds>,
    pub grounding: Option<GroundingIds>,
    pub output: DeepOutputIds,
}

/// Configuration plus the handles of every parameter; independent of the
/// parameter values so it can be shared while values are perturbed.
#[derive(Clone, Debug)]
pub struct Arch {
    pub config: ModelConfig,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
}

impl Arch {
    /// Allocates and initializes all parameters into `store`.
    pub fn build<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let encoder = EncoderIds::alloc(store, c.src_vocab, c.embed_dim, c.enc_hidden, c.dec_hidden, rng)?;

        let tgt_emb = store.add("dec.E_Y", init_gaussian(&[c.tgt_vocab, c.embed_dim], GAUSSIAN_STD, rng)?);
        let rec1 = GruCellIds::alloc(store, "dec.rec1", &[("", c.embed_dim)], c.dec_hidden, rng)?;
        let mut rec2_inputs = vec![("", c.text_dim())];
        if c.is_multimodal() {
            rec2_inputs.push(("_img", c.img_dim));
        }
        let rec2 = GruCellIds::alloc(store, "dec.rec2", &rec2_inputs, c.dec_hidden, rng)?;
        let text_attn = SoftAttnIds::alloc(store, "dec.att_text", c.dec_hidden, c.text_dim(), c.text_dim(), rng)?;
        let image_attn = if c.is_multimodal() {
            Some(SoftAttnIds::alloc(store, "dec.att_img", c.dec_hidden, c.img_dim, c.image_attn_dim(), rng)?)
        } else {
            None
        };
        let local = if c.image_attention == ImageAttention::Local {
            Some(LocalAttnIds::alloc(store, "dec.att_local", c.dec_hidden, rng)?)
        } else {
            None
        };
        let gating = if c.gating { Some(GatingIds::alloc(store, "dec.gate", c.dec_hidden, rng)?) } else { None };
        let grounding = if c.grounding {
            Some(GroundingIds::alloc(store, "dec.ground", c.dec_hidden, c.img_dim, c.grounding_hidden, rng)?)
        } else {
            None
        };
        let o = c.out_dim;
        let output = DeepOutputIds {
            l_s: store.add("dec.out.L_s", init_gaussian(&[o, c.dec_hidden], GAUSSIAN_STD, rng)?),
            l_c: store.add("dec.out.L_c", init_gaussian(&[o, c.text_dim()], GAUSSIAN_STD, rng)?),
            l_i: if c.is_multimodal() {
                Some(store.add("dec.out.L_i", init_gaussian(&[o, c.img_dim], GAUSSIAN_STD, rng)?))
            } else {
                None
            },
            l_w: store.add("dec.out.L_w", init_gaussian(&[o, c.embed_dim], GAUSSIAN_STD, rng)?),
            b_t: store.add("dec.out.b", init_zero(&[o])),
            l_o: store.add("dec.out.L_o", init_gaussian(&[c.tgt_vocab, o], GAUSSIAN_STD, rng)?),
            b_o: store.add("dec.out.b_o", init_zero(&[c.tgt_vocab])),
        };
        let decoder =
            DecoderIds { tgt_emb, rec1, rec2, text_attn, image_attn, local, gating, grounding, output };
        Ok(Self { config, encoder, decoder })
    }

    /// Parameters that carry image information into the decoder state and
    /// output: the image input block of REC2 and `L_i`.
    pub fn image_pathway(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(block) = self.decoder.rec2.inputs.get(1) {
            ids.extend([block.w_z, block.w_r, block.w_h]);
        }
        ids.extend(self.decoder.output.l_i);
        ids
    }
}

/// Per-sentence dropout masks, one per site, reused at every timestep.
#[derive(Clone, Debug)]
pub struct DropoutMasks<T> {
    pub src_emb: Tensor<T>,
    pub enc_forward: Tensor<T>,
    pub enc_backward: Tensor<T>,
    pub tgt_emb: Tensor<T>,
    pub dec_state1: Tensor<T>,
    pub dec_state2: Tensor<T>,
    pub text_ann: Tensor<T>,
    pub text_ctx: Tensor<T>,
    pub img_ann: Option<Tensor<T>>,
    pub img_ctx: Option<Tensor<T>>,
    pub out_hidden: Tensor<T>,
}

impl<T: Real> DropoutMasks<T> {
    pub fn sample(config: &ModelConfig, p: f64, rng: &mut RngState) -> Result<Self> {
        let c = config;
        let mut m = |n: usize| dropout_mask(&[n], p, rng);
        Ok(Self {
            src_emb: m(c.embed_dim)?,
            enc_forward: m(c.enc_hidden)?,
            enc_backward: m(c.enc_hidden)?,
            tgt_emb: m(c.embed_dim)?,
            dec_state1: m(c.dec_hidden)?,
            dec_state2: m(c.dec_hidden)?,
            text_ann: m(c.text_dim())?,
            text_ctx: m(c.text_dim())?,
            img_ann: if c.is_multimodal() { Some(m(c.img_dim)?) } else { None },
            img_ctx: if c.is_multimodal() { Some(m(c.img_dim)?) } else { None },
            out_hidden: m(c.out_dim)?,
        })
    }
}

/// A complete model: architecture and parameter values.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: Arch,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Initializes a model from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = RngState::with_stream(seed, INIT_STREAM);
        let arch = Arch::build(config, &mut params, &mut rng)?;
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), params: self.params.cast() }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in self.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Zeros the parameters listed by [`Arch::image_pathway`].
    pub fn zero_image_pathway(&mut self) {
        for id in self.arch.image_pathway() {
            self.params.value_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Local window half-width for `len` annotations.
    pub fn half_width(&self, len: usize) -> usize {
        self.arch.config.local_half_width.unwrap_or_else(|| crate::attention::default_half_width(len))
    }
}

/// RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0;
