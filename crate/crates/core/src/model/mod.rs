//! The ABS network: bimodal encoder, point tokens with an identity bank,
//! segment attention over a growing memory, and a convolutional decoder.

mod encoder;
mod infer;
pub mod layers;
mod memory;
mod segment;

use std::path::{Path, PathBuf};

use clickvos_tensor::{checkpoint, ParamId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{Conv, CrossAttn, Dense, Norm, ResBlock, SelfAttn};

pub use encoder::{image_tensor, positional_encoding, EncoderOutput};
pub use infer::{infer_video, FrameOutput, InferOptions, InferOutput, InferenceSession};
pub use memory::{DenseTokens, MemoryEntry, MemoryFlags, MemoryState, MemoryTrace, ObjMemMode, TokenSet};
pub use segment::{argmax_labels, cell_labels, pool_matrix};

/// The output head starts near zero so initial predictions are close to uniform.
const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    AppearanceOnly,
    ConcatFuse,
    #[default]
    BimodalEnhance,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance_only" => Ok(Self::AppearanceOnly),
            "concat_fuse" => Ok(Self::ConcatFuse),
            "bimodal_enhance" => Ok(Self::BimodalEnhance),
            _ => Err(Error::Config(format!(
                "unknown modality {s:?} (expected appearance_only, concat_fuse or bimodal_enhance)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub channels: usize,
    pub n_heads: usize,
    /// Feature stride `s`.
    pub stride: usize,
    /// Identity-bank rows: maximum objects plus background.
    pub n_max: usize,
    pub modality: Modality,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            n_heads: 4,
            stride: 4,
            n_max: 4,
            modality: Modality::BimodalEnhance,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.n_heads == 0 || c % 2 != 0 || (c / 2) % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "channels {c} must be even with channels/2 divisible by n_heads {}",
                self.n_heads
            )));
        }
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return Err(Error::Config(format!("stride {} must be a power of two >= 2", self.stride)));
        }
        if self.n_max < 2 || self.n_max > 256 {
            return Err(Error::Config(format!("n_max {} must be in 2..=256", self.n_max)));
        }
        Ok(())
    }

    /// Number of upsampling blocks in the decoder.
    pub fn decoder_blocks(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    /// Output width of decoder block `i`.
    pub fn decoder_width(&self, i: usize) -> usize {
        (self.channels >> i).max(4)
    }

    pub fn check_frame(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || height % self.stride != 0 || width % self.stride != 0 {
            return Err(Error::Config(format!(
                "frame {height}x{width} is not divisible by stride {}",
                self.stride
            )));
        }
        Ok(())
    }
}

/// One modality's convolutional stages.
#[derive(Clone, Debug)]
pub(crate) struct Branch {
    pub down_a: Vec<Conv>,
    pub res_a: ResBlock,
    pub down_b: Conv,
    pub res_b: ResBlock,
}

/// Modal-enhance block. Flow-side entries are absent for appearance-only models.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Meb {
    pub img_self: SelfAttn,
    pub flow_self: Option<SelfAttn>,
    pub img_cross: Option<CrossAttn>,
    pub flow_cross: Option<CrossAttn>,
}

/// Channel-attention fusion.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Fusion {
    pub fc1: Dense,
    pub fc2: Dense,
    pub proj: Conv,
}

#[derive(Clone, Debug)]
pub(crate) struct Weights {
    pub img: Branch,
    pub flow: Option<Branch>,
    pub meb: Option<[Meb; 2]>,
    pub fusion: Option<Fusion>,
    pub concat_fc: Option<Dense>,
    pub out_norm: Norm,
    pub bank: ParamId,
    pub seg_self: SelfAttn,
    pub seg_cross: CrossAttn,
    pub decoder: Vec<ResBlock>,
    pub head: Conv,
}

/// Model configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct AbsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) w: Weights,
}

fn register_branch(
    store: &mut ParamStore,
    name: &str,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Branch> {
    let half = cfg.channels / 2;
    let n_down = (cfg.stride / 2).trailing_zeros() as usize;
    let mut down_a = Vec::new();
    if n_down == 0 {
        down_a.push(Conv::register(store, &format!("{name}.a.down0"), 3, 3, half, 1, rng)?);
    }
    for i in 0..n_down {
        let ci = if i == 0 { 3 } else { half };
        down_a.push(Conv::register(store, &format!("{name}.a.down{i}"), 3, ci, half, 2, rng)?);
    }
    Ok(Branch {
        down_a,
        res_a: ResBlock::register(store, &format!("{name}.a.res"), half, half, rng)?,
        down_b: Conv::register(store, &format!("{name}.b.down"), 3, half, cfg.channels, 2, rng)?,
        res_b: ResBlock::register(store, &format!("{name}.b.res"), cfg.channels, cfg.channels, rng)?,
    })
}

fn register_meb(store: &mut ParamStore, name: &str, c: usize, heads: usize, bimodal: bool, rng: &mut ChaCha8Rng) -> Result<Meb> {
    let img_self = SelfAttn::register(store, &format!("{name}.img_self"), c, heads, rng)?;
    if !bimodal {
        return Ok(Meb {
            img_self,
            flow_self: None,
            img_cross: None,
            flow_cross: None,
        });
    }
    Ok(Meb {
        img_self,
        flow_self: Some(SelfAttn::register(store, &format!("{name}.flow_self"), c, heads, rng)?),
        img_cross: Some(CrossAttn::register(store, &format!("{name}.img_cross"), c, heads, true, rng)?),
        flow_cross: Some(CrossAttn::register(store, &format!("{name}.flow_cross"), c, heads, true, rng)?),
    })
}

impl AbsModel {
    /// Builds a model with freshly initialised parameters drawn from
    /// `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut s = ParamStore::new();
        let c = config.channels;
        let h = config.n_heads;
        let bimodal = config.modality != Modality::AppearanceOnly;
        let img = register_branch(&mut s, "enc.img", &config, &mut rng)?;
        let flow = if bimodal {
            Some(register_branch(&mut s, "enc.flow", &config, &mut rng)?)
        } else {
            None
        };
        let (meb, fusion, concat_fc) = match config.modality {
            Modality::ConcatFuse => (None, None, Some(Dense::register(&mut s, "enc.concat_fc", 2 * c, c, 1.0, &mut rng)?)),
            Modality::AppearanceOnly | Modality::BimodalEnhance => {
                let meb = [
                    register_meb(&mut s, "enc.meb1", c / 2, h, bimodal, &mut rng)?,
                    register_meb(&mut s, "enc.meb2", c, h, bimodal, &mut rng)?,
                ];
                let cin = if bimodal { 2 * c } else { c };
                let hidden = (cin / 4).max(4);
                let fusion = Fusion {
                    fc1: Dense::register(&mut s, "enc.fusion.fc1", cin, hidden, 2.0, &mut rng)?,
                    fc2: Dense::register(&mut s, "enc.fusion.fc2", hidden, cin, 1.0, &mut rng)?,
                    proj: Conv::register(&mut s, "enc.fusion.proj", 1, cin, c, 1, &mut rng)?,
                };
                (Some(meb), Some(fusion), None)
            }
        };
        let out_norm = Norm::register(&mut s, "enc.out_norm", c)?;
        let bank = s.insert_normal("bank", [config.n_max, c], 1.0, &mut rng)?;
        let seg_self = SelfAttn::register(&mut s, "seg.self", c, h, &mut rng)?;
        let seg_cross = CrossAttn::register(&mut s, "seg.cross", c, h, false, &mut rng)?;
        // Shared query/key projections: initial scores measure token similarity.
        let wq = s.get(seg_cross.attn.w_q).data().to_vec();
        s.get_mut(seg_cross.attn.w_k).data_mut().copy_from_slice(&wq);
        let mut decoder = Vec::new();
        let mut ci = 2 * c;
        for i in 0..config.decoder_blocks() {
            let co = config.decoder_width(i);
            decoder.push(ResBlock::register(&mut s, &format!("dec.block{i}"), ci, co, &mut rng)?);
            ci = co;
        }
        let head = Conv::register(&mut s, "dec.head", 1, ci, config.n_max, 1, &mut rng)?;
        s.get_mut(head.w).data_mut().iter_mut().for_each(|v| *v *= HEAD_INIT_SCALE);
        Ok(Self {
            config,
            params: s,
            w: Weights {
                img,
                flow,
                meb,
                fusion,
                concat_fc,
                out_norm,
                bank,
                seg_self,
                seg_cross,
                decoder,
                head,
            },
        })
    }

    pub fn bank_id(&self) -> ParamId {
        self.w.bank
    }

    /// Identity-bank values, `n_max x C` row-major.
    pub fn bank(&self) -> &[f64] {
        self.params.get(self.w.bank).data()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Writes parameters to `path` and the configuration to its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.params)?;
        let side = config_sidecar(path);
        let json = serde_json::to_vec_pretty(&self.config).expect("config serialises");
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = config_sidecar(path);
        let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let config: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::format(&side, e.to_string()))?;
        let mut model = Self::new(config)?;
        model.params.load_records(checkpoint::read(path)?)?;
        Ok(model)
    }
}

/// `model.absw` -> `model.absw.json`.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
