use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vpbsd_tensor::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

use super::{check_input_dims, ConvUnit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub widths: [usize; 4],
    pub groups: usize,
    /// Channels of the full-resolution decoder stage.
    pub head_width: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 96, 128],
            groups: 4,
            head_width: 8,
        }
    }
}

impl TeacherConfig {
    /// Bottleneck width `d_t`.
    pub fn bottleneck(&self) -> usize {
        self.widths[3]
    }
}

struct Stage {
    down: ConvUnit,
    extra: Option<ConvUnit>,
}

struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

/// One decoder: per level a convolution to the next width followed by
/// upsampling, then a full-resolution head.
struct Decoder {
    ups: Vec<ConvUnit>,
    input_skip: Option<ConvUnit>,
    head: ConvUnit,
}

/// Encoder with four stride-2 stages and a self-attention bottleneck, plus
/// a reconstruction decoder and a segmentation decoder with skips.
pub struct Teacher {
    pub config: TeacherConfig,
    pub params: ParamSet,
    stages: Vec<Stage>,
    attn: Attention,
    rec: Decoder,
    seg: Decoder,
}

pub struct Encoded {
    /// Outputs of stages 1..=3, used as segmentation skips.
    pub skips: Vec<Var>,
    /// Bottleneck `Z` with `d_t` channels at 1/16 resolution.
    pub z: Var,
}

/// Parameter name prefixes of each part.
pub const ENCODER: &str = "enc";
pub const REC_DECODER: &str = "rec";
pub const SEG_DECODER: &str = "seg";

impl Teacher {
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        let gr = config.groups;
        let all = config
            .widths
            .iter()
            .chain(std::iter::once(&config.head_width));
        if gr == 0 || all.clone().any(|&w| w == 0 || w % gr != 0) {
            return Err(Error::Config(format!(
                "teacher widths {:?} / head {} must be positive multiples of {gr} groups",
                config.widths, config.head_width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = config.widths;
        let mut stages = Vec::new();
        let mut c_in = 1;
        for (i, &wi) in w.iter().enumerate() {
            let down = ConvUnit::new(
                &mut ps,
                &mut rng,
                &format!("enc{}.down", i + 1),
                c_in,
                wi,
                3,
                Some(gr),
            );
            let extra = (i > 0).then(|| {
                ConvUnit::new(
                    &mut ps,
                    &mut rng,
                    &format!("enc{}.conv", i + 1),
                    wi,
                    wi,
                    3,
                    Some(gr),
                )
            });
            stages.push(Stage { down, extra });
            c_in = wi;
        }
        let d = w[3];
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let mut proj = |name: &str| {
            let data: Vec<f64> = (0..d * d).map(|_| dist.sample(&mut rng)).collect();
            ps.insert(
                format!("enc.attn.{name}"),
                Tensor::new([d, d], data).expect("square"),
            )
        };
        let attn = Attention {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
        };
        let rec = Self::decoder(&mut ps, &mut rng, REC_DECODER, &config, false);
        let seg = Self::decoder(&mut ps, &mut rng, SEG_DECODER, &config, true);
        Ok(Self {
            config,
            params: ps,
            stages,
            attn,
            rec,
            seg,
        })
    }

    fn decoder(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: &TeacherConfig,
        skips: bool,
    ) -> Decoder {
        let w = c.widths;
        let outs = [w[2], w[1], w[0], c.head_width];
        let mut ups = Vec::new();
        let mut c_in = w[3];
        for (i, &o) in outs.iter().enumerate() {
            ups.push(ConvUnit::new(
                ps,
                rng,
                &format!("{prefix}.up{}", 4 - i),
                c_in,
                o,
                3,
                Some(c.groups),
            ));
            c_in = o;
        }
        let input_skip = skips.then(|| {
            ConvUnit::new(
                ps,
                rng,
                &format!("{prefix}.input"),
                1,
                c.head_width,
                3,
                Some(c.groups),
            )
        });
        let head = ConvUnit::new(ps, rng, &format!("{prefix}.head"), c.head_width, 1, 3, None);
        Decoder {
            ups,
            input_skip,
            head,
        }
    }

    pub fn encode(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Encoded> {
        check_input_dims(g.shape(x))?;
        let mut h = x;
        let mut skips = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            h = s.down.act(g, b, h, 2)?;
            if let Some(e) = &s.extra {
                h = e.act(g, b, h, 1)?;
            }
            if i < 3 {
                skips.push(h);
            }
        }
        let spatial = g.shape(h)[2..].to_vec();
        let tokens = g.channels_to_tokens(h)?;
        let a = &self.attn;
        let att = g.self_attention(tokens, b[a.wq], b[a.wk], b[a.wv], b[a.wo])?;
        let att = g.tokens_to_channels(att, &spatial)?;
        let z = g.add(h, att)?;
        Ok(Encoded { skips, z })
    }

    /// Reconstruction `X'` from a (quantized, re-aligned) bottleneck.
    pub fn reconstruct(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for u in &self.rec.ups {
            let c = u.act(g, b, h, 1)?;
            h = g.upsample_nearest(c, 2)?;
        }
        self.rec.head.linear(g, b, h, 1)
    }

    /// Segmentation logits from the unquantized encoder outputs.
    pub fn segment_logits(&self, g: &mut Graph, b: &Bound, x: Var, enc: &Encoded) -> Result<Var> {
        let mut h = enc.z;
        for (i, u) in self.seg.ups.iter().enumerate() {
            let c = u.act(g, b, h, 1)?;
            h = g.upsample_nearest(c, 2)?;
            if i < 3 {
                h = g.add(h, enc.skips[2 - i])?;
            }
        }
        let inp = self
            .seg
            .input_skip
            .as_ref()
            .expect("segmentation decoder has an input skip");
        let xi = inp.act(g, b, x, 1)?;
        let h = g.add(h, xi)?;
        self.seg.head.linear(g, b, h, 1)
    }

    pub fn segment(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<(Var, Encoded)> {
        let enc = self.encode(g, b, x)?;
        let logits = self.segment_logits(g, b, x, &enc)?;
        Ok((g.sigmoid(logits), enc))
    }
}
