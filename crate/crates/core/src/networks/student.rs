use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vpbsd_tensor::{Bound, Graph, ParamSet, Var};

use super::{check_input_dims, ConvUnit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub widths: [usize; 4],
    pub groups: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 24, 32],
            groups: 4,
        }
    }
}

impl StudentConfig {
    /// Bottleneck width `d_s`.
    pub fn bottleneck(&self) -> usize {
        self.widths[3]
    }
}

struct Level {
    conv: ConvUnit,
    down: ConvUnit,
}

struct Up {
    pre: ConvUnit,
    post: ConvUnit,
}

/// Four-level UNet. Each encoder level is a stride-1 convolution (its
/// output is the skip) followed by a stride-2 convolution; each decoder
/// level convolves at low resolution, upsamples, adds the skip and
/// convolves down to the next width.
pub struct Student {
    pub config: StudentConfig,
    pub params: ParamSet,
    enc: Vec<Level>,
    dec: Vec<Up>,
}

pub struct StudentOutput {
    pub logits: Var,
    pub seg: Var,
    /// Deepest encoder output, normalized but before activation.
    pub z: Var,
}

impl Student {
    pub fn new(config: StudentConfig, seed: u64) -> Result<Self> {
        let gr = config.groups;
        if gr == 0 || config.widths.iter().any(|&w| w == 0 || w % gr != 0) {
            return Err(Error::Config(format!(
                "student widths {:?} must be positive multiples of {gr} groups",
                config.widths
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = config.widths;
        let mut enc = Vec::new();
        let mut c_in = 1;
        for (i, &wi) in w.iter().enumerate() {
            let conv = ConvUnit::new(
                &mut ps,
                &mut rng,
                &format!("enc{}.conv", i + 1),
                c_in,
                wi,
                3,
                Some(gr),
            );
            let down = ConvUnit::new(
                &mut ps,
                &mut rng,
                &format!("enc{}.down", i + 1),
                wi,
                wi,
                3,
                Some(gr),
            );
            enc.push(Level { conv, down });
            c_in = wi;
        }
        let mut dec = Vec::new();
        for i in (0..4).rev() {
            let pre = ConvUnit::new(
                &mut ps,
                &mut rng,
                &format!("dec{}.pre", i + 1),
                w[i],
                w[i],
                3,
                Some(gr),
            );
            let (out, norm) = if i == 0 {
                (1, None)
            } else {
                (w[i - 1], Some(gr))
            };
            let post = ConvUnit::new(
                &mut ps,
                &mut rng,
                &format!("dec{}.post", i + 1),
                w[i],
                out,
                3,
                norm,
            );
            dec.push(Up { pre, post });
        }
        Ok(Self {
            config,
            params: ps,
            enc,
            dec,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<StudentOutput> {
        check_input_dims(g.shape(x))?;
        let mut skips = Vec::with_capacity(4);
        let mut h = x;
        let mut z = x;
        for (i, l) in self.enc.iter().enumerate() {
            let s = l.conv.act(g, b, h, 1)?;
            skips.push(s);
            if i == 3 {
                z = l.down.linear(g, b, s, 2)?;
                h = g.leaky_relu(z, super::SLOPE)?;
            } else {
                h = l.down.act(g, b, s, 2)?;
            }
        }
        for (u, skip) in self.dec.iter().zip(skips.iter().rev()) {
            let p = u.pre.act(g, b, h, 1)?;
            let up = g.upsample_nearest(p, 2)?;
            let merged = g.add(up, *skip)?;
            h = if u.post.norm.is_some() {
                u.post.act(g, b, merged, 1)?
            } else {
                u.post.linear(g, b, merged, 1)?
            };
        }
        let seg = g.sigmoid(h);
        Ok(StudentOutput { logits: h, seg, z })
    }
}
