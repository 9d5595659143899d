//! Learnable mapping networks: Haar wavelets, RCAB groups, the wavelet U-Net
//! (LiteISPNet) and the PatchGAN discriminator.

mod discriminator;
mod rcab;
mod wavelet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use discriminator::{
    discriminator_forward, discriminator_output_size, init_discriminator, update_running_stats, BnStats,
    DiscriminatorConfig,
};
pub use rcab::{group_forward, init_group, init_rcab, rcab_forward, rcab_param_count, REDUCTION};
pub use wavelet::{dwt_haar, iwt_haar};

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvGeom, ParamStore, Tape, Var};
use crate::tensor::Real;

/// How encoder features reach the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skips {
    #[default]
    Add,
    None,
}

/// Mapping backbone selector. Only LiteISPNet is implemented; the SR backbone
/// is a registered extension point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Liteisp,
    Srresnet,
}

impl BackboneKind {
    pub fn ensure_available(self) -> Result<()> {
        match self {
            BackboneKind::Liteisp => Ok(()),
            BackboneKind::Srresnet => Err(Error::config(
                "backbone.kind = srresnet is a registered extension point without an implementation",
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiteIspConfig {
    pub n_rcab: usize,
    pub base_width: usize,
    pub skips: Skips,
}

impl Default for LiteIspConfig {
    fn default() -> Self {
        Self {
            n_rcab: 4,
            base_width: 64,
            skips: Skips::Add,
        }
    }
}

impl LiteIspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rcab == 0 {
            return Err(Error::config("liteisp.n_rcab must be >= 1"));
        }
        if self.base_width == 0 {
            return Err(Error::config("liteisp.base_width must be >= 1"));
        }
        Ok(())
    }
}

pub const IN_CHANNELS: usize = 4;
pub const OUT_CHANNELS: usize = 3;

/// Group index, prefix of its input conv, and width multiplier, for the
/// three encoder levels.
const ENCODER: [(usize, usize, usize); 3] = [(1, IN_CHANNELS, 1), (2, 4, 1), (3, 4, 2)];

/// Register all LiteISPNet parameters under `liteisp.`.
pub fn init_liteisp<T: Real>(cfg: &LiteIspConfig, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let b = cfg.base_width;
    let n = cfg.n_rcab;
    let mut s = ParamStore::new();
    for (k, in_mul, width) in ENCODER {
        let in_c = if k == 1 { IN_CHANNELS } else { in_mul * b };
        s.add_conv(&format!("liteisp.enc{k}.conv"), width * b, in_c, 3, rng);
        init_group(&mut s, &format!("liteisp.rg{k}"), width * b, n, rng);
    }
    s.add_conv("liteisp.mid.conv_in", 2 * b, 8 * b, 3, rng);
    init_group(&mut s, "liteisp.rg4", 2 * b, n, rng);
    init_group(&mut s, "liteisp.rg5", 2 * b, n, rng);
    s.add_conv("liteisp.mid.conv_out", 8 * b, 2 * b, 3, rng);
    init_group(&mut s, "liteisp.rg6", 2 * b, n, rng);
    s.add_conv("liteisp.dec3.conv", 4 * b, 2 * b, 3, rng);
    init_group(&mut s, "liteisp.rg7", b, n, rng);
    s.add_conv("liteisp.dec2.conv", 4 * b, b, 3, rng);
    init_group(&mut s, "liteisp.rg8", b, n, rng);
    s.add_conv("liteisp.dec1.conv", b, b, 3, rng);
    s.add_conv("liteisp.tail.conv1", 4 * b, b, 3, rng);
    s.add_conv("liteisp.tail.conv2", OUT_CHANNELS, b, 3, rng);
    Ok(s)
}

/// Sum of element counts over every named parameter tensor.
pub fn param_count<T: Real>(store: &ParamStore<T>) -> usize {
    store.count()
}

/// `N×4×H×W` packed raw to `N×3×2H×2W`; `H` and `W` must be divisible by 8.
pub fn liteisp_forward<T: Real>(t: &mut Tape<T>, p: &Bound, cfg: &LiteIspConfig, x: Var) -> Result<Var> {
    let s = t.value(x).shape().to_vec();
    if s.len() != 4 || s[1] != IN_CHANNELS {
        return Err(Error::dim(format!("LiteISPNet expects N×4×H×W, got {s:?}")));
    }
    if !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) || s[2] == 0 || s[3] == 0 {
        return Err(Error::dim(format!(
            "LiteISPNet needs H and W divisible by 8, got {}×{}",
            s[2], s[3]
        )));
    }
    let g3 = ConvGeom::same(3);
    let n = cfg.n_rcab;
    let mut skips = Vec::with_capacity(3);
    let mut h = x;
    for (k, _, _) in ENCODER {
        let c = t.conv_layer(p, &format!("liteisp.enc{k}.conv"), h, g3);
        if h != x {
            t.discard(h);
        }
        let r = group_forward(t, p, &format!("liteisp.rg{k}"), n, c);
        t.discard(c);
        skips.push(r);
        h = t.dwt_haar(r)?;
    }
    let m = t.conv_layer(p, "liteisp.mid.conv_in", h, g3);
    t.discard(h);
    let m1 = group_forward(t, p, "liteisp.rg4", n, m);
    t.discard(m);
    let m2 = group_forward(t, p, "liteisp.rg5", n, m1);
    t.discard(m1);
    h = t.conv_layer(p, "liteisp.mid.conv_out", m2, g3);
    t.discard(m2);
    for (k, rg) in [(3usize, 6usize), (2, 7), (1, 8)] {
        let up = t.iwt_haar(h)?;
        t.discard(h);
        let joined = match cfg.skips {
            Skips::Add => {
                let j = t.add(up, skips[k - 1]);
                t.discard(up);
                t.discard(skips[k - 1]);
                j
            }
            Skips::None => up,
        };
        let r = group_forward(t, p, &format!("liteisp.rg{rg}"), n, joined);
        t.discard(joined);
        h = t.conv_layer(p, &format!("liteisp.dec{k}.conv"), r, g3);
        t.discard(r);
    }
    let wide = t.conv_layer(p, "liteisp.tail.conv1", h, g3);
    t.discard(h);
    let sh = t.pixel_shuffle(wide, 2);
    t.discard(wide);
    let out = t.conv_layer(p, "liteisp.tail.conv2", sh, g3);
    t.discard(sh);
    Ok(out)
}
