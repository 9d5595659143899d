//! PatchGAN discriminator: five 4×4 convolutions with strides 2, 2, 2, 1, 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvGeom, NormMode, ParamStore, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;

const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_width: 64 }
    }
}

impl DiscriminatorConfig {
    fn widths(&self) -> [usize; 6] {
        let b = self.base_width;
        [3, b, 2 * b, 4 * b, 8 * b, 1]
    }
}

fn geom(layer: usize) -> ConvGeom {
    ConvGeom::new(4, STRIDES[layer], 1)
}

/// Logit map size for an `h×w` input, or `None` when the input is too small.
pub fn discriminator_output_size(h: usize, w: usize) -> Option<(usize, usize)> {
    (0..5).try_fold((h, w), |(h, w), l| {
        let g = geom(l);
        match (g.out_len(h), g.out_len(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Some((a, b)),
            _ => None,
        }
    })
}

/// Layers 2–4 are conv (no bias) + BatchNorm + LeakyReLU; layer 1 is conv +
/// LeakyReLU and layer 5 emits raw logits.
pub fn init_discriminator<T: Real>(cfg: &DiscriminatorConfig, rng: &mut impl Rng) -> ParamStore<T> {
    let w = cfg.widths();
    let mut s = ParamStore::new();
    for l in 0..5 {
        let name = format!("disc.layer{}", l + 1);
        s.add_conv(&format!("{name}.conv"), w[l + 1], w[l], 4, rng);
        if (1..4).contains(&l) {
            let c = w[l + 1];
            // BatchNorm absorbs the conv bias
            s = without(s, &format!("{name}.conv.bias"));
            s.insert(format!("{name}.bn.gamma"), Tensor::ones(&[c]));
            s.insert(format!("{name}.bn.beta"), Tensor::zeros(&[c]));
            s.insert_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[c]));
            s.insert_buffer(format!("{name}.bn.running_var"), Tensor::ones(&[c]));
        }
    }
    s
}

fn without<T: Real>(s: ParamStore<T>, name: &str) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (k, v) in s.iter() {
        if k != name {
            out.insert(k.clone(), v.clone());
        }
    }
    for (k, v) in s.buffers() {
        out.insert_buffer(k.clone(), v.clone());
    }
    out
}

/// Batch statistics of one BatchNorm layer from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// `N×3×H×W` image batch to `N×1×h×w` patch logits.
pub fn discriminator_forward<T: Real>(
    t: &mut Tape<T>,
    p: &Bound,
    store: &ParamStore<T>,
    x: Var,
    mode: NormMode,
) -> Result<(Var, Vec<BnStats<T>>)> {
    let s = t.value(x).shape().to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::dim(format!("discriminator expects N×3×H×W, got {s:?}")));
    }
    if discriminator_output_size(s[2], s[3]).is_none() {
        return Err(Error::dim(format!(
            "input {}×{} too small for the discriminator",
            s[2], s[3]
        )));
    }
    let slope = T::from_f64c(LEAKY_SLOPE);
    let mut stats = Vec::new();
    let mut h = x;
    for l in 0..5 {
        let name = format!("disc.layer{}", l + 1);
        let c = t.conv_layer(p, &format!("{name}.conv"), h, geom(l));
        if h != x {
            t.discard(h);
        }
        h = match l {
            0 => t.leaky_relu(c, slope),
            4 => c,
            _ => {
                let rm = store.buffer(&format!("{name}.bn.running_mean")).expect("running mean");
                let rv = store.buffer(&format!("{name}.bn.running_var")).expect("running var");
                let (bn, st) = t.batch_norm(
                    c,
                    p.var(&format!("{name}.bn.gamma")),
                    p.var(&format!("{name}.bn.beta")),
                    mode,
                    (rm.data(), rv.data()),
                );
                if let Some((mean, var)) = st {
                    stats.push(BnStats { layer: name, mean, var });
                }
                t.leaky_relu(bn, slope)
            }
        };
    }
    Ok((h, stats))
}

/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[BnStats<T>]) {
    let m = T::from_f64c(BN_MOMENTUM);
    for st in stats {
        for (suffix, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
            let buf = store
                .buffer_mut(&format!("{}.bn.{suffix}", st.layer))
                .expect("running statistics registered at init");
            for (r, &b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_sizes() {
        assert_eq!(discriminator_output_size(448, 448), Some((54, 54)));
        assert_eq!(discriminator_output_size(224, 224), Some((26, 26)));
        assert_eq!(discriminator_output_size(64, 64), Some((6, 6)));
        assert_eq!(discriminator_output_size(8, 8), None);
    }

    #[test]
    fn zero_params_give_bias() {
        let cfg = DiscriminatorConfig { base_width: 4 };
        let mut s = init_discriminator::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        s.map_all(|n, v| {
            if !n.ends_with("gamma") {
                v.data_mut().fill(0.0)
            }
        });
        s.get_mut("disc.layer5.conv.bias").unwrap().data_mut().fill(-0.7);
        let mut t = Tape::inference();
        let b = s.bind(&mut t, false);
        let x = t.constant(Tensor::from_fn(&[2, 3, 32, 32], |i| (i % 3) as f32));
        let (y, _) = discriminator_forward(&mut t, &b, &s, x, NormMode::Eval).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 1, 2, 2]);
        assert!(t.value(y).data().iter().all(|&v| v == -0.7));
        let tiny = t.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(discriminator_forward(&mut t, &b, &s, tiny, NormMode::Eval).is_err());
    }

    #[test]
    fn running_stats_update() {
        let cfg = DiscriminatorConfig { base_width: 2 };
        let mut s = init_discriminator::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut t = Tape::new();
        let b = s.bind(&mut t, true);
        let x = t.constant(Tensor::from_fn(&[2, 3, 32, 32], |i| (i as f64 * 0.1).sin()));
        let (_, stats) = discriminator_forward(&mut t, &b, &s, x, NormMode::Train).unwrap();
        assert_eq!(stats.len(), 3);
        let before = s.buffer("disc.layer2.bn.running_mean").unwrap().data()[0];
        update_running_stats(&mut s, &stats);
        let after = s.buffer("disc.layer2.bn.running_mean").unwrap().data()[0];
        assert!((after - (0.9 * before + 0.1 * stats[0].mean[0])).abs() < 1e-15);
    }

    #[test]
    fn gradients() {
        let cfg = DiscriminatorConfig { base_width: 2 };
        let s = init_discriminator::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let x = Tensor::from_fn(&[2, 3, 24, 24], |i| ((i * 31 % 97) as f64) / 97.0);
        let reports = check_params(
            &s,
            |t, b| {
                let xv = t.constant(x.clone());
                let (y, _) = discriminator_forward(t, b, &s, xv, NormMode::Train).unwrap();
                let y = t.sigmoid(y);
                t.mean(y)
            },
            1e-5,
            8,
        );
        for r in &reports {
            assert!(r.passes(1e-4), "{r:?}");
        }
    }
}
