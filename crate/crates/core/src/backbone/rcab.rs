//! Residual channel attention blocks and residual groups.

use rand::Rng;

use crate::nn::{Bound, ConvGeom, ParamStore, Tape, Var};
use crate::tensor::Real;

/// Channel-attention reduction ratio.
pub const REDUCTION: usize = 16;

fn reduced(c: usize) -> usize {
    (c / REDUCTION).max(1)
}

pub fn init_rcab<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut impl Rng) {
    store.add_conv(&format!("{prefix}.conv1"), c, c, 3, rng);
    store.add_conv(&format!("{prefix}.conv2"), c, c, 3, rng);
    store.add_conv(&format!("{prefix}.ca.down"), reduced(c), c, 1, rng);
    store.add_conv(&format!("{prefix}.ca.up"), c, reduced(c), 1, rng);
}

/// Number of parameters of one RCAB on `c` channels.
pub fn rcab_param_count(c: usize) -> usize {
    let m = reduced(c);
    2 * (c * c * 9 + c) + (m * c + m) + (c * m + c)
}

/// `x + CA(conv(relu(conv(x))))`.
pub fn rcab_forward<T: Real>(t: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Var {
    let g3 = ConvGeom::same(3);
    let g1 = ConvGeom::same(1);
    let h1 = t.conv_layer(p, &format!("{prefix}.conv1"), x, g3);
    let r = t.relu(h1);
    t.discard(h1);
    let f = t.conv_layer(p, &format!("{prefix}.conv2"), r, g3);
    t.discard(r);
    let pooled = t.global_avg_pool(f);
    let d = t.conv_layer(p, &format!("{prefix}.ca.down"), pooled, g1);
    let dr = t.relu(d);
    let u = t.conv_layer(p, &format!("{prefix}.ca.up"), dr, g1);
    let gate = t.sigmoid(u);
    let scaled = t.mul_channel(f, gate);
    t.discard(f);
    let out = t.add(x, scaled);
    t.discard(scaled);
    out
}

pub fn init_group<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, n_rcab: usize, rng: &mut impl Rng) {
    for j in 1..=n_rcab {
        init_rcab(store, &format!("{prefix}.rcab{j}"), c, rng);
    }
    store.add_conv(&format!("{prefix}.conv"), c, c, 3, rng);
}

/// `n_rcab` RCABs, a 3×3 conv, and a residual from the group input.
pub fn group_forward<T: Real>(t: &mut Tape<T>, p: &Bound, prefix: &str, n_rcab: usize, x: Var) -> Var {
    let mut h = x;
    for j in 1..=n_rcab {
        let next = rcab_forward(t, p, &format!("{prefix}.rcab{j}"), h);
        if h != x {
            t.discard(h);
        }
        h = next;
    }
    let c = t.conv_layer(p, &format!("{prefix}.conv"), h, ConvGeom::same(3));
    if h != x {
        t.discard(h);
    }
    let out = t.add(x, c);
    t.discard(c);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input, check_params};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, c, 6, 6], |i| ((i * 29 % 53) as f64 / 26.0) - 1.0)
    }

    fn forward_rcab(store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut t = Tape::inference();
        let b = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = rcab_forward(&mut t, &b, "r", xv);
        t.value(y).clone()
    }

    #[test]
    fn zero_convs_pass_through() {
        let mut s = ParamStore::<f64>::new();
        init_rcab(&mut s, "r", 8, &mut ChaCha8Rng::seed_from_u64(0));
        s.map_all(|n, v| {
            if n.contains("conv") {
                v.data_mut().fill(0.0)
            }
        });
        let x = input(8);
        assert_eq!(forward_rcab(&s, &x), x);
    }

    #[test]
    fn saturated_gate_is_plain_residual_block() {
        let mut s = ParamStore::<f64>::new();
        init_rcab(&mut s, "r", 8, &mut ChaCha8Rng::seed_from_u64(1));
        s.get_mut("r.ca.up.weight").unwrap().data_mut().fill(0.0);
        s.get_mut("r.ca.up.bias").unwrap().data_mut().fill(60.0);
        let x = input(8);
        let got = forward_rcab(&s, &x);
        let mut t = Tape::inference();
        let b = s.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let h = t.conv_layer(&b, "r.conv1", xv, ConvGeom::same(3));
        let h = t.relu(h);
        let h = t.conv_layer(&b, "r.conv2", h, ConvGeom::same(3));
        let y = t.add(xv, h);
        assert!(got.max_abs_diff(t.value(y)) < 1e-12);
    }

    #[test]
    fn group_counts_and_identity() {
        for n in [2, 4, 8, 20] {
            let mut s = ParamStore::<f32>::new();
            init_group(&mut s, "g", 16, n, &mut ChaCha8Rng::seed_from_u64(2));
            assert_eq!(s.count(), n * rcab_param_count(16) + 16 * 16 * 9 + 16);
            let x = Tensor::from_fn(&[1, 16, 4, 4], |i| i as f32 * 0.01);
            let mut t = Tape::inference();
            let b = s.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let y = group_forward(&mut t, &b, "g", n, xv);
            assert_eq!(t.value(y).shape(), x.shape());
        }
        let mut s = ParamStore::<f64>::new();
        init_group(&mut s, "g", 8, 4, &mut ChaCha8Rng::seed_from_u64(2));
        s.map_all(|_, v| v.data_mut().fill(0.0));
        let x = input(8);
        let mut t = Tape::inference();
        let b = s.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = group_forward(&mut t, &b, "g", 4, xv);
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn gradients() {
        let mut s = ParamStore::<f64>::new();
        init_group(&mut s, "g", 4, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let x = input(4);
        let reports = check_params(
            &s,
            |t, b| {
                let xv = t.constant(x.clone());
                let y = group_forward(t, b, "g", 2, xv);
                let y = t.sigmoid(y);
                t.mean(y)
            },
            1e-5,
            12,
        );
        for r in &reports {
            assert!(r.passes(1e-4), "{r:?}");
        }
        let r = check_input(
            &x,
            |t, v| {
                let b = s.bind(t, false);
                let y = rcab_forward(t, &b, "g.rcab1", v);
                let y = t.sigmoid(y);
                t.mean(y)
            },
            1e-5,
            64,
        );
        assert!(r.passes(1e-4), "{r:?}");
    }
}
