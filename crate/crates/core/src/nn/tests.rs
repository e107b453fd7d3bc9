use super::*;
use crate::rng::seeded;

fn small_config(hidden: Vec<usize>) -> NetConfig {
    NetConfig {
        data_dim: 2,
        out_dim: 2,
        label_count: 3,
        hidden,
        n_freqs: 3,
        time_dim: 4,
        cond_dim: 3,
    }
}

fn random_inputs(rng: &mut crate::rng::LabRng, batch: usize, cfg: &NetConfig) -> (Tensor, Vec<Real>, Vec<Cond>) {
    let x = crate::rng::normal_tensor(rng, batch, cfg.data_dim);
    let noise = (0..batch).map(|_| rng.random::<Real>()).collect();
    let cond = (0..batch)
        .map(|i| if i % 3 == 2 { Cond::Null } else { Cond::Label(rng.random_range(0..cfg.label_count)) })
        .collect();
    (x, noise, cond)
}

/// Straight-line re-implementation of the layer formulas, loop by loop.
fn oracle_forward(p: &NetParams, x: &Tensor, noise: &[Real], cond: &[Cond]) -> Vec<Vec<Real>> {
    let cfg = p.config();
    let s = p.slots();
    let mut outs = Vec::new();
    for b in 0..x.rows() {
        let mut feats = Vec::new();
        for &w in p.freqs() {
            feats.push((w * noise[b]).sin());
        }
        for &w in p.freqs() {
            feats.push((w * noise[b]).cos());
        }
        let mut h: Vec<Real> = x.row(b).to_vec();
        for o in 0..cfg.time_dim {
            let mut acc = s[1].data()[o];
            for (i, f) in feats.iter().enumerate() {
                acc += s[0].data()[o * feats.len() + i] * f;
            }
            h.push(acc);
        }
        let row = match cond[b] {
            Cond::Null => cfg.label_count,
            Cond::Label(l) => l,
        };
        h.extend_from_slice(s[2].row(row));
        let n_layers = cfg.hidden.len() + 1;
        for l in 0..n_layers {
            let w = &s[3 + 2 * l];
            let bias = &s[4 + 2 * l];
            let (out, fan_in) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0; out];
            for o in 0..out {
                let mut acc = bias.data()[o];
                for i in 0..fan_in {
                    acc += w.data()[o * fan_in + i] * h[i];
                }
                next[o] = if l + 1 < n_layers { acc / (1.0 + (-acc).exp()) } else { acc };
            }
            h = next;
        }
        outs.push(h);
    }
    outs
}

#[test]
fn zero_network_outputs_zero() {
    let p = NetParams::zeros(NetConfig::denoiser(2, 4)).unwrap();
    let x = Tensor::matrix(2, 2, vec![1.0, -3.0, 0.5, 2.0]).unwrap();
    let y = p.forward(&x, &[0.3, 0.9], &[Cond::Label(1), Cond::Null]).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_linear_layer_returns_input() {
    let cfg = small_config(vec![]);
    let mut p = NetParams::zeros(cfg.clone()).unwrap();
    let w = p.layer_weight_mut(0);
    let in_dim = cfg.input_dim();
    w.data_mut()[0] = 1.0;
    w.data_mut()[in_dim + 1] = 1.0;
    let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 4.0, 0.0, 7.0]).unwrap();
    let y = p.forward(&x, &[0.0, 0.5, 1.0], &[Cond::Label(0), Cond::Null, Cond::Label(2)]).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn forward_matches_independent_oracle() {
    for seed in 0..20 {
        let mut rng = seeded(seed, 0);
        let cfg = small_config(vec![5, 7, 4]);
        let p = NetParams::init(cfg.clone(), &mut rng).unwrap();
        let (x, noise, cond) = random_inputs(&mut rng, 9, &cfg);
        let y = p.forward(&x, &noise, &cond).unwrap();
        let want = oracle_forward(&p, &x, &noise, &cond);
        for (b, row) in want.iter().enumerate() {
            for (a, w) in y.row(b).iter().zip(row) {
                assert!((a - w).abs() < 1e-12, "seed {seed}: {a} vs {w}");
            }
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = seeded(7, 0);
    let cfg = NetConfig::denoiser(2, 4);
    let p = NetParams::init(cfg.clone(), &mut rng).unwrap();
    let (x, noise, cond) = random_inputs(&mut rng, 64, &cfg);
    let a = p.forward(&x, &noise, &cond).unwrap();
    let b = p.forward(&x, &noise, &cond).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn null_condition_ignores_label_rows() {
    let mut rng = seeded(3, 0);
    let cfg = small_config(vec![6]);
    let mut p = NetParams::init(cfg.clone(), &mut rng).unwrap();
    let x = crate::rng::normal_tensor(&mut rng, 4, 2);
    let noise = [0.1, 0.4, 0.6, 0.95];
    let nulls = [Cond::Null; 4];
    let before = p.forward(&x, &noise, &nulls).unwrap();
    for l in 0..cfg.label_count {
        p.embedding_row_mut(l).iter_mut().for_each(|v| *v = 123.0);
    }
    let after = p.forward(&x, &noise, &nulls).unwrap();
    assert!(before.bit_eq(&after));
}

#[test]
fn forward_rejects_bad_inputs() {
    let p = NetParams::zeros(small_config(vec![3])).unwrap();
    let x = Tensor::zeros(vec![2, 3]);
    assert!(matches!(p.forward(&x, &[0.0; 2], &[Cond::Null; 2]), Err(Error::ShapeMismatch { .. })));
    let x = Tensor::zeros(vec![2, 2]);
    assert!(matches!(p.forward(&x, &[0.0; 3], &[Cond::Null; 2]), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(p.forward(&x, &[0.0, 1.5], &[Cond::Null; 2]), Err(Error::InvalidArgument(_))));
    assert!(matches!(
        p.forward(&x, &[0.0; 2], &[Cond::Label(3), Cond::Null]),
        Err(Error::UnknownLabel(3))
    ));
    let nan = Tensor::from_parts(vec![1, 2], vec![Real::NAN, 0.0]);
    assert!(matches!(p.forward(&nan, &[0.0], &[Cond::Null]), Err(Error::NonFinite(_))));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = seeded(11, 0);
    let cfg = small_config(vec![5, 5]);
    let p = NetParams::init(cfg.clone(), &mut rng).unwrap();
    let (x, noise, cond) = random_inputs(&mut rng, 6, &cfg);
    let cache = p.forward_cached(&x, &noise, &cond).unwrap();
    let back = p.backward(&cache, &Tensor::zeros(vec![6, 2])).unwrap();
    assert!(back.grads.is_zero());
    assert!(back.d_input.data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_layer_gradient_is_outer_product() {
    let cfg = NetConfig {
        data_dim: 3,
        out_dim: 2,
        label_count: 1,
        hidden: vec![],
        n_freqs: 0,
        time_dim: 0,
        cond_dim: 0,
    };
    let mut rng = seeded(5, 0);
    let p = NetParams::init(cfg, &mut rng).unwrap();
    let x = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
    let u = Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap();
    let cache = p.forward_cached(&x, &[0.2], &[Cond::Label(0)]).unwrap();
    let back = p.backward(&cache, &u).unwrap();
    let dw = &back.grads.slots[3];
    let want = [3.0, -6.0, 1.5, -1.0, 2.0, -0.5];
    assert_eq!(dw.data(), &want);
    assert_eq!(back.grads.slots[4].data(), u.data());
}

#[test]
fn backward_rejects_foreign_cache() {
    let mut rng = seeded(1, 0);
    let a = NetParams::init(small_config(vec![3]), &mut rng).unwrap();
    let b = NetParams::init(small_config(vec![4]), &mut rng).unwrap();
    let x = Tensor::zeros(vec![1, 2]);
    let cache = a.forward_cached(&x, &[0.5], &[Cond::Null]).unwrap();
    assert!(matches!(b.backward(&cache, &Tensor::zeros(vec![1, 2])), Err(Error::MissingCache)));
    assert!(a.backward(&cache, &Tensor::zeros(vec![2, 2])).is_err());
}

/// Relative error with a floor: central differences at h = 1e-5 carry about
/// 1e-11 of round-off, so gradients below 1e-5 are compared absolutely.
fn rel_err(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn loss_of(p: &NetParams, x: &Tensor, noise: &[Real], cond: &[Cond], u: &Tensor) -> Real {
    let y = p.forward(x, noise, cond).unwrap();
    y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn backward_matches_central_differences_on_random_configs() {
    let h = 1e-5;
    let mut worst: Real = 0.0;
    for seed in 0..100u64 {
        let mut rng = seeded(seed, 99);
        let depth = rng.random_range(0..4);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..7)).collect();
        let cfg = NetConfig {
            data_dim: rng.random_range(1..4),
            out_dim: rng.random_range(1..4),
            label_count: rng.random_range(1..4),
            hidden,
            n_freqs: rng.random_range(1..4),
            time_dim: rng.random_range(1..4),
            cond_dim: rng.random_range(1..4),
        };
        let mut p = NetParams::init(cfg.clone(), &mut rng).unwrap();
        // Non-zero biases and larger embeddings exercise every slot.
        for s in p.slots_mut() {
            for v in s.data_mut() {
                *v += 0.3 * crate::rng::normal(&mut rng);
            }
        }
        let batch = rng.random_range(1..5);
        let (x, noise, cond) = random_inputs(&mut rng, batch, &cfg);
        let u = crate::rng::normal_tensor(&mut rng, batch, cfg.out_dim);
        let cache = p.forward_cached(&x, &noise, &cond).unwrap();
        let back = p.backward(&cache, &u).unwrap();
        for si in 0..p.slots().len() {
            for j in 0..p.slots()[si].len() {
                let orig = p.slots()[si].data()[j];
                p.slots_mut()[si].data_mut()[j] = orig + h;
                let lp = loss_of(&p, &x, &noise, &cond, &u);
                p.slots_mut()[si].data_mut()[j] = orig - h;
                let lm = loss_of(&p, &x, &noise, &cond, &u);
                p.slots_mut()[si].data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let e = rel_err(back.grads.slots[si].data()[j], fd);
                worst = worst.max(e);
                assert!(e < 1e-5, "seed {seed} slot {si}[{j}]: {} vs {fd}", back.grads.slots[si].data()[j]);
            }
        }
        // Input gradient.
        let mut xp = x.clone();
        for j in 0..x.len() {
            let orig = x.data()[j];
            xp.data_mut()[j] = orig + h;
            let lp = loss_of(&p, &xp, &noise, &cond, &u);
            xp.data_mut()[j] = orig - h;
            let lm = loss_of(&p, &xp, &noise, &cond, &u);
            xp.data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(back.d_input.data()[j], fd) < 1e-5);
        }
    }
    assert!(worst < 1e-5);
}
