use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_network, save_network};
use super::*;
use crate::dataset::{FrameMeta, Region};
use crate::layers::{Ctx, TensorRole};

fn rand_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

fn eval_ctx(rng: &mut ChaCha8Rng) -> Ctx<'_> {
    Ctx {
        train: false,
        update_stats: false,
        rng,
    }
}

fn snapshot<T: Scalar>(net: &mut Network<T>) -> BTreeMap<String, (Vec<T>, Vec<T>)> {
    let mut out = BTreeMap::new();
    net.visit(&mut |name, _, p| {
        out.insert(name.to_string(), (p.value.clone(), p.grad.clone()));
    });
    out
}

fn meta(region: Region, utc: (i32, u32, u32, u32, u32), lon: f64) -> FrameMeta {
    let (y, mo, d, h, mi) = utc;
    FrameMeta {
        tc_id: "T".into(),
        utc_time: NaiveDate::from_ymd_opt(y, mo, d)
            .unwrap()
            .and_hms_opt(h, mi, 0)
            .unwrap(),
        lon,
        lat: 15.0,
        region,
        vmax: 50.0,
    }
}

#[test]
fn full_specs_match_tables() {
    let g = NetworkSpec::full(NetworkName::GenPmw);
    assert_eq!(g.layers.len(), 13);
    let widths: Vec<_> = g.layers.iter().map(|l| l.out_dim).collect();
    assert_eq!(widths, [32, 64, 128, 256, 256, 256, 256, 256, 256, 128, 64, 32, 1]);
    let skips: Vec<_> = g.layers.iter().map(|l| l.skip_to).collect();
    assert_eq!(
        skips[..6],
        [Some(11), Some(10), Some(9), Some(8), Some(7), Option::None]
    );
    let drops: Vec<_> = g.layers.iter().map(|l| l.dropout).collect();
    assert_eq!(drops[6..8], [0.5, 0.5]);
    assert!(drops.iter().enumerate().all(|(i, &d)| d == 0.0 || i == 6 || i == 7));
    assert!(!g.layers[0].batch_norm && !g.layers[12].batch_norm);
    assert!(g.layers[1..12].iter().all(|l| l.batch_norm));
    assert_eq!(g.layers[12].stride, Some((1, 1)));
    assert_eq!(g.layers[12].activation, Activation::Relu);
    assert_eq!(NetworkSpec::full(NetworkName::GenVis).in_channels, 3);

    let d = NetworkSpec::full(NetworkName::DiscVis);
    let dims: Vec<_> = d.layers.iter().map(|l| (l.op, l.out_dim, l.batch_norm, l.activation)).collect();
    use Activation::*;
    use LayerOp::*;
    assert_eq!(
        dims,
        [
            (Conv, 32, false, LeakyRelu),
            (Conv, 64, true, LeakyRelu),
            (Conv, 128, true, LeakyRelu),
            (Conv, 256, true, Relu),
            (Conv, 1, false, None),
            (Conv, 128, true, LeakyRelu),
            (Conv, 256, true, LeakyRelu),
            (Linear, 128, true, Relu),
            (Linear, 1, false, None),
        ]
    );

    let r = NetworkSpec::full(NetworkName::Regressor);
    let dims: Vec<_> = r.layers.iter().map(|l| (l.op, l.kernel, l.out_dim)).collect();
    assert_eq!(
        dims,
        [
            (BatchNorm, Option::None, 0),
            (Conv, Some((4, 4)), 16),
            (Conv, Some((3, 3)), 32),
            (Conv, Some((3, 3)), 64),
            (Conv, Some((3, 3)), 128),
            (Linear, Option::None, 256),
            (Linear, Option::None, 64),
            (Linear, Option::None, 1),
        ]
    );
    for name in NetworkName::ALL {
        NetworkSpec::full(name).validate().unwrap();
        NetworkSpec::toy(name).validate().unwrap();
    }
}

#[test]
fn invalid_specs_and_sizes_are_rejected() {
    let mut s = NetworkSpec::full(NetworkName::GenPmw);
    s.layers[0].kernel = Option::None;
    assert!(matches!(s.validate(), Err(Error::Config(_))));
    let mut s = NetworkSpec::full(NetworkName::Regressor);
    s.layers[5].kernel = Some((3, 3));
    assert!(s.validate().is_err());
    let s = NetworkSpec::full(NetworkName::GenPmw);
    assert!(matches!(
        build_network::<f32>(&s, 48, 0),
        Err(Error::ImageSize { size: 48, divisor: 64 })
    ));
    let d = NetworkSpec::full(NetworkName::DiscPmw);
    assert!(matches!(build_network::<f32>(&d, 60, 0), Err(Error::ImageSize { divisor: 8, .. })));
}

#[test]
fn build_is_deterministic_in_seed() {
    let s = NetworkSpec::toy(NetworkName::GenPmw);
    let mut a = build_network::<f64>(&s, 8, 7).unwrap();
    let mut b = build_network::<f64>(&s, 8, 7).unwrap();
    let mut c = build_network::<f64>(&s, 8, 8).unwrap();
    assert_eq!(snapshot(&mut a), snapshot(&mut b));
    assert_ne!(snapshot(&mut a), snapshot(&mut c));
}

#[test]
fn init_follows_rules() {
    let mut net = build_network::<f32>(&NetworkSpec::full(NetworkName::DiscVis), 64, 3).unwrap();
    net.visit(&mut |name, role, p| {
        if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("running_mean") {
            assert!(p.value.iter().all(|&v| v == 0.0), "{name}");
        } else if name.ends_with(".gamma") || name.ends_with("running_var") {
            assert!(p.value.iter().all(|&v| v == 1.0), "{name}");
        } else {
            assert_eq!(role, TensorRole::Trainable);
            assert!(p.value.iter().all(|&v| v.abs() <= 0.04), "{name}");
        }
    });
    // bias only where no batch norm follows
    let mut names = Vec::new();
    net.visit(&mut |name, _, _| names.push(name.to_string()));
    assert!(names.contains(&"shared0.bias".to_string()));
    assert!(!names.contains(&"shared1.bias".to_string()));
    assert!(names.contains(&"m2n3.bias".to_string()));
}

#[test]
fn generator_shape_ladder_and_bottleneck() {
    let mut g = build_network::<f32>(&NetworkSpec::full(NetworkName::GenPmw), 64, 0)
        .unwrap()
        .into_generator()
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor::<f32>(&[1, 2, 64, 64], 1);
    let (y, trace) = g.forward_traced(&x, &mut eval_ctx(&mut rng)).unwrap();
    assert_eq!(y.shape(), [1, 1, 64, 64]);
    assert!(y.data().iter().all(|&v| v >= 0.0));
    let sizes: Vec<_> = trace.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(sizes, [32, 16, 8, 4, 2, 1, 2, 4, 8, 16, 32, 64, 64]);
    assert_eq!(g.row_sizes(64), sizes);
    for (t, l) in trace.iter().zip(&g.spec().layers) {
        assert_eq!(t.shape()[1], l.out_dim);
        assert_eq!(t.shape()[2], t.shape()[3]);
    }
}

#[test]
fn skip_connections_reach_their_targets() {
    let mut g = build_network::<f32>(&NetworkSpec::full(NetworkName::GenPmw), 64, 0)
        .unwrap()
        .into_generator()
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor::<f32>(&[1, 2, 64, 64], 2);
    let (_, base) = g.forward_traced(&x, &mut eval_ctx(&mut rng)).unwrap();
    for k in 0..5 {
        let target = 11 - k;
        let (_, abl) = g.forward_ablated(&x, &mut eval_ctx(&mut rng), k).unwrap();
        for r in 0..target {
            assert!(abl[r].bit_eq(&base[r]), "row {r} changed when ablating skip {k}");
        }
        assert!(!abl[target].bit_eq(&base[target]), "skip {k} does not reach row {target}");
    }
}

#[test]
fn conditioning_is_checked_and_reaches_output() {
    let mut g = build_network::<f64>(&NetworkSpec::full(NetworkName::GenVis), 64, 5)
        .unwrap()
        .into_generator()
        .unwrap();
    let ir1 = rand_tensor::<f64>(&[1, 1, 64, 64], 1);
    let wv = rand_tensor::<f64>(&[1, 1, 64, 64], 2);
    assert!(g.input(&ir1, &wv, Option::None).is_err());
    assert!(g.input(&ir1, &wv, Some(&[301.0])).is_err());
    assert!(g.input(&ir1, &wv, Some(&[-1.0])).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y0 = g.forward(&g.input(&ir1, &wv, Some(&[0.0])).unwrap(), &mut eval_ctx(&mut rng)).unwrap();
    let y1 = g.forward(&g.input(&ir1, &wv, Some(&[300.0])).unwrap(), &mut eval_ctx(&mut rng)).unwrap();
    assert!(!y0.bit_eq(&y1));

    let p = build_network::<f64>(&NetworkSpec::toy(NetworkName::GenPmw), 8, 5)
        .unwrap()
        .into_generator()
        .unwrap();
    let a = rand_tensor::<f64>(&[1, 1, 8, 8], 1);
    assert!(p.input(&a, &a, Some(&[0.0])).is_err());
    assert_eq!(p.input(&a, &a, Option::None).unwrap().shape(), [1, 2, 8, 8]);
}

#[test]
fn discriminator_shapes_and_purity() {
    let mut d = build_network::<f32>(&NetworkSpec::full(NetworkName::DiscVis), 64, 0)
        .unwrap()
        .into_discriminator()
        .unwrap();
    let a = rand_tensor::<f32>(&[2, 1, 64, 64], 1);
    let b = rand_tensor::<f32>(&[2, 1, 64, 64], 2);
    let t = rand_tensor::<f32>(&[2, 1, 64, 64], 3);
    assert!(Discriminator::input(&a, &b, &rand_tensor(&[2, 1, 32, 32], 4)).is_err());
    let x = Discriminator::input(&a, &b, &t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let o1 = d.forward(&x, &mut eval_ctx(&mut rng)).unwrap();
    let o2 = d.forward(&x, &mut eval_ctx(&mut rng)).unwrap();
    assert_eq!(o1.patch.shape(), [2, 1, 8, 8]);
    assert_eq!(o1.m2n.shape(), [2, 1]);
    assert!(o1.patch.bit_eq(&o2.patch) && o1.m2n.bit_eq(&o2.m2n));
}

#[test]
fn patch_receptive_field() {
    let d = build_network::<f32>(&NetworkSpec::full(NetworkName::DiscPmw), 128, 0)
        .unwrap()
        .into_discriminator()
        .unwrap();
    // 1 -> 4 -> 7 -> 16 -> 34 -> 70 going back through the five rows
    assert_eq!(d.patch_receptive_field(), 70);
    assert!(d.patch_receptive_field() < d.image_size());
}

#[test]
fn regressor_shapes_and_eval_determinism() {
    let mut r = build_network::<f32>(&NetworkSpec::full(NetworkName::Regressor), 64, 0)
        .unwrap()
        .into_regressor()
        .unwrap();
    assert_eq!(r.conv_output_shape(3, 64), [3, 128, 4, 4]);
    let x = rand_tensor::<f32>(&[3, 4, 64, 64], 1);
    let aux = rand_tensor::<f32>(&[3, AUX_LEN], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y1 = r.forward(&x, &aux, &mut eval_ctx(&mut rng)).unwrap();
    let y2 = r.forward(&x, &aux, &mut eval_ctx(&mut rng)).unwrap();
    assert_eq!(y1.shape(), [3, 1]);
    assert!(y1.bit_eq(&y2));
    assert!(r.forward(&x, &rand_tensor(&[3, 9], 2), &mut eval_ctx(&mut rng)).is_err());
    assert!(r
        .forward(&rand_tensor(&[3, 3, 64, 64], 1), &aux, &mut eval_ctx(&mut rng))
        .is_err());
    r.set_target_scale(70.0, 25.0).unwrap();
    let y3 = r.forward(&x, &aux, &mut eval_ctx(&mut rng)).unwrap();
    for (a, b) in y3.data().iter().zip(y1.data()) {
        assert!((a - (b * 25.0 + 70.0)).abs() < 1e-3);
    }
    assert!(r.set_target_scale(1.0, 0.0).is_err());
}

#[test]
fn region_permutation_with_matched_weights_is_invariant() {
    let mut r = build_network::<f64>(&NetworkSpec::toy(NetworkName::Regressor), 8, 4)
        .unwrap()
        .into_regressor()
        .unwrap();
    let x = rand_tensor::<f64>(&[2, 4, 8, 8], 1);
    let metas = [
        meta(Region::Wpac, (2010, 6, 1, 3, 0), 130.0),
        meta(Region::Io, (2011, 9, 20, 8, 30), 80.0),
    ];
    let aux: Tensor<f64> = aux_batch(metas.iter()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = r.forward(&x, &aux, &mut eval_ctx(&mut rng)).unwrap();

    let perm = [3usize, 5, 0, 1, 4, 2];
    let mut paux = aux.clone();
    for i in 0..2 {
        let item = paux.item_mut(i);
        let orig: Vec<f64> = item[4..].to_vec();
        for (k, &p) in perm.iter().enumerate() {
            item[4 + p] = orig[k];
        }
    }
    r.visit(&mut |name, _, p| {
        if name == "linear0.weight" {
            let in_f = p.shape[1];
            let base = in_f - AUX_LEN + 4;
            for row in p.value.chunks_mut(in_f) {
                let orig: Vec<f64> = row[base..].to_vec();
                for (k, &q) in perm.iter().enumerate() {
                    row[base + q] = orig[k];
                }
            }
        }
    });
    let yp = r.forward(&x, &paux, &mut eval_ctx(&mut rng)).unwrap();
    for (a, b) in y.data().iter().zip(yp.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn aux_feature_layout() {
    let a = build_aux(&meta(Region::Wpac, (2010, 6, 1, 4, 0), 120.0));
    assert_eq!(a.region_one_hot(), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    // 04:00 UTC at 120E is local noon
    assert!((a.0[3] - -1.0).abs() < 1e-12 && a.0[2].abs() < 1e-12);
    let b = build_aux(&meta(Region::Sh, (2010, 6, 1, 4, 0), 120.0));
    assert_eq!(b.region_one_hot()[5], 1.0);
    let jan1 = build_aux(&meta(Region::Atln, (2011, 1, 1, 12, 0), 0.0));
    let dec31 = build_aux(&meta(Region::Atln, (2010, 12, 31, 12, 0), 0.0));
    assert!((jan1.0[0] - dec31.0[0]).abs() < 0.03 && (jan1.0[1] - dec31.0[1]).abs() < 0.01);
}

proptest::proptest! {
    #[test]
    fn aux_invariants(
        region in 0usize..6,
        day in 0i64..3650,
        minute in 0i64..1440,
        lon in -180.0f64..180.0,
    ) {
        let t = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
            + chrono::Duration::days(day) + chrono::Duration::minutes(minute);
        let m = FrameMeta { tc_id: "P".into(), utc_time: t, lon, lat: 0.0, region: Region::ALL[region], vmax: 0.0 };
        let a = build_aux(&m);
        proptest::prop_assert_eq!(a.region_one_hot().iter().sum::<f64>(), 1.0);
        proptest::prop_assert_eq!(a.region_one_hot()[region], 1.0);
        proptest::prop_assert!((a.0[0].powi(2) + a.0[1].powi(2) - 1.0).abs() < 1e-12);
        proptest::prop_assert!((a.0[2].powi(2) + a.0[3].powi(2) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn frozen_network_is_untouched_by_forward_backward() {
    for name in [NetworkName::GenVis, NetworkName::DiscPmw, NetworkName::Regressor] {
        let mut net = build_network::<f64>(&NetworkSpec::toy(name), 8, 1).unwrap();
        net.set_trainable(false);
        let before = snapshot(&mut net);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            train: true,
            update_stats: true,
            rng: &mut rng,
        };
        match &mut net {
            Network::Generator(g) => {
                let x = rand_tensor::<f64>(&[3, 3, 8, 8], 1);
                let y = g.forward(&x, &mut ctx).unwrap();
                g.backward(&y, true).unwrap();
            }
            Network::Discriminator(d) => {
                let x = rand_tensor::<f64>(&[3, 3, 8, 8], 1);
                let o = d.forward(&x, &mut ctx).unwrap();
                d.backward(Some(&o.patch), Some(&o.m2n), true).unwrap();
            }
            Network::Regressor(r) => {
                let x = rand_tensor::<f64>(&[3, 4, 8, 8], 1);
                let y = r.forward(&x, &rand_tensor(&[3, AUX_LEN], 2), &mut ctx).unwrap();
                r.backward(&y, true).unwrap();
            }
        }
        assert_eq!(before, snapshot(&mut net), "{name}");
    }
}

/// Scalar loss `sum(w * outputs)` of one network, evaluated in training mode
/// with a fixed dropout stream.
struct Probe {
    x: Tensor<f64>,
    aux: Tensor<f64>,
    w1: Tensor<f64>,
    w2: Tensor<f64>,
}

impl Probe {
    fn new(name: NetworkName) -> Self {
        let c = match name {
            NetworkName::GenVis | NetworkName::DiscVis | NetworkName::DiscPmw => 3,
            NetworkName::GenPmw => 2,
            NetworkName::Regressor => 4,
        };
        let (s1, s2): (Vec<usize>, Vec<usize>) = match name {
            NetworkName::GenVis | NetworkName::GenPmw => (vec![3, 1, 8, 8], vec![1]),
            NetworkName::DiscVis | NetworkName::DiscPmw => (vec![3, 1, 2, 2], vec![3, 1]),
            NetworkName::Regressor => (vec![3, 1], vec![1]),
        };
        Probe {
            x: rand_tensor(&[3, c, 8, 8], 11),
            aux: rand_tensor(&[3, AUX_LEN], 12),
            w1: rand_tensor(&s1, 13),
            w2: rand_tensor(&s2, 14).scale(1.0 / 300.0),
        }
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Loss and, when `grad`, the input gradient after a backward pass.
    fn run(&self, net: &mut Network<f64>, x: &Tensor<f64>, grad: bool) -> (f64, Option<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ctx = Ctx {
            train: true,
            update_stats: false,
            rng: &mut rng,
        };
        match net {
            Network::Generator(g) => {
                let y = g.forward(x, &mut ctx).unwrap();
                let l = Self::dot(&y, &self.w1);
                (l, grad.then(|| g.backward(&self.w1, true).unwrap()))
            }
            Network::Discriminator(d) => {
                let o = d.forward(x, &mut ctx).unwrap();
                let l = Self::dot(&o.patch, &self.w1) + Self::dot(&o.m2n, &self.w2);
                (l, grad.then(|| d.backward(Some(&self.w1), Some(&self.w2), true).unwrap()))
            }
            Network::Regressor(r) => {
                let y = r.forward(x, &self.aux, &mut ctx).unwrap();
                let l = Self::dot(&y, &self.w1);
                (l, grad.then(|| r.backward(&self.w1, true).unwrap()))
            }
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[test]
fn finite_difference_gradients_match() {
    const EPS: f64 = 1e-6;
    for name in NetworkName::ALL {
        let mut net = build_network::<f64>(&NetworkSpec::toy(name), 8, 21).unwrap();
        // give batch-norm affine terms non-trivial values
        let mut prng = ChaCha8Rng::seed_from_u64(5);
        net.visit(&mut |n, role, p| {
            if role == TensorRole::Trainable && (n.ends_with(".gamma") || n.ends_with(".beta") || n.ends_with(".bias")) {
                p.value.iter_mut().for_each(|v| *v += prng.gen_range(-0.3..0.3));
            }
        });
        let probe = Probe::new(name);
        net.visit(&mut |_, _, p| p.zero_grad());
        let (_, dx) = probe.run(&mut net, &probe.x, true);
        let dx = dx.unwrap();

        let mut names = Vec::new();
        let mut analytic = BTreeMap::new();
        net.visit(&mut |n, role, p| {
            if role == TensorRole::Trainable {
                names.push((n.to_string(), p.len()));
                analytic.insert(n.to_string(), p.grad.clone());
            }
        });
        for (pname, len) in &names {
            let mut numeric = vec![0.0; *len];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let nudge = |net: &mut Network<f64>, d: f64| {
                    net.visit(&mut |n, _, p| {
                        if n == pname {
                            p.value[i] += d;
                        }
                    })
                };
                nudge(&mut net, EPS);
                let lp = probe.run(&mut net, &probe.x, false).0;
                nudge(&mut net, -2.0 * EPS);
                let lm = probe.run(&mut net, &probe.x, false).0;
                nudge(&mut net, EPS);
                *slot = (lp - lm) / (2.0 * EPS);
            }
            let e = rel_err(&analytic[pname], &numeric);
            assert!(e < 1e-4, "{name} {pname}: relative error {e}");
        }

        let mut numeric = vec![0.0; probe.x.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut xp = probe.x.clone();
            xp.data_mut()[i] += EPS;
            let lp = probe.run(&mut net, &xp, false).0;
            xp.data_mut()[i] -= 2.0 * EPS;
            let lm = probe.run(&mut net, &xp, false).0;
            *slot = (lp - lm) / (2.0 * EPS);
        }
        let e = rel_err(dx.data(), &numeric);
        assert!(e < 1e-4, "{name} input: relative error {e}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::toy(NetworkName::Regressor);
    let mut net = build_network::<f32>(&spec, 8, 9).unwrap();
    if let Network::Regressor(r) = &mut net {
        r.set_target_scale(65.0, 20.0).unwrap();
    }
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_network(&p1, &mut net, "fine_tune_r").unwrap();
    save_network(&p2, &mut net, "fine_tune_r").unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let (mut back, meta) = load_network::<f32>(&p1).unwrap();
    assert_eq!(meta.stage, "fine_tune_r");
    assert_eq!(meta.spec, spec);
    assert_eq!(snapshot(&mut back).keys().collect::<Vec<_>>(), snapshot(&mut net).keys().collect::<Vec<_>>());
    for ((_, (a, _)), (_, (b, _))) in snapshot(&mut back).iter().zip(snapshot(&mut net).iter()) {
        assert_eq!(a, b);
    }
    let x = rand_tensor::<f32>(&[2, 4, 8, 8], 3);
    let aux = rand_tensor::<f32>(&[2, AUX_LEN], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut r1 = net.into_regressor().unwrap();
    let mut r2 = back.into_regressor().unwrap();
    let y1 = r1.forward(&x, &aux, &mut eval_ctx(&mut rng)).unwrap();
    let y2 = r2.forward(&x, &aux, &mut eval_ctx(&mut rng)).unwrap();
    assert!(y1.bit_eq(&y2));

    assert!(load_network::<f64>(&p1).is_err());
    let mut bytes = std::fs::read(&p1).unwrap();
    bytes[0] = b'X';
    std::fs::write(&p2, &bytes).unwrap();
    assert!(matches!(load_network::<f32>(&p2), Err(Error::Checkpoint { .. })));
    std::fs::write(&p2, &std::fs::read(&p1).unwrap()[..40]).unwrap();
    assert!(load_network::<f32>(&p2).is_err());
}
