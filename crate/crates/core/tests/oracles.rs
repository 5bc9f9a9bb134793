//! Library results checked against independent reference computations.

mod support;

use capvec_core::autodiff::Graph;
use capvec_core::capvec::{diagnostics, extract_capability, merge, CapabilityVector};
use capvec_core::lora::{effective_delta, orth_param_selection, LoraAdapter, LoraAdapterSet};
use capvec_core::models::{
    action_loss, aux_alignment_loss, init_model, probe_capability, ridge_r2, Activation,
    ModelConfig, TeacherProjection,
};
use capvec_core::orth::{orth_loss, orth_loss_grad, total_loss, OrthPairList};
use capvec_core::synth::{
    diversity_score, disparity_score, gen_family, FamilySpec, TaskFamily, TaskSpec,
};
use capvec_core::trainers::{
    evaluate, train_aux, train_downstream_orth, train_sft, Optimizer, TrainConfig,
};
use capvec_core::{ParamSet, Tensor};
use rand::Rng;
use support::*;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let a = rand_tensor(&mut r, &[3, 4], 2.0);
        let b = rand_tensor(&mut r, &[4, 2], 2.0);
        let got = a.matmul(&b).unwrap();
        let want = ref_matmul(&to_f64(&a), &to_f64(&b), 3, 4, 2);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}

#[test]
fn every_op_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let mut seen = std::collections::BTreeSet::new();
    for k in 0..200 {
        let case = grad_case(k, &mut r);
        let res = case.check(1e-3);
        assert!(
            res.max_rel_err < 1e-4,
            "{} instance {k}: max relative error {}",
            case.op,
            res.max_rel_err
        );
        if res.checked > 0 {
            seen.insert(case.op);
        }
    }
    assert_eq!(seen.len(), GRAD_OPS.len(), "ops never checked: {seen:?}");
}

#[test]
fn two_layer_model_gradient_matches_finite_differences() {
    let mut r = rng(3);
    for _ in 0..10 {
        let res = two_layer_case(&mut r).check(1e-3);
        assert!(res.checked >= 20);
        assert!(res.max_rel_err < 1e-4, "{}", res.max_rel_err);
    }
}

#[test]
fn toy_model_gradient_matches_finite_differences() {
    // The library model against an f64 re-implementation of the same
    // two-layer network (layer 0 is tapped, hence named "encoder").
    let fam = gen_family(&FamilySpec::new(2, 3, 1.0, 5)).unwrap();
    let (model, params) = init_model(&ModelConfig::mlp(vec![16, 6, 4], 0), 5).unwrap();
    let batch = fam.sample_mixed(8, 1).unwrap();
    let (n, i, h, o) = (8, 16, 6, 4);
    let x = to_f64(&batch.observations);
    let y = to_f64(&batch.targets);
    let reference = |p: &std::collections::BTreeMap<String, Vec<f64>>| -> f64 {
        let z = ref_matmul(&x, &ref_transpose(&p["encoder.0.weight"], h, i), n, i, h);
        let a: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(k, v)| (v + p["encoder.0.bias"][k % h]).tanh())
            .collect();
        let out = ref_matmul(&a, &ref_transpose(&p["head.1.weight"], o, h), n, h, o);
        let s: f64 = out
            .iter()
            .enumerate()
            .map(|(k, v)| (v + p["head.1.bias"][k % o] - y[k]).powi(2))
            .sum();
        s / (n * o) as f64
    };

    let mut g = Graph::new();
    let bound = model.bind(&mut g, &params).unwrap();
    let xn = g.constant(batch.observations.clone());
    let yn = g.constant(batch.targets.clone());
    let (_, pred) = model.forward(&mut g, &bound, xn).unwrap();
    let root = g.mse_loss(pred, yn).unwrap();
    let grads = g.backward(root).unwrap();

    let base: std::collections::BTreeMap<String, Vec<f64>> =
        params.iter().map(|(k, t)| (k.clone(), to_f64(t))).collect();
    assert_eq!(base.len(), 4);
    let mut checked = 0;
    for (name, v) in &base {
        for j in 0..v.len() {
            let mut hi = base.clone();
            hi.get_mut(name).unwrap()[j] += 1e-3;
            let mut lo = base.clone();
            lo.get_mut(name).unwrap()[j] -= 1e-3;
            let numeric = (reference(&hi) - reference(&lo)) / 2e-3;
            let a = grads[name].data()[j] as f64;
            if a.abs() > 1e-6 {
                assert!(rel_err(a, numeric) < 1e-4, "{name}[{j}]: {a} vs {numeric}");
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

fn linear_config() -> ModelConfig {
    ModelConfig {
        activation: Activation::Identity,
        ..ModelConfig::mlp(vec![3, 2, 1], 0)
    }
}

fn tiny_family(seed: u64, noise: f32) -> TaskFamily {
    gen_family(&FamilySpec {
        latent_dim: 2,
        background_dim: 1,
        action_dim: 1,
        noise_sigma: noise,
        ..FamilySpec::new(1, 1, 0.0, seed)
    })
    .unwrap()
}

#[test]
fn capability_equals_difference_of_logged_trajectory_endpoints() {
    let fam = tiny_family(11, 0.05);
    let (model, init) = init_model(&linear_config(), 11).unwrap();
    let teacher = TeacherProjection::new(2, 2, 12).unwrap();
    let base = TrainConfig {
        steps: 30,
        batch: 16,
        seed: 13,
        log_every: 10,
        trajectory_log: true,
        ..TrainConfig::default()
    };
    let (ft, ft_log) = train_sft(&model, &init, &fam, &base).unwrap();
    let aux_cfg = TrainConfig {
        aux_weight: 1.0,
        ..base.clone()
    };
    let (ao, ao_log) = train_aux(&model, &init, &fam, &teacher, &aux_cfg).unwrap();
    let end_ft = &ft_log.trajectory.last().unwrap().1;
    let end_ao = &ao_log.trajectory.last().unwrap().1;
    assert!(end_ft.bits_eq(&ft) && end_ao.bits_eq(&ao));

    let gamma = extract_capability(&ao, &ft).unwrap();
    let mut n = 0;
    for (name, g) in gamma.params.iter() {
        let a = end_ao.get(name).unwrap().data();
        let f = end_ft.get(name).unwrap().data();
        for (k, v) in g.data().iter().enumerate() {
            assert_eq!(v.to_bits(), (a[k] - f[k]).to_bits(), "{name}[{k}]");
            n += 1;
        }
    }
    assert_eq!(n, model.base_param_count());
}

#[test]
fn diagnostics_inner_product_matches_scalar_loop() {
    let mut r = rng(4);
    for _ in 0..50 {
        let g = rand_tensor(&mut r, &[10], 2.0);
        let d = rand_tensor(&mut r, &[10], 2.0);
        let mut want = 0.0f64;
        for i in 0..10 {
            want += g.data()[i] as f64 * d.data()[i] as f64;
        }
        let gamma = CapabilityVector::from_params(ParamSet::from_entries([("w", g)]).unwrap());
        let rep = diagnostics(&gamma, &ParamSet::from_entries([("w", d)]).unwrap()).unwrap();
        assert!(rel_err(rep.global.inner_product, want) < 1e-6);
        assert!(rel_err(rep.per_param[0].inner_product, want) < 1e-6);
    }
}

#[test]
fn lora_delta_matches_triple_loop() {
    let mut r = rng(5);
    for _ in 0..20 {
        let a = rand_tensor(&mut r, &[2, 4], 1.0);
        let b = rand_tensor(&mut r, &[3, 2], 1.0);
        let ad = LoraAdapter::new(a.clone(), b.clone(), 0.5).unwrap();
        let mut set = LoraAdapterSet::new();
        set.insert("layer", ad);
        let d = effective_delta(&set).unwrap();
        let got = d.get("layer.delta").unwrap();
        assert_eq!(got.shape(), &[3, 4]);
        let want = ref_matmul(&to_f64(&b), &to_f64(&a), 3, 2, 4);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - 0.5 * w).abs() < 1e-6 * w.abs().max(1.0));
        }
    }
}

#[test]
fn lora_selection_on_hand_built_two_layer_fixture() {
    // layer "a": rank 2 on a 3×4 weight; layer "b": rank 4 on a 5×3 weight.
    let mk = |r: usize, d: usize, k: usize, v: f32| {
        LoraAdapter::new(Tensor::filled(&[r, k], v), Tensor::filled(&[d, r], v), 1.0).unwrap()
    };
    let mut gamma = LoraAdapterSet::new();
    gamma.insert("a", mk(2, 3, 4, 0.1));
    gamma.insert("b", mk(4, 5, 3, 0.2));
    let mut anchor = LoraAdapterSet::new();
    anchor.insert("a", mk(2, 3, 4, 1.0));
    anchor.insert("b", mk(4, 5, 3, 1.0));
    let mut current = LoraAdapterSet::new();
    current.insert("a", mk(2, 3, 4, 1.5));
    current.insert("b", mk(4, 5, 3, 0.5));

    let pairs = orth_param_selection(&gamma, &current, &anchor).unwrap();
    assert_eq!(pairs.len(), 2);
    let shapes: Vec<(&str, Vec<usize>, Vec<usize>)> = pairs
        .iter()
        .map(|(n, g, d)| (n.as_str(), g.shape().to_vec(), d.shape().to_vec()))
        .collect();
    assert_eq!(shapes[0].1, vec![2, 4]);
    assert_eq!(shapes[0].2, vec![2, 4]);
    assert_eq!(shapes[1].1, vec![4, 3]);
    assert_eq!(shapes[1].2, vec![4, 3]);
    assert!(shapes[0].0.starts_with('a') && shapes[1].0.starts_with('b'));
    assert!(pairs[0].2.data().iter().all(|&v| v == 0.5));
    assert!(pairs[1].2.data().iter().all(|&v| v == -0.5));
}

fn pair_list(g: Tensor, d: Tensor) -> OrthPairList {
    OrthPairList::new([("w".to_string(), g, d)]).unwrap()
}

#[test]
fn orth_loss_matches_scalar_loop() {
    let mut r = rng(6);
    for _ in 0..100 {
        let g = rand_tensor(&mut r, &[10, 10], 2.0);
        let d = rand_tensor(&mut r, &[10, 10], 2.0);
        let want = ref_orth(&to_f64(&g), &to_f64(&d));
        assert!(rel_err(orth_loss(&pair_list(g, d)), want) < 1e-6);
    }
}

#[test]
fn orth_gradient_matches_finite_differences_away_from_kinks() {
    let mut r = rng(7);
    for _ in 0..50 {
        let g = rand_tensor(&mut r, &[4, 5], 2.0);
        let d = rand_away_from_zero(&mut r, &[4, 5], 2.0, 0.1);
        let grad = orth_loss_grad(&pair_list(g.clone(), d.clone()));
        let (gv, dv) = (to_f64(&g), to_f64(&d));
        let h = 1e-4;
        for j in 0..dv.len() {
            let mut hi = dv.clone();
            hi[j] += h;
            let mut lo = dv.clone();
            lo[j] -= h;
            let numeric = (ref_orth(&gv, &hi) - ref_orth(&gv, &lo)) / (2.0 * h);
            let a = grad["w"].data()[j] as f64;
            if numeric.abs() > 1e-6 {
                assert!(rel_err(a, numeric) < 1e-4, "{a} vs {numeric}");
            }
        }
    }
}

#[test]
fn total_loss_at_default_lambda() {
    let mut g = Graph::new();
    let action = g.constant(Tensor::scalar(0.5));
    let orth = g.constant(Tensor::scalar(4.0));
    let t = total_loss(&mut g, action, orth, 1e-4).unwrap();
    assert!((g.scalar(t) - 0.5004).abs() < 1e-7);
}

#[test]
fn family_seeds_give_different_pools_of_the_same_shape() {
    let spec = FamilySpec::new(3, 20, 1.0, 7);
    let a = gen_family(&spec).unwrap();
    let b = gen_family(&FamilySpec { seed: 8, ..spec }).unwrap();
    let (pa, pb) = (a.to_params().unwrap(), b.to_params().unwrap());
    assert_eq!(
        pa.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>(),
        pb.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>()
    );
    assert_ne!(pa.to_bytes().unwrap(), pb.to_bytes().unwrap());
    for (x, y) in a.tasks.iter().zip(&b.tasks) {
        assert_ne!(x.nuisance_pool, y.nuisance_pool);
    }
}

#[test]
fn spread_does_not_lower_disparity_on_average() {
    let (mut clean, mut spread) = (0.0, 0.0);
    let seeds = 0..12u64;
    for s in seeds.clone() {
        clean += disparity_score(&gen_family(&FamilySpec::new(4, 50, 0.0, s)).unwrap()).unwrap();
        spread += disparity_score(&gen_family(&FamilySpec::new(4, 50, 1.0, s)).unwrap()).unwrap();
    }
    let n = seeds.count() as f64;
    assert!(clean / n <= spread / n, "clean {} spread {}", clean / n, spread / n);
}

#[test]
fn disparity_of_orthogonal_offsets_matches_pairwise_loop() {
    let spec = FamilySpec {
        latent_dim: 3,
        background_dim: 1,
        action_dim: 1,
        ..FamilySpec::new(3, 1, 0.0, 0)
    };
    let task = |mean: [f32; 3]| TaskSpec {
        latent_map: Tensor::zeros(&[1, 3]),
        latent_mean: mean.to_vec(),
        nuisance_pool: Tensor::zeros(&[1, 1]),
        noise_sigma: 0.0,
        shortcut_value: None,
    };
    let fam = TaskFamily {
        spec,
        tasks: vec![task([2.0, 0.0, 0.0]), task([0.0, 3.0, 0.0]), task([0.0, 0.0, 0.5])],
    };
    // Shared base [0, 0, 0, 1] plus each task's offset.
    let cents: Vec<[f64; 4]> = vec![[2.0, 0.0, 0.0, 1.0], [0.0, 3.0, 0.0, 1.0], [0.0, 0.0, 0.5, 1.0]];
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            let mut d = 0.0;
            let (mut ni, mut nj) = (0.0, 0.0);
            for k in 0..4 {
                d += cents[i][k] * cents[j][k];
                ni += cents[i][k] * cents[i][k];
                nj += cents[j][k] * cents[j][k];
            }
            total += d / (ni * nj).sqrt();
            count += 1.0;
        }
    }
    let want = count / total;
    assert!(rel_err(disparity_score(&fam).unwrap(), want) < 1e-6);
}

#[test]
fn diversity_is_pairs_per_task() {
    let one = gen_family(&FamilySpec::new(10, 1, 0.0, 0)).unwrap();
    assert_eq!(diversity_score(&one).pairs_per_task, 1);
    let many = gen_family(&FamilySpec::new(5, 10_000, 1.0, 0)).unwrap();
    let d = diversity_score(&many);
    assert_eq!(d.pairs_per_task, 10_000);
    assert_eq!(d.distinct_combinations, 50_000);
}

#[test]
fn noise_residual_std_is_close_to_sigma() {
    let fam = gen_family(&FamilySpec {
        noise_sigma: 0.1,
        ..FamilySpec::new(1, 10, 1.0, 3)
    })
    .unwrap();
    let b = fam.sample_batch(0, 10_000, 9).unwrap();
    let clean = b.latent.matmul(&fam.tasks[0].latent_map.transpose().unwrap()).unwrap();
    let res: Vec<f64> = b
        .targets
        .data()
        .iter()
        .zip(clean.data())
        .map(|(t, c)| (*t - *c) as f64)
        .collect();
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / res.len() as f64).sqrt();
    assert!((std - 0.1).abs() < 0.01, "{std}");
}

#[test]
fn latent_is_not_linearly_predictable_from_nuisance_coordinates() {
    let fam = gen_family(&FamilySpec::new(3, 200, 1.0, 4)).unwrap();
    let b = fam.sample_mixed(3000, 2).unwrap();
    let l = fam.latent_dim();
    let d = fam.obs_dim();
    let rows: Vec<Vec<f32>> = (0..b.len())
        .map(|i| b.observations.data()[i * d + l..(i + 1) * d].to_vec())
        .collect();
    let nuisance = Tensor::from_rows(&rows).unwrap();
    // Task identity is visible in both, so compare against the within-task
    // variation only: one task at a time.
    let one = fam.sample_batch(0, 3000, 2).unwrap();
    let rows: Vec<Vec<f32>> = (0..one.len())
        .map(|i| one.observations.data()[i * d + l..(i + 1) * d].to_vec())
        .collect();
    let r2 = ridge_r2(&Tensor::from_rows(&rows).unwrap(), &one.latent, 1e-3, 1).unwrap();
    assert!(r2 < 0.05, "{r2}");
    assert!(ridge_r2(&nuisance, &b.latent, 1e-3, 1).unwrap() <= 1.0);
}

#[test]
fn full_parameter_count_matches_shape_walk() {
    for widths in [vec![16, 32, 8, 4], vec![5, 7, 3], vec![2, 1, 1, 1, 9]] {
        let cfg = ModelConfig::mlp(widths.clone(), 0);
        let (model, p) = init_model(&cfg, 0).unwrap();
        let mut want = 0;
        for w in widths.windows(2) {
            want += w[0] * w[1] + w[1];
        }
        assert_eq!(p.num_elements(), want);
        assert_eq!(model.base_param_count(), want);
        assert_eq!(model.trainable_count(&p), want);
    }
}

#[test]
fn action_loss_matches_scalar_loop() {
    let mut r = rng(8);
    for _ in 0..50 {
        let (b, a) = (r.random_range(1..9), r.random_range(1..6));
        let p = rand_tensor(&mut r, &[b, a], 3.0);
        let t = rand_tensor(&mut r, &[b, a], 3.0);
        let mut want = 0.0f64;
        for i in 0..b * a {
            want += (p.data()[i] as f64 - t.data()[i] as f64).abs();
        }
        want /= (b * a) as f64;
        let mut g = Graph::new();
        let (pn, tn) = (g.constant(p), g.constant(t));
        let l = action_loss(&mut g, pn, tn).unwrap();
        assert!(rel_err(g.scalar(l) as f64, want) < 1e-6);
    }
}

#[test]
fn aux_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let teacher = TeacherProjection::new(6, 3, 1).unwrap();
    for _ in 0..20 {
        let hidden = rand_tensor(&mut r, &[5, 6], 2.0);
        let latent = rand_tensor(&mut r, &[5, 3], 2.0);
        let target = to_f64(&teacher.project(&latent).unwrap());
        let mut g = Graph::new();
        let h = g.param("h", hidden.clone()).unwrap();
        let loss = aux_alignment_loss(&mut g, h, &latent, &teacher).unwrap();
        let grad = g.backward(loss).unwrap();
        let f = |v: &[f64]| -> f64 {
            v.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64
        };
        let hv = to_f64(&hidden);
        for j in 0..hv.len() {
            let mut hi = hv.clone();
            hi[j] += 1e-3;
            let mut lo = hv.clone();
            lo[j] -= 1e-3;
            let numeric = (f(&hi) - f(&lo)) / 2e-3;
            let a = grad["h"].data()[j] as f64;
            if numeric.abs() > 1e-6 {
                assert!(rel_err(a, numeric) < 1e-4, "{a} vs {numeric}");
            }
        }
    }
}

#[test]
fn teacher_identity_features_probe_near_one() {
    let fam = gen_family(&FamilySpec::new(3, 10, 1.0, 1)).unwrap();
    let teacher = TeacherProjection::new(32, fam.latent_dim(), 3).unwrap();
    let b = fam.sample_mixed(600, 4).unwrap();
    let hidden = teacher.project(&b.latent).unwrap();
    assert!(ridge_r2(&hidden, &b.latent, 1e-3, 5).unwrap() >= 0.99);
}

#[test]
fn linear_model_fits_noiseless_single_task() {
    let fam = gen_family(&FamilySpec {
        noise_sigma: 0.0,
        ..FamilySpec::new(1, 1, 0.0, 21)
    })
    .unwrap();
    let cfg = ModelConfig {
        activation: Activation::Identity,
        ..ModelConfig::mlp(vec![16, 8, 4], 0)
    };
    let (model, init) = init_model(&cfg, 21).unwrap();
    let tc = TrainConfig {
        // L1 gradients keep a constant magnitude, so only a small Adam step
        // settles below the threshold.
        steps: 10_000,
        learning_rate: 3e-4,
        optimizer: Optimizer::adam(),
        log_every: 1000,
        ..TrainConfig::default()
    };
    let (out, _) = train_sft(&model, &init, &fam, &tc).unwrap();
    let loss = evaluate(&model, &out, &fam, 400).unwrap().mean_l1;
    assert!(loss < 1e-3, "{loss}");
}

#[test]
fn aux_loss_decreases_monotonically_on_noiseless_fixture() {
    let fam = gen_family(&FamilySpec {
        noise_sigma: 0.0,
        ..FamilySpec::new(1, 1, 0.0, 31)
    })
    .unwrap();
    let cfg = ModelConfig {
        activation: Activation::Identity,
        ..ModelConfig::mlp(vec![16, 8, 4], 0)
    };
    let (model, init) = init_model(&cfg, 31).unwrap();
    let teacher = TeacherProjection::new(8, 8, 32).unwrap();
    let tc = TrainConfig {
        steps: 50,
        batch: 256,
        learning_rate: 1e-3,
        aux_weight: 1.0,
        log_every: 1,
        ..TrainConfig::default()
    };
    let (_, log) = train_aux(&model, &init, &fam, &teacher, &TrainConfig {
        trajectory_log: true,
        ..tc
    })
    .unwrap();
    // The objective on one fixed large draw, so minibatch noise drops out.
    let probe = fam.sample_batch(0, 4096, 99).unwrap();
    let target = teacher.project(&probe.latent).unwrap();
    let aux: Vec<f64> = log
        .trajectory
        .iter()
        .map(|(_, p)| {
            let (h, _) = model.predict(p, &probe.observations).unwrap();
            let d = h.sub(&target).unwrap();
            d.dot(&d).unwrap() / d.numel() as f64
        })
        .collect();
    assert_eq!(aux.len(), 51);
    for w in aux.windows(2) {
        assert!(w[1] < w[0], "{w:?}");
    }
}

#[test]
fn large_lambda_shrinks_displacement() {
    let fam = gen_family(&FamilySpec::new(2, 10, 1.0, 41)).unwrap();
    let cfg = ModelConfig::mlp(vec![16, 8, 4], 0);
    let (model, meta) = init_model(&cfg, 41).unwrap();
    let mut r = rng(42);
    // Nonzero on every coordinate.
    let mut g = ParamSet::new();
    for (name, t) in meta.iter() {
        g.insert(name.clone(), rand_away_from_zero(&mut r, t.shape(), 0.05, 0.01))
            .unwrap();
    }
    let gamma = CapabilityVector::from_params(g);
    let disp = |lambda: f32| {
        let tc = TrainConfig {
            steps: 300,
            lambda_orth: lambda,
            log_every: 100,
            ..TrainConfig::default()
        };
        let (out, _) = train_downstream_orth(&model, &meta, &gamma, &fam, &tc).unwrap();
        let mut s = 0.0f64;
        for (name, t) in out.iter() {
            let a = meta.get(name).unwrap();
            s += t.sub(a).unwrap().frobenius_norm().powi(2);
        }
        s.sqrt()
    };
    let (free, held) = (disp(0.0), disp(10.0));
    assert!(held <= 0.5 * free, "λ=10 {held} vs λ=0 {free}");
}

#[test]
fn aux_training_probes_above_plain_training() {
    let cfg = ModelConfig::default();
    let mut diff = 0.0;
    for seed in 0..5u64 {
        let fam = gen_family(&FamilySpec::new(4, 200, 1.0, 50 + seed)).unwrap();
        let (model, init) = init_model(&cfg, seed).unwrap();
        let teacher = TeacherProjection::new(model.tap_width(), fam.latent_dim(), seed).unwrap();
        let tc = TrainConfig {
            steps: 500,
            seed,
            ..TrainConfig::default()
        };
        let (ft, _) = train_sft(&model, &init, &fam, &tc).unwrap();
        let aux_tc = TrainConfig {
            aux_weight: 1.0,
            ..tc
        };
        let (ao, _) = train_aux(&model, &init, &fam, &teacher, &aux_tc).unwrap();
        let p = |q: &ParamSet| probe_capability(&model, q, &fam, &teacher, 500).unwrap();
        diff += p(&ao) - p(&ft);
    }
    assert!(diff > 0.0, "mean probe gap {}", diff / 5.0);
}

#[test]
fn training_lowers_eval_loss() {
    let fam = gen_family(&FamilySpec::new(3, 20, 1.0, 61)).unwrap();
    let (model, init) = init_model(&ModelConfig::default(), 61).unwrap();
    let tc = TrainConfig {
        steps: 300,
        ..TrainConfig::default()
    };
    let (out, _) = train_sft(&model, &init, &fam, &tc).unwrap();
    let before = evaluate(&model, &init, &fam, 300).unwrap().mean_l1;
    let after = evaluate(&model, &out, &fam, 300).unwrap().mean_l1;
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn merge_then_extract_round_trips_on_a_trained_pair() {
    let fam = tiny_family(71, 0.05);
    let (model, pt) = init_model(&linear_config(), 71).unwrap();
    let tc = TrainConfig {
        steps: 20,
        ..TrainConfig::default()
    };
    let (ft, _) = train_sft(&model, &pt, &fam, &tc).unwrap();
    let gamma = extract_capability(&ft, &pt).unwrap();
    let back = merge(&pt, &gamma, 1.0, None).unwrap();
    for (name, t) in back.iter() {
        for (a, b) in t.data().iter().zip(ft.get(name).unwrap().data()) {
            assert!(ulp_distance(*a, *b) <= 1);
        }
    }
}
