use super::*;
use crate::autodiff::Graph;
use crate::data::generate_phantoms;
use crate::model::forward;

fn tiny() -> ModelConfig {
    ModelConfig::tiny(16)
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        mask: MaskSpec::uniform(2.0),
        ..TrainConfig::default()
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(5e-4, 0, 100), 5e-4);
    assert!(cosine_lr(5e-4, 100, 100).abs() < 1e-20);
    assert!((cosine_lr(5e-4, 50, 100) - 2.5e-4).abs() < 1e-18);
    assert!(cosine_lr(5e-4, 150, 100).abs() < 1e-20);
}

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
    s
}

fn scalar_grads(g: f64) -> ParamGrads<f64> {
    let mut m = ParamGrads::new();
    m.insert("w".to_string(), Tensor::new(vec![1], vec![g]).unwrap());
    m
}

#[test]
fn adamw_zero_gradient_and_decay_is_identity() {
    let mut p = scalar_store(0.7);
    let mut st = AdamState::new(&p);
    for _ in 0..3 {
        adamw_step(&mut p, &scalar_grads(0.0), &mut st, 1e-3, 0.0).unwrap();
    }
    assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    assert_eq!(st.step, 3);
}

#[test]
fn adamw_matches_hand_rolled_update() {
    let (lr, wd) = (1e-2, 0.1);
    let grads = [0.3, -1.2, 0.05];
    let mut p = scalar_store(0.5);
    let mut st = AdamState::new(&p);
    let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        adamw_step(&mut p, &scalar_grads(g), &mut st, lr, wd).unwrap();
        let t = (t + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w = w - lr * wd * w - lr * mh / (vh.sqrt() + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-12);
    }
}

#[test]
fn adamw_rejects_missing_or_misshaped_gradients() {
    let mut p = scalar_store(0.5);
    let mut st = AdamState::new(&p);
    assert!(adamw_step(&mut p, &ParamGrads::new(), &mut st, 1e-3, 0.0).is_err());
    let mut bad = ParamGrads::new();
    bad.insert("w".to_string(), Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    assert!(adamw_step(&mut p, &bad, &mut st, 1e-3, 0.0).is_err());
}

#[test]
fn single_layer_loss_is_a_plain_norm() {
    let mut g = Graph::<f64>::new();
    let pred = Tensor::from_fn([2, 4, 4], |i| (i as f64 * 0.3).sin());
    let target = Tensor::from_fn([2, 4, 4], |i| (i as f64 * 0.7).cos());
    let img = g.param(pred.clone());
    let vars = ForwardVars {
        lr_spectrograms: vec![],
        hr_spectrograms: vec![],
        hr_images: vec![img],
        refined_spectrograms: vec![],
        final_image: img,
    };
    let targets = Targets {
        hr: target.clone(),
        lr: Tensor::zeros([2, 1, 1]),
    };
    let loss = deep_supervision_loss(&mut g, &vars, &targets, LossWeights::default(), true).unwrap();
    let expect: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-10);

    let mut g = Graph::<f64>::new();
    let img = g.param(target.clone());
    let vars = ForwardVars { hr_images: vec![img], final_image: img, ..vars };
    let loss = deep_supervision_loss(&mut g, &vars, &targets, LossWeights::default(), true).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);
}

#[test]
fn lr_target_is_inverse_of_central_crop() {
    let cfg = tiny();
    let s = &generate_phantoms(1, 16, 16, 2).unwrap()[0];
    let t = Targets::<f64>::new(s, &cfg).unwrap();
    assert_eq!(t.lr.shape(), &[2, 4, 4]);
    assert_eq!(t.hr.shape(), &[2, 16, 16]);
    let back = crate::fourier::fft2_centered(&ComplexGrid::from_tensor(&t.lr).unwrap()).unwrap();
    assert!(back.max_abs_diff(&s.spectrum.crop_center(4, 4).unwrap()) < 1e-12);
}

#[test]
fn graph_and_direct_loss_agree_and_are_nonnegative() {
    let cfg = tiny();
    let params = init_params::<f64>(&cfg, 3).unwrap();
    let mask = MaskSpec::uniform(2.0).build(16, 16).unwrap();
    for s in generate_phantoms(3, 16, 16, 4).unwrap() {
        let prepared = PreparedSample::<f64>::new(&s, &mask, &cfg).unwrap();
        let (graph_loss, _) = loss_and_grads(&params, &cfg, &prepared, LossWeights::default(), false, true).unwrap();
        let out = forward(&prepared.points, &params, &cfg, false).unwrap();
        let direct = supervision_loss_value(&out, &prepared.targets, LossWeights::default()).unwrap();
        assert!(graph_loss >= 0.0);
        assert!((graph_loss - direct).abs() < 1e-9 * direct.max(1.0));
    }
}

#[test]
fn gradient_stop_isolates_encoder_and_lr_decoder() {
    let cfg = tiny();
    let params = init_params::<f64>(&cfg, 5).unwrap();
    let mask = MaskSpec::uniform(2.0).build(16, 16).unwrap();
    let s = &generate_phantoms(1, 16, 16, 6).unwrap()[0];
    let prepared = PreparedSample::<f64>::new(s, &mask, &cfg).unwrap();
    let w = LossWeights::default();
    let (_, with_hr) = loss_and_grads(&params, &cfg, &prepared, w, true, true).unwrap();
    let (_, lr_only) = loss_and_grads(&params, &cfg, &prepared, w, true, false).unwrap();
    let (_, full) = loss_and_grads(&params, &cfg, &prepared, w, false, true).unwrap();
    let upstream = |n: &str| n.starts_with("tok.") || n.starts_with("enc.") || n.starts_with("lr.");
    let mut changed = false;
    for (name, g) in &with_hr {
        if upstream(name) {
            let bits: Vec<u64> = g.data().iter().map(|v| v.to_bits()).collect();
            let reference: Vec<u64> = lr_only[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, reference, "{name}");
            changed |= full[name].max_abs_diff(g) > 0.0;
        }
    }
    assert!(changed, "without the stop HR losses must reach upstream parameters");
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let cfg = tiny();
    let data = generate_phantoms(2, 16, 16, 7).unwrap();
    let tc = TrainConfig { epochs: 0, ..quick_config(0) };
    let out = train::<f64>(&cfg, &tc, &data).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.params, init_params::<f64>(&cfg, tc.seed).unwrap());
}

#[test]
fn history_length_and_determinism() {
    let cfg = tiny();
    let data = generate_phantoms(5, 16, 16, 8).unwrap();
    let tc = quick_config(2);
    let a = train::<f32>(&cfg, &tc, &data).unwrap();
    let b = train::<f32>(&cfg, &tc, &data).unwrap();
    assert_eq!(a.history.len(), 2 * 3);
    let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.history), bits(&b.history));
    assert_eq!(a.params, b.params);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny();
    let data = generate_phantoms(3, 16, 16, 9).unwrap();
    let tc = quick_config(2);
    let mut straight = Trainer::<f32>::new(cfg.clone(), tc.clone(), &data).unwrap();
    let mut losses = vec![];
    while !straight.is_done() {
        losses.push(straight.step().unwrap().loss);
    }
    let mut first = Trainer::<f32>::new(cfg.clone(), tc.clone(), &data).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    let mut second = Trainer::resume(cfg, tc, &data, first.into_state()).unwrap();
    let mut tail = vec![];
    while !second.is_done() {
        tail.push(second.step().unwrap().loss);
    }
    assert_eq!(&losses[3..], &tail[..]);
    assert_eq!(straight.state(), second.state());
}

#[test]
fn gradient_stop_epochs_follow_config() {
    let cfg = tiny();
    let data = generate_phantoms(2, 16, 16, 10).unwrap();
    let tc = TrainConfig {
        hr_grad_stop_epochs: Some(1),
        ..quick_config(2)
    };
    let mut reports = vec![];
    train_with::<f32>(&cfg, &tc, &data, |r| reports.push(*r)).unwrap();
    let stopped: Vec<bool> = reports.iter().map(|r| r.hr_gradient_stopped).collect();
    assert_eq!(stopped, vec![true, false]);
    assert_eq!(TrainConfig { epochs: 30, ..TrainConfig::default() }.hr_grad_stop_epochs(), 3);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { hr_grad_stop_epochs: Some(6), ..TrainConfig::default() }.validate().is_err());
    assert!(train::<f32>(&tiny(), &TrainConfig::default(), &[]).is_err());
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let cfg = tiny();
    let mut data = generate_phantoms(1, 16, 16, 11).unwrap();
    data[0].spectrum.re_mut()[8 * 16 + 8] = f64::NAN;
    match train::<f32>(&cfg, &quick_config(1), &data) {
        Err(Error::NonFiniteLoss { step, value }) => {
            assert_eq!(step, 0);
            assert!(value.is_nan());
        }
        other => panic!("expected divergence error, got {other:?}"),
    }
}

#[test]
fn overfits_a_single_sample() {
    let cfg = tiny();
    let data = generate_phantoms(1, 16, 16, 12).unwrap();
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 1,
        lr: 3e-3,
        weight_decay: 0.0,
        hr_grad_stop_epochs: Some(0),
        mask: MaskSpec::uniform(2.0),
        ..TrainConfig::default()
    };
    let out = train::<f32>(&cfg, &tc, &data).unwrap();
    let (first, last) = (out.history[0], *out.history.last().unwrap());
    assert!(first / last >= 10.0, "loss went from {first} to {last}");
}
