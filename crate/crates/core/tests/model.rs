use cardio_autodiff::gradcheck::check_params;
use cardio_autodiff::{Graph, ParamStore};
use cardio_core::losses::{graph as lg, AsymmetricLossConfig};
use cardio_core::model::{Components, ModelConfig, ModelInput, RestorationModel};
use cardio_core::scoring::{score_global, score_local, BeatScore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(components: Components) -> ModelConfig {
    ModelConfig {
        global_len: 48,
        beat_len: 16,
        embed_dim: 4,
        heads: 2,
        encoder_widths: vec![3, 4],
        decoder_widths: vec![4, 3],
        kernel: 3,
        stride: 2,
        attr_hidden: 4,
        n_attributes: 3,
        cls_hidden: 4,
        cls_depth: 2,
        n_classes: 3,
        components,
        ..Default::default()
    }
}

fn signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.4).sin() + rng.random_range(-0.2..0.2)).collect()
}

/// Every parameter of every block, through the full objective plus the
/// classifier loss.
#[test]
fn all_blocks_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = tiny(Components::full());
        let mut store = ParamStore::new();
        let model = RestorationModel::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let x = signal(&mut rng, cfg.global_len);
        let masked: Vec<f64> = x.iter().enumerate().map(|(i, v)| if (10..20).contains(&i) { 0.0 } else { *v }).collect();
        let beat = signal(&mut rng, cfg.beat_len);
        let trend = signal(&mut rng, cfg.global_len);
        let attrs = [0.3, -0.5, 1.1];
        let y = [1.0, 0.0, 0.0];
        let loss_cfg = AsymmetricLossConfig { gamma_pos: 1.0, gamma_neg: 2.0, tau: 0.0 };
        let f = |g: &mut Graph, store: &ParamStore| {
            let out = model
                .forward(g, store, ModelInput { global: &masked, local: Some(&beat), trend: Some(&trend) })
                .unwrap();
            let rg = lg::restoration(g, &x, out.global_recon, out.global_sigma).unwrap();
            let rl = lg::restoration(g, &beat, out.local_recon.unwrap(), out.local_sigma).unwrap();
            let res = g.add(rg, rl).unwrap();
            let tr = lg::trend(g, &x, out.trend_recon.unwrap()).unwrap();
            let pr = lg::pred(g, &attrs, out.attr_pred.unwrap()).unwrap();
            let ad = lg::ad(g, res, tr, pr, 1.0, 1.0).unwrap();
            let p = model.classify(g, store, out.features).unwrap();
            let cls = lg::cls(g, &y, p, &loss_cfg).unwrap();
            Ok(g.add(ad, cls).unwrap())
        };
        let rep = check_params(&mut store, None, f, 1e-5).unwrap();
        assert!(rep.passes(1e-4), "seed {seed}: {:?}", rep.worst());
        assert!(rep.checks.len() > 30);
    }
}

#[test]
fn sigma_is_positive_and_shapes_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = tiny(Components::full());
    let mut store = ParamStore::new();
    let model = RestorationModel::new(cfg.clone(), &mut store, &mut rng).unwrap();
    let x: Vec<f64> = (0..cfg.global_len).map(|i| 50.0 * (i as f64).cos()).collect();
    let beat = vec![-30.0; cfg.beat_len];
    let out = model
        .infer(&store, ModelInput { global: &x, local: Some(&beat), trend: Some(&x) })
        .unwrap();
    assert_eq!(out.global_recon.len(), cfg.global_len);
    assert_eq!(out.local_recon.as_ref().unwrap().len(), cfg.beat_len);
    assert!(out.sigma_g.iter().chain(out.sigma_l.as_ref().unwrap()).all(|s| *s > 0.0));
    assert!(out.class_probs.iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(out.features.len(), cfg.feature_dim());
}

#[test]
fn ablated_models_skip_their_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut full = ParamStore::new();
    RestorationModel::new(tiny(Components::full()), &mut full, &mut rng).unwrap();
    let mut none = ParamStore::new();
    let m = RestorationModel::new(tiny(Components::none()), &mut none, &mut rng).unwrap();
    assert!(none.num_values() < full.num_values());
    assert!(none.iter().all(|(_, p)| !p.name.starts_with("trend.") && !p.name.starts_with("enc_l.")));
    let x = vec![0.1; 48];
    let out = m.infer(&none, ModelInput { global: &x, local: None, trend: None }).unwrap();
    assert!(out.sigma_g.iter().all(|s| *s == 1.0));
    assert!(out.trend_recon.is_none() && out.attr_pred.is_none());
}

#[test]
fn trend_branch_requires_trend_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let m = RestorationModel::new(tiny(Components::full()), &mut store, &mut rng).unwrap();
    let x = vec![0.0; 48];
    assert!(m.infer(&store, ModelInput { global: &x, local: None, trend: None }).is_err());
}

#[test]
fn a_few_steps_overfit_one_record() {
    use cardio_autodiff::{AdamW, AdamWConfig};
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = tiny(Components::none());
    let mut store = ParamStore::new();
    let m = RestorationModel::new(cfg, &mut store, &mut rng).unwrap();
    let x = signal(&mut rng, 48);
    let loss_at = |store: &ParamStore| {
        let mut g = Graph::new();
        let out = m.forward(&mut g, store, ModelInput { global: &x, local: None, trend: None }).unwrap();
        let l = lg::restoration(&mut g, &x, out.global_recon, None).unwrap();
        (g, l)
    };
    let (g0, l0) = loss_at(&store);
    let start = g0.item(l0).unwrap();
    let mut opt = AdamW::new(&store, AdamWConfig { lr: 1e-2, ..Default::default() });
    for _ in 0..200 {
        store.zero_grad();
        let (g, l) = loss_at(&store);
        g.backward(l, &mut store).unwrap();
        opt.step(&mut store);
    }
    let (g1, l1) = loss_at(&store);
    assert!(g1.item(l1).unwrap() < 0.2 * start);
}

#[test]
fn score_map_of_model_output_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = tiny(Components::full());
    let mut store = ParamStore::new();
    let m = RestorationModel::new(cfg.clone(), &mut store, &mut rng).unwrap();
    let x = signal(&mut rng, 48);
    let beats: Vec<Vec<f64>> = (0..3).map(|k| x[k * 16..k * 16 + 16].to_vec()).collect();
    let views: Vec<&[f64]> = beats.iter().map(Vec::as_slice).collect();
    let out = m.infer(&store, ModelInput { global: &x, local: Some(views[0]), trend: Some(&x) }).unwrap();
    let sg = score_global(&x, &out.global_recon, &out.sigma_g, out.trend_recon.as_deref()).unwrap();
    let recon = m.infer_beats(&store, &x, &views).unwrap();
    let bs: Vec<BeatScore> = recon
        .iter()
        .zip(&beats)
        .enumerate()
        .map(|(k, ((r, s), b))| BeatScore { x: b, x_hat: r, sigma: s, origin: (k * 16) as isize })
        .collect();
    let sl = score_local(48, &bs).unwrap();
    assert!(sg.iter().chain(&sl).all(|v| *v >= 0.0));
}
