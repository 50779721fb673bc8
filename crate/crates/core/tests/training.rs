use scmn::data::render_sample;
use scmn::params::{ModelParams, ACROSS_PREFIX};
use scmn::pipeline::{infer, PipelineOptions};
use scmn::train::{
    sample_gradients, train, train_step, Optimizer, OptimizerKind, Sample, TrainConfig,
};
use scmn::vit::EncoderConfig;

fn small() -> EncoderConfig {
    EncoderConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        ..EncoderConfig::default()
    }
}

fn samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            image: render_sample(100 + i as u64, i % 8, 32).unwrap().0,
            label: i % 8,
        })
        .collect()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn single_example_descends() {
    let cfg = small();
    let tc = TrainConfig {
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let opts = tc.pipeline().unwrap();
    let s = &samples(1)[0];
    let shuffled = tc.shuffled_view(&s.image, cfg.patch_size, 0, 0).unwrap();
    let mut params = ModelParams::init(&cfg, 2).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, tc.lr);
    let batch = vec![(s.image.clone(), shuffled, s.label)];
    let losses: Vec<f64> = (0..6)
        .map(|_| {
            train_step(&mut params, &mut opt, &opts, &batch)
                .unwrap()
                .l_total
        })
        .collect();
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 4, "{losses:?}");
}

#[test]
fn breakdown_is_consistent() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 1).unwrap();
    let tc = quick(1);
    let opts = tc.pipeline().unwrap();
    let s = &samples(2)[1];
    let sh = tc.shuffled_view(&s.image, cfg.patch_size, 0, 1).unwrap();
    let (b, _) = sample_gradients(&params, &opts, &s.image, sh.as_ref(), s.label).unwrap();
    assert!((b.l_total - (b.l_cls + opts.lambda * b.l_er)).abs() < 1e-12);
    assert!(b.ce_t_p.is_some() && b.l_er > 0.0);
}

#[test]
fn without_matching_it_is_plain_classification() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 1).unwrap();
    let opts = PipelineOptions {
        use_matching: false,
        use_across: true,
        lambda: 0.0,
        ..PipelineOptions::default()
    };
    let s = &samples(1)[0];
    let (b, grads) = sample_gradients(&params, &opts, &s.image, Some(&s.image), s.label).unwrap();
    assert_eq!(b.l_er, 0.0);
    assert_eq!(b.ce_t_p, None);
    assert_eq!(b.l_total, b.l_cls);
    let mut across = 0;
    for ((name, _), g) in params.iter().zip(&grads) {
        if name.starts_with(ACROSS_PREFIX) {
            across += 1;
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(across > 0);
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = small();
    let data = samples(8);
    let run = || {
        let mut params = ModelParams::init(&cfg, 4).unwrap();
        let mut log = Vec::new();
        train(&mut params, &data, &quick(4), |s| log.push(s.breakdown)).unwrap();
        (params, log)
    };
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(la, lb);
    for ((_, a), (_, b)) in pa.iter().zip(pb.iter()) {
        assert_eq!(a, b);
    }
    let mut other = ModelParams::init(&cfg, 4).unwrap();
    let mut lc = Vec::new();
    train(&mut other, &data, &quick(5), |s| lc.push(s.breakdown)).unwrap();
    assert_ne!(la, lc);
}

#[test]
fn across_flag_leaves_logits_alone() {
    let cfg = small();
    let params = ModelParams::init(&cfg, 6).unwrap();
    let s = &samples(3)[2];
    let off = infer(&params, &s.image, false).unwrap();
    let on = infer(&params, &s.image, true).unwrap();
    assert_eq!(off.logits, on.logits);
    assert_ne!(off.m_hat, on.m_hat);
    assert_eq!(infer(&params, &s.image, false).unwrap().m_hat, off.m_hat);
}

#[test]
fn adamw_runs_and_sgd_config_is_validated() {
    let cfg = small();
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    let tc = TrainConfig {
        optimizer: OptimizerKind::adamw(),
        lr: 1e-3,
        ..quick(3)
    };
    let summary = train(&mut params, &samples(8), &tc, |_| {}).unwrap();
    assert!(summary.final_loss.is_finite());
    let bad = TrainConfig {
        use_global_shuffle: true,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}
