use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vertex_bounds::attention::{
    target_hybrid_certify, value_coefficients, vertex_crown_bound, AttentionBounds, BoundMode, CertifyOptions,
};
use vertex_bounds::exec::Exec;
use vertex_bounds::harness::attack_min_margin;
use vertex_bounds::linalg::{dot, Mat};
use vertex_bounds::model::{
    argmax, load_model, random_image, save_model, AttentionModelSpec, HeadWeights, InputBox, RandomModelConfig,
    Suffix, SuffixKind,
};
use vertex_bounds::suffix::{interval_forward, linear_suffix_bound, relu_suffix_bound, suffix_bounds};

fn sample(ib: &InputBox, rng: &mut ChaCha8Rng) -> Vec<f64> {
    ib.lo
        .iter()
        .zip(&ib.hi)
        .map(|(&l, &h)| match rng.random_range(0..4) {
            0 => l,
            1 => h,
            _ if h > l => rng.random_range(l..=h),
            _ => l,
        })
        .collect()
}

fn cfg(kind: SuffixKind, heads: usize, width: usize) -> RandomModelConfig {
    RandomModelConfig {
        height: 2,
        width,
        patch: 2,
        model_dim: 4,
        heads,
        classes: 3,
        suffix: kind,
        hidden: 5,
        ..Default::default()
    }
}

#[test]
fn score_boxes_contain_sampled_scores() {
    let m = AttentionModelSpec::random(&cfg(SuffixKind::Linear, 2, 6), 11).unwrap();
    let x0 = random_image(m.input_dim(), 11);
    let ib = InputBox::linf_clipped(&x0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [BoundMode::Fast, BoundMode::Certified] {
        let att = AttentionBounds::compute(&m, &ib, mode).unwrap();
        for _ in 0..2000 {
            let tr = m.forward_trace(&sample(&ib, &mut rng)).unwrap();
            assert!(att.scores.contains(&tr.scores));
        }
    }
}

#[test]
fn value_coefficients_lower_bound_sampled_values() {
    let m = AttentionModelSpec::random(&cfg(SuffixKind::Linear, 1, 4), 12).unwrap();
    let x0 = random_image(m.input_dim(), 12);
    let ib = InputBox::linf_clipped(&x0, 0.1).unwrap();
    let g = linear_suffix_bound(&m.suffix, m.tokens(), 0, 1).unwrap();
    let vc = value_coefficients(std::slice::from_ref(&g), &m, &ib, BoundMode::Fast).unwrap();
    let hw = &m.heads[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut closest = f64::INFINITY;
    for _ in 0..10_000 {
        let tr = m.forward_trace(&sample(&ib, &mut rng)).unwrap();
        for i in 0..m.tokens() {
            let eta = hw.wo.tmatvec(&g.gamma[i]);
            for j in 0..m.tokens() {
                let v = dot(&eta, &tr.values[0][j]);
                assert!(v >= vc.c[0][0][i][j] - 1e-12);
                closest = closest.min(v - vc.c[0][0][i][j]);
            }
        }
    }
    // the minimizing corner is among the samples with positive probability
    assert!(closest < 1e-2, "{closest}");
}

#[test]
fn suffix_bounds_hold_on_samples() {
    for (kind, seed) in [(SuffixKind::Linear, 21), (SuffixKind::Mlp1, 22), (SuffixKind::Mlp1, 23)] {
        let m = AttentionModelSpec::random(&cfg(kind, 2, 6), seed).unwrap();
        let x0 = random_image(m.input_dim(), seed);
        let ib = InputBox::linf_clipped(&x0, 0.05).unwrap();
        let att = AttentionBounds::compute(&m, &ib, BoundMode::Fast).unwrap();
        let pre = interval_forward(&m, &ib).unwrap();
        let bounds = suffix_bounds(&m, &ib, &att, 0, &[1, 2], BoundMode::Fast, Exec::Sequential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let tr = m.forward_trace(&sample(&ib, &mut rng)).unwrap();
            for z in 0..pre.len() {
                assert!(pre.lo[z] - 1e-12 <= tr.preact[z] && tr.preact[z] <= pre.hi[z] + 1e-12);
            }
            for b in &bounds {
                let margin = tr.logits[0] - tr.logits[b.target];
                let lin = b.eval(&tr.hplus);
                match kind {
                    SuffixKind::Linear => assert!((lin - margin).abs() < 1e-12),
                    SuffixKind::Mlp1 => assert!(lin <= margin + 1e-12),
                }
            }
        }
    }
}

#[test]
fn relu_bound_with_stable_neurons_matches_composition() {
    let m = AttentionModelSpec::random(&cfg(SuffixKind::Mlp1, 1, 4), 31).unwrap();
    let x = random_image(m.input_dim(), 31);
    let tr = m.forward_trace(&x).unwrap();
    let pre = vertex_bounds::suffix::PreActBox {
        lo: tr.preact.iter().map(|&z| if z >= 0.0 { 0.0 } else { z - 1.0 }).collect(),
        hi: tr.preact.iter().map(|&z| if z >= 0.0 { z + 1.0 } else { z }).collect(),
    };
    let b = relu_suffix_bound(&m.suffix, m.tokens(), &pre, 1, 0).unwrap();
    let margin = tr.logits[1] - tr.logits[0];
    assert!((b.eval(&tr.hplus) - margin).abs() < 1e-9);
}

#[test]
fn end_to_end_bounds_are_sound() {
    let mut seed = 40;
    for kind in [SuffixKind::Linear, SuffixKind::Mlp1] {
        for heads in [1, 2] {
            seed += 1;
            let m = AttentionModelSpec::random(&cfg(kind, heads, 2 + 2 * (seed as usize % 3)), seed).unwrap();
            let x0 = random_image(m.input_dim(), seed);
            let y = m.predict(&x0).unwrap();
            for eps in [0.01, 0.05] {
                let ib = InputBox::linf_clipped(&x0, eps).unwrap();
                let rep = target_hybrid_certify(&m, &ib, y, CertifyOptions::default()).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..2000 {
                    let l = m.forward(&sample(&ib, &mut rng)).unwrap();
                    for b in &rep.bounds {
                        assert!(l[y] - l[b.target] >= b.l_hybrid - 1e-9);
                    }
                }
                for b in &rep.bounds {
                    let a = attack_min_margin(&m, &ib, y, b.target, 50, seed).unwrap();
                    assert!(a >= b.l_hybrid - 1e-9);
                }
            }
        }
    }
}

#[test]
fn bounds_degrade_monotonically_with_epsilon() {
    let m = AttentionModelSpec::random(&cfg(SuffixKind::Linear, 2, 8), 51).unwrap();
    let x0 = random_image(m.input_dim(), 51);
    let y = m.predict(&x0).unwrap();
    let mut prev: Option<Vec<f64>> = None;
    for eps in [0.0, 0.005, 0.01, 0.02, 0.05, 0.1] {
        let rep = target_hybrid_certify(&m, &InputBox::linf_clipped(&x0, eps).unwrap(), y, CertifyOptions::default())
            .unwrap();
        let cur: Vec<f64> = rep.bounds.iter().map(|b| b.l_vertex).collect();
        if let Some(p) = &prev {
            for (a, b) in cur.iter().zip(p) {
                assert!(a <= &(b + 1e-12));
            }
        }
        prev = Some(cur);
    }
}

/// Two tokens of a 2x4 grayscale image, each embedded as `(mean, -mean)` of its
/// patch; the linear classifier scores brightness (class 0) against darkness
/// (class 1), so the margin is `4 * (mean_0 + mean_1) + bias_gap = sum(x) + bias_gap`
/// plus a small attention term scaled by `wo_scale`.
fn prototype_model(wo_scale: f64, bias_gap: f64) -> AttentionModelSpec {
    let quarter = 0.25;
    let embed_w = Mat::from_rows(&[vec![quarter; 4], vec![-quarter; 4]]);
    let head = HeadWeights {
        wq: Mat::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.3]]),
        bq: vec![0.0, 0.1],
        wk: Mat::from_rows(&[vec![-0.4, 0.2], vec![0.3, 0.3]]),
        bk: vec![0.05, 0.0],
        wv: Mat::identity(2),
        bv: vec![0.0; 2],
        wo: Mat::from_rows(&[vec![wo_scale, 0.0], vec![0.0, wo_scale]]),
        mask: Mat::zeros(2, 2),
    };
    let proto = vec![1.0, -1.0, 1.0, -1.0];
    let anti: Vec<f64> = proto.iter().map(|v| -v).collect();
    let m = AttentionModelSpec {
        height: 2,
        width: 4,
        channels: 1,
        patch: 2,
        model_dim: 2,
        classes: 2,
        residual: true,
        embed_w,
        embed_b: Mat::zeros(2, 2),
        heads: vec![head],
        out_b: vec![0.0; 2],
        suffix: Suffix::Linear {
            w: Mat::from_rows(&[proto, anti]),
            b: vec![bias_gap, 0.0],
        },
    };
    m.validate().unwrap();
    m
}

#[test]
fn prototype_model_certifies_bright_image() {
    let m = prototype_model(0.1, 0.0);
    let x0 = vec![0.8; 8];
    let ib = InputBox::linf_clipped(&x0, 0.05).unwrap();
    let rep = target_hybrid_certify(&m, &ib, 0, CertifyOptions::default()).unwrap();
    assert!(rep.certified, "{rep:?}");
    assert!(rep.bounds[0].l_hybrid > 0.0);
    let attack = attack_min_margin(&m, &ib, 0, 1, 200, 0).unwrap();
    assert!(attack >= rep.bounds[0].l_hybrid);

    let certified = target_hybrid_certify(
        &m,
        &ib,
        0,
        CertifyOptions {
            mode: BoundMode::Certified,
            exec: Exec::Sequential,
        },
    )
    .unwrap();
    assert!(certified.certified);
}

#[test]
fn misclassified_input_is_never_certified() {
    let m = prototype_model(0.1, -3.6);
    let x0 = vec![0.2; 8];
    assert_eq!(argmax(&m.forward(&x0).unwrap()), 1);
    for eps in [0.0, 0.01, 0.1] {
        let rep = target_hybrid_certify(&m, &InputBox::linf_clipped(&x0, eps).unwrap(), 0, CertifyOptions::default())
            .unwrap();
        assert!(!rep.certified);
    }
}

#[test]
fn attack_finds_known_adversarial_corner() {
    // without attention output the margin is sum(x) - 3.6:
    // 0.4 at x = 0.5 and -0.4 at the dark corner x = 0.4
    let m = prototype_model(0.0, -3.6);
    let x0 = vec![0.5; 8];
    assert!((m.margin(&x0, 0, 1).unwrap() - 0.4).abs() < 1e-12);
    let ib = InputBox::linf_clipped(&x0, 0.1).unwrap();
    let attack = attack_min_margin(&m, &ib, 0, 1, 100, 3).unwrap();
    assert!(attack <= 0.0 && (attack + 0.4).abs() < 1e-12);
    let rep = target_hybrid_certify(&m, &ib, 0, CertifyOptions::default()).unwrap();
    assert!(!rep.certified);
    assert!((rep.bounds[0].l_hybrid + 0.4).abs() < 1e-12);
}

#[test]
fn saved_model_reloads_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    for kind in [SuffixKind::Linear, SuffixKind::Mlp1] {
        let m = AttentionModelSpec::random(&cfg(kind, 2, 6), 61).unwrap();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let x = random_image(m.input_dim(), 61);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    }
    assert!(load_model(dir.path().join("missing.json")).is_err());
}

#[test]
fn vertex_crown_bound_matches_report() {
    let m = AttentionModelSpec::random(&cfg(SuffixKind::Linear, 2, 6), 71).unwrap();
    let x0 = random_image(m.input_dim(), 71);
    let ib = InputBox::linf_clipped(&x0, 0.03).unwrap();
    let att = AttentionBounds::compute(&m, &ib, BoundMode::Fast).unwrap();
    let g = suffix_bounds(&m, &ib, &att, 0, &[1, 2], BoundMode::Fast, Exec::Sequential).unwrap();
    let vc = value_coefficients(&g, &m, &ib, BoundMode::Fast).unwrap();
    let rep = target_hybrid_certify(&m, &ib, 0, CertifyOptions::default()).unwrap();
    for (t, b) in rep.bounds.iter().enumerate() {
        assert_eq!(vertex_crown_bound(&vc, &att.scores, t).unwrap(), b.l_vertex);
    }
}
