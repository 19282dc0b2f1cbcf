use super::*;
use crate::math::{self, grad_check};
use crate::memory::MemoryConfig;
use crate::rng::{self, Rng};
use proptest::prelude::{prop_assert, proptest};
use rand::Rng as _;
use rand_distr::StandardNormal;

const LN2: f64 = std::f64::consts::LN_2;

fn normal(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn random_probs(rng: &mut Rng, k: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..k)
        .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    math::softmax(&logits).unwrap()
}

fn random_open(rng: &mut Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[test]
fn cls_examples() {
    assert_eq!(loss_cls(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
    assert!((loss_cls(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!(loss_cls(&[0.5, 0.5], 2).is_err());
}

#[test]
fn ova_examples() {
    assert_eq!(loss_ova(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
    assert!((loss_ova(&[0.5, 0.5, 0.5], 0).unwrap() - 2.0 * LN2).abs() < 1e-12);
    assert!(loss_ova(&[0.7], 0).is_err());
    assert!(loss_ova(&[0.7, 0.2], 2).is_err());
}

#[test]
fn hardest_negative_matches_brute_force() {
    let mut rng = rng::seeded(5);
    for _ in 0..100 {
        let k = rng.random_range(2..8);
        let p = random_open(&mut rng, k);
        let y = rng.random_range(0..k);
        let mut best = None;
        for c in 0..k {
            if c == y {
                continue;
            }
            if best.is_none_or(|b: usize| p[c] > p[b]) {
                best = Some(c);
            }
        }
        assert_eq!(hardest_negative(&p, y), best);
        let brute = -p[y].ln()
            - (0..k)
                .filter(|&c| c != y)
                .map(|c| (1.0 - p[c]).ln())
                .fold(f64::INFINITY, f64::min);
        assert!((loss_ova(&p, y).unwrap() - brute).abs() < 1e-12);
    }
}

#[test]
fn oem_uniform_examples() {
    assert!((loss_oem_uniform(&[0.5; 5]).unwrap() - LN2).abs() < 1e-15);
    assert_eq!(loss_oem_uniform(&[0.0, 1.0, 1.0]).unwrap(), 0.0);
    let a = loss_oem_uniform(&[0.1, 0.7, 0.3]).unwrap();
    let b = loss_oem_uniform(&[0.3, 0.1, 0.7]).unwrap();
    assert!((a - b).abs() < 1e-15);
    assert!(loss_oem_uniform(&[1.5]).is_err());
}

#[test]
fn oem_weighted_identities() {
    let mut rng = rng::seeded(8);
    for k in 2..7 {
        let p_o = random_open(&mut rng, k);
        let uniform = vec![1.0 / k as f64; k];
        let w = loss_oem_weighted(&p_o, &uniform).unwrap();
        assert!((w - loss_oem_uniform(&p_o).unwrap() / k as f64).abs() < 1e-12);

        let star = rng.random_range(0..k);
        let mut onehot = vec![0.0; k];
        onehot[star] = 1.0;
        let w = loss_oem_weighted(&p_o, &onehot).unwrap();
        assert!((w - binary_entropy(p_o[star]).unwrap() / k as f64).abs() < 1e-15);

        let half = vec![0.5; k];
        let p_c = random_probs(&mut rng, k);
        let w = loss_oem_weighted(&half, &p_c).unwrap();
        assert!((w - LN2 / k as f64).abs() < 1e-12);
    }
    assert!(loss_oem_weighted(&[0.5, 0.5], &[0.5, 0.6]).is_err());
    assert!(loss_oem_weighted(&[0.5, 0.5], &[1.0]).is_err());
}

#[test]
fn nil_examples() {
    assert_eq!(loss_nil(&[0.3, 0.7], &[0.0, 0.0]).unwrap(), 0.0);
    assert!((loss_nil(&[0.5], &[1.0]).unwrap() - LN2).abs() < 1e-15);
    assert!(loss_nil(&[], &[]).is_err());
    // lowering a weighted neighbor's probability raises the loss
    let w = [0.5, 1.0, 0.25];
    let base = loss_nil(&[0.2, 0.5, 0.3], &w).unwrap();
    let lowered = loss_nil(&[0.25, 0.4, 0.35], &w).unwrap();
    assert!(lowered > base);
}

#[test]
fn mixup_and_cmm_examples() {
    assert_eq!(
        mixup_feature(&[1.0, 2.0], &[3.0, 4.0], 1.0).unwrap(),
        vec![1.0, 2.0]
    );
    assert_eq!(
        mixup_feature(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(),
        vec![3.0, 4.0]
    );
    assert_eq!(
        mixup_feature(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(),
        vec![1.0, 1.0]
    );
    assert!(mixup_feature(&[1.0], &[1.0, 2.0], 0.5).is_err());
    assert_eq!(loss_cmm(&[0.0, 0.9], 0).unwrap(), 0.0);
    assert!((loss_cmm(&[0.5, 0.9], 0).unwrap() - LN2).abs() < 1e-15);
}

#[test]
fn cc_examples() {
    assert_eq!(loss_cc(&[0.2, 0.8], &[0.0, 0.0]).unwrap(), 0.0);
    assert_eq!(
        loss_cc(&[0.0, 1.0, 0.0], &[0.3, 1.0, 0.2]).unwrap(),
        -1.0 / 3.0
    );
    // agreement between p_c and p_o is rewarded
    let p_c = [0.7, 0.2, 0.1];
    let aligned = loss_cc(&p_c, &[0.9, 0.5, 0.1]).unwrap();
    let anti = loss_cc(&p_c, &[0.1, 0.5, 0.9]).unwrap();
    assert!(aligned < anti);
}

#[test]
fn loss_weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    for bad in [
        LossWeights {
            eta: -1.0,
            ..LossWeights::default()
        },
        LossWeights {
            alpha: 0.0,
            ..LossWeights::default()
        },
        LossWeights {
            beta1: f64::NAN,
            ..LossWeights::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert_eq!("uniform".parse::<OemMode>().unwrap(), OemMode::Uniform);
    assert!("both".parse::<OemMode>().is_err());
}

#[test]
fn beta_two_two_moments() {
    let mut rng = rng::seeded(123);
    let draws = sample_mix_lambdas(&mut rng, 2.0, 100_000).unwrap();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
    assert!((var - 0.05).abs() < 0.005, "{var}");
    assert!(draws.iter().all(|d| (0.0..=1.0).contains(d)));
}

/// Tape terms evaluated on one-row batches must equal the plain functions.
#[test]
fn tape_terms_match_plain_functions() {
    let mut rng = rng::seeded(77);
    for _ in 0..20 {
        let k = rng.random_range(2..6);
        let n = rng.random_range(1..5);
        let pc_rows: Vec<Vec<f64>> = (0..n).map(|_| random_probs(&mut rng, k)).collect();
        let po_rows: Vec<Vec<f64>> = (0..n).map(|_| random_open(&mut rng, k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / n as f64;

        let mut t = Tape::new();
        let pc = t.constant(Tensor2::from_rows(&pc_rows).unwrap());
        let po = t.constant(Tensor2::from_rows(&po_rows).unwrap());

        let v = cls_term(&mut t, pc, &labels).unwrap();
        let want = mean(&|i| loss_cls(&pc_rows[i], labels[i]).unwrap());
        assert!((t.scalar(v) - want).abs() < 1e-12);

        let v = ova_term(&mut t, po, &labels).unwrap();
        let want = mean(&|i| loss_ova(&po_rows[i], labels[i]).unwrap());
        assert!((t.scalar(v) - want).abs() < 1e-12);

        let v = oem_term(&mut t, po, None).unwrap();
        let want = mean(&|i| loss_oem_uniform(&po_rows[i]).unwrap());
        assert!((t.scalar(v) - want).abs() < 1e-12);

        let v = oem_term(&mut t, po, Some(pc)).unwrap();
        let want = mean(&|i| loss_oem_weighted(&po_rows[i], &pc_rows[i]).unwrap());
        assert!((t.scalar(v) - want).abs() < 1e-12);

        let v = cc_term(&mut t, pc, po).unwrap();
        let want = mean(&|i| loss_cc(&pc_rows[i], &po_rows[i]).unwrap());
        assert!((t.scalar(v) - want).abs() < 1e-12);
    }
}

#[test]
fn weighted_oem_gradient_is_sparse_for_one_hot_weights() {
    let k = 4;
    let star = 2;
    let mut onehot = Tensor2::zeros(1, k);
    onehot.set(0, star, 1.0);
    let mut t = Tape::new();
    let po = t.param(Tensor2::from_vec(1, k, vec![0.3, 0.6, 0.2, 0.9]).unwrap());
    let pc = t.constant(onehot);
    let loss = oem_term(&mut t, po, Some(pc)).unwrap();
    let g = t.backward(loss).unwrap();
    for c in 0..k {
        if c == star {
            assert!(g.get(po).get(0, c).abs() > 0.0);
        } else {
            assert_eq!(g.get(po).get(0, c), 0.0);
        }
    }
}

#[test]
fn nil_term_matches_plain_loss() {
    let mut rng = rng::seeded(3);
    let n_bank = 12;
    let d = 4;
    let mut bank = MemoryBank::new(
        n_bank,
        d,
        MemoryConfig {
            k_nn: 3,
            ..MemoryConfig::default()
        },
    )
    .unwrap();
    let feats = normal(&mut rng, n_bank, d, 1.0);
    bank.update_rows(&(0..n_bank).collect::<Vec<_>>(), &feats)
        .unwrap();

    let rows = vec![2, 5, 7];
    let z = feats.select_rows(&rows);
    let mut t = Tape::new();
    let zv = t.constant(z);
    let v = nil_term(&mut t, zv, &rows, &bank, ExecMode::Sequential)
        .unwrap()
        .unwrap();

    let mut want = 0.0;
    for &j in &rows {
        let (hood, probs) = bank.similarity_probs(j).unwrap();
        let w: Vec<f64> = hood
            .iter()
            .map(|&k| jaccard_weight(&hood, &bank.neighbors(k).unwrap()))
            .collect();
        want += loss_nil(&probs, &w).unwrap();
    }
    want /= rows.len() as f64;
    assert!(
        (t.scalar(v) - want).abs() < 1e-9,
        "{} vs {want}",
        t.scalar(v)
    );
}

#[test]
fn nil_term_skips_rows_without_neighbors() {
    let bank = MemoryBank::new(4, 2, MemoryConfig::default()).unwrap();
    let mut t = Tape::new();
    let z = t.constant(Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    assert!(nil_term(&mut t, z, &[0, 1], &bank, ExecMode::Sequential)
        .unwrap()
        .is_none());
}

#[test]
fn grad_check_weighted_oem_random_batch() {
    let mut rng = rng::seeded(41);
    let closed = normal(&mut rng, 3, 4, 1.0);
    let open = normal(&mut rng, 3, 8, 1.0);
    let r = grad_check(
        |t, v| {
            let pc = t.softmax_rows(v[0])?;
            let po = t.pair_softmax(v[1])?;
            oem_term(t, po, Some(pc))
        },
        &[closed, open],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}

fn tiny_model(seed: u64) -> ModelParams {
    crate::model::init_params(
        &crate::model::ModelConfig {
            d_in: 4,
            hidden: vec![5],
            d_feat: 4,
            num_classes: 3,
        },
        seed,
    )
    .unwrap()
}

fn tiny_batch(rng: &mut Rng) -> StepBatch {
    StepBatch {
        source_x: normal(rng, 4, 4, 1.0),
        source_y: vec![0, 1, 2, 1],
        target_x: normal(rng, 4, 4, 1.0),
        target_idx: vec![0, 1, 2, 3],
        mix_lambdas: sample_mix_lambdas(rng, 2.0, 4).unwrap(),
    }
}

#[test]
fn zero_weights_leave_source_objective() {
    let mut rng = rng::seeded(1);
    let params = tiny_model(1);
    let batch = tiny_batch(&mut rng);
    let cfg = LossConfig {
        weights: LossWeights::source_only(),
        ..LossConfig::default()
    };
    let (r, _) = loss_and_grads(&params, &batch, None, false, &cfg).unwrap();
    assert_eq!(r.total, r.cls + r.ova);
    assert_eq!(r.nil, 0.0);
}

#[test]
fn report_total_matches_parts() {
    let mut rng = rng::seeded(2);
    let params = tiny_model(2);
    let batch = tiny_batch(&mut rng);
    let mut bank = MemoryBank::new(
        6,
        4,
        MemoryConfig {
            k_nn: 2,
            ..MemoryConfig::default()
        },
    )
    .unwrap();
    let cfg = LossConfig::default();
    let (r, grads) = loss_and_grads(&params, &batch, Some(&mut bank), true, &cfg).unwrap();
    assert!((r.total - r.combine()).abs() < 1e-9);
    assert!(r.nil > 0.0);
    assert_eq!(grads.len(), params.num_tensors());
    assert_eq!(bank.num_valid(), 4);
}

#[test]
fn detach_changes_gradient_but_not_value() {
    let mut rng = rng::seeded(4);
    let params = tiny_model(4);
    let batch = tiny_batch(&mut rng);
    let base = LossConfig::default();
    let detached = LossConfig {
        detach_weights: true,
        ..base
    };
    let (a, ga) = loss_and_grads(&params, &batch, None, false, &base).unwrap();
    let (b, gb) = loss_and_grads(&params, &batch, None, false, &detached).unwrap();
    assert_eq!(a, b);
    // the closed head only feels the entropy term through p_c
    let closed_w = params.extractor.len() * 2;
    assert!(ga[closed_w].max_abs_diff(&gb[closed_w]) > 0.0);
}

proptest! {
    #[test]
    fn weighted_oem_bounded_by_max_entropy(seed in 0u64..10_000, k in 2usize..8) {
        let mut rng = rng::seeded(seed);
        let p_o = random_open(&mut rng, k);
        let p_c = random_probs(&mut rng, k);
        let w = loss_oem_weighted(&p_o, &p_c).unwrap();
        let max_h = p_o.iter().map(|&p| binary_entropy(p).unwrap()).fold(0.0, f64::max);
        prop_assert!(w <= max_h / k as f64 + 1e-15);
        prop_assert!(w >= 0.0);
    }

    #[test]
    fn weighted_oem_focuses_monotonically(seed in 0u64..10_000, k in 2usize..6) {
        let mut rng = rng::seeded(seed);
        let p_o = random_open(&mut rng, k);
        let rest = random_probs(&mut rng, k);
        let star = rng.random_range(0..k);
        let target = binary_entropy(p_o[star]).unwrap() / k as f64;
        let mut prev_gap = f64::INFINITY;
        for step in 0..=20 {
            let m = step as f64 / 20.0;
            // mass m on k*, remaining (1 - m) spread like `rest` over the others
            let others: f64 = (0..k).filter(|&c| c != star).map(|c| rest[c]).sum();
            let p_c: Vec<f64> = (0..k)
                .map(|c| if c == star { m } else { (1.0 - m) * rest[c] / others })
                .collect();
            let gap = (loss_oem_weighted(&p_o, &p_c).unwrap() - target).abs();
            prop_assert!(gap <= prev_gap + 1e-12);
            prev_gap = gap;
        }
        prop_assert!(prev_gap < 1e-12);
    }
}

#[test]
fn zero_features_are_skipped_by_bank_and_neighborhood_term() {
    let mut rng = rng::seeded(8);
    let mut params = tiny_model(2);
    // zero the last layer so every feature is exactly zero
    let last = params.extractor.len() - 1;
    let (out, inp) = params.extractor[last].weight.shape();
    params.extractor[last].weight = Tensor2::zeros(out, inp);
    params.extractor[last].bias = Tensor2::zeros(1, out);
    let batch = tiny_batch(&mut rng);
    let mut bank = MemoryBank::new(4, 4, MemoryConfig::default()).unwrap();
    let (report, _) = loss_and_grads(
        &params,
        &batch,
        Some(&mut bank),
        true,
        &LossConfig::default(),
    )
    .unwrap();
    assert_eq!(bank.num_valid(), 0);
    assert_eq!(report.nil, 0.0);
    assert!(report.is_finite());
}
