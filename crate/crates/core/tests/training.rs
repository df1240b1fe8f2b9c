use binas_core::bitops::{AmplitudeGranularity, BinarizeConfig};
use binas_core::nn::{Mode, NetworkConfig};
use binas_core::persist::{decode_model, encode_model};
use binas_core::train::{evaluate, train_final, FinalNet, TrainConfig};
use binas_core::{CellType, Dataset, Error, Genotype, OperationKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four classes, each a bright quadrant on a noisy 8×8 image.
fn quadrants(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 4;
        for r in 0..8 {
            for c in 0..8 {
                let q = (r / 4) * 2 + c / 4;
                let base = if q == y { 200.0 } else { 40.0 };
                images.push((base + rng.random_range(-40.0..40.0f64)).clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(y as u8);
    }
    Dataset::new(images, [n, 1, 8, 8], labels, 4).unwrap()
}

fn small_config(cells: usize, nodes: usize) -> NetworkConfig {
    NetworkConfig {
        in_channels: 1,
        num_classes: 4,
        init_channels: 4,
        cells,
        reduction_positions: NetworkConfig::thirds(cells),
        nodes,
        stem_multiplier: 3,
        stem_stride: 1,
    }
}

/// Parameter count summed from the operation shapes of a genotype.
fn analytic_params(g: &Genotype, cfg: &NetworkConfig, amps_per_conv: Option<usize>) -> usize {
    let amp = |c_out: usize| match amps_per_conv {
        None => 0,
        Some(1) => 1,
        Some(_) => c_out,
    };
    let c_stem = cfg.stem_multiplier * cfg.init_channels;
    let mut total = cfg.in_channels * c_stem * 9 + 2 * c_stem;
    let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, cfg.init_channels);
    for i in 0..cfg.cells {
        let reduction = cfg.reduction_positions.contains(&i);
        if reduction {
            c *= 2;
        }
        let cell = g.cell(if reduction { CellType::Reduction } else { CellType::Normal });
        total += c_pp * c + amp(c) + 2 * c;
        total += c_p * c + amp(c) + 2 * c;
        for e in &cell.edges {
            let stride2 = reduction && e.source <= 0;
            total += match e.op {
                OperationKind::Zero => 0,
                OperationKind::Identity if !stride2 => 0,
                OperationKind::Identity => c * c + amp(c) + 2 * c,
                OperationKind::MaxPool3 | OperationKind::AvgPool3 => 2 * c,
                OperationKind::SepConv3 | OperationKind::DilConv3 => c * 9 + amp(c) + c * c + amp(c) + 2 * c,
                OperationKind::SepConv5 | OperationKind::DilConv5 => c * 25 + amp(c) + c * c + amp(c) + 2 * c,
            };
        }
        c_pp = c_p;
        c_p = c * cell.concat.len();
    }
    total + c_p * cfg.num_classes + cfg.num_classes
}

#[test]
fn parameter_count_matches_genotype_oracle() {
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = 1 + seed as usize % 4;
        let g = Genotype::random(nodes, &mut rng);
        let cfg = small_config(3 + seed as usize % 4, nodes);
        let fp = FinalNet::build(&g, cfg.clone(), None, &mut rng).unwrap();
        assert_eq!(fp.param_count(), analytic_params(&g, &cfg, None), "seed {seed}");
        let pcnn = FinalNet::build(&g, cfg.clone(), Some(BinarizeConfig::pcnn_amp()), &mut rng).unwrap();
        assert_eq!(pcnn.param_count(), analytic_params(&g, &cfg, Some(1)), "seed {seed}");
        let per_filter = BinarizeConfig { granularity: AmplitudeGranularity::PerFilter, ..BinarizeConfig::pcnn_amp() };
        let pf = FinalNet::build(&g, cfg.clone(), Some(per_filter), &mut rng).unwrap();
        assert_eq!(pf.param_count(), analytic_params(&g, &cfg, Some(2)), "seed {seed}");
        let xnor = FinalNet::build(&g, cfg.clone(), Some(BinarizeConfig::xnor()), &mut rng).unwrap();
        assert_eq!(xnor.param_count(), fp.param_count());
    }
}

fn trained(binarize: Option<BinarizeConfig>) -> (FinalNet, Dataset) {
    trained_for(binarize, 2)
}

fn trained_for(binarize: Option<BinarizeConfig>, epochs: usize) -> (FinalNet, Dataset) {
    let g = Genotype::random(2, &mut ChaCha8Rng::seed_from_u64(11));
    let cfg = TrainConfig { cells: 3, init_channels: 4, epochs, batch_size: 16, ..Default::default() };
    let data = quadrants(64, 1);
    let out = train_final(&g, &cfg, binarize, &data, &data, 5, &mut |_| {}).unwrap();
    (out.model, data)
}

#[test]
fn evaluation_ignores_batch_size() {
    for b in [None, Some(BinarizeConfig::xnor()), Some(BinarizeConfig::pcnn_amp())] {
        let (mut model, data) = trained(b);
        let reference = evaluate(&mut model, &data, 64, false).unwrap();
        for batch in [1, 7, 13, 100] {
            let r = evaluate(&mut model, &data, batch, false).unwrap();
            assert_eq!(r.accuracy, reference.accuracy);
            assert!((r.loss - reference.loss).abs() < 1e-5);
        }
    }
}

#[test]
fn packed_inference_matches_float_binarized_path() {
    for b in [BinarizeConfig::xnor(), BinarizeConfig::pcnn_amp()] {
        let (mut model, data) = trained_for(Some(b), 12);
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x, _) = data.batch::<f32>(&idx);
        let float = model.run(Mode::EVAL, &x, None).unwrap().logits;
        let packed = model.run(Mode::EVAL_PACKED, &x, None).unwrap().logits;
        let (fa, pa) = (argmax_rows(float.data(), 4), argmax_rows(packed.data(), 4));
        let same = fa.iter().zip(&pa).filter(|(a, b)| a == b).count();
        // Each layer agrees to f32 rounding; a rounding-level difference that
        // crosses zero flips a sign downstream, so only predictions are compared.
        assert!(same * 2 >= fa.len(), "{b:?}: {same}/{} predictions agree", fa.len());
        let f = evaluate(&mut model, &data, 64, false).unwrap();
        let p = evaluate(&mut model, &data, 64, true).unwrap();
        assert!((f.accuracy - p.accuracy).abs() <= 0.15, "{b:?}: {f:?} vs {p:?}");
    }
}

fn argmax_rows(v: &[f32], k: usize) -> Vec<usize> {
    v.chunks(k).map(|r| (0..k).fold(0, |m, i| if r[i] > r[m] { i } else { m })).collect()
}

#[test]
fn model_file_round_trips() {
    for b in [None, Some(BinarizeConfig::xnor()), Some(BinarizeConfig::pcnn_amp())] {
        let (mut model, data) = trained(b);
        let (header, bytes) = encode_model(&model).unwrap();
        let (header2, mut loaded) = decode_model(&bytes).unwrap();
        assert_eq!(header, header2);
        assert_eq!(loaded.genotype, model.genotype);
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x, _) = data.batch::<f32>(&idx);
        let before = model.run(Mode::EVAL, &x, None).unwrap().logits;
        let after = loaded.run(Mode::EVAL, &x, None).unwrap().logits;
        for (a, c) in before.data().iter().zip(after.data()) {
            assert!((a - c).abs() <= 1e-4 * (1.0 + a.abs()), "{b:?}: {a} vs {c}");
        }
        let truncated = decode_model(&bytes[..bytes.len() - 3]);
        assert!(matches!(truncated, Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Parse { .. })));
    }
}

#[test]
fn binarized_conv_weights_are_at_least_8x_smaller() {
    let g = Genotype::random(2, &mut ChaCha8Rng::seed_from_u64(2));
    let cfg = small_config(4, 2);
    let fp = FinalNet::build(&g, cfg.clone(), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let bin = FinalNet::build(&g, cfg, Some(BinarizeConfig::pcnn_amp()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let fp_bytes = encode_model(&fp).unwrap().0.conv_weight_bytes();
    let bin_bytes = encode_model(&bin).unwrap().0.conv_weight_bytes();
    assert!(fp_bytes >= 8 * bin_bytes, "{fp_bytes} vs {bin_bytes}");
}

#[test]
fn early_training_loss_descends_on_average() {
    let g = Genotype::random(2, &mut ChaCha8Rng::seed_from_u64(4));
    let data = quadrants(128, 2);
    let cfg = TrainConfig { cells: 3, init_channels: 4, epochs: 5, batch_size: 16, ..Default::default() };
    let mut curves = Vec::new();
    for seed in 0..3 {
        let out = train_final(&g, &cfg, Some(BinarizeConfig::pcnn_amp()), &data, &data, seed, &mut |_| {}).unwrap();
        curves.push(out.metrics.iter().map(|m| m.train_loss).collect::<Vec<_>>());
    }
    let mean: Vec<f64> = (0..5).map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / 3.0).collect();
    assert!(mean.windows(2).all(|w| w[1] <= w[0]), "{mean:?}");
}
