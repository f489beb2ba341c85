//! End-to-end behavior of the two-branch trainer: no-op training, frozen
//! optimizer, bit determinism, interrupted-resume equality, loss
//! composition against independently computed components, and gradient
//! reachability.

use pda_core::config::RunConfig;
use pda_core::datagen::{generate_synthetic, SyntheticShiftSpec};
use pda_core::encoder::EncoderConfig;
use pda_core::manifest::{Dataset, FeatureKind};
use pda_core::model::{branch_probs, predict, Model};
use pda_core::training::{LossReport, Trainer};

fn toy_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_proj: 4,
        n_patches: 3,
        coupled_layers: 1,
        context_len: 2,
        seed,
    };
    cfg.train.seed = seed;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 24;
    cfg.train.lr0 = 0.05;
    cfg.train.shots = 3;
    cfg.normalized().unwrap()
}

fn toy_dataset(seed: u64) -> Dataset {
    let spec = SyntheticShiftSpec {
        n_classes: 3,
        n_source: 8,
        n_target: 8,
        d_in: 8,
        n_patches: 3,
        class_sep: 4.0,
        domain_shift: 2.0,
        noise_std: 0.5,
        seed,
    };
    let data = generate_synthetic(&spec).unwrap();
    Dataset {
        class_names: (0..3).map(|k| format!("c{k}")).collect(),
        kind: FeatureKind::RawPatches,
        source: data.source,
        source_labels: data.source_labels,
        target: data.target,
    }
}

#[test]
fn zero_epochs_is_a_noop_and_predicts_like_zero_shot() {
    let dataset = toy_dataset(1);
    let mut cfg = toy_cfg(1);
    cfg.train.epochs = 0;

    let fresh = Model::for_dataset(&cfg, &dataset).unwrap();
    let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
    let records = trainer.run(|_| {}).unwrap();
    assert!(records.is_empty());
    assert_eq!(trainer.step_count(), 0);
    assert_eq!(trainer.model.flat_params(), fresh.flat_params());

    // Base-branch predictions of the untrained model are zero-shot.
    let zero_shot = predict(&fresh, None, &dataset.target, dataset.kind, 1.0).unwrap();
    let after = predict(&trainer.model, None, &dataset.target, dataset.kind, 1.0).unwrap();
    assert_eq!(zero_shot.classes, after.classes);
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let dataset = toy_dataset(2);
    let mut cfg = toy_cfg(2);
    cfg.train.lr0 = 0.0;

    let before = Model::for_dataset(&cfg, &dataset).unwrap().flat_params();
    let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
    trainer.run(|_| {}).unwrap();
    let after = trainer.model.flat_params();
    assert_eq!(before.len(), after.len());
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.to_bits(), a.to_bits());
    }
}

#[test]
fn identical_seeds_give_bit_identical_checkpoints() {
    let dataset = toy_dataset(3);
    let cfg = toy_cfg(3);

    let run = || {
        let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
        trainer.run(|_| {}).unwrap();
        trainer.checkpoint()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted() {
    let dataset = toy_dataset(4);
    let mut cfg = toy_cfg(4);
    cfg.train.epochs = 4;

    let uninterrupted = {
        let mut t = Trainer::new(&dataset, &cfg).unwrap();
        t.run(|_| {}).unwrap();
        t.checkpoint()
    };

    let resumed = {
        let mut t = Trainer::new(&dataset, &cfg).unwrap();
        t.run_until(2, |_| {}).unwrap();
        let mid = t.checkpoint();
        drop(t);
        let mut t2 = Trainer::from_checkpoint(&dataset, &cfg, &mid).unwrap();
        t2.run(|_| {}).unwrap();
        t2.checkpoint()
    };
    assert_eq!(uninterrupted, resumed);
}

#[test]
fn gamma_zero_reduces_total_to_base_losses() {
    let dataset = toy_dataset(5);
    let mut cfg = toy_cfg(5);
    cfg.train.gamma = 0.0;
    cfg.train.epochs = 1;

    let mut reports: Vec<LossReport> = Vec::new();
    let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
    trainer.run(|r| reports.push(r.clone())).unwrap();
    for r in &reports {
        assert_eq!(r.total, r.l_x + r.l_u, "gamma = 0 must drop alignment terms");
    }
}

#[test]
fn empty_target_gives_zero_pseudo_losses() {
    let mut dataset = toy_dataset(6);
    dataset.target.clear();
    let mut cfg = toy_cfg(6);
    cfg.train.epochs = 1;

    let mut reports = Vec::new();
    let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
    trainer.run(|r| reports.push(r.clone())).unwrap();
    assert!(!reports.is_empty());
    for r in &reports {
        assert_eq!(r.l_u, 0.0);
        assert_eq!(r.l_ua, 0.0);
        assert_eq!(r.n_pseudo_kept, 0);
    }
}

#[test]
fn step_report_matches_independently_computed_components() {
    // Batch size equals both domain sizes, so the single step per epoch
    // sees every sample exactly once and the masked means can be recomputed
    // from the pre-step model without knowing the shuffle order.
    let dataset = toy_dataset(7);
    let mut cfg = toy_cfg(7);
    cfg.train.epochs = 1;

    let trainer = Trainer::new(&dataset, &cfg).unwrap();
    let model = trainer.model.clone();
    let source_bank = trainer.source_bank.clone();
    let target_bank = trainer.target_bank.clone();
    let zero_shot = trainer.zero_shot().clone();
    drop(trainer);

    let mut reports = Vec::new();
    let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
    trainer.run(|r| reports.push(r.clone())).unwrap();
    let first = &reports[0];

    let t = cfg.train.temperature;
    let text = model.text_features().unwrap();
    let ce = |probs: &pda_core::Tensor, labels: &[usize], mask: &[bool]| -> f64 {
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..probs.rows() {
            if mask[i] {
                acc -= probs.at(i, labels[i]).ln();
            }
        }
        acc / kept as f64
    };

    // L_x over the full source set.
    let zs = model.image_features(&dataset.source, dataset.kind).unwrap();
    let ps = branch_probs(&text, &zs, t).unwrap();
    let all = vec![true; dataset.source.len()];
    let l_x = ce(&ps, &dataset.source_labels, &all);

    // Pseudo labels from the frozen zero-shot outputs (warm-up disabled).
    let (pseudo, mask) =
        pda_core::training::pseudo_label(&zero_shot.target_probs, cfg.train.tau).unwrap();
    let zt = model.image_features(&dataset.target, dataset.kind).unwrap();
    let pt = branch_probs(&text, &zt, t).unwrap();
    let l_u = ce(&pt, &pseudo, &mask);

    // Alignment losses over bank-augmented features.
    let hs = model.augmented_features(&zs, &source_bank, &target_bank).unwrap();
    let l_xa = ce(&branch_probs(&text, &hs, t).unwrap(), &dataset.source_labels, &all);
    let ht = model.augmented_features(&zt, &source_bank, &target_bank).unwrap();
    let l_ua = ce(&branch_probs(&text, &ht, t).unwrap(), &pseudo, &mask);

    let tol = 1e-9;
    assert!((first.l_x - l_x).abs() < tol, "L_x {} vs {l_x}", first.l_x);
    assert!((first.l_u - l_u).abs() < tol, "L_u {} vs {l_u}", first.l_u);
    assert!((first.l_xa - l_xa).abs() < tol, "L_xa {} vs {l_xa}", first.l_xa);
    assert!((first.l_ua - l_ua).abs() < tol, "L_ua {} vs {l_ua}", first.l_ua);
    let total = l_x + l_u + cfg.train.gamma * (l_xa + l_ua);
    assert!((first.total - total).abs() < tol);
    assert_eq!(first.n_pseudo_kept, mask.iter().filter(|&&m| m).count());
}

#[test]
fn frozen_weights_stay_byte_identical_through_training() {
    let dataset = toy_dataset(8);
    let cfg = toy_cfg(8);
    let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
    let fingerprint_before = trainer.model.weights.fingerprint();
    trainer.run(|_| {}).unwrap();
    assert_eq!(trainer.model.weights.fingerprint(), fingerprint_before);
}

#[test]
fn training_moves_every_prompt_and_tuner_tensor() {
    // Numeric reachability: after a few steps at a real learning rate,
    // every learnable tensor must have moved, which requires a nonzero
    // gradient somewhere in each.
    let dataset = toy_dataset(9);
    let mut cfg = toy_cfg(9);
    cfg.train.tau = 0.0; // keep every pseudo label so L_u and L_ua are live
    let before: Vec<(String, pda_core::Tensor)> = Model::for_dataset(&cfg, &dataset)
        .unwrap()
        .learnable_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();

    let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
    trainer.run(|_| {}).unwrap();
    for ((name, old), (_, new)) in before.iter().zip(trainer.model.learnable_tensors()) {
        let moved = old.data().iter().zip(new.data()).any(|(a, b)| a != b);
        assert!(moved, "tensor {name} never received a gradient");
    }
}

#[test]
fn warmup_disabled_and_warmup_equal_epochs_agree() {
    // Both settings pseudo-label from frozen zero-shot outputs for the
    // whole run, so the trained checkpoints must agree bit for bit.
    let dataset = toy_dataset(10);
    let mut cfg_a = toy_cfg(10);
    cfg_a.train.warmup_epochs = 0;
    let mut cfg_b = toy_cfg(10);
    cfg_b.train.warmup_epochs = cfg_b.train.epochs;

    let ckpt = |cfg: &RunConfig| {
        let mut t = Trainer::new(&dataset, cfg).unwrap();
        t.run(|_| {}).unwrap();
        t.checkpoint().tensors
    };
    assert_eq!(ckpt(&cfg_a), ckpt(&cfg_b));
}

#[test]
fn warmup_switch_changes_the_run() {
    // Switching to current-model labels mid-run must alter training
    // relative to frozen labels throughout.
    let dataset = toy_dataset(11);
    let mut frozen = toy_cfg(11);
    frozen.train.warmup_epochs = 0;
    frozen.train.lr0 = 0.3;
    frozen.train.tau = 0.3;
    let mut switching = frozen.clone();
    switching.train.warmup_epochs = 1;

    let ckpt = |cfg: &RunConfig| {
        let mut t = Trainer::new(&dataset, cfg).unwrap();
        t.run(|_| {}).unwrap();
        t.checkpoint().tensors
    };
    assert_ne!(ckpt(&frozen), ckpt(&switching));
}

#[test]
fn precomputed_embeddings_train_text_prompts_only() {
    // Embeddings mode bypasses the image encoder: coupling and deep visual
    // prompts see no gradient, text context vectors still move.
    let cfg = {
        let mut c = toy_cfg(12);
        c.train.epochs = 2;
        c
    };
    let d = cfg.encoder.d_proj;
    let mut rng = pda_core::rng::seeded(55);
    let unit_row = |rng: &mut rand_chacha::ChaCha8Rng| {
        let raw = pda_core::rng::gaussian(rng, 1, d, 1.0);
        let normed = pda_core::kernels::l2_normalize_rows(raw.data(), 1, d).unwrap();
        pda_core::Tensor::new(1, d, normed).unwrap()
    };
    let dataset = Dataset {
        class_names: vec!["a".into(), "b".into()],
        kind: FeatureKind::Embeddings,
        source: (0..12).map(|_| unit_row(&mut rng)).collect(),
        source_labels: (0..12).map(|i| i % 2).collect(),
        target: (0..12).map(|_| unit_row(&mut rng)).collect(),
    };

    let before = Model::seeded(&cfg, 2).unwrap();
    let mut trainer = Trainer::new(&dataset, &cfg).unwrap();
    trainer.run(|_| {}).unwrap();

    assert_ne!(
        before.prompts.text_ctx[0], trainer.model.prompts.text_ctx[0],
        "text prompts must still train"
    );
    assert_eq!(
        before.prompts.coupling, trainer.model.prompts.coupling,
        "coupling projection must not move without the image encoder"
    );
    assert_eq!(before.prompts.deep_visual, trainer.model.prompts.deep_visual);
}
