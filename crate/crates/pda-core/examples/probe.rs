// probe: ladder shape vs (sep, lr, lambda)
use pda_core::config::RunConfig;
use pda_core::datagen::{generate_synthetic, SyntheticShiftSpec};
use pda_core::manifest::{Dataset, FeatureKind};
use pda_core::metrics::{accuracy, mmd};
use pda_core::model::predict;
use pda_core::training::Trainer;

fn main() {
    let ladder = [
        [true, false, false, false],
        [true, false, true, false],
        [true, true, true, false],
        [true, true, true, true],
    ];
    for sep in [6.0f64, 8.0] {
        for lr in [0.1f64, 0.3] {
            let mut means_base = [0.0f64; 4];
            let mut means_ens = [0.0f64; 4];
            let mut c3 = 0;
            for seed in 0..5u64 {
                let spec = SyntheticShiftSpec { seed, class_sep: sep, ..Default::default() };
                let data = generate_synthetic(&spec).unwrap();
                let truth = data.target_labels.clone();
                let dataset = Dataset {
                    class_names: (0..5).map(|k| format!("c{k}")).collect(),
                    kind: FeatureKind::RawPatches,
                    source: data.source, source_labels: data.source_labels, target: data.target,
                };
                let mut cfg = RunConfig::default();
                cfg.train.seed = seed;
                cfg.train.epochs = 10;
                cfg.train.lr0 = lr;
                cfg.train.warmup_epochs = 2;
                let cfg = cfg.normalized().unwrap();

                // C3 side check at this lr
                let t0 = Trainer::new(&dataset, &cfg).unwrap();
                let sf = t0.model.image_features(&dataset.source, dataset.kind).unwrap();
                let tf = t0.model.image_features(&dataset.target, dataset.kind).unwrap();
                let before = mmd(&sf, &tf).unwrap();
                let mut tfull = Trainer::new(&dataset, &cfg).unwrap();
                tfull.run(|_| {}).unwrap();
                let full = tfull.domain_gap().unwrap();
                let mut cfg0 = cfg.clone();
                cfg0.train.gamma = 0.0;
                let mut tg0 = Trainer::new(&dataset, &cfg0).unwrap();
                tg0.run(|_| {}).unwrap();
                if full < before && full < tg0.domain_gap().unwrap() { c3 += 1; }

                for (i, terms) in ladder.iter().enumerate() {
                    let mut c = cfg.clone();
                    c.train.loss_terms.l_x = terms[0];
                    c.train.loss_terms.l_u = terms[1];
                    c.train.loss_terms.l_xa = terms[2];
                    c.train.loss_terms.l_ua = terms[3];
                    let mut t = Trainer::new(&dataset, &c).unwrap();
                    t.run(|_| {}).unwrap();
                    let pb = predict(&t.model, Some((&t.source_bank, &t.target_bank)), &dataset.target, dataset.kind, 1.0).unwrap();
                    let pe = predict(&t.model, Some((&t.source_bank, &t.target_bank)), &dataset.target, dataset.kind, 0.5).unwrap();
                    means_base[i] += accuracy(&pb.classes, &truth).unwrap() / 5.0;
                    means_ens[i] += accuracy(&pe.classes, &truth).unwrap() / 5.0;
                }
            }
            println!("sep {sep} lr {lr}: C3 {c3}/5");
            println!("  ladder base-only: {:?}", means_base.map(|v| (v * 1000.0).round() / 1000.0));
            println!("  ladder ens λ=0.5: {:?}", means_ens.map(|v| (v * 1000.0).round() / 1000.0));
        }
    }
}
