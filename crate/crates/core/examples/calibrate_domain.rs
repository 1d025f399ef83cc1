//! Domain-adaptation burn-in probe: GRL vs no-GRL on a shifted target domain.
use ndarray::Array3;
use ssodlab_core::config::Config;
use ssodlab_core::data::{render_scene, Dataset, SplitManifest, SyntheticSceneSpec};
use ssodlab_core::trainer::Trainer;

type T = f32;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let grl: bool = args.get(1).map(|v| v == "grl").unwrap_or(true);
    let seed: u64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(5);
    let epochs: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(80);

    let src = SyntheticSceneSpec { min_size_frac: 0.15, max_size_frac: 0.45, ..Default::default() };
    let tgt = SyntheticSceneSpec { hue_shift_deg: 40.0, blur_sigma: 1.5, ..src.clone() };
    let names = vec!["a".into(), "b".into(), "c".into()];
    let mut samples: Vec<_> = (0..400).map(|i| render_scene::<T>(&src, 21, i as u64)).collect();
    samples.extend((0..400).map(|i| render_scene::<T>(&tgt, 22, 10_000 + i as u64)));
    let train = Dataset::from_samples(samples, 3, names.clone());
    let val = Dataset::from_samples(
        (0..150).map(|i| render_scene::<T>(&tgt, 23, 20_000 + i as u64)).collect(),
        3,
        names,
    );
    let split = SplitManifest {
        labeled: (0..400).collect(),
        unlabeled: (10_000..10_400).collect(),
        validation: vec![],
        labeled_pct: 50.0,
        fold_seed: 0,
    };
    let mut overrides = vec![
        format!("train.epochs={epochs}"),
        format!("train.burnin_epochs={epochs}"),
        "train.steps_per_epoch_burnin=13".into(),
        format!("train.seed={seed}"),
        "train.lambda_da=0.1".into(),
        format!("domain.grl_enabled={grl}"),
        "train.eval_every=1000".into(),
        "loss.obj_pos_weight=20".into(),
        "loss.w_reg=2".into(),
        "model.width=10".into(),
        "model.neck_width=40".into(),
        "data.val_frac=0.0".into(),
    ];
    if let Ok(extra) = std::env::var("CAL_OVERRIDES") {
        for o in extra.split(';').filter(|s| !s.is_empty()) {
            overrides.push(o.to_string());
        }
    }
    let cfg = Config::load(None, &overrides).unwrap();
    let mut t = Trainer::new_with_split(cfg, train, Some(val), None, split).unwrap();
    t.run().unwrap();
    let ap = t.evaluate().unwrap().ap50;
    let mut held: Vec<(Array3<T>, bool)> = Vec::new();
    for i in 0..40 {
        held.push((render_scene::<T>(&src, 31, 40_000 + i).image, false));
        held.push((render_scene::<T>(&tgt, 32, 50_000 + i).image, true));
    }
    let acc = t.domain_accuracy(&t.state.student, &held).unwrap();
    println!("RESULT grl={grl} seed={seed} target_ap50={ap:.4} domain_acc={acc:.4}");
}
