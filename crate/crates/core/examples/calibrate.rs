//! Desk calibration: does supervised training learn, and how fast per step?
use ssodlab_core::config::Config;
use ssodlab_core::data::{render_scene, Dataset, SyntheticSceneSpec};
use ssodlab_core::trainer::Trainer;
use std::time::Instant;

type T = f32;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(300);
    let epochs: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(30);
    let pct: f64 = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(100.0);

    let spec = SyntheticSceneSpec { min_size_frac: 0.15, max_size_frac: 0.45, ..Default::default() };
    let train: Vec<_> = (0..n_train).map(|i| render_scene::<T>(&spec, 1, i as u64)).collect();
    let val: Vec<_> = (0..100).map(|i| render_scene::<T>(&spec, 2, 100000 + i as u64)).collect();
    let names = vec!["a".into(), "b".into(), "c".into()];
    let train_ds = Dataset::from_samples(train, 3, names.clone());
    let val_ds = Dataset::from_samples(val, 3, names);

    let mut overrides = vec![
        format!("train.epochs={epochs}"),
        format!("train.burnin_epochs={epochs}"), // supervised-only via burn-in
        "train.lambda_da=0.0".into(),
        "train.seed=5".into(),
        format!("data.labeled_pct={pct}"),
        "train.eval_every=5".into(),
    ];
    if let Ok(extra) = std::env::var("CAL_OVERRIDES") {
        for o in extra.split(';').filter(|s| !s.is_empty()) {
            overrides.push(o.to_string());
        }
    }
    let cfg = Config::load(None, &overrides).unwrap();
    let mut t = Trainer::new(cfg, train_ds, Some(val_ds), None).unwrap();
    println!("labeled={} unlabeled={} params={}", t.num_labeled(), t.num_unlabeled(),
        t.state.student.num_scalars());
    let t0 = Instant::now();
    for _ in 0..epochs {
        let rec = t.run_epoch().unwrap();
        if (rec.epoch + 1) % 5 == 0 || rec.epoch == 0 {
            println!("epoch {:3} l_s {:.4} AP50 {:.3} AP {:.3} P {:.3} R {:.3}  ({:.1}s)",
                rec.epoch, rec.l_s, rec.ap50, rec.ap50_95, rec.p, rec.r, t0.elapsed().as_secs_f32());
        }
    }
}
