//! SSOD vs supervised-only comparison at low label fractions.
use ssodlab_core::config::Config;
use ssodlab_core::data::{render_scene, Dataset, SyntheticSceneSpec};
use ssodlab_core::trainer::Trainer;
use std::time::Instant;

type T = f32;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(600);
    let burnin: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(60);
    let epochs: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(160);
    let lambda_u: f64 = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let seed: u64 = args.get(5).and_then(|v| v.parse().ok()).unwrap_or(5);

    let spec = SyntheticSceneSpec { min_size_frac: 0.15, max_size_frac: 0.45, ..Default::default() };
    let train: Vec<_> = (0..n_train).map(|i| render_scene::<T>(&spec, 1, i as u64)).collect();
    let n_val: usize = std::env::var("CAL_NVAL").ok().and_then(|v| v.parse().ok()).unwrap_or(200);
    let val: Vec<_> = (0..n_val).map(|i| render_scene::<T>(&spec, 2, 900000 + i as u64)).collect();
    let names = vec!["a".into(), "b".into(), "c".into()];
    let train_ds = Dataset::from_samples(train, 3, names.clone());
    let val_ds = Dataset::from_samples(val, 3, names);

    let mut overrides = vec![
        format!("train.epochs={epochs}"),
        format!("train.burnin_epochs={burnin}"),
        format!("train.lambda_u={lambda_u}"),
        format!("train.seed={seed}"),
        "train.lambda_da=0.0".into(),
        "train.ema_momentum=0.99".into(),
        "train.steps_per_epoch_ssod=13".into(),
        "train.eval_every=10".into(),
        "loss.obj_pos_weight=20".into(),
        "loss.w_reg=2".into(),
        "data.labeled_pct=5".into(),
        "data.val_frac=0.0".into(),
    ];
    if let Ok(extra) = std::env::var("CAL_OVERRIDES") {
        for o in extra.split(';').filter(|s| !s.is_empty()) {
            overrides.push(o.to_string());
        }
    }
    let cfg = Config::load(None, &overrides).unwrap();
    let mut t = Trainer::new(cfg, train_ds, Some(val_ds), None).unwrap();
    println!("labeled={} unlabeled={} lambda_u={lambda_u}", t.num_labeled(), t.num_unlabeled());
    let t0 = Instant::now();
    for _ in 0..epochs {
        let rec = t.run_epoch().unwrap();
        if (rec.epoch + 1) % 10 == 0 {
            println!("epoch {:3} [{}] l_s {:.3} l_u(c/r/o) {:.3}/{:.3}/{:.3} AP50 {:.3} ({:.0}s)",
                rec.epoch, rec.phase, rec.l_s, rec.l_u_cls, rec.l_u_reg, rec.l_u_obj,
                rec.ap50, t0.elapsed().as_secs_f32());
        }
    }
    let final_eval = t.evaluate().unwrap();
    println!("FINAL teacher AP50 {:.4} AP {:.4}", final_eval.ap50, final_eval.ap50_95);
}
