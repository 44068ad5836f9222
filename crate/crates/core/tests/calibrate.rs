//! Development calibration probes. Run explicitly:
//! `cargo test --test calibrate -- --ignored --nocapture`

use std::time::Instant;

use latentplan::cgan::{NetConfig, Trainer, TrainingConfig};
use latentplan::geometry::{ArmSpec, GridSpec};
use latentplan::scenario::{build_dataset, SamplerConfig, Split};

fn dataset(n_scen: usize, per: usize, seed: u64) -> latentplan::scenario::Dataset {
    let arm = ArmSpec::default_2link();
    let cfg = SamplerConfig {
        seed,
        n_scenarios_train: n_scen,
        samples_per_scenario: per,
        ..Default::default()
    };
    build_dataset(&arm, &cfg, GridSpec::default_16(), Split::Train).unwrap()
}

#[test]
#[ignore]
fn speed_probe() {
    for width in [48usize, 64, 96, 128] {
        let ds = dataset(40, 100, 7);
        let cfg = TrainingConfig {
            seed: 1,
            steps: 25,
            net: NetConfig { hidden_width: width, extractor_width: width, ..Default::default() },
            ..Default::default()
        };
        let mut t = Trainer::new(&ds, cfg).unwrap();
        // warmup
        for _ in 0..3 {
            t.step_once(&ds).unwrap();
        }
        let start = Instant::now();
        let n = 25;
        for _ in 0..n {
            t.step_once(&ds).unwrap();
        }
        let per = start.elapsed().as_secs_f64() / n as f64;
        println!(
            "width {width}: {:.1} ms/step -> {:.1} min for 9k steps",
            per * 1e3,
            per * 9000.0 / 60.0
        );
    }
}

fn run_overfit(tag: &str, mutate: impl Fn(&mut TrainingConfig)) {
    let ds = dataset(1, 64, 11);
    let mut cfg = TrainingConfig {
        seed: 2,
        steps: 5000,
        batch_scenarios: 4,
        batch_free_per_scenario: 12,
        batch_col_per_scenario: 6,
        batch_z_per_scenario: 12,
        log_interval: 250,
        ..Default::default()
    };
    mutate(&mut cfg);
    let start = Instant::now();
    let mut t = Trainer::new(&ds, cfg).unwrap();
    while t.step < t.cfg.steps {
        let r = t.step_once(&ds).unwrap();
        if t.step % 500 == 0 || t.step == t.cfg.steps {
            println!(
                "[{tag}] step {:5}  gan {:+.4}  rec {:.5}  map {:.5}  col {:+.4}  accR {:.2} accF {:.2} accC {:.2}  oor {:.2}",
                r.step, r.loss_gan, r.loss_rec, r.loss_map, r.loss_col,
                r.d_acc_real, r.d_acc_fake, r.d_acc_col, r.out_of_range
            );
        }
    }
    println!("[{tag}] elapsed {:.1}s", start.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn overfit_probe() {
    run_overfit("base", |_| {});
}

#[test]
#[ignore]
fn overfit_boost100() {
    run_overfit("boost100", |c| c.lambda_col_boost = 100.0);
}

#[test]
#[ignore]
fn overfit_boost300() {
    run_overfit("boost300", |c| c.lambda_col_boost = 300.0);
}

#[test]
#[ignore]
fn overfit_nogan() {
    run_overfit("nogan", |c| {
        c.lambda_gan = 0.0;
        c.lambda_col_boost = 100.0;
    });
}

#[test]
#[ignore]
fn overfit_map100() {
    run_overfit("map100", |c| {
        c.lambda_map = 100.0;
        c.lambda_col_boost = 100.0;
    });
}

#[test]
#[ignore]
fn overfit_fast_ge() {
    run_overfit("fastge", |c| {
        c.lr_ge = 5e-4;
        c.lambda_col_boost = 100.0;
    });
}

#[test]
#[ignore]
fn overfit_ttur() {
    run_overfit("ttur", |c| {
        c.lr_d = 1e-4;
        c.lr_ge = 4e-4;
        c.lambda_col_boost = 100.0;
    });
}

#[test]
#[ignore]
fn overfit_ttur_boost() {
    run_overfit("tturboost", |c| {
        c.lr_d = 1e-4;
        c.lr_ge = 4e-4;
    });
}

#[test]
#[ignore]
fn overfit_beta() {
    run_overfit("beta", |c| {
        c.adam_beta2 = 0.99;
        c.lambda_col_boost = 100.0;
    });
}

#[test]
#[ignore]
fn overfit_beta_boost() {
    run_overfit("betaboost", |c| {
        c.adam_beta2 = 0.99;
    });
}
