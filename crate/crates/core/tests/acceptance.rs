//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use genauction::agents::bid_grid;
use genauction::ctr_model::{bce_gradient, bce_loss, ClickDataset, PctrModel};
use genauction::experiment::{
    check_optimality, check_vm_incentives, run_experiment, step_negative_control, test_contexts, verification_env,
    verification_vm_agent, ExperimentConfig, ExperimentOutcome,
};
use genauction::irpo::{dpo_loss_and_gradient, PolicyParams, POLICY_DIM};
use genauction::numerics::{central_difference, relative_error};
use genauction::properties::{bid_click_curve, monotonicity_sweep, refinement_check, MONOTONICITY_SLACK};
use genauction::seeding::rng_for;
use genauction::user_model::sample_context;
use genauction::Setting;
use rand::Rng;
use rayon::prelude::*;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

fn optimality() -> Verdict {
    let mut cfg = ExperimentConfig::with_seed(101);
    cfg.verify.perturbation_trials = 1000;
    let setting = cfg.setting().unwrap();
    let (results, took) = timed(|| {
        (0..200)
            .into_par_iter()
            .map(|e| check_optimality(&setting, &cfg, e).unwrap())
            .collect::<Vec<_>>()
    });
    let failures = results.iter().filter(|(ok, _)| !ok).count();
    let worst = results.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    verdict(
        failures == 0 && took <= Duration::from_secs(10),
        format!("200 envs x 1000 perturbations, {failures} failures, worst {worst:.1e}, {took:.2?}"),
    )
}

fn monotonicity() -> Verdict {
    let setting = Setting::desk();
    let grid = bid_grid(1.0, 100.0, 1.0);
    let (reports, took) = timed(|| {
        (0..200)
            .into_par_iter()
            .map(|e| monotonicity_sweep(&verification_env(&setting, 102, e).unwrap(), &grid).unwrap())
            .collect::<Vec<_>>()
    });
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let worst = reports.iter().map(|r| r.max_violation).fold(0.0, f64::max);
    verdict(
        violations == 0 && worst <= MONOTONICITY_SLACK && took <= Duration::from_secs(30),
        format!("200 envs on bids 1..=100, max decrease {worst:.1e}, {took:.2?}"),
    )
}

fn continuity() -> Verdict {
    let setting = Setting::desk();
    let checks: Vec<_> = (0..50)
        .into_par_iter()
        .map(|e| refinement_check(&verification_env(&setting, 103, e).unwrap(), 1.0, 100.0, 0.02).unwrap())
        .collect();
    let failures = checks.iter().filter(|c| !c.pass).count();
    let flat = checks.iter().filter(|c| c.coarse_max_jump < 1e-12).count();
    let (lo, hi) = checks
        .iter()
        .filter(|c| c.coarse_max_jump >= 1e-12)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.ratio), hi.max(c.ratio)));
    let control = refinement_check(&step_negative_control(1.0, 100.0, 0.02), 1.0, 100.0, 0.02).unwrap();
    verdict(
        failures == 0 && !control.pass,
        format!(
            "50 envs, ratios in [{lo:.3}, {hi:.3}], {flat} flat, step control ratio {:.3} rejected={}",
            control.ratio, !control.pass
        ),
    )
}

fn vm_incentives() -> Verdict {
    let setting = Setting::desk();
    let grid = bid_grid(0.0, 100.0, 1.0);
    let results: Vec<_> = (0..100)
        .into_par_iter()
        .map(|e| {
            let env = verification_env(&setting, 104, e).unwrap();
            check_vm_incentives(&env, &verification_vm_agent(104, e), &grid, 1.0).unwrap()
        })
        .collect();
    let failures = results.iter().filter(|(ok, _)| !ok).count();
    let worst = results.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    verdict(failures == 0, format!("100 envs, {failures} failures, worst offset or excess {worst:.1e}"))
}

fn gradients() -> Verdict {
    let setting = Setting::desk();
    let mut rng = rng_for(105, &[]);
    let mut dpo_worst: f64 = 0.0;
    for _ in 0..100 {
        let c = sample_context(&mut rng, &setting.scenario);
        let theta: Vec<f64> = (0..POLICY_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let reference = PolicyParams::new((0..POLICY_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect(), 100.0).unwrap();
        let winner = rng.gen_range(0..setting.space.len());
        let losers: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..setting.space.len())).collect();
        let beta = rng.gen_range(0.1..2.0);
        let loss = |t: &[f64]| {
            let p = PolicyParams::new(t.to_vec(), 100.0).unwrap();
            dpo_loss_and_gradient(&p, &reference, &c, &setting.space, &setting.base, winner, &losers, beta).unwrap()
        };
        let g = loss(&theta).1;
        let fd = central_difference(|t| loss(t).0, &theta, 1e-5);
        dpo_worst = dpo_worst.max(relative_error(&g, &fd));
    }
    let mut bce_worst: f64 = 0.0;
    for _ in 0..100 {
        let mut data = ClickDataset::new();
        for k in 0..rng.gen_range(1..6) {
            let c = sample_context(&mut rng, &setting.scenario);
            for _ in 0..rng.gen_range(1..10) {
                let y = setting.space.get(rng.gen_range(1..setting.space.len()));
                let ad = y.exposed()[rng.gen_range(0..y.n_ads())];
                data.push(k, &c, y, ad, rng.gen_bool(0.4)).unwrap();
            }
        }
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = bce_gradient(&PctrModel::new(w.clone()).unwrap(), &data).unwrap();
        let fd = central_difference(|t| bce_loss(&PctrModel::new(t.to_vec()).unwrap(), &data).unwrap(), &w, 1e-6);
        bce_worst = bce_worst.max(relative_error(&g, &fd));
    }
    verdict(
        dpo_worst <= 1e-4 && bce_worst <= 1e-6,
        format!("preference loss worst {dpo_worst:.1e}, BCE worst {bce_worst:.1e}"),
    )
}

fn efficacy(runs: &[(ExperimentOutcome, Duration)]) -> Verdict {
    let mean = |m: &str| runs.iter().map(|(o, _)| o.report.revenue(m)).sum::<f64>() / runs.len() as f64;
    let [pre, mosaic, irpo, oracle] = ["pretrained", "mosaic", "irpo", "oracle"].map(mean);
    let slowest = runs.iter().map(|(_, d)| *d).max().unwrap();
    verdict(
        pre < mosaic && mosaic < irpo && irpo >= 1.5 * pre && oracle >= irpo && slowest <= Duration::from_secs(120),
        format!(
            "revenue per query pretrained {pre:.2} < mosaic {mosaic:.2} < irpo {irpo:.2} <= oracle {oracle:.2}, slowest run {slowest:.2?}"
        ),
    )
}

fn bid_click_correlation(runs: &[(ExperimentOutcome, Duration)]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (o, _)) in SEEDS.iter().zip(runs) {
        let cfg = ExperimentConfig::with_seed(*seed);
        let setting = cfg.setting().unwrap();
        let contexts = test_contexts(&setting, cfg.evaluation.test_contexts, *seed);
        let rho: Vec<f64> = o
            .training
            .snapshots
            .iter()
            .map(|p| {
                bid_click_curve(&setting, p, &contexts, &cfg.verify.probe_bids, cfg.verify.probe_replicates, *seed)
                    .unwrap()
                    .spearman
            })
            .collect();
        let last = *rho.last().unwrap();
        pass &= last >= 0.9 && rho.windows(2).all(|w| w[1] >= w[0]);
        parts.push(format!("seed {seed}: {}", rho.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ")));
    }
    verdict(pass, format!("Spearman per epoch, {}", parts.join("; ")))
}

fn kl_contraction(runs: &[(ExperimentOutcome, Duration)]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (o, _)) in SEEDS.iter().zip(runs) {
        let kl = o.report.kl_to_optimum;
        pass &= kl.trained <= 0.5 * kl.pretrained;
        parts.push(format!("seed {seed}: {:.2} vs {:.2}", kl.trained, kl.pretrained));
    }
    verdict(pass, format!("trained vs pretrained KL to the optimum, {}", parts.join("; ")))
}

fn determinism() -> Verdict {
    let cfg = ExperimentConfig::with_seed(1);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg).unwrap().write(a.path()).unwrap();
    run_experiment(&cfg).unwrap().write(b.path()).unwrap();
    let same = ["metrics.json", "history.csv"]
        .iter()
        .all(|f| fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap());
    verdict(same, "metrics.json and history.csv of two seed-1 runs compared byte for byte".into())
}

fn unbiasedness(runs: &[(ExperimentOutcome, Duration)]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (o, _)) in SEEDS.iter().zip(runs) {
        let gaps: Vec<f64> = o.training.history.records.iter().map(|r| r.unbiasedness_gap).collect();
        pass &= *gaps.last().unwrap() <= 0.02 && gaps.windows(2).all(|w| w[1] <= 1.2 * w[0]);
        parts.push(format!("seed {seed}: {}", gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>().join(" ")));
    }
    verdict(pass, format!("gap per epoch, {}", parts.join("; ")))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = vec![
        ("1 closed-form optimality", optimality()),
        ("2 allocation monotonicity", monotonicity()),
        ("3 allocation continuity", continuity()),
        ("4 value-maximizer incentive compatibility", vm_incentives()),
        ("5 gradient correctness", gradients()),
    ];
    let runs: Vec<(ExperimentOutcome, Duration)> = SEEDS
        .iter()
        .map(|s| timed(|| run_experiment(&ExperimentConfig::with_seed(*s)).unwrap()))
        .collect();
    results.push(("6 trained mechanism revenue ordering", efficacy(&runs)));
    results.push(("7 bid/click rank correlation", bid_click_correlation(&runs)));
    results.push(("8 KL contraction", kl_contraction(&runs)));
    results.push(("9 determinism", determinism()));
    results.push(("10 unbiasedness gap", unbiasedness(&runs)));

    let mut all = true;
    for (name, v) in &results {
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        all &= v.pass;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
