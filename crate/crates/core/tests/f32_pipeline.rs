//! The numeric core run in single precision agrees with double precision.

use infonoise::allocate::{build_schedule, ScheduleSpec, Weighting};
use infonoise::grid::SigmaRange;
use infonoise::infer::{heun_sample, infogrid, reference_grid};
use infonoise::oracle::{bayes_denoiser, entropy_rate_profile};
use infonoise::rng::{substream, Stream};
use infonoise::scheduler::{Scheduler, SchedulerConfig};
use infonoise::toy::{toy_mmse_profile, TwoPointModel};
use infonoise::train::Preconditioning;
use infonoise::{Dataset32, Dataset64, LogGrid32, LogGrid64, Mlp32, Mlp64};

fn rel(a: f32, b: f64) -> f64 {
    (f64::from(a) - b).abs() / b.abs().max(1e-12)
}

#[test]
fn profile_and_schedule_match_double_precision() {
    let g32 = LogGrid32::new(SigmaRange::new(0.05f32, 20.0).unwrap(), 48).unwrap();
    let g64 = LogGrid64::new(SigmaRange::new(0.05, 20.0).unwrap(), 48).unwrap();
    let r32 = entropy_rate_profile(&toy_mmse_profile(&TwoPointModel::new(1.0f32).unwrap(), &g32, 64).unwrap());
    let r64 = entropy_rate_profile(&toy_mmse_profile(&TwoPointModel::new(1.0f64).unwrap(), &g64, 64).unwrap());
    let peak = r64.max_value();
    for (a, b) in r32.values().iter().zip(r64.values()) {
        assert!((f64::from(*a) - b).abs() <= 1e-4 * peak, "{a} vs {b}");
    }

    let spec32 = ScheduleSpec { weighting: Weighting::Edm { sigma_data: 0.5f32 }, ..ScheduleSpec::default() };
    let spec64 = ScheduleSpec { weighting: Weighting::Edm { sigma_data: 0.5f64 }, ..ScheduleSpec::default() };
    let s32 = build_schedule(&r32, &spec32).unwrap();
    let s64 = build_schedule(&r64, &spec64).unwrap();
    let tv: f64 = (0..48).map(|k| (f64::from(s32.pi.cell_mass(k)) - s64.pi.cell_mass(k)).abs()).sum::<f64>() / 2.0;
    assert!(tv < 1e-3, "tv {tv}");

    let n32 = infogrid(&r32, 12).unwrap();
    let n64 = infogrid(&r64, 12).unwrap();
    for (a, b) in n32.nodes().iter().zip(n64.nodes()) {
        assert!(rel(*a, *b) < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn oracle_sampling_and_mlp_in_single_precision() {
    let d32 = Dataset32::two_point(1.0);
    let d64 = Dataset64::two_point(1.0);
    for (x, s) in [(0.3f32, 0.5f32), (-1.7, 1.2), (2.5, 4.0)] {
        let a = bayes_denoiser(&d32, &[x], s).unwrap()[0];
        let b = bayes_denoiser(&d64, &[f64::from(x)], f64::from(s)).unwrap()[0];
        assert!((f64::from(a) - b).abs() < 1e-6);
    }
    let grid = reference_grid(18, SigmaRange::new(0.002f32, 80.0).unwrap(), 7.0).unwrap();
    let out = heun_sample(&d32, &grid, &[37.0]).unwrap()[0];
    assert!((out.abs() - 1.0).abs() < 1e-2, "{out}");

    let m32 =
        Mlp32::new(2, &[8], Preconditioning::Edm { sigma_data: 1.0 }, false, &mut substream(3, Stream::Data)).unwrap();
    let m64 =
        Mlp64::new(2, &[8], Preconditioning::Edm { sigma_data: 1.0 }, false, &mut substream(3, Stream::Data)).unwrap();
    let a = m32.forward(&[0.4, -0.2], 0.7).unwrap();
    let b = m64.forward(&[0.4, -0.2], 0.7).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((f64::from(*x) - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn single_precision_scheduler_refreshes() {
    let cfg = SchedulerConfig::<f32> { k: 16, n_warm: 200, m: 100, n_min: 2, ..SchedulerConfig::default() };
    let data = Dataset32::two_point(1.0);
    let mut sched = Scheduler::new(cfg).unwrap();
    let mut rng = substream(1, Stream::Scheduler);
    let mut refreshed = 0;
    for _ in 0..2000 {
        let s = sched.sample_sigma(&mut rng);
        let loss = infonoise::oracle::sample_oracle_loss(&data, s, &mut rng).unwrap();
        sched.record_loss(s, loss).unwrap();
        refreshed += usize::from(sched.maybe_refresh().is_some());
    }
    assert!(refreshed > 0);
    let total: f32 = (0..16).map(|k| sched.snapshot().density.cell_mass(k)).sum();
    assert!((total - 1.0).abs() < 1e-5);
}
