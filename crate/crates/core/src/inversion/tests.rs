use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::denoiser::{ConvNet, ConvNetMeta, DeltaOracle, GaussianOracle};
use crate::embedding::PromptTable;
use crate::schedule::NoiseSchedule;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(seed: u64, res: usize) -> StateTensor {
    StateTensor::randn(res, res, 3, &mut rng(seed)).map(|v| (0.5 * v).tanh())
}

fn prompt() -> PromptEmbedding {
    PromptTable::default().embed(2)
}

fn delta(anchor: StateTensor) -> DenoiserModel {
    DeltaOracle::new(NoiseSchedule::default(), anchor, PromptTable::default().width).into()
}

fn small_net(stage: usize, seed: u64) -> DenoiserModel {
    let cc = if stage == 1 { 0 } else { 3 };
    ConvNet::init(ConvNetMeta::new(3, cc, 8).with_widths([6, 6, 6]), seed)
        .unwrap()
        .into()
}

fn sr(res: usize, sigma: f64) -> SrConditioning {
    SrConditioning::new(image(77, res), sigma, 5).unwrap()
}

#[test]
fn delta_oracle_ddim_round_trip() {
    let x = image(1, 8);
    let model = delta(x.clone());
    let sched = NoiseSchedule::default();
    for t in [1, 10, 50] {
        let grid = TimestepGrid::evenly_spaced(1000, t).unwrap();
        let trace = ddim_invert(&model, &sched, &grid, &x, &StageCondition::base(prompt(), 1.0)).unwrap();
        assert_eq!(trace.states.len(), t + 1);
        let back = replay_reconstruction(&trace, &model, &sched).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-5);
    }
}

#[test]
fn replay_is_bit_identical_and_reinversion_too() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 10).unwrap();
    let model = small_net(2, 3);
    let x = image(2, 8);
    let cond = StageCondition::super_res(2, prompt(), 1.0, sr(4, 0.05));
    let cfg = IterInvConfig {
        inner_steps: 3,
        ..Default::default()
    };
    let a = iterinv_stage(&model, &sched, &grid, &x, &cond, &cfg).unwrap();
    let b = iterinv_stage(&model, &sched, &grid, &x, &cond, &cfg).unwrap();
    assert_eq!(encode_trace(&a).unwrap(), encode_trace(&b).unwrap());
    let r1 = replay_reconstruction(&a, &model, &sched).unwrap();
    let r2 = replay_reconstruction(&a, &model, &sched).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn nti_at_unit_guidance_replays_like_ddim() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 8).unwrap();
    let model = small_net(1, 9);
    let x = image(3, 8);
    let cond = StageCondition::base(prompt(), 1.0);
    let d = ddim_invert(&model, &sched, &grid, &x, &cond).unwrap();
    let n = null_text_invert(&model, &sched, &grid, &x, &cond, &NtiConfig::default()).unwrap();
    assert_eq!(n.method, InversionMethod::Nti);
    let (rd, rn) = (
        replay_reconstruction(&d, &model, &sched).unwrap(),
        replay_reconstruction(&n, &model, &sched).unwrap(),
    );
    assert!(rd.data().iter().zip(rn.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn nti_steps_never_increase_their_loss() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 10).unwrap();
    let model = small_net(1, 4);
    let x = image(4, 8);
    let cond = StageCondition::base(prompt(), 7.0);
    let tr = null_text_invert(&model, &sched, &grid, &x, &cond, &NtiConfig::default()).unwrap();
    assert_eq!(tr.step_losses.len(), 10);
    assert!(tr.step_losses.iter().all(|l| l.end <= l.start));
    assert!(tr.null_embeddings.iter().any(|n| n.iter().any(|v| *v != 0.0)));
    // the optimised nulls must beat the plain null on replay of the pivot end state
    let mut plain = tr.clone();
    plain.null_embeddings.iter_mut().for_each(|n| n.fill(0.0));
    let err = |t: &InversionTrace| {
        replay_reconstruction(t, &model, &sched).unwrap().sub(&x).unwrap().sum_sq()
    };
    assert!(err(&tr) < err(&plain));
}

#[test]
fn iterinv_on_delta_oracle_converges() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 50).unwrap();
    let x = image(5, 16);
    let model = delta(x.clone());
    let cond = StageCondition::super_res(2, prompt(), 1.0, sr(8, 0.05));
    let cfg = IterInvConfig {
        inner_steps: 200,
        early_stop_tol: 0.0,
        ..Default::default()
    };
    let tr = iterinv_stage(&model, &sched, &grid, &x, &cond, &cfg).unwrap();
    let worst = tr.step_losses.iter().map(|l| l.end).fold(0.0, f64::max);
    assert!(worst < 1e-8, "worst final residual {worst:e}");
    let back = replay_reconstruction(&tr, &model, &sched).unwrap();
    assert!(back.max_abs_diff(&x).unwrap() < 1e-4);
}

#[test]
fn zero_step_single_iteration_is_a_ddim_step() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 1).unwrap();
    let model = small_net(3, 6);
    let x = image(6, 8);
    let cond = StageCondition::super_res(3, prompt(), 1.0, sr(4, 0.0));
    let cfg = IterInvConfig {
        steps: 1,
        inner_steps: 1,
        step_size: 0.0,
        init: IterInvInit::DdimForward,
        ..Default::default()
    };
    let it = iterinv_stage(&model, &sched, &grid, &x, &cond, &cfg).unwrap();
    let dd = ddim_invert(&model, &sched, &grid, &x, &cond).unwrap();
    assert_eq!(it.states, dd.states);
    assert_eq!(it.step_losses[0].start, it.step_losses[0].end);
}

#[test]
fn inner_loops_are_monotone_and_more_iterations_help() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 10).unwrap();
    let model = small_net(2, 8);
    let x = image(8, 8);
    let cond = StageCondition::super_res(2, prompt(), 1.0, sr(4, 0.05));
    let mut means = Vec::new();
    for n in [1, 5, 20] {
        let cfg = IterInvConfig {
            inner_steps: n,
            record_history: true,
            ..Default::default()
        };
        let tr = iterinv_stage(&model, &sched, &grid, &x, &cond, &cfg).unwrap();
        for l in &tr.step_losses {
            assert!(l.end <= l.start);
            assert!(l.history.windows(2).all(|w| w[1] <= w[0]));
            assert!(l.iterations <= n);
        }
        means.push(tr.step_losses.iter().map(|l| l.end).sum::<f64>() / 10.0);
    }
    assert!(means[1] <= means[0] && means[2] <= means[1], "{means:?}");
}

#[test]
fn iterinv_beats_ddim_on_a_random_network() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 10).unwrap();
    let model = small_net(2, 12);
    let x = image(12, 8);
    let cond = StageCondition::super_res(2, prompt(), 1.0, sr(4, 0.0));
    let ii = iterinv_stage(&model, &sched, &grid, &x, &cond, &IterInvConfig::default()).unwrap();
    let dd = ddim_invert(&model, &sched, &grid, &x, &cond).unwrap();
    let err = |t: &InversionTrace| replay_reconstruction(t, &model, &sched).unwrap().max_abs_diff(&x).unwrap();
    assert!(err(&ii) < 0.1 * err(&dd), "{} vs {}", err(&ii), err(&dd));
}

#[test]
fn mapped_state_variant_runs() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 4).unwrap();
    let model = small_net(2, 1);
    let x = image(1, 8);
    let cond = StageCondition::super_res(2, prompt(), 1.0, sr(4, 0.05));
    let cfg = IterInvConfig {
        update: IterInvUpdate::MappedState,
        ..Default::default()
    };
    let tr = iterinv_stage(&model, &sched, &grid, &x, &cond, &cfg).unwrap();
    assert_eq!(tr.states.len(), 5);
    assert!(tr.states.iter().all(|s| s.is_finite()));
}

#[test]
fn guidance_and_conditioning_contracts() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 4).unwrap();
    let x = image(1, 8);
    let m1 = small_net(1, 1);
    // stage 1 with a conditioning image, stage 2 without
    let bad = StageCondition {
        sr: Some(sr(4, 0.0)),
        ..StageCondition::base(prompt(), 1.0)
    };
    assert!(ddim_invert(&m1, &sched, &grid, &x, &bad).is_err());
    let bad2 = StageCondition {
        stage: 2,
        ..StageCondition::base(prompt(), 1.0)
    };
    assert!(iterinv_stage(&small_net(2, 1), &sched, &grid, &x, &bad2, &IterInvConfig::default()).is_err());
    let cfg = IterInvConfig {
        inner_steps: 0,
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn replay_rejects_mismatched_models() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 4).unwrap();
    let x = image(1, 8);
    let m1 = small_net(1, 1);
    let tr = ddim_invert(&m1, &sched, &grid, &x, &StageCondition::base(prompt(), 3.0)).unwrap();
    let wide: DenoiserModel = ConvNet::init(ConvNetMeta::new(3, 0, 5).with_widths([2, 2, 2]), 0).unwrap().into();
    assert!(matches!(replay_reconstruction(&tr, &wide, &sched), Err(Error::TraceMismatch(_))));
    let sr_model = small_net(2, 1);
    assert!(matches!(replay_reconstruction(&tr, &sr_model, &sched), Err(Error::TraceMismatch(_))));
    let other = NoiseSchedule::linear(500, 1e-4, 0.02).unwrap();
    assert!(matches!(replay_reconstruction(&tr, &m1, &other), Err(Error::TraceMismatch(_))));
}

#[test]
fn generated_traces_replay_exactly() {
    let sched = NoiseSchedule::default();
    let grid = TimestepGrid::evenly_spaced(1000, 6).unwrap();
    let model = small_net(2, 2);
    let noise = StateTensor::randn(8, 8, 3, &mut rng(9));
    let cond = StageCondition::super_res(2, prompt(), 2.0, sr(4, 0.05));
    let tr = generate_stage(&model, &sched, &grid, &noise, &cond).unwrap();
    assert_eq!(tr.noise(), &noise);
    assert_eq!(replay_trajectory(&tr, &model, &sched).unwrap(), tr.states);
}

#[test]
fn gaussian_oracle_inversion_error_shrinks_with_steps() {
    let sched = NoiseSchedule::default();
    let mean = image(20, 8);
    let model: DenoiserModel = GaussianOracle::new(sched.clone(), mean.clone(), 0.3, 8).unwrap().into();
    let x = mean.add(&image(21, 8).scale(0.3)).unwrap();
    let err = |t: usize| {
        let grid = TimestepGrid::evenly_spaced(1000, t).unwrap();
        let tr = ddim_invert(&model, &sched, &grid, &x, &StageCondition::base(prompt(), 1.0)).unwrap();
        replay_reconstruction(&tr, &model, &sched).unwrap().max_abs_diff(&x).unwrap()
    };
    let (coarse, fine) = (err(50), err(500));
    assert!(coarse < 0.05 && fine < 0.5 * coarse, "{coarse} {fine}");
}

mod files {
    use super::*;
    use proptest::prelude::*;

    fn sample_trace(seed: u64, t: usize, stage: usize) -> InversionTrace {
        let sched = NoiseSchedule::default();
        let grid = TimestepGrid::evenly_spaced(1000, t).unwrap();
        let model = small_net(stage, seed);
        let x = image(seed, 4);
        let cond = if stage == 1 {
            StageCondition::base(prompt(), 3.0)
        } else {
            StageCondition::super_res(stage, prompt(), 1.0, sr(2, 0.05))
        };
        let cfg = IterInvConfig {
            inner_steps: 2,
            record_history: seed % 2 == 0,
            ..Default::default()
        };
        if stage == 1 {
            null_text_invert(&model, &sched, &grid, &x, &cond, &NtiConfig::default()).unwrap()
        } else {
            iterinv_stage(&model, &sched, &grid, &x, &cond, &cfg).unwrap()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn trace_bytes_round_trip_bit_exactly(seed in 0u64..1000, t in 1usize..6, stage in 1usize..4) {
            let tr = sample_trace(seed, t, stage);
            let bytes = encode_trace(&tr).unwrap();
            let back = decode_trace(&bytes).unwrap();
            prop_assert_eq!(encode_trace(&back).unwrap(), bytes);
            prop_assert_eq!(back, tr);
        }
    }

    #[test]
    fn corrupt_traces_are_rejected() {
        let bytes = encode_trace(&sample_trace(1, 3, 2)).unwrap();
        let mut bad = bytes.clone();
        bad[3] ^= 1;
        assert!(decode_trace(&bad).is_err());
        assert!(decode_trace(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(decode_trace(&long).is_err());
        // T = huge
        let mut huge = bytes.clone();
        huge[24..32].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_trace(&huge).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.trace");
        let tr = sample_trace(2, 2, 1);
        save_trace(&p, &tr).unwrap();
        assert_eq!(load_trace(&p).unwrap(), tr);
    }
}
