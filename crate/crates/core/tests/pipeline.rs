use fedmon_core::experiment::{DataMode, DataSource};
use fedmon_core::fedsim::{ClientData, GaussianMixture, MixtureSpec, Population};
use fedmon_core::monitor::replay_trace;
use fedmon_core::{
    AttackKind, AttackSpec, Attacker, Experiment, ExperimentConfig, Federation, LabelFlip, ModelSpec, NoiseScale,
    Preset, SeedTree, Statistic, TrainingConfig,
};

fn small_training() -> (TrainingConfig, Population, SeedTree) {
    let spec = MixtureSpec { classes: 4, dim: 8, separation: 4.0, noise_std: 1.0 };
    let seeds = SeedTree::new(21);
    let mix = GaussianMixture::new(spec, &mut seeds.stream("population", &[])).unwrap();
    let cfg = TrainingConfig {
        learning_rate: 0.1,
        epochs_per_round: 2,
        minibatch_size: 16,
        rounds: 30,
        client_count: 3,
        rng_seed: 21,
    };
    (cfg, Population::Mixture(mix), seeds)
}

fn federation(attack: AttackSpec) -> (Federation, Attacker, Population) {
    let (cfg, population, seeds) = small_training();
    let model = ModelSpec::Logistic { inputs: 8, classes: 4 }.build().unwrap();
    let clients = ClientData::Fresh { population: population.clone(), per_client: 48 };
    let fed = Federation::new(model, cfg, clients, seeds).unwrap();
    (fed, Attacker::new(attack, 4, seeds), population)
}

#[test]
fn fedavg_reduces_held_out_loss() {
    let (mut fed, mut hook, population) = federation(AttackSpec::none());
    let test = population.draw(500, &mut SeedTree::new(99).stream("data", &[])).unwrap();
    let before = fed.model().mean_loss(fed.global(), &test);
    let mut losses = vec![before];
    for _ in 0..30 {
        fed.run_round(&mut hook).unwrap();
        losses.push(fed.model().mean_loss(fed.global(), &test));
    }
    let after = *losses.last().unwrap();
    assert!(after < 0.5 * before, "loss {before} -> {after}");
    // Trend, not monotonicity: each block of 10 rounds improves on the previous.
    assert!(losses[10] < losses[0] && losses[20] < losses[10] && losses[30] < losses[20]);
}

fn twin_run(kind: AttackKind) {
    let attack = AttackSpec { kind, target_client: 2, start_round: 4 };
    let (mut clean, mut none, _) = federation(AttackSpec::none());
    let (mut dirty, mut hook, _) = federation(attack);
    // Before the attack starts, and for honest clients in the first attacked
    // round, transmissions are bit-identical.
    for t in 1..=4 {
        let a = clean.run_round(&mut none).unwrap();
        let b = dirty.run_round(&mut hook).unwrap();
        for k in 0..3 {
            let same = a.transmitted[k] == b.transmitted[k];
            if t < 4 || k != 1 {
                assert!(same, "round {t} client {} changed", k + 1);
            } else {
                assert!(!same, "attacked client unchanged in round {t}");
            }
        }
    }
}

#[test]
fn attacks_touch_only_the_target_from_start_round() {
    twin_run(AttackKind::ModelPoison { noise_mean: 0.0, noise_scale: 0.01, scale_is: NoiseScale::StdDev });
    twin_run(AttackKind::SamplePoison { noise_mean: 0.5, noise_scale: 1.0, scale_is: NoiseScale::Variance });
    twin_run(AttackKind::LabelFlip(LabelFlip { ratio: 1.0, source_class: 0, target_class: None }));
}

fn tiny_experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(Preset::Compact);
    c.model = ModelSpec::Logistic { inputs: 8, classes: 4 };
    c.data = DataSource::Synthetic {
        mixture: MixtureSpec { classes: 4, dim: 8, separation: 3.0, noise_std: 1.0 },
        samples_per_client: 32,
        mode: DataMode::Fresh,
    };
    c.training.learning_rate = 0.05;
    c.training.minibatch_size = 16;
    c.training.rounds = 200;
    c.phase1.rounds = 10;
    c.monitor.statistics = vec![Statistic::SubspaceResidual, Statistic::UpdateNorm];
    c.monitor.calibration_replications = 4_000;
    c
}

#[test]
fn strong_model_poisoning_is_caught_within_a_few_rounds() {
    let mut c = tiny_experiment();
    c.replications = 20;
    c.attack = AttackSpec {
        kind: AttackKind::ModelPoison { noise_mean: 0.0, noise_scale: 1.0, scale_is: NoiseScale::StdDev },
        target_client: 4,
        start_round: 11,
    };
    let report = Experiment::new(c).unwrap().run(None).unwrap();
    let s = report.summary(Statistic::SubspaceResidual).unwrap();
    assert_eq!(s.alarmed, 20);
    // With the attacked client always ranked last, the chart climbs by
    // E[Z | rank K] − d/2 per round; a handful of rounds reach H.
    assert!(s.mean_run_length.unwrap() <= 6.0, "{s:?}");
    assert!(s.correct_rate.unwrap() >= 0.95, "{s:?}");
}

#[test]
fn traces_replay_through_the_recursion() {
    let mut c = tiny_experiment();
    c.monitor.limit = Some(3.0);
    c.replications = 3;
    let exp = Experiment::new(c.clone()).unwrap();
    for r in 0..3 {
        let run = exp.run_replication(r).unwrap();
        for trace in &run.traces {
            let rep = replay_trace(trace, c.monitor.reference, 3.0, c.monitor.allowance, false);
            assert!(rep.is_consistent(), "{:?}", rep.violation);
            assert_eq!(rep.max_abs_error, 0.0);
        }
    }
}

#[test]
fn reset_mode_keeps_monitoring_after_alarms() {
    let mut c = tiny_experiment();
    c.monitor.limit = Some(2.0);
    c.monitor.after_alarm = fedmon_core::experiment::AfterAlarm::Reset;
    c.monitor.exclude_flagged = true;
    c.training.rounds = 80;
    let run = Experiment::new(c.clone()).unwrap().run_replication(0).unwrap();
    let trace = &run.traces[0];
    assert_eq!(trace.len(), 70);
    assert!(run.report.detections[0].alarms > 1);
    let rep = replay_trace(trace, c.monitor.reference, 2.0, c.monitor.allowance, true);
    assert!(rep.is_consistent(), "{:?}", rep.violation);
}

#[test]
fn same_config_gives_same_report() {
    let mut c = tiny_experiment();
    c.replications = 3;
    let a = Experiment::new(c.clone()).unwrap().run_with_threads(None, 1).unwrap();
    let b = Experiment::new(c.clone()).unwrap().run_with_threads(None, 3).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    c.seed += 1;
    let d = Experiment::new(c).unwrap().run(None).unwrap();
    assert_ne!(a.replications, d.replications);
}
