use pathonet::model::build_pathonet;
use pathonet::density::DensityMap;
use pathonet::tensor::{LrSchedule, Tensor};
use pathonet::train::{mean_loss, Sample, TrainConfig, Trainer};

fn samples() -> Vec<Sample> {
    (0..3)
        .map(|i| {
            let image = Tensor::new(vec![3, 16, 16], (0..768).map(|k| ((k * (i + 3)) % 17) as f32 / 17.0).collect()).unwrap();
            let mut target = DensityMap::zeros(16, 16);
            target.channel_mut(pathonet::annotation::CellClass::Immunopositive)[i * 40 + 5] = 1.0;
            Sample { image, target }
        })
        .collect()
}

#[test]
fn fit_logs_schedule_and_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        schedule: LrSchedule {
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 2,
        },
        seed: 7,
        shuffle: true,
    };
    let run = || {
        let mut t = Trainer::new(build_pathonet(&[2, 4, 8, 16], 1).unwrap());
        let logs = t.fit(&samples(), &cfg, |_| {}).unwrap();
        (logs, t.params)
    };
    let (logs, params) = run();
    assert_eq!(logs.len(), 4);
    let lrs: Vec<f64> = logs.iter().map(|l| l.lr).collect();
    for (got, want) in lrs.iter().zip([1e-3, 1e-3, 1e-4, 1e-4]) {
        assert!((got - want).abs() < 1e-15);
    }
    assert!(logs.iter().all(|l| l.steps == 2 && l.mean_loss.is_finite()));
    let (logs2, params2) = run();
    assert_eq!(params, params2);
    assert_eq!(logs.iter().map(|l| l.mean_loss).collect::<Vec<_>>(), logs2.iter().map(|l| l.mean_loss).collect::<Vec<_>>());
}

#[test]
fn training_lowers_the_loss() {
    let data = samples();
    let mut t = Trainer::new(build_pathonet(&[2, 4, 8, 16], 2).unwrap());
    let before = mean_loss(&t.params, &data).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 3,
        schedule: LrSchedule {
            base_lr: 3e-3,
            decay_factor: 1.0,
            decay_every: 10,
        },
        seed: 0,
        shuffle: false,
    };
    t.fit(&data, &cfg, |_| {}).unwrap();
    let after = mean_loss(&t.params, &data).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}
