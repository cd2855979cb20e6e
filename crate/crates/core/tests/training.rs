//! Training loop behaviour on a tiny copy task.

use bisync_core::model::{train, ModelConfig, TrainConfig, TrainLogRecord};
use bisync_core::protocol::{EncodedExample, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn copy_task(n: usize) -> Vec<EncodedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..6);
            let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(10..30)).collect();
            let mut src = ids.clone();
            src.push(9);
            EncodedExample { source_ids: src, target_ids: ids, task: TaskKind::Trn }
        })
        .collect()
}

fn tiny() -> ModelConfig {
    ModelConfig { d_model: 32, n_layers: 1, n_heads: 2, d_ff: 64, max_positions: 32, ..ModelConfig::desk(30) }
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        warmup_steps: 20,
        tokens_per_batch: 256,
        total_steps: steps,
        checkpoint_every: 10,
        keep_last: 3,
        log_every: 10,
        lr_scale: 2.0,
        ..TrainConfig::default()
    }
}

fn run(steps: usize) -> (Vec<TrainLogRecord>, Vec<f32>) {
    let out = train(&tiny(), &cfg(steps), &copy_task(400), None, &mut |_| {}).unwrap();
    (out.log, out.averaged.data)
}

#[test]
fn same_seed_gives_identical_losses() {
    let (a, pa) = run(30);
    let (b, pb) = run(30);
    let la: Vec<f64> = a.iter().map(|r| r.loss).collect();
    let lb: Vec<f64> = b.iter().map(|r| r.loss).collect();
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn loss_decreases_and_lr_follows_the_schedule() {
    let (log, _) = run(120);
    let first = log.first().unwrap().loss;
    let last = log.last().unwrap().loss;
    assert!(last < 0.85 * first, "{first} -> {last}");
    let peak = log.iter().map(|r| r.lr).fold(0.0, f64::max);
    assert!((log[1].lr - peak).abs() < 1e-12, "peak at warmup end (step 20)");
    assert!(log.last().unwrap().lr < peak);
}

#[test]
fn checkpoints_on_disk_and_averaging() {
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..cfg(40) };
    let out = train(&tiny(), &c, &copy_task(200), None, &mut |_| {}).unwrap();
    assert_eq!(out.checkpoints.len(), 3);
    let steps: Vec<usize> = out.checkpoints.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, [20, 30, 40]);
    let mut files: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files, ["checkpoint_0000020.bin", "checkpoint_0000030.bin", "checkpoint_0000040.bin"]);
    let i = 17;
    let mean = out.checkpoints.iter().map(|(_, p)| p.data[i] as f64).sum::<f64>() / 3.0;
    assert!((out.averaged.data[i] as f64 - mean).abs() < 1e-6);
}

#[test]
fn warm_start_rejects_mismatched_shapes() {
    let other = ModelConfig { d_model: 16, ..tiny() };
    let init = bisync_core::model::TransformerParams::init(&other, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(train(&tiny(), &cfg(5), &copy_task(20), Some(init), &mut |_| {}).is_err());
}
