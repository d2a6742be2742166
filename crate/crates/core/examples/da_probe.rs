//! Trains the toy detector with and without domain adaptation for a few
//! seeds and prints the held-out probe accuracy of each run.

use podcount::adversarial::{count_mae, DaExperiment};
use podcount::detection::Domain;
use rand::SeedableRng;

fn main() -> podcount::Result<()> {
    let mut exp = DaExperiment::default();
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    if let Some(v) = env("LR_DET") { exp.sgd.lr_detector = v; }
    if let Some(v) = env("LR_DIS") { exp.sgd.lr_discriminator = v; }
    if let Some(v) = env("STEPS") { exp.steps = v as usize; }
    if let Some(v) = env("BATCH") { exp.batch_size = v as usize; }
    if let Some(v) = env("HIDDEN") { exp.discriminator_hidden = v as usize; }
    if let Some(v) = env("TOPK") { exp.roi.top_k = v as usize; }
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let seeds = if seeds.is_empty() { vec![1, 2, 3, 4, 5] } else { seeds };
    for seed in seeds {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        let eval_src = exp.task.batch(Domain::Source, 64, &mut rng);
        let eval_tgt = exp.task.batch(Domain::Target, 64, &mut rng);
        for adapt in [false, true] {
            let t = std::time::Instant::now();
            let out = exp.train(seed, adapt)?;
            let acc = exp.probe(&out.detector, seed)?;
            let last = out.log.last().map(|e| e.losses);
            let seed_mae = |v: &[podcount::adversarial::ToySample]| {
                v.iter()
                    .map(|s| {
                        let p = podcount::detection::count_from_detections(&out.detector.detect_array(&s.image));
                        let g = podcount::detection::count_from_detections(&s.labels);
                        (p.seed_count as f64 - g.seed_count as f64).abs()
                    })
                    .sum::<f64>()
                    / v.len() as f64
            };
            println!("   seed mae src {:.2} tgt {:.2}", seed_mae(&eval_src), seed_mae(&eval_tgt));
            println!(
                "seed {seed} adapt {adapt:5}: probe acc {acc:.3}  mae src {:.2} tgt {:.2}  last {:?}  ({:.1}s)",
                count_mae(&out.detector, &eval_src),
                count_mae(&out.detector, &eval_tgt),
                last,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
