mod common;

use std::time::Instant;

use common::synthetic_batch;
use dfkit_core::models::{Model, ModelConfig, ModelKind, Scale};
use dfkit_core::optim::{train_step, Adam, AdamConfig};

#[test]
fn desk_models_memorise_one_batch() {
    let batch = synthetic_batch(11);
    for kind in ModelKind::ALL {
        let start = Instant::now();
        let mut model = Model::build(ModelConfig::new(kind, Scale::Desk), 3).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let mut last = f64::INFINITY;
        let mut steps = 0;
        for step in 0..500 {
            last = train_step(&mut model, &mut adam, &batch, step).unwrap().loss;
            steps = step + 1;
            if last < 0.01 {
                break;
            }
        }
        println!(
            "{kind}: loss {last:.5} after {steps} steps in {:.1}s",
            start.elapsed().as_secs_f64()
        );
        assert!(last < 0.01, "{kind} stalled at {last}");
    }
}
