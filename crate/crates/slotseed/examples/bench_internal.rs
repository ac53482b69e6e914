//! Rough timing breakdown of one training step's stages.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slotseed::config::RunConfig;
use slotseed::datasynth::{generate_scene, SynthConfig};
use slotseed::scene::{reconstruction_loss, Model};
use slotseed::slotinit::{InitMethod, MappingVariant};
use slotseed::tape::Tape;

fn main() {
    let config = RunConfig {
        method: InitMethod::Meanshift,
        mapping: MappingVariant::SharedMlp,
        k: 5,
        d: 32,
        image_size: 32,
        iterations_train: 3,
        sigma: Some(0.0312),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::init(&mut rng, &config).unwrap();
    model.sigma = 0.0312;
    model.epsilon = 0.0156;
    let scene = generate_scene(
        &mut ChaCha8Rng::seed_from_u64(1),
        &SynthConfig::default(),
    )
    .unwrap();

    for round in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let vals = model.register(&mut tape);
        let t_reg = t0.elapsed();

        let t1 = Instant::now();
        let built = model
            .build_forward(&mut tape, &vals, &scene.image, 3, &mut rng, None)
            .unwrap();
        let t_fwd = t1.elapsed();

        let t2 = Instant::now();
        let n = 32 * 32;
        let target = tape.constant(vec![n, 3], scene.image.data().to_vec());
        let loss = reconstruction_loss(&mut tape, built.reconstruction, target).unwrap();
        tape.backward(loss).unwrap();
        let t_bwd = t2.elapsed();
        println!(
            "round {round}: register {:?}  forward {:?}  backward {:?}  nodes {}  clustering_iters {}  k {}",
            t_reg,
            t_fwd,
            t_bwd,
            tape.len(),
            built.diagnostics.clustering_iterations,
            built.diagnostics.discovered_k,
        );
    }
}
