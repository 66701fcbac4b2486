mod common;

use common::*;
use ndarray::Array2;

use dse_core::cvgae::{contrastive_loss_value, train_generator, Cvgae, GeneratorConfig};
use dse_core::graph::EdgeMask;
use dse_core::nn::Checkpoint;

fn cfg(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        encode_dim: 8,
        critic_dim: 8,
        node_id_dim: 16,
        batch_size: 16,
        learning_rate: 3e-3,
        adversarial_weight: 1.0,
        max_epochs: 12,
        seed,
        ..Default::default()
    }
}

#[test]
fn training_reduces_reconstruction_loss() {
    let data = small_tr3(48, 1);
    let t = train_generator(&data, &cfg(0)).unwrap();
    assert_eq!(t.losses.len(), 12);
    let first = t.losses[0].vae;
    let last = t.losses.last().unwrap().vae;
    assert!(last < 0.8 * first, "vae loss {first} -> {last}");
    assert!(t.losses.iter().all(|l| l.total.is_finite() && l.discriminator.is_finite()));
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = small_tr3(24, 2);
    let short = GeneratorConfig { max_epochs: 2, ..cfg(5) };
    let a = train_generator(&data, &short).unwrap();
    let b = train_generator(&data, &short).unwrap();
    assert_eq!(a.generator.params, b.generator.params);
    assert_eq!(a.losses, b.losses);
    let c = train_generator(&data, &GeneratorConfig { seed: 6, ..short }).unwrap();
    assert_ne!(a.generator.params, c.generator.params);
}

#[test]
fn trained_generator_checkpoint_reproduces_probabilities() {
    let data = small_tr3(12, 3);
    let t = train_generator(&data, &GeneratorConfig { max_epochs: 1, ..cfg(1) }).unwrap();
    let back = Cvgae::from_checkpoint(&Checkpoint::from_bytes(&t.generator.to_checkpoint().to_bytes()).unwrap()).unwrap();
    let g = &data[0];
    let m = EdgeMask::ground_truth(g).unwrap();
    use dse_core::cvgae::SurrogateGenerator;
    let a = t.generator.condition(g, &m).unwrap().mean();
    let b = back.condition(g, &m).unwrap().mean();
    assert_eq!(a, b);
}

#[test]
fn contrastive_loss_rewards_class_clusters() {
    let labels = [0, 0, 1, 1, 2, 2];
    let clustered = Array2::from_shape_fn((6, 3), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
    let mixed = Array2::from_shape_fn((6, 3), |(i, j)| if (i + 1) % 3 == j { 1.0 } else { 0.0 });
    let tau = 0.5;
    assert!(contrastive_loss_value(&clustered, &labels, tau) < contrastive_loss_value(&mixed, &labels, tau));
    // Sharper temperatures push a clustered batch further towards zero loss.
    let losses: Vec<f64> = [1.0, 0.5, 0.1]
        .iter()
        .map(|&t| contrastive_loss_value(&clustered, &labels, t))
        .collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[2] < 1e-3);
    // Each anchor has one positive among five others; identical embeddings give ln 5.
    let flat = Array2::ones((6, 3));
    assert!((contrastive_loss_value(&flat, &labels, tau) - 5f64.ln()).abs() < 1e-12);
}
