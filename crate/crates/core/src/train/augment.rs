//! Training-time augmentation of focal-frame scenes.

use rand::Rng;

use crate::scene::{AgentHistory, Scene};

use super::TrainConfig;

/// Number of leading history steps the mask hides.
pub fn masked_steps(history_len: usize, fraction: f64) -> usize {
    (fraction * history_len as f64).floor() as usize
}

/// Hides the first `steps` history steps of every agent selected by `which`.
/// An agent observed only inside the masked window is left untouched.
pub fn mask_history(scene: &Scene, which: &[bool], steps: usize) -> Scene {
    let agents: Vec<AgentHistory> = scene
        .agents()
        .iter()
        .zip(which)
        .map(|(a, hide)| {
            let steps = steps.min(a.len());
            if !hide || steps == 0 || !a.validity()[steps..].iter().any(|v| *v) {
                return a.clone();
            }
            let mut validity = a.validity().to_vec();
            validity[..steps].fill(false);
            a.reencode(a.positions(), &validity).expect("a valid step remains")
        })
        .collect();
    scene.with_agents(agents)
}

/// Random flip across the x-axis, then a random mask of the early history
/// of each agent. Draws one flip decision and one mask decision per agent,
/// in agent order, whatever the outcomes, so the random stream advances by
/// a fixed amount per scene.
pub fn augment<R: Rng + ?Sized>(scene: &Scene, config: &TrainConfig, rng: &mut R) -> Scene {
    let flip = rng.random_bool(config.flip_prob);
    let which: Vec<bool> = scene
        .agents()
        .iter()
        .map(|_| rng.random_bool(config.mask_prob))
        .collect();
    let base = if flip { scene.reflected_y() } else { scene.clone() };
    if which.iter().any(|w| *w) {
        mask_history(&base, &which, masked_steps(scene.history_len(), config.mask_fraction))
    } else {
        base
    }
}
