//! Random bilevel states for checking that a tiny meta step never raises
//! the meta loss seen through the pseudo update.

use metabalance::models::{ClassifierConfig, WeightNetConfig};
use metabalance::trainer::{Batch, Problem, SgdMomentum, Weighting};

use super::{meta_loss_after_step, to_matrix, Stream};

pub struct Outcome {
    pub before: f64,
    pub after: f64,
}

/// One random state: draws sizes, nets and batches from `seed`, takes a
/// plain meta step with learning rate `beta`, and evaluates the meta loss
/// before and after with the oracle.
pub fn meta_step_on_random_state(seed: u64, beta: f64) -> Outcome {
    let mut s = Stream::new(seed);
    let d = 2 + s.below(6);
    let c = 2 + s.below(4);
    let n = c + s.below(4);
    let m = c + s.below(4);
    let hidden = 2 + s.below(8);
    let alpha = s.range(0.05, 2.0);
    let cls = ClassifierConfig {
        input_dim: d,
        hidden_sizes: vec![hidden],
        num_classes: c,
        seed: s.next_u64(),
    };
    let net = WeightNetConfig {
        num_classes: c,
        hidden_sizes: vec![2 + s.below(8)],
        scalar_mode: false,
        seed: s.next_u64(),
    };
    let theta = cls.init_params();
    let phi = net.init_params();
    let (x, y) = (s.matrix(n, d, -1.5, 1.5), s.labels(n, c));
    let (xm, ym) = (s.matrix(m, d, -1.5, 1.5), s.labels(m, c));
    let problem = Problem {
        classifier: cls,
        weighting: Weighting::Learned(net),
    };
    let batch = Batch { x: to_matrix(&x), y: to_matrix(&y) };
    let meta = Batch { x: to_matrix(&xm), y: to_matrix(&ym) };
    let update = problem
        .meta_update_phi(&theta, &phi, &batch, &meta, alpha, &mut SgdMomentum::plain(beta))
        .unwrap();
    Outcome {
        before: meta_loss_after_step(&theta, &phi, &x, &y, &xm, &ym, alpha),
        after: meta_loss_after_step(&theta, &update.phi, &x, &y, &xm, &ym, alpha),
    }
}
