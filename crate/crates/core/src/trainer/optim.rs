use crate::error::Result;
use crate::numerics::ParamSet;

/// SGD with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// g' = g + weight_decay * p
/// v  = momentum * v + g'      (v = g' on the first step)
/// p  = p - lr * v
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn plain(lr: f64) -> Self {
        Self::new(lr, 0.0, 0.0)
    }

    pub fn velocity(&self) -> Option<&[f64]> {
        self.velocity.as_deref()
    }

    pub fn step(&mut self, params: &ParamSet, grad: &ParamSet) -> Result<ParamSet> {
        params.check_same_manifest(grad, "SgdMomentum::step")?;
        let mut out = params.clone();
        let decayed: Vec<f64> = grad
            .values()
            .iter()
            .zip(params.values())
            .map(|(g, p)| if self.weight_decay == 0.0 { *g } else { g + self.weight_decay * p })
            .collect();
        let v = match self.velocity.take() {
            Some(mut v) if self.momentum != 0.0 => {
                for (vi, gi) in v.iter_mut().zip(&decayed) {
                    *vi = self.momentum * *vi + gi;
                }
                v
            }
            _ => decayed,
        };
        for (p, vi) in out.values_mut().iter_mut().zip(&v) {
            *p -= self.lr * vi;
        }
        self.velocity = Some(v);
        Ok(out)
    }
}
