use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Learned by gradient descent.
    Trainable,
    /// Saved with the model but updated outside the optimizer (running statistics).
    Buffer,
}

/// A named weight array with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Scalar> Param<S> {
    pub fn filled(name: impl Into<String>, shape: &[usize], kind: ParamKind, fill: S) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
            value: vec![fill; len],
            grad: match kind {
                ParamKind::Trainable => vec![S::zero(); len],
                ParamKind::Buffer => Vec::new(),
            },
        }
    }

    /// He-normal initialisation with the given fan-in.
    pub fn he_normal(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::filled(name, shape, ParamKind::Trainable, S::zero());
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        for v in &mut p.value {
            let z: f64 = rng.sample(StandardNormal);
            *v = S::lit(z * std);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

/// Anything owning parameters. Visiting order is fixed and defines the
/// checkpoint layout.
pub trait HasParams<S: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.kind == ParamKind::Trainable {
                n += p.len();
            }
        });
        n
    }
}

/// Join a name prefix and a leaf name with a dot.
pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
