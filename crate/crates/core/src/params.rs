//! Named-tensor view over parameter structs, used by the optimizer,
//! flattening for merges, and checkpoint payloads.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A fixed, ordered set of named tensors.
///
/// `tensors` and `tensors_mut` must list the same tensors in the same order;
/// that order is the manifest order.
pub trait ParamSet<T: Scalar> {
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[T])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])>;

    fn manifest(&self) -> Vec<TensorSpec> {
        let mut offset = 0;
        self.tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                let spec = TensorSpec { name: name.to_string(), shape, offset };
                offset += data.len();
                spec
            })
            .collect()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Concatenation of every tensor in manifest order.
    fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, _, d) in self.tensors() {
            out.extend_from_slice(d);
        }
        out
    }

    /// Overwrites every tensor from `flat` (manifest order). Lengths must match.
    fn load_flat(&mut self, flat: &[T]) {
        let mut offset = 0;
        for (_, d) in self.tensors_mut() {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        }
        assert_eq!(offset, flat.len(), "flat vector length disagrees with the manifest");
    }

    fn all_finite(&self) -> Result<(), &'static str> {
        for (name, _, d) in self.tensors() {
            if d.iter().any(|x| !x.is_finite()) {
                return Err(name);
            }
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    fn add_assign_from(&mut self, other: &Self) {
        let src = other.to_flat();
        let mut offset = 0;
        for (_, d) in self.tensors_mut() {
            for (a, &b) in d.iter_mut().zip(&src[offset..]) {
                *a += b;
            }
            offset += d.len();
        }
    }

    fn scale(&mut self, k: T) {
        for (_, d) in self.tensors_mut() {
            d.iter_mut().for_each(|x| *x *= k);
        }
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }
}
