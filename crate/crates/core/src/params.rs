//! Uniform traversal over model parameters.
//!
//! Every trainable struct lists its tensors in a fixed order. Gradients and
//! optimizer moments are stored in structs of the same type as the model, so
//! the same traversal lines them up element for element.

use ndarray::{ArrayViewD, ArrayViewMutD};

pub struct NamedTensor<'a> {
    pub name: String,
    pub value: ArrayViewD<'a, f64>,
}

pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>);

    fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|t| t.value.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A copy of `model` with every parameter set to zero.
pub fn zeros_like<T: Parameters + Clone>(model: &T) -> T {
    let mut out = model.clone();
    for mut t in out.tensors_mut() {
        t.fill(0.0);
    }
    out
}

/// `acc += other`, parameter by parameter.
pub fn accumulate<T: Parameters>(acc: &mut T, other: &T) {
    let src = other.named_tensors();
    for (mut dst, src) in acc.tensors_mut().into_iter().zip(src) {
        dst += &src.value;
    }
}

pub fn scale<T: Parameters>(model: &mut T, factor: f64) {
    for mut t in model.tensors_mut() {
        t.mapv_inplace(|v| v * factor);
    }
}

/// Flattened copy of all parameters in traversal order.
pub fn flatten<T: Parameters>(model: &T) -> Vec<f64> {
    model
        .named_tensors()
        .iter()
        .flat_map(|t| t.value.iter().copied())
        .collect()
}

pub fn l2_norm<T: Parameters>(model: &T) -> f64 {
    model
        .named_tensors()
        .iter()
        .flat_map(|t| t.value.iter().map(|v| v * v))
        .sum::<f64>()
        .sqrt()
}
