use std::sync::Arc;

use super::{Tape, Tensor, TensorError, Var};

/// Named, ordered collection of `f32` parameter tensors.
///
/// Values sit behind `Arc` so binding them onto a tape is free; updates go
/// through [`Arc::make_mut`], which only copies while a tape still holds a
/// reference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor<f32>>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor<f32> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn shared(&self, i: usize) -> Arc<Tensor<f32>> {
        Arc::clone(&self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Whether two sets hold the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Place every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param_shared(Arc::clone(v))
                } else {
                    tape.constant_shared(Arc::clone(v))
                }
            })
            .collect()
    }

    /// Bind into an `f64` shadow tape (always trainable).
    pub fn bind_f64(&self, tape: &mut Tape<f64>) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.cast())).collect()
    }

    /// Replace the value at `i`, checking the shape.
    pub fn set(&mut self, i: usize, value: Tensor<f32>) -> Result<(), TensorError> {
        if value.shape() != self.values[i].shape() {
            return Err(TensorError::Shape {
                op: "param_set",
                detail: format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    value.shape()
                ),
            });
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    /// All parameters flattened into one vector in registration order.
    pub fn flatten(&self) -> Vec<f32> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }
}
