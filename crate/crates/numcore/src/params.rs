use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A named learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// All learnable parameters and non-learnable buffers of a model, by unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    param_index: BTreeMap<String, ParamId>,
    buffers: Vec<(String, RunningStats)>,
    buffer_index: BTreeMap<String, BufferId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.param_index.contains_key(&name) {
            return Err(NumError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.param_index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, stats: RunningStats) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_index.contains_key(&name) {
            return Err(NumError::DuplicateParameter(name));
        }
        let id = BufferId(self.buffers.len());
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push((name, stats));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).copied()
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut RunningStats {
        &mut self.buffers[id.0].1
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).copied()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.buffers.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.count_with_prefix("")
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        match p.grad.as_mut() {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
    }

    /// Copy every parameter and buffer of `other` whose name starts with `prefix`.
    /// Names must exist here with identical shapes.
    pub fn copy_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in other.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let id = self
                .id(&p.name)
                .ok_or_else(|| NumError::UnknownParameter(p.name.clone()))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(NumError::Shape {
                    op: "copy_from",
                    detail: format!("{}: {:?} vs {:?}", p.name, dst.value.shape(), p.value.shape()),
                });
            }
            dst.value = p.value.clone();
            copied += 1;
        }
        for (name, stats) in other.buffers.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let id = self
                .buffer_id(name)
                .ok_or_else(|| NumError::UnknownParameter(name.clone()))?;
            self.buffers[id.0].1 = stats.clone();
        }
        Ok(copied)
    }
}
