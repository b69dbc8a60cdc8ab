use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Registry of every named parameter of a model. Names are hierarchical
/// (`decoder/block0/glu/w`) and unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name '{name}'")));
        }
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::invalid(format!(
                "parameter '{name}' has shape {shape:?} but {} values",
                value.len()
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn num_scalars_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Adds gradients collected by [`super::Ctx::param_grads`].
    pub fn add_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    /// Overwrites values from checkpoint records. Every parameter must be
    /// present with a matching shape; extra records are ignored.
    pub fn load_records(&mut self, records: &[super::Record]) -> Result<()> {
        let by_name: HashMap<&str, &super::Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut missing = Vec::new();
        for p in &mut self.params {
            match by_name.get(p.name.as_str()) {
                Some(r) if r.shape == p.shape => p.value.clone_from(&r.values),
                Some(r) => missing.push(format!("{}: shape {:?} in file, {:?} expected", p.name, r.shape, p.shape)),
                None => missing.push(format!("{}: not in checkpoint", p.name)),
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("checkpoint mismatch: {}", missing.join("; "))))
        }
    }

    pub fn to_records(&self) -> Vec<super::Record> {
        self.params
            .iter()
            .map(|p| super::Record {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.value.clone(),
            })
            .collect()
    }
}
