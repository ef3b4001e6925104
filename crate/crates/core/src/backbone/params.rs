use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: shape/data mismatch"
        );
        assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            data,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            bufs: self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            params: self
                .params
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub bufs: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for buf in &mut self.bufs {
            for x in buf.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.bufs[id.0]
    }

    pub(crate) fn buf_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.bufs[id.0]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat ordered list of named `f32` parameter arrays.
///
/// Equality is bitwise on the values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParameterSnapshot {
    pub params: Vec<NamedArray>,
}

impl PartialEq for ParameterSnapshot {
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl ParameterSnapshot {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Snapshot restricted to parameters whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParameterSnapshot {
        ParameterSnapshot {
            params: self.params.iter().filter(|p| keep(&p.name)).cloned().collect(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}
