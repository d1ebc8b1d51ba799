use ndarray::Array2;
use rand::Rng;

/// Index of a parameter matrix in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// `U(−1/√fan_in, 1/√fan_in)` weights scaled by `gain`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: (usize, usize), gain: f64, rng: &mut impl Rng) -> ParamId {
        let bound = gain / (shape.0 as f64).sqrt();
        let value = Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.values.iter_mut()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Replaces every matrix, requiring identical names and shapes.
    pub fn replace_values(&mut self, values: Vec<Array2<f64>>) -> Result<(), String> {
        if values.len() != self.values.len() {
            return Err(format!("expected {} parameter matrices, got {}", self.values.len(), values.len()));
        }
        for ((name, cur), new) in self.names.iter().zip(&self.values).zip(&values) {
            if cur.dim() != new.dim() {
                return Err(format!("parameter {name}: expected shape {:?}, got {:?}", cur.dim(), new.dim()));
            }
        }
        self.values = values;
        Ok(())
    }
}
