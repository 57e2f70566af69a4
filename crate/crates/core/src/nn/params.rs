use ndarray::{ArrayD, IxDyn, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An ordered, named collection of arrays.
///
/// Parameters, BN running statistics, gradients, optimizer velocity and
/// weight perturbations are all `ParamSet`s, so congruence is a single check on
/// names and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &ArrayD<T> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut ArrayD<T> {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[ArrayD<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| ArrayD::zeros(IxDyn(v.shape())))
                .collect(),
        }
    }

    pub fn n_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape(format!(
                "parameter sets have different entries ({} vs {})",
                self.len(),
                other.len()
            )));
        }
        for ((name, a), b) in self.names.iter().zip(&self.values).zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            Zip::from(a).and(b).for_each(|a, &b| *a += scale * b);
        }
        Ok(())
    }

    pub fn l2_norm(&self, i: usize) -> T {
        self.values[i].iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Converts every array to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::lit(x.to_f64_lossy())))
                .collect(),
        }
    }

    /// Order-sensitive FNV digest of the raw values, used to prove that
    /// read-only code paths leave parameters untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for x in v.iter() {
                h ^= x.to_f64_lossy().to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
