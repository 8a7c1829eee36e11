use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvSpec, LayerGraph};
use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::tensor::{Real, Tensor};

/// Convolution parameters keyed by layer id, in graph order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    ids: Vec<String>,
    convs: Vec<ConvParams<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn zeros(specs: &[ConvSpec]) -> Self {
        ParamStore {
            ids: specs.iter().map(|s| s.id.clone()).collect(),
            convs: specs.iter().map(|s| ConvParams::zeros(s.k, s.c_in, s.c_out)).collect(),
        }
    }

    pub fn from_parts(ids: Vec<String>, convs: Vec<ConvParams<T>>) -> Result<Self> {
        if ids.len() != convs.len() {
            return Err(Error::Config("parameter ids and tensors differ in count".into()));
        }
        Ok(ParamStore { ids, convs })
    }

    pub fn len(&self) -> usize {
        self.convs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.convs.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn convs(&self) -> &[ConvParams<T>] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvParams<T>] {
        &mut self.convs
    }

    pub fn get(&self, id: &str) -> Option<&ConvParams<T>> {
        self.ids.iter().position(|i| i == id).map(|p| &self.convs[p])
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvParams::param_count).sum()
    }

    /// Every value, layer by layer, weight before bias.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.convs {
            out.extend_from_slice(c.weight.data());
            out.extend_from_slice(c.bias.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                what: "flat parameter vector".into(),
                expected: vec![self.param_count()],
                got: vec![values.len()],
            });
        }
        let mut at = 0;
        for c in &mut self.convs {
            let n = c.weight.len();
            c.weight.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
            let n = c.bias.len();
            c.bias.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Named `(weight, bias)` tensors, for checkpoints and reports.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.len());
        for (id, c) in self.ids.iter().zip(&self.convs) {
            out.push((format!("{id}.weight"), &c.weight));
            out.push((format!("{id}.bias"), &c.bias));
        }
        out
    }

    /// Id of the first layer holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.ids
            .iter()
            .zip(&self.convs)
            .find(|(_, c)| c.weight.data().iter().chain(c.bias.data()).any(|v| !v.is_finite()))
            .map(|(id, _)| id.as_str())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            ids: self.ids.clone(),
            convs: self.convs.iter().map(ConvParams::cast).collect(),
        }
    }

    /// Bit-level equality, treating NaNs by their bit pattern.
    pub fn bitwise_eq(&self, other: &ParamStore<T>) -> bool {
        self.ids == other.ids && {
            let (a, b) = (self.flatten(), other.flatten());
            a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        }
    }
}

/// Uniform initialization in `±sqrt(6 / fan_in)` with zero biases,
/// deterministic in `seed`. Values are drawn in f64 and rounded to `T`, so
/// f32 and f64 stores from one seed agree up to rounding.
pub fn init_params<T: Real>(graph: &LayerGraph, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::zeros(graph.convs());
    for (spec, conv) in graph.convs().iter().zip(store.convs.iter_mut()) {
        let bound = (6.0 / spec.fan_in() as f64).sqrt();
        for v in conv.weight.data_mut() {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
    }
    store
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::mesh::{Layout, MeshShape};
    use crate::unet::{build, UNetConfig};

    fn graph() -> LayerGraph {
        let cfg = UNetConfig::new(8, vec![4, 8]).with_convs_per_block(2);
        build(&cfg, Arc::new(MeshShape::parse("x=1").unwrap()), &Layout::replicated()).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let g = graph();
        let a: ParamStore<f32> = init_params(&g, 3);
        assert!(a.bitwise_eq(&init_params(&g, 3)));
        assert_ne!(a.flatten(), init_params::<f32>(&g, 4).flatten());
        assert!(a.convs().iter().all(|c| c.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_bound() {
        let g = graph();
        let p: ParamStore<f64> = init_params(&g, 11);
        // enc0.conv1 has k = 3, c_in = 4.
        let c = p.get("enc0.conv1").unwrap();
        assert_eq!(c.c_in(), 4);
        let bound = (6.0f64 / 108.0).sqrt();
        assert!(c.weight.data().iter().all(|v| v.abs() <= bound));
        assert!(c.weight.max_abs() > 0.5 * bound);
    }

    #[test]
    fn flat_roundtrip() {
        let g = graph();
        let p: ParamStore<f64> = init_params(&g, 1);
        let mut q = ParamStore::zeros(g.convs());
        q.assign_flat(&p.flatten()).unwrap();
        assert!(p.bitwise_eq(&q));
        assert!(q.assign_flat(&[1.0]).is_err());
    }
}
