use serde::{Deserialize, Serialize};

use super::layer::{Cache, Layer, LayerSpec, Mode};
use super::tensor::Tensor;
use super::Parameters;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// A chain of layers run in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Checks that channel/feature widths agree along a chain of specs.
pub fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    let mut width: Option<usize> = None;
    for (i, spec) in specs.iter().enumerate() {
        let (needs, produces) = match *spec {
            LayerSpec::Conv3d { in_ch, out_ch, .. } => (Some(in_ch), Some(out_ch)),
            LayerSpec::Batchnorm3d { channels, .. } => (Some(channels), Some(channels)),
            LayerSpec::Linear { input, output } => (Some(input), Some(output)),
            _ => (None, width),
        };
        if let (Some(have), Some(need)) = (width, needs) {
            if have != need {
                return Err(Error::Config(format!(
                    "layer {i} ({}) expects width {need}, previous layer produces {have}",
                    spec.name()
                )));
            }
        }
        width = produces;
    }
    Ok(())
}

impl Sequential {
    /// Initializes every layer from an independent stream of `seed`.
    pub fn new(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_chain(specs)?;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &spec)| Layer::init(spec, &mut rng_for(seed, &[0x1A, i as u64])))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        validate_chain(&layers.iter().map(|l| l.spec).collect::<Vec<_>>())?;
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.spec.output_shape(&shape))
    }

    /// Forward pass; each layer's dropout stream is derived from `seed`.
    pub fn forward(
        &mut self,
        input: &Tensor,
        mode: Mode,
        seed: u64,
    ) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (y, cache) = layer.forward(&x, mode, derive_seed(seed, &[i as u64]))?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Backward pass; returns the input gradient and per-layer parameter gradients.
    pub fn backward(
        &self,
        caches: &[Cache],
        grad_out: &Tensor,
    ) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::Input(format!(
                "expected {} caches, got {}",
                self.layers.len(),
                caches.len()
            )));
        }
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (gi, pg) = layer.backward(cache, &g)?;
            grads[i] = pg;
            g = gi;
        }
        Ok((g, grads))
    }
}

impl Parameters for Sequential {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_validation_catches_channel_mismatch() {
        let ok = [
            LayerSpec::conv3d(1, 4, 3),
            LayerSpec::Relu,
            LayerSpec::batchnorm3d(4),
            LayerSpec::GlobalAvgPool,
            LayerSpec::linear(4, 2),
        ];
        assert!(validate_chain(&ok).is_ok());
        let bad = [LayerSpec::conv3d(1, 4, 3), LayerSpec::batchnorm3d(5)];
        assert!(validate_chain(&bad).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let specs = [LayerSpec::linear(3, 2)];
        assert_eq!(
            Sequential::new(&specs, 1).unwrap(),
            Sequential::new(&specs, 1).unwrap()
        );
        assert_ne!(
            Sequential::new(&specs, 1).unwrap(),
            Sequential::new(&specs, 2).unwrap()
        );
    }

    #[test]
    fn infer_matches_eval_forward() {
        let specs = [
            LayerSpec::conv3d(1, 2, 3),
            LayerSpec::Relu,
            LayerSpec::batchnorm3d(2),
            LayerSpec::Maxpool3d,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dropout { p: 0.3 },
            LayerSpec::linear(2, 1),
        ];
        let mut net = Sequential::new(&specs, 4).unwrap();
        let x = Tensor::new(
            vec![2, 1, 4, 4, 4],
            (0..128).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let (a, _) = net.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(net.infer(&x).unwrap(), a);
        assert_eq!(net.output_shape(&[2, 1, 4, 4, 4]).unwrap(), vec![2, 1]);
    }
}
