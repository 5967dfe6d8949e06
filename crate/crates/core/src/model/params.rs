use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::tensor::{BatchStats, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// `(C_out, C_in, k)`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `(K_out, K_in)`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: BatchStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub convs: Vec<ConvParams>,
    /// One per conv when batch norm is enabled, else empty.
    pub norms: Vec<NormParams>,
    /// 1x1 projection when the block changes the row count.
    pub skip: Option<ConvParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    pub projection: DenseParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub hidden: Vec<DenseParams>,
    pub output: DenseParams,
}

/// Encoder weights (one copy, or one per channel for independent encoders)
/// and classifier weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoders: Vec<EncoderParams>,
    pub classifier: ClassifierParams,
}

fn glorot<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl ConvParams {
    fn init<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot(vec![c_out, c_in, k], c_in * k, c_out * k, rng),
            bias: Tensor::zeros(vec![c_out]),
        }
    }
}

impl DenseParams {
    fn init<R: Rng + ?Sized>(k_out: usize, k_in: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot(vec![k_out, k_in], k_in, k_out, rng),
            bias: Tensor::zeros(vec![k_out]),
        }
    }
}

impl NormParams {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::from_vec(vec![1.0; c]),
            beta: Tensor::zeros(vec![c]),
            running: BatchStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            },
        }
    }
}

impl ModelParams {
    /// Glorot-uniform weights, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// and zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let enc = &config.encoder;
        let encoders = (0..config.num_encoders())
            .map(|_| {
                let mut rows = config.input_rows();
                let mut blocks = Vec::with_capacity(enc.num_blocks);
                for b in 0..enc.num_blocks {
                    let filters = enc.filters(b);
                    let convs = (0..3)
                        .map(|layer| {
                            let c_in = if layer == 0 { rows } else { filters };
                            ConvParams::init(filters, c_in, enc.kernel(layer), rng)
                        })
                        .collect();
                    let norms = if enc.use_batch_norm {
                        (0..3).map(|_| NormParams::new(filters)).collect()
                    } else {
                        Vec::new()
                    };
                    let skip = (rows != filters).then(|| ConvParams::init(filters, rows, 1, rng));
                    blocks.push(BlockParams { convs, norms, skip });
                    rows = filters;
                }
                EncoderParams {
                    blocks,
                    projection: DenseParams::init(enc.embedding_dim, rows, rng),
                }
            })
            .collect();
        let cls = &config.classifier;
        let mut width = enc.embedding_dim;
        let hidden = (0..cls.num_dense_layers)
            .map(|_| {
                let layer = DenseParams::init(cls.width, width, rng);
                width = cls.width;
                layer
            })
            .collect();
        let output = DenseParams::init(cls.output_dim(), width, rng);
        Self {
            encoders,
            classifier: ClassifierParams { hidden, output },
        }
    }

    /// Trainable tensors in a fixed order, with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (e, enc) in self.encoders.iter().enumerate() {
            for (b, block) in enc.blocks.iter().enumerate() {
                for (l, conv) in block.convs.iter().enumerate() {
                    out.push((format!("encoder{e}.block{b}.conv{l}.weight"), &conv.weight));
                    out.push((format!("encoder{e}.block{b}.conv{l}.bias"), &conv.bias));
                }
                for (l, norm) in block.norms.iter().enumerate() {
                    out.push((format!("encoder{e}.block{b}.norm{l}.gamma"), &norm.gamma));
                    out.push((format!("encoder{e}.block{b}.norm{l}.beta"), &norm.beta));
                }
                if let Some(skip) = &block.skip {
                    out.push((format!("encoder{e}.block{b}.skip.weight"), &skip.weight));
                    out.push((format!("encoder{e}.block{b}.skip.bias"), &skip.bias));
                }
            }
            out.push((format!("encoder{e}.projection.weight"), &enc.projection.weight));
            out.push((format!("encoder{e}.projection.bias"), &enc.projection.bias));
        }
        for (h, layer) in self.classifier.hidden.iter().enumerate() {
            out.push((format!("classifier.hidden{h}.weight"), &layer.weight));
            out.push((format!("classifier.hidden{h}.bias"), &layer.bias));
        }
        out.push(("classifier.output.weight".into(), &self.classifier.output.weight));
        out.push(("classifier.output.bias".into(), &self.classifier.output.bias));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for enc in &mut self.encoders {
            for block in &mut enc.blocks {
                for conv in &mut block.convs {
                    out.push(&mut conv.weight);
                    out.push(&mut conv.bias);
                }
                for norm in &mut block.norms {
                    out.push(&mut norm.gamma);
                    out.push(&mut norm.beta);
                }
                if let Some(skip) = &mut block.skip {
                    out.push(&mut skip.weight);
                    out.push(&mut skip.bias);
                }
            }
            out.push(&mut enc.projection.weight);
            out.push(&mut enc.projection.bias);
        }
        for layer in &mut self.classifier.hidden {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.classifier.output.weight);
        out.push(&mut self.classifier.output.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All trainable values concatenated in [`ModelParams::named`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_follow_config() {
        let mut config = ModelConfig::new(3, 2);
        config.encoder.num_blocks = 2;
        let p = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let b0 = &p.encoders[0].blocks[0];
        assert_eq!(b0.convs[0].weight.shape(), &[64, 5, 8]);
        assert_eq!(b0.convs[1].weight.shape(), &[64, 64, 5]);
        assert_eq!(b0.convs[2].weight.shape(), &[64, 64, 3]);
        assert_eq!(b0.skip.as_ref().unwrap().weight.shape(), &[64, 5, 1]);
        let b1 = &p.encoders[0].blocks[1];
        assert_eq!(b1.convs[0].weight.shape(), &[128, 64, 8]);
        assert!(b1.skip.is_some());
        assert_eq!(p.encoders[0].projection.weight.shape(), &[128, 128]);
        assert_eq!(p.classifier.output.weight.shape(), &[1, 128]);
        assert_eq!(p.named().len(), p.clone().tensors_mut().len());
    }

    #[test]
    fn identity_shortcut_when_widths_match() {
        let mut config = ModelConfig::new(2, 2);
        config.encoder.num_blocks = 3;
        let p = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.encoders[0].blocks[2].skip.is_none());
    }

    #[test]
    fn flat_round_trip() {
        let config = ModelConfig::new(2, 3);
        let p = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(4));
        let mut q = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(5));
        assert_ne!(p, q);
        q.set_flat(&p.flatten());
        assert_eq!(p, q);
    }
}
