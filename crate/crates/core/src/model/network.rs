use rand::RngCore;

use crate::asts::AsTsInstance;
use crate::tensor::{BatchStats, Mask, Padding, Tape, Tensor, Var};

use super::batch::{PaddedBatch, SubBatch};
use super::config::{Aggregation, ModelConfig, MultiClassLoss};
use super::params::{ClassifierParams, EncoderParams, ModelParams};
use super::ModelError;

struct AffineVars {
    weight: Var,
    bias: Var,
}

struct BlockVars {
    convs: Vec<AffineVars>,
    norms: Vec<(Var, Var)>,
    skip: Option<AffineVars>,
}

struct EncoderVars {
    blocks: Vec<BlockVars>,
    projection: AffineVars,
}

struct ClassifierVars {
    hidden: Vec<AffineVars>,
    output: AffineVars,
}

struct ModelVars {
    encoders: Vec<EncoderVars>,
    classifier: ClassifierVars,
    /// In [`ModelParams::named`] order.
    all: Vec<Var>,
}

struct Recorder<'t> {
    tape: &'t mut Tape,
    all: Vec<Var>,
    grad: bool,
}

impl Recorder<'_> {
    fn put(&mut self, t: &Tensor) -> Var {
        let v = self.tape.leaf(t.clone().with_requires_grad(self.grad));
        self.all.push(v);
        v
    }

    fn affine(&mut self, weight: &Tensor, bias: &Tensor) -> AffineVars {
        AffineVars {
            weight: self.put(weight),
            bias: self.put(bias),
        }
    }

    fn encoder(&mut self, p: &EncoderParams) -> EncoderVars {
        let blocks = p
            .blocks
            .iter()
            .map(|b| BlockVars {
                convs: b.convs.iter().map(|c| self.affine(&c.weight, &c.bias)).collect(),
                norms: b
                    .norms
                    .iter()
                    .map(|n| (self.put(&n.gamma), self.put(&n.beta)))
                    .collect(),
                skip: b.skip.as_ref().map(|s| self.affine(&s.weight, &s.bias)),
            })
            .collect();
        EncoderVars {
            blocks,
            projection: self.affine(&p.projection.weight, &p.projection.bias),
        }
    }

    fn classifier(&mut self, p: &ClassifierParams) -> ClassifierVars {
        ClassifierVars {
            hidden: p.hidden.iter().map(|d| self.affine(&d.weight, &d.bias)).collect(),
            output: self.affine(&p.output.weight, &p.output.bias),
        }
    }
}

fn record(tape: &mut Tape, params: &ModelParams, grad: bool) -> ModelVars {
    let mut rec = Recorder {
        tape,
        all: Vec::new(),
        grad,
    };
    let encoders = params.encoders.iter().map(|e| rec.encoder(e)).collect();
    let classifier = rec.classifier(&params.classifier);
    ModelVars {
        encoders,
        classifier,
        all: rec.all,
    }
}

/// Batch statistics of one normalisation layer from a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormUpdate {
    pub encoder: usize,
    pub block: usize,
    pub layer: usize,
    pub stats: BatchStats,
}

/// Blends training-pass batch statistics into the running statistics.
pub fn apply_norm_updates(params: &mut ModelParams, updates: &[NormUpdate], momentum: f64) {
    for u in updates {
        let running = &mut params.encoders[u.encoder].blocks[u.block].norms[u.layer].running;
        for (r, b) in running.mean.iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in running.var.iter_mut().zip(&u.stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

struct Pass<'a, 'r> {
    config: &'a ModelConfig,
    params: &'a ModelParams,
    rng: Option<&'r mut dyn RngCore>,
    norm_updates: Vec<NormUpdate>,
    /// Return the input of the output layer instead of logits.
    penultimate: bool,
}

impl Pass<'_, '_> {
    fn training(&self) -> bool {
        self.rng.is_some()
    }

    /// `(M, K)` embeddings, or `(M * width, K)` per-position embeddings
    /// when `online`.
    fn encode(
        &mut self,
        tape: &mut Tape,
        vars: &EncoderVars,
        sub: &SubBatch,
        input: Var,
        online: bool,
    ) -> Result<Var, ModelError> {
        let enc = &self.config.encoder;
        let padding = if enc.causal {
            Padding::Causal
        } else {
            Padding::Same
        };
        let mask = &sub.mask;
        // also cuts the gradient reaching padded input columns
        let mut h = tape.apply_mask(input, mask)?;
        for (b, block) in vars.blocks.iter().enumerate() {
            let block_in = h;
            let mut x = block_in;
            for (layer, conv) in block.convs.iter().enumerate() {
                x = tape.conv1d(x, conv.weight, conv.bias, padding)?;
                x = tape.apply_mask(x, mask)?;
                if let Some(&(gamma, beta)) = block.norms.get(layer) {
                    x = if self.training() {
                        let (y, stats) = tape.batch_norm_train(x, gamma, beta, mask)?;
                        self.norm_updates.push(NormUpdate {
                            encoder: sub.encoder,
                            block: b,
                            layer,
                            stats,
                        });
                        y
                    } else {
                        let running = &self.params.encoders[sub.encoder].blocks[b].norms[layer].running;
                        tape.batch_norm_eval(x, gamma, beta, mask, running)?
                    };
                }
                if layer + 1 < block.convs.len() {
                    x = tape.relu(x)?;
                }
            }
            let shortcut = match &block.skip {
                Some(s) => {
                    let y = tape.conv1d(block_in, s.weight, s.bias, Padding::Same)?;
                    tape.apply_mask(y, mask)?
                }
                None => block_in,
            };
            let sum = tape.add(x, shortcut)?;
            h = tape.relu(sum)?;
        }
        let pooled = if online {
            let cap = tape.causal_avg_pool(h, mask)?;
            tape.columns_to_rows(cap)?
        } else {
            tape.global_avg_pool(h, mask)?
        };
        Ok(tape.dense(pooled, vars.projection.weight, vars.projection.bias)?)
    }

    fn classify(&mut self, tape: &mut Tape, vars: &ClassifierVars, z: Var) -> Result<Var, ModelError> {
        let rate = self.config.classifier.dropout;
        let mut h = z;
        for layer in &vars.hidden {
            h = tape.dense(h, layer.weight, layer.bias)?;
            h = tape.relu(h)?;
            if let Some(rng) = self.rng.as_deref_mut() {
                h = tape.dropout(h, rate, rng)?;
            }
        }
        if self.penultimate {
            return Ok(h);
        }
        Ok(tape.dense(h, vars.output.weight, vars.output.bias)?)
    }
}

/// Per (instance, step) groups of per-position embedding rows and the step
/// times of every instance.
fn online_groups(batch: &PaddedBatch) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    // (channel id, first row, times) per instance
    let mut seqs: Vec<Vec<(usize, usize, &[f64])>> = vec![Vec::new(); batch.num_instances()];
    let mut offset = 0;
    for sub in &batch.subs {
        let width = sub.width();
        for (m, &(inst, id)) in sub.owners.iter().enumerate() {
            seqs[inst].push((id, offset + m * width, &sub.times[m]));
        }
        offset += sub.owners.len() * width;
    }
    let mut groups = Vec::new();
    let mut steps = Vec::with_capacity(seqs.len());
    for mut chans in seqs {
        chans.sort_by_key(|c| c.0);
        let mut taus: Vec<f64> = chans.iter().flat_map(|c| c.2.iter().copied()).collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        for &tau in &taus {
            let group = chans
                .iter()
                .filter_map(|&(_, base, times)| {
                    let seen = times.partition_point(|&t| t <= tau);
                    (seen > 0).then(|| base + seen - 1)
                })
                .collect();
            groups.push(group);
        }
        steps.push(taus);
    }
    (groups, steps)
}

struct Graph {
    logits: Var,
    vars: ModelVars,
    inputs: Vec<Var>,
    /// Step times per instance for online graphs.
    steps: Vec<Vec<f64>>,
}

fn build(
    tape: &mut Tape,
    pass: &mut Pass<'_, '_>,
    batch: &PaddedBatch,
    online: bool,
    param_grad: bool,
    input_grad: bool,
) -> Result<Graph, ModelError> {
    let vars = record(tape, pass.params, param_grad);
    let mut encoded = Vec::with_capacity(batch.subs.len());
    let mut inputs = Vec::with_capacity(batch.subs.len());
    for sub in &batch.subs {
        let input = tape.leaf(sub.features.clone().with_requires_grad(input_grad));
        inputs.push(input);
        encoded.push(pass.encode(tape, &vars.encoders[sub.encoder], sub, input, online)?);
    }
    let stacked = if encoded.len() == 1 {
        encoded[0]
    } else {
        tape.concat_rows(&encoded)?
    };
    let (groups, steps) = if online {
        online_groups(batch)
    } else {
        (batch.groups.clone(), Vec::new())
    };
    let mean = pass.config.encoder.aggregation == Aggregation::Mean;
    let z = tape.segment_sum(stacked, &groups, mean)?;
    let logits = pass.classify(tape, &vars.classifier, z)?;
    Ok(Graph {
        logits,
        vars,
        inputs,
        steps,
    })
}

fn objective(
    tape: &mut Tape,
    config: &ModelConfig,
    logits: Var,
    labels: &[usize],
) -> Result<Var, ModelError> {
    Ok(if config.classifier.output_dim() == 1 {
        let targets: Vec<f64> = labels.iter().map(|&y| if y == 1 { 1.0 } else { 0.0 }).collect();
        tape.binary_ce(logits, &targets)?
    } else {
        match config.multiclass_loss {
            MultiClassLoss::Softmax => tape.softmax_ce(logits, labels)?,
            MultiClassLoss::Sigmoid => tape.sigmoid_ce(logits, labels)?,
        }
    })
}

fn logit_rows(tape: &Tape, logits: Var) -> Vec<Vec<f64>> {
    let t = tape.value(logits);
    t.data().chunks_exact(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn check(config: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    config.validate().map_err(ModelError::Config)?;
    if params.encoders.len() != config.num_encoders() {
        return Err(ModelError::Config(format!(
            "{} encoders in parameters, config needs {}",
            params.encoders.len(),
            config.num_encoders()
        )));
    }
    Ok(())
}

fn eval_pass<'a>(config: &'a ModelConfig, params: &'a ModelParams) -> Pass<'a, 'a> {
    Pass {
        config,
        params,
        rng: None,
        norm_updates: Vec::new(),
        penultimate: false,
    }
}

/// Embedding of one channel array `(rows, L_pad)` under a one-row mask.
pub fn encode_channel(
    encoder: &EncoderParams,
    config: &ModelConfig,
    channel_array: &Tensor,
    mask: &Mask,
) -> Result<Vec<f64>, ModelError> {
    let (rows, width) = match *channel_array.shape() {
        [r, w] => (r, w),
        ref s => return Err(ModelError::Usage(format!("channel array must be 2-D, got {s:?}"))),
    };
    if rows != config.input_rows() {
        return Err(ModelError::Usage(format!(
            "channel array has {rows} rows, config expects {}",
            config.input_rows()
        )));
    }
    if mask.rows() != 1 || mask.width() != width {
        return Err(ModelError::Usage("mask must have one row of the array width".into()));
    }
    let params = ModelParams {
        encoders: vec![encoder.clone()],
        classifier: ClassifierParams {
            hidden: Vec::new(),
            output: encoder.projection.clone(),
        },
    };
    let sub = SubBatch {
        encoder: 0,
        features: channel_array.clone().reshape(vec![1, rows, width])?,
        mask: mask.clone(),
        owners: vec![(0, 1)],
        times: vec![Vec::new()],
    };
    let mut tape = Tape::new();
    let mut pass = eval_pass(config, &params);
    let vars = record(&mut tape, &params, false);
    let input = tape.leaf(sub.features.clone());
    let out = pass.encode(&mut tape, &vars.encoders[0], &sub, input, false)?;
    Ok(tape.value(out).data().to_vec())
}

/// Elementwise sum of channel embeddings, in the given order.
pub fn aggregate(embeddings: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
    let Some(first) = embeddings.first() else {
        return Err(ModelError::NoChannels { instance: 0 });
    };
    let mut z = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != z.len() {
            return Err(ModelError::Usage("embeddings differ in length".into()));
        }
        z.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    Ok(z)
}

/// Inference-mode classifier on one aggregated embedding.
pub fn classify(
    z: &[f64],
    classifier: &ClassifierParams,
    config: &ModelConfig,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let mut rec = Recorder {
        tape: &mut tape,
        all: Vec::new(),
        grad: false,
    };
    let vars = rec.classifier(classifier);
    let input = tape.leaf(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let params = ModelParams {
        encoders: Vec::new(),
        classifier: classifier.clone(),
    };
    let out = eval_pass(config, &params).classify(&mut tape, &vars, input)?;
    Ok(tape.value(out).data().to_vec())
}

/// Inference-mode logits of one instance.
pub fn forward(
    instance: &AsTsInstance,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<f64>, ModelError> {
    Ok(forward_batch(&[instance], params, config)?.remove(0))
}

/// Inference-mode logits of several instances in one pass.
pub fn forward_batch(
    instances: &[&AsTsInstance],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let batch = PaddedBatch::new(instances, config)?;
    forward_padded(&batch, params, config)
}

pub fn forward_padded(
    batch: &PaddedBatch,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Vec<f64>>, ModelError> {
    check(config, params)?;
    let mut tape = Tape::new();
    let g = build(&mut tape, &mut eval_pass(config, params), batch, false, false, false)?;
    Ok(logit_rows(&tape, g.logits))
}

/// Inference-mode input of the output layer for every instance: the
/// aggregated embedding after the hidden dense layers.
pub fn penultimate_batch(
    instances: &[&AsTsInstance],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Vec<f64>>, ModelError> {
    check(config, params)?;
    let batch = PaddedBatch::new(instances, config)?;
    let mut tape = Tape::new();
    let mut pass = eval_pass(config, params);
    pass.penultimate = true;
    let g = build(&mut tape, &mut pass, &batch, false, false, false)?;
    Ok(logit_rows(&tape, g.logits))
}

/// Per-step logits of an online (causal) model.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutput {
    /// Global steps: the distinct observation times, ascending.
    pub times: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

pub fn forward_online(
    instance: &AsTsInstance,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<OnlineOutput, ModelError> {
    Ok(forward_online_batch(&[instance], params, config)?.remove(0))
}

pub fn forward_online_batch(
    instances: &[&AsTsInstance],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<OnlineOutput>, ModelError> {
    if !config.encoder.causal {
        return Err(ModelError::Usage("online prediction needs a causal encoder".into()));
    }
    check(config, params)?;
    let batch = PaddedBatch::new(instances, config)?;
    let mut tape = Tape::new();
    let g = build(&mut tape, &mut eval_pass(config, params), &batch, true, false, false)?;
    let mut rows = logit_rows(&tape, g.logits).into_iter();
    Ok(g
        .steps
        .into_iter()
        .map(|times| OnlineOutput {
            logits: rows.by_ref().take(times.len()).collect(),
            times,
        })
        .collect())
}

/// Mean cross entropy of a batch in inference mode.
pub fn loss(
    instances: &[&AsTsInstance],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<f64, ModelError> {
    check(config, params)?;
    let batch = PaddedBatch::new(instances, config)?;
    let mut tape = Tape::new();
    let g = build(&mut tape, &mut eval_pass(config, params), &batch, false, false, false)?;
    let j = objective(&mut tape, config, g.logits, &batch.labels)?;
    Ok(tape.value(j).data()[0])
}

/// ReLU sign pattern of the inference graph, for finite-difference checks
/// that must not step across a kink.
pub fn relu_pattern(
    instances: &[&AsTsInstance],
    params: &ModelParams,
    config: &ModelConfig,
    online: bool,
) -> Result<Vec<bool>, ModelError> {
    check(config, params)?;
    let batch = PaddedBatch::new(instances, config)?;
    let mut tape = Tape::new();
    build(&mut tape, &mut eval_pass(config, params), &batch, online, false, false)?;
    Ok(tape.relu_pattern())
}

#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss: f64,
    /// In [`ModelParams::named`] order.
    pub grads: Vec<Vec<f64>>,
    pub norm_updates: Vec<NormUpdate>,
}

/// Loss and parameter gradients. Passing an RNG selects training mode
/// (dropout and batch statistics); `None` differentiates the inference
/// graph.
pub fn loss_and_grads(
    instances: &[&AsTsInstance],
    params: &ModelParams,
    config: &ModelConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<LossGradients, ModelError> {
    objective_and_grads(instances, params, config, rng, false)
}

/// Like [`loss_and_grads`] with cross entropy averaged over every global
/// step of every instance, each step labelled with its instance's class.
pub fn online_loss_and_grads(
    instances: &[&AsTsInstance],
    params: &ModelParams,
    config: &ModelConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<LossGradients, ModelError> {
    if !config.encoder.causal {
        return Err(ModelError::Usage("online training needs a causal encoder".into()));
    }
    objective_and_grads(instances, params, config, rng, true)
}

fn objective_and_grads(
    instances: &[&AsTsInstance],
    params: &ModelParams,
    config: &ModelConfig,
    rng: Option<&mut dyn RngCore>,
    online: bool,
) -> Result<LossGradients, ModelError> {
    check(config, params)?;
    let batch = PaddedBatch::new(instances, config)?;
    let mut tape = Tape::new();
    let mut pass = Pass {
        config,
        params,
        rng,
        norm_updates: Vec::new(),
        penultimate: false,
    };
    let g = build(&mut tape, &mut pass, &batch, online, true, false)?;
    let labels: Vec<usize> = if online {
        g.steps
            .iter()
            .zip(&batch.labels)
            .flat_map(|(s, &y)| std::iter::repeat(y).take(s.len()))
            .collect()
    } else {
        batch.labels.clone()
    };
    let j = objective(&mut tape, config, g.logits, &labels)?;
    let loss = tape.value(j).data()[0];
    if !loss.is_finite() {
        return Err(crate::tensor::TensorError::NonFinite("loss").into());
    }
    tape.backward(j)?;
    let grads = g
        .vars
        .all
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    Ok(LossGradients {
        loss,
        grads,
        norm_updates: pass.norm_updates,
    })
}

/// Gradient of the inference-mode loss with respect to each sub-batch's
/// padded input features, shaped like [`SubBatch::features`].
pub fn input_gradients(
    batch: &PaddedBatch,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Tensor>, ModelError> {
    check(config, params)?;
    let mut tape = Tape::new();
    let g = build(&mut tape, &mut eval_pass(config, params), batch, false, false, true)?;
    let j = objective(&mut tape, config, g.logits, &batch.labels)?;
    tape.backward(j)?;
    g.inputs
        .iter()
        .map(|&v| {
            let shape = tape.value(v).shape().to_vec();
            let data = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            Ok(Tensor::new(shape, data)?)
        })
        .collect()
}
