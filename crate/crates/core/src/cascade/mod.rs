//! The multi-exit network.
//!
//! A trunk of `K` dense+ReLU blocks. Block `k` emits features `F_k`, which
//! feed classifier head `k` (exit `k`) and domain discriminator `k`. Exits are
//! numbered from 1 in the public API.
//!
//! ```text
//! x ─ block1 ─ F1 ─ block2 ─ F2 ─ ... ─ blockK ─ FK
//!               ├─ head1 → softmax           ├─ headK → softmax
//!               └─ GRL → disc1 → sigmoid     └─ GRL → discK → sigmoid
//! ```

mod checkpoint;
mod cost;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_HEADER};
pub use cost::CostModel;

use crate::error::{Error, Result};
use crate::numerics::{
    relu, relu_backward, sigmoid, softmax_rows, sgd_momentum_step, DenseGrads, DenseLayer, GrlGate, Matrix,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CascadeConfig {
    pub input_dim: usize,
    pub exit_count: usize,
    pub hidden_width: usize,
    pub disc_width: usize,
    pub class_count: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            input_dim: 2,
            exit_count: 4,
            hidden_width: 16,
            disc_width: 16,
            class_count: 2,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("exit_count", self.exit_count),
            ("hidden_width", self.hidden_width),
            ("disc_width", self.disc_width),
            ("class_count", self.class_count),
        ];
        for (key, value) in fields {
            if value == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Per-exit domain classifier: `GRL → dense(h→h_d) → ReLU → dense(h_d→1) → sigmoid`.
///
/// The reversal strength follows a schedule, so the gate is supplied per
/// backward pass rather than stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

/// Intermediate values of one discriminator evaluation.
#[derive(Debug, Clone)]
pub struct DiscPass {
    pub input: Matrix,
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    /// `rows × 1`.
    pub logits: Matrix,
}

impl DiscPass {
    pub fn probs(&self) -> Vec<f64> {
        self.logits.data().iter().map(|&z| sigmoid(z)).collect()
    }
}

impl Discriminator {
    pub fn forward(&self, features: &Matrix) -> Result<DiscPass> {
        // the reversal gate is the identity going forward
        let input = features.clone();
        let hidden_pre = self.hidden.forward(&input)?;
        let hidden = relu(&hidden_pre);
        let logits = self.output.forward(&hidden)?;
        Ok(DiscPass {
            input,
            hidden_pre,
            hidden,
            logits,
        })
    }

    /// Returns (hidden grads, output grads, gradient reaching the features
    /// after reversal through `gate`).
    pub fn backward(
        &self,
        pass: &DiscPass,
        grad_logits: &Matrix,
        gate: &GrlGate,
    ) -> Result<(DenseGrads, DenseGrads, Matrix)> {
        let (output_grads, grad_hidden) = self.output.backward(&pass.hidden, grad_logits)?;
        let grad_pre = relu_backward(&pass.hidden_pre, &grad_hidden)?;
        let (hidden_grads, grad_input) = self.hidden.backward(&pass.input, &grad_pre)?;
        Ok((hidden_grads, output_grads, gate.backward(&grad_input)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitNet {
    pub config: CascadeConfig,
    pub trunk: Vec<DenseLayer>,
    pub heads: Vec<DenseLayer>,
    pub discriminators: Vec<Discriminator>,
}

/// Activations cached by [`MultiExitNet::forward_all`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: Matrix,
    /// Pre-ReLU output of each block.
    pub pre: Vec<Matrix>,
    /// `F_k`, post-ReLU output of each block.
    pub features: Vec<Matrix>,
    /// Softmax output of each exit, `rows × C`.
    pub probs: Vec<Matrix>,
}

/// Result of evaluating the network up to one exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutput {
    pub probs: Vec<f64>,
    pub macs: u64,
}

/// Gradients for every parameter of a [`MultiExitNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub trunk: Vec<DenseGrads>,
    pub heads: Vec<DenseGrads>,
    pub disc_hidden: Vec<DenseGrads>,
    pub disc_output: Vec<DenseGrads>,
}

impl NetGrads {
    pub fn zeros(net: &MultiExitNet) -> Self {
        NetGrads {
            trunk: net.trunk.iter().map(DenseGrads::zeros_like).collect(),
            heads: net.heads.iter().map(DenseGrads::zeros_like).collect(),
            disc_hidden: net.discriminators.iter().map(|d| DenseGrads::zeros_like(&d.hidden)).collect(),
            disc_output: net.discriminators.iter().map(|d| DenseGrads::zeros_like(&d.output)).collect(),
        }
    }

    fn parts(&self) -> impl Iterator<Item = &DenseGrads> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .chain(&self.disc_hidden)
            .chain(&self.disc_output)
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &NetGrads, s: f64) -> Result<()> {
        let mine = self
            .trunk
            .iter_mut()
            .chain(&mut self.heads)
            .chain(&mut self.disc_hidden)
            .chain(&mut self.disc_output);
        for (a, b) in mine.zip(other.parts()) {
            a.add_scaled(b, s)?;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.parts().all(DenseGrads::is_zero)
    }

    pub fn trunk_is_zero(&self) -> bool {
        self.trunk.iter().all(DenseGrads::is_zero)
    }
}

impl MultiExitNet {
    /// Uniform `±1/√fan_in` initialization from the `init` stream of `seed`.
    pub fn new(config: CascadeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed, seed::TAG_INIT, 0);
        let (k, h) = (config.exit_count, config.hidden_width);
        let trunk = (0..k)
            .map(|i| DenseLayer::uniform(if i == 0 { config.input_dim } else { h }, h, &mut rng))
            .collect();
        let heads = (0..k).map(|_| DenseLayer::uniform(h, config.class_count, &mut rng)).collect();
        let discriminators = (0..k)
            .map(|_| Discriminator {
                hidden: DenseLayer::uniform(h, config.disc_width, &mut rng),
                output: DenseLayer::uniform(config.disc_width, 1, &mut rng),
            })
            .collect();
        Ok(MultiExitNet {
            config,
            trunk,
            heads,
            discriminators,
        })
    }

    /// All parameters zero.
    pub fn zeros(config: CascadeConfig) -> Result<Self> {
        config.validate()?;
        let (k, h) = (config.exit_count, config.hidden_width);
        Ok(MultiExitNet {
            config,
            trunk: (0..k)
                .map(|i| DenseLayer::zeros(if i == 0 { config.input_dim } else { h }, h))
                .collect(),
            heads: (0..k).map(|_| DenseLayer::zeros(h, config.class_count)).collect(),
            discriminators: (0..k)
                .map(|_| Discriminator {
                    hidden: DenseLayer::zeros(h, config.disc_width),
                    output: DenseLayer::zeros(config.disc_width, 1),
                })
                .collect(),
        })
    }

    pub fn exit_count(&self) -> usize {
        self.config.exit_count
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel::of(self)
    }

    fn check_exit(&self, exit: usize) -> Result<usize> {
        if exit == 0 || exit > self.exit_count() {
            return Err(Error::Index {
                what: "exit",
                index: exit,
                limit: self.exit_count(),
            });
        }
        Ok(exit - 1)
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::dims(
                "forward",
                batch.shape(),
                (batch.rows(), self.config.input_dim),
            ));
        }
        Ok(())
    }

    fn block(&self, k: usize, input: &Matrix) -> Result<(Matrix, Matrix)> {
        let pre = self.trunk[k].forward(input)?;
        let feat = relu(&pre);
        Ok((pre, feat))
    }

    fn head_probs(&self, k: usize, features: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.heads[k].forward(features)?))
    }

    /// Runs every block and every head.
    pub fn forward_all(&self, batch: &Matrix) -> Result<ForwardPass> {
        self.check_input(batch)?;
        let k = self.exit_count();
        let mut pre = Vec::with_capacity(k);
        let mut features: Vec<Matrix> = Vec::with_capacity(k);
        let mut probs = Vec::with_capacity(k);
        for i in 0..k {
            let (p, f) = self.block(i, features.last().unwrap_or(batch))?;
            probs.push(self.head_probs(i, &f)?);
            pre.push(p);
            features.push(f);
        }
        Ok(ForwardPass {
            input: batch.clone(),
            pre,
            features,
            probs,
        })
    }

    /// Evaluates blocks `1..=exit` and heads `1..=exit` on one sample and
    /// returns the distribution at `exit`.
    pub fn forward_to_exit(&self, sample: &[f64], exit: usize) -> Result<ExitOutput> {
        let last = self.check_exit(exit)?;
        let mut walk = self.exit_walk(sample)?;
        let mut probs = Vec::new();
        for _ in 0..=last {
            probs = walk.advance()?;
        }
        Ok(ExitOutput {
            probs,
            macs: walk.macs(),
        })
    }

    /// Step-by-step single-sample evaluation used by early-exit inference.
    pub fn exit_walk<'a>(&'a self, sample: &[f64]) -> Result<ExitWalk<'a>> {
        let input = Matrix::row_vector(sample);
        self.check_input(&input)?;
        Ok(ExitWalk {
            net: self,
            features: input,
            next: 0,
            macs: 0,
        })
    }

    /// Domain probability per row from discriminator `exit`.
    pub fn discriminate(&self, features: &Matrix, exit: usize) -> Result<Vec<f64>> {
        let k = self.check_exit(exit)?;
        if features.cols() != self.config.hidden_width {
            return Err(Error::dims(
                "discriminate",
                features.shape(),
                (features.rows(), self.config.hidden_width),
            ));
        }
        Ok(self.discriminators[k].forward(features)?.probs())
    }

    /// Back-propagates per-exit gradients into `grads`.
    ///
    /// `logit_grads[k]` is dL/d(logits of exit k+1); `feature_grads[k]` is
    /// an extra dL/dF_{k+1} (from a discriminator). Either may be `None`.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        logit_grads: &[Option<Matrix>],
        feature_grads: &[Option<Matrix>],
        grads: &mut NetGrads,
    ) -> Result<()> {
        let k = self.exit_count();
        if logit_grads.len() != k || feature_grads.len() != k {
            return Err(Error::dims(
                "MultiExitNet::backward",
                (k, 1),
                (logit_grads.len(), feature_grads.len()),
            ));
        }
        let mut feat_grad: Vec<Option<Matrix>> = feature_grads.to_vec();
        for (i, g) in logit_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (hg, gin) = self.heads[i].backward(&pass.features[i], g)?;
            grads.heads[i].add_scaled(&hg, 1.0)?;
            match &mut feat_grad[i] {
                Some(acc) => acc.add_scaled(&gin, 1.0)?,
                slot @ None => *slot = Some(gin),
            }
        }
        let mut upstream: Option<Matrix> = None;
        for i in (0..k).rev() {
            let g = match (upstream.take(), feat_grad[i].take()) {
                (None, None) => continue,
                (Some(g), None) | (None, Some(g)) => g,
                (Some(mut g), Some(extra)) => {
                    g.add_scaled(&extra, 1.0)?;
                    g
                }
            };
            let g_pre = relu_backward(&pass.pre[i], &g)?;
            let input = if i == 0 { &pass.input } else { &pass.features[i - 1] };
            let (tg, gin) = self.trunk[i].backward(input, &g_pre)?;
            grads.trunk[i].add_scaled(&tg, 1.0)?;
            if i > 0 {
                upstream = Some(gin);
            }
        }
        Ok(())
    }

    /// One SGD-with-momentum step on every layer. `weight_decay` adds
    /// `weight_decay · θ` to each gradient first.
    pub fn apply_gradients(&mut self, grads: &NetGrads, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        let layers = self.trunk.iter_mut().chain(&mut self.heads).chain(
            self.discriminators
                .iter_mut()
                .flat_map(|d| [&mut d.hidden, &mut d.output]),
        );
        let disc_grads = grads
            .disc_hidden
            .iter()
            .zip(&grads.disc_output)
            .flat_map(|(a, b)| [a, b]);
        let all_grads = grads.trunk.iter().chain(&grads.heads).chain(disc_grads);
        for (layer, g) in layers.zip(all_grads) {
            if weight_decay != 0.0 {
                let mut g = g.clone();
                let params = DenseGrads {
                    weights: layer.weights.clone(),
                    bias: layer.bias.clone(),
                };
                g.add_scaled(&params, weight_decay)?;
                sgd_momentum_step(layer, &g, lr, momentum)?;
            } else {
                sgd_momentum_step(layer, g, lr, momentum)?;
            }
        }
        Ok(())
    }
}

/// Walks a single sample through the cascade one exit at a time.
#[derive(Debug)]
pub struct ExitWalk<'a> {
    net: &'a MultiExitNet,
    features: Matrix,
    next: usize,
    macs: u64,
}

impl ExitWalk<'_> {
    /// Evaluates the next block and its head, returning the exit's
    /// distribution.
    pub fn advance(&mut self) -> Result<Vec<f64>> {
        let k = self.next;
        if k >= self.net.exit_count() {
            return Err(Error::Index {
                what: "exit",
                index: k + 1,
                limit: self.net.exit_count(),
            });
        }
        let (_, feat) = self.net.block(k, &self.features)?;
        let probs = self.net.head_probs(k, &feat)?;
        self.macs += self.net.trunk[k].mac_cost() + self.net.heads[k].mac_cost();
        self.features = feat;
        self.next += 1;
        Ok(probs.into_data())
    }

    /// Exits evaluated so far.
    pub fn depth(&self) -> usize {
        self.next
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_rows;
    use rand::Rng;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seed::stream(seed, "test", 0);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn small() -> CascadeConfig {
        CascadeConfig {
            input_dim: 3,
            exit_count: 3,
            hidden_width: 5,
            disc_width: 4,
            class_count: 3,
        }
    }

    #[test]
    fn zero_heads_give_uniform_exits() {
        let mut net = MultiExitNet::new(small(), 1).unwrap();
        for h in &mut net.heads {
            *h = DenseLayer::zeros(5, 3);
        }
        let pass = net.forward_all(&random_batch(4, 3, 2)).unwrap();
        for p in &pass.probs {
            for &v in p.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_sample_prefix_is_bit_identical() {
        let net = MultiExitNet::new(small(), 3).unwrap();
        let batch = random_batch(6, 3, 4);
        let pass = net.forward_all(&batch).unwrap();
        for row in 0..batch.rows() {
            for exit in 1..=3 {
                let out = net.forward_to_exit(batch.row(row), exit).unwrap();
                let want = pass.probs[exit - 1].row(row);
                assert_eq!(
                    out.probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn forward_matches_layer_by_layer_reevaluation() {
        let net = MultiExitNet::new(small(), 5).unwrap();
        let batch = random_batch(5, 3, 6);
        let pass = net.forward_all(&batch).unwrap();
        for r in 0..batch.rows() {
            let mut h: Vec<f64> = batch.row(r).to_vec();
            for k in 0..3 {
                let layer = &net.trunk[k];
                h = (0..layer.d_out())
                    .map(|j| {
                        let z = layer.bias[j] + (0..layer.d_in()).map(|i| h[i] * layer.weights[(i, j)]).sum::<f64>();
                        z.max(0.0)
                    })
                    .collect();
                let head = &net.heads[k];
                let logits: Vec<f64> = (0..3)
                    .map(|j| head.bias[j] + (0..5).map(|i| h[i] * head.weights[(i, j)]).sum::<f64>())
                    .collect();
                let p = softmax_rows(&Matrix::row_vector(&logits));
                for (a, b) in p.data().iter().zip(pass.probs[k].row(r)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exit_probabilities_are_distributions() {
        let net = MultiExitNet::new(small(), 8).unwrap();
        let pass = net.forward_all(&random_batch(10, 3, 9)).unwrap();
        for p in &pass.probs {
            for row in p.iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_to_exit_full_depth_and_range() {
        let net = MultiExitNet::new(small(), 2).unwrap();
        let batch = random_batch(1, 3, 3);
        let pass = net.forward_all(&batch).unwrap();
        let out = net.forward_to_exit(batch.row(0), 3).unwrap();
        assert_eq!(out.probs.as_slice(), pass.probs[2].row(0));
        assert!(net.forward_to_exit(batch.row(0), 0).is_err());
        assert!(net.forward_to_exit(batch.row(0), 4).is_err());
        assert!(net.forward_all(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn exit_one_cost_is_block_plus_head() {
        let net = MultiExitNet::new(
            CascadeConfig {
                input_dim: 2,
                exit_count: 2,
                hidden_width: 16,
                disc_width: 16,
                class_count: 2,
            },
            0,
        )
        .unwrap();
        assert_eq!(net.forward_to_exit(&[0.1, 0.2], 1).unwrap().macs, 2 * 16 + 16 * 2);
    }

    #[test]
    fn macs_strictly_increase_with_exit() {
        let net = MultiExitNet::new(small(), 2).unwrap();
        let macs: Vec<u64> = (1..=3).map(|k| net.forward_to_exit(&[0.0; 3], k).unwrap().macs).collect();
        assert!(macs.windows(2).all(|w| w[0] < w[1]));
        for (k, m) in macs.iter().enumerate() {
            assert_eq!(*m, net.cost_model().cumulative_inference_macs(k + 1).unwrap());
        }
    }

    #[test]
    fn zero_discriminator_outputs_one_half() {
        let mut net = MultiExitNet::new(small(), 4).unwrap();
        net.discriminators[1].output = DenseLayer::zeros(4, 1);
        let feats = random_batch(3, 5, 1);
        assert_eq!(net.discriminate(&feats, 2).unwrap(), vec![0.5; 3]);
        assert!(net.discriminate(&Matrix::zeros(1, 4), 2).is_err());
    }

    #[test]
    fn discriminator_matches_reevaluation() {
        let net = MultiExitNet::new(small(), 12).unwrap();
        let feats = random_batch(4, 5, 13);
        let got = net.discriminate(&feats, 1).unwrap();
        let d = &net.discriminators[0];
        for (r, g) in got.iter().enumerate() {
            let hidden: Vec<f64> = (0..4)
                .map(|j| (d.hidden.bias[j] + (0..5).map(|i| feats[(r, i)] * d.hidden.weights[(i, j)]).sum::<f64>()).max(0.0))
                .collect();
            let z = d.output.bias[0] + (0..4).map(|i| hidden[i] * d.output.weights[(i, 0)]).sum::<f64>();
            assert!((g - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters_with_zero_gradient() {
        let mut net = MultiExitNet::new(small(), 1).unwrap();
        let before = net.trunk[0].weights[(0, 0)];
        let grads = NetGrads::zeros(&net);
        net.apply_gradients(&grads, 0.1, 0.0, 0.5).unwrap();
        assert!((net.trunk[0].weights[(0, 0)] - before * (1.0 - 0.05)).abs() < 1e-15);
    }
}
