//! The relational reasoning network: per-modality encoders, stacked
//! intra/inter GCN units in an alternating schedule, and a sigmoid decoder
//! over inter-edge attributes.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    decode, decode_rows, encode, forward, forward_latents, inter_edge_aggregate, intra_edge_layer,
    inter_edge_layer, loss, node_layer, LatentState,
};

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{LinearPart, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("state: {0}")]
    State(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width of the latent space shared by node and edge attributes.
    pub hidden: usize,
    pub n_intra_units: usize,
    pub n_inter_units: usize,
    /// Hidden layers inside the encoder MLPs.
    pub encoder_hidden_layers: usize,
    /// Raw feature widths per modality.
    pub raw_dim1: usize,
    pub raw_dim2: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 {
            return Err(ModelError::Config("hidden width must be positive".into()));
        }
        if self.n_intra_units + self.n_inter_units == 0 {
            return Err(ModelError::Config("at least one GCN unit is required".into()));
        }
        if self.encoder_hidden_layers == 0 {
            return Err(ModelError::Config("encoders need at least one hidden layer".into()));
        }
        if self.raw_dim1 == 0 || self.raw_dim2 == 0 {
            return Err(ModelError::Config("raw feature widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Intra,
    Inter,
}

/// Execution order of the stacked units: alternate intra/inter starting with
/// intra, then append whichever kind is left over.
pub fn unit_schedule(n_intra: usize, n_inter: usize) -> Vec<UnitKind> {
    let paired = n_intra.min(n_inter);
    let mut order = Vec::with_capacity(n_intra + n_inter);
    for _ in 0..paired {
        order.push(UnitKind::Intra);
        order.push(UnitKind::Inter);
    }
    order.extend(std::iter::repeat(UnitKind::Intra).take(n_intra - paired));
    order.extend(std::iter::repeat(UnitKind::Inter).take(n_inter - paired));
    order
}

/// Input to an MLP's first (row-parted) layer. `Gathered` and `GatherSum`
/// push the layer's matmul to the source table and gather afterwards, which
/// is exact (row-wise identical) and avoids materializing wide per-edge
/// blocks on large graphs.
pub enum MlpInput<'a> {
    Direct(&'a Tensor),
    Gathered {
        table: &'a Tensor,
        idx: Rc<Vec<usize>>,
    },
    /// Sum of several gathered tables sharing one weight part.
    GatherSum {
        parts: Vec<(&'a Tensor, Rc<Vec<usize>>)>,
    },
}

struct MlpLayer {
    /// One weight block per input part, stacked conceptually as rows of a
    /// single `sum(part_widths) x out` matrix.
    weights: Vec<Tensor>,
    bias: Tensor,
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
pub struct Mlp {
    layers: Vec<MlpLayer>,
    part_widths: Vec<usize>,
}

impl Mlp {
    /// Layer shapes: `sum(part_widths) -> hidden` (`hidden_layers - 1` more
    /// `hidden -> hidden` blocks) `-> out`. Weights and biases initialize
    /// uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn new(
        part_widths: &[usize],
        hidden: usize,
        out: usize,
        hidden_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(hidden_layers >= 1, "an MLP has at least one hidden layer");
        let fan_in: usize = part_widths.iter().sum();
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        layers.push(MlpLayer {
            weights: part_widths
                .iter()
                .map(|&w| Tensor::param_uniform(w, hidden, fan_in, rng))
                .collect(),
            bias: Tensor::param_uniform(1, hidden, fan_in, rng),
        });
        for _ in 1..hidden_layers {
            layers.push(MlpLayer {
                weights: vec![Tensor::param_uniform(hidden, hidden, hidden, rng)],
                bias: Tensor::param_uniform(1, hidden, hidden, rng),
            });
        }
        layers.push(MlpLayer {
            weights: vec![Tensor::param_uniform(hidden, out, hidden, rng)],
            bias: Tensor::param_uniform(1, out, hidden, rng),
        });
        Mlp {
            layers,
            part_widths: part_widths.to_vec(),
        }
    }

    pub fn part_widths(&self) -> &[usize] {
        &self.part_widths
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("non-empty").bias.cols()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Weight blocks of layer `i`, one per input part (a single block past
    /// the first layer); rows of part blocks stack to the full weight matrix.
    pub fn layer_weights(&self, i: usize) -> Vec<&Tensor> {
        self.layers[i].weights.iter().collect()
    }

    pub fn layer_bias(&self, i: usize) -> &Tensor {
        &self.layers[i].bias
    }

    /// Forward through the MLP; `inputs` must match the configured parts.
    /// Every layer runs as one fused linear pass; gathered inputs never
    /// materialize per-row copies of their tables.
    pub fn apply(&self, tape: &Tape, inputs: &[MlpInput]) -> Result<Tensor, TensorError> {
        assert_eq!(
            inputs.len(),
            self.part_widths.len(),
            "MLP expects {} input parts",
            self.part_widths.len()
        );
        let first = &self.layers[0];
        let mut parts = Vec::new();
        for (input, weight) in inputs.iter().zip(&first.weights) {
            match input {
                MlpInput::Direct(x) => parts.push(LinearPart::Direct { x, w: weight }),
                MlpInput::Gathered { table, idx } => parts.push(LinearPart::Gathered {
                    table,
                    w: weight,
                    idx: Rc::clone(idx),
                }),
                MlpInput::GatherSum { parts: summed } => {
                    for (table, idx) in summed {
                        parts.push(LinearPart::Gathered {
                            table,
                            w: weight,
                            idx: Rc::clone(idx),
                        });
                    }
                }
            }
        }
        let mut z = tape.linear_parts(&parts, &first.bias)?;
        drop(parts);
        for layer in &self.layers[1..] {
            let activated = tape.relu(&z);
            z = tape.linear_parts(&[LinearPart::Direct { x: &activated, w: &layer.weights[0] }], &layer.bias)?;
        }
        Ok(z)
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (li, layer) in self.layers.iter().enumerate() {
            for (wi, w) in layer.weights.iter().enumerate() {
                out.push((format!("{prefix}.l{li}.w{wi}"), w.clone()));
            }
            out.push((format!("{prefix}.l{li}.b"), layer.bias.clone()));
        }
    }
}

/// One intra GCN unit: an edge-update MLP applied to both intra edge lists
/// and a node-update MLP.
pub struct IntraUnit {
    pub edge_update: Mlp,
    pub node_update: Mlp,
}

/// One inter GCN unit: the heterogeneous kernel (stored as two `h x h`
/// blocks applied on the right to row-vector attributes, sender block and
/// receiver block), an edge-update MLP, and a node-update MLP.
pub struct InterUnit {
    pub kernel_s: Tensor,
    pub kernel_r: Tensor,
    pub edge_update: Mlp,
    pub node_update: Mlp,
}

/// Every learnable parameter of the network.
pub struct ModelParams {
    pub node_enc1: Mlp,
    pub node_enc2: Mlp,
    pub edge_enc_intra1: Mlp,
    pub edge_enc_intra2: Mlp,
    pub edge_enc_inter: Mlp,
    pub intra_units: Vec<IntraUnit>,
    pub inter_units: Vec<InterUnit>,
    pub decoder: Mlp,
}

impl ModelParams {
    /// Fresh parameters, reproducible from the seed. Creation order is fixed
    /// (encoders, intra units, inter units, decoder) so identical seeds give
    /// identical values.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let h = cfg.hidden;
        let (d1, d2) = (cfg.raw_dim1, cfg.raw_dim2);
        let enc_layers = cfg.encoder_hidden_layers;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node_enc1 = Mlp::new(&[d1], h, h, enc_layers, &mut rng);
        let node_enc2 = Mlp::new(&[d2], h, h, enc_layers, &mut rng);
        let edge_enc_intra1 = Mlp::new(&[d1, d1], h, h, enc_layers, &mut rng);
        let edge_enc_intra2 = Mlp::new(&[d2, d2], h, h, enc_layers, &mut rng);
        let edge_enc_inter = Mlp::new(&[d1, d2], h, h, enc_layers, &mut rng);
        let intra_units = (0..cfg.n_intra_units)
            .map(|_| IntraUnit {
                edge_update: Mlp::new(&[h, h, h], h, h, 1, &mut rng),
                node_update: Mlp::new(&[h, h], h, h, 1, &mut rng),
            })
            .collect();
        let inter_units = (0..cfg.n_inter_units)
            .map(|_| InterUnit {
                // The kernel maps a concatenated pair (width 2h) to width h.
                kernel_s: Tensor::param_uniform(h, h, 2 * h, &mut rng),
                kernel_r: Tensor::param_uniform(h, h, 2 * h, &mut rng),
                edge_update: Mlp::new(&[h, h], h, h, 1, &mut rng),
                node_update: Mlp::new(&[h, h], h, h, 1, &mut rng),
            })
            .collect();
        let decoder = Mlp::new(&[h], h, 1, 1, &mut rng);
        Ok(ModelParams {
            node_enc1,
            node_enc2,
            edge_enc_intra1,
            edge_enc_intra2,
            edge_enc_inter,
            intra_units,
            inter_units,
            decoder,
        })
    }

    /// Stable `(name, tensor)` listing; the order defines optimizer buffer
    /// alignment and the checkpoint layout.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.node_enc1.named_params("encoder.node1", &mut out);
        self.node_enc2.named_params("encoder.node2", &mut out);
        self.edge_enc_intra1.named_params("encoder.edge_intra1", &mut out);
        self.edge_enc_intra2.named_params("encoder.edge_intra2", &mut out);
        self.edge_enc_inter.named_params("encoder.edge_inter", &mut out);
        for (i, unit) in self.intra_units.iter().enumerate() {
            unit.edge_update.named_params(&format!("intra{i}.edge"), &mut out);
            unit.node_update.named_params(&format!("intra{i}.node"), &mut out);
        }
        for (i, unit) in self.inter_units.iter().enumerate() {
            out.push((format!("inter{i}.kernel_s"), unit.kernel_s.clone()));
            out.push((format!("inter{i}.kernel_r"), unit.kernel_r.clone()));
            unit.edge_update.named_params(&format!("inter{i}.edge"), &mut out);
            unit.node_update.named_params(&format!("inter{i}.node"), &mut out);
        }
        self.decoder.named_params("decoder", &mut out);
        out
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named() {
            t.zero_grad();
        }
    }

    /// Copy out every parameter buffer (for best-epoch checkpointing).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.named().into_iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) {
        let named = self.named();
        assert_eq!(named.len(), snapshot.len(), "snapshot layout mismatch");
        for ((_, t), data) in named.into_iter().zip(snapshot) {
            t.set_data(data.clone());
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_alternates_then_appends_surplus() {
        use UnitKind::{Inter, Intra};
        assert_eq!(unit_schedule(2, 3), vec![Intra, Inter, Intra, Inter, Inter]);
        assert_eq!(unit_schedule(1, 1), vec![Intra, Inter]);
        assert_eq!(unit_schedule(3, 1), vec![Intra, Inter, Intra, Intra]);
        assert_eq!(unit_schedule(0, 2), vec![Inter, Inter]);
        assert!(unit_schedule(0, 0).is_empty());
    }

    #[test]
    fn config_validation() {
        let good = ModelConfig {
            hidden: 8,
            n_intra_units: 1,
            n_inter_units: 1,
            encoder_hidden_layers: 1,
            raw_dim1: 4,
            raw_dim2: 4,
        };
        assert!(good.validate().is_ok());
        assert!(ModelConfig { hidden: 0, ..good }.validate().is_err());
        assert!(ModelConfig { n_intra_units: 0, n_inter_units: 0, ..good }.validate().is_err());
    }

    #[test]
    fn init_is_seed_reproducible_and_units_are_distinct() {
        let cfg = ModelConfig {
            hidden: 4,
            n_intra_units: 2,
            n_inter_units: 2,
            encoder_hidden_layers: 1,
            raw_dim1: 3,
            raw_dim2: 5,
        };
        let a = ModelParams::init(&cfg, 11).unwrap();
        let b = ModelParams::init(&cfg, 11).unwrap();
        for ((na, ta), (nb, tb)) in a.named().iter().zip(b.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        // Stacked copies own distinct parameters.
        let w0 = a.intra_units[0].edge_update.layers[0].weights[0].to_vec();
        let w1 = a.intra_units[1].edge_update.layers[0].weights[0].to_vec();
        assert_ne!(w0, w1);
    }

    #[test]
    fn mlp_applies_parted_first_layer() {
        use crate::tensor::Tape;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[2, 3], 4, 4, 1, &mut rng);
        let a = Tensor::uniform(5, 2, -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(5, 3, -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let out = mlp
            .apply(&tape, &[MlpInput::Direct(&a), MlpInput::Direct(&b)])
            .unwrap();
        assert_eq!(out.shape(), (5, 4));

        // Same rows routed through a gather must give bit-identical output.
        let idx = Rc::new(vec![0usize, 1, 2, 3, 4]);
        let out2 = mlp
            .apply(
                &tape,
                &[
                    MlpInput::Gathered { table: &a, idx: Rc::clone(&idx) },
                    MlpInput::Gathered { table: &b, idx },
                ],
            )
            .unwrap();
        assert_eq!(out.to_vec(), out2.to_vec());
    }

    #[test]
    fn zero_parameters_give_pure_bias_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[3], 4, 2, 1, &mut rng);
        for (_, t) in {
            let mut v = Vec::new();
            mlp.named_params("m", &mut v);
            v
        } {
            t.set_data(vec![0.0; t.len()]);
        }
        let x = Tensor::uniform(6, 3, -1.0, 1.0, &mut rng);
        let tape = crate::tensor::Tape::new();
        let out = mlp.apply(&tape, &[MlpInput::Direct(&x)]).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }
}
