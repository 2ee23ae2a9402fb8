//! Forward pass: encoder, GCN-unit layers, decoder, and the loss.

use std::rc::Rc;

use super::{unit_schedule, IntraUnit, InterUnit, Mlp, MlpInput, ModelConfig, ModelError, ModelParams, UnitKind};
use crate::graph::{EdgeRole, GraphBundle};
use crate::tensor::{Reduction, Tape, Tensor};

/// Latent node/edge attributes flowing through the stacked units. All four
/// tensors are `hidden` wide; empty edge lists carry `0 x hidden` tensors.
pub struct LatentState {
    pub nodes: Tensor,
    pub intra1: Tensor,
    pub intra2: Tensor,
    pub inter: Tensor,
}

fn check_dims(bundle: &GraphBundle, cfg: &ModelConfig) -> Result<(), ModelError> {
    let (d1, d2) = (bundle.nodes().raw1().cols(), bundle.nodes().raw2().cols());
    if d1 != cfg.raw_dim1 || d2 != cfg.raw_dim2 {
        return Err(ModelError::Shape(format!(
            "raw feature widths ({d1}, {d2}) do not match the configured ({}, {})",
            cfg.raw_dim1, cfg.raw_dim2
        )));
    }
    Ok(())
}

/// Map raw node and edge attributes into the latent space: per-modality node
/// encoders, one edge encoder per edge-list role.
pub fn encode(
    tape: &Tape,
    bundle: &GraphBundle,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<LatentState, ModelError> {
    check_dims(bundle, cfg)?;
    if !bundle.edge_attrs_initialized() {
        return Err(ModelError::State(
            "edge attributes not initialized; call init_edge_attrs first".into(),
        ));
    }
    let raw1 = bundle.nodes().raw1();
    let raw2 = bundle.nodes().raw2();
    let v1 = params.node_enc1.apply(tape, &[MlpInput::Direct(raw1)])?;
    let v2 = params.node_enc2.apply(tape, &[MlpInput::Direct(raw2)])?;
    let nodes = tape.concat_rows(&v1, &v2)?;

    // Raw edge attributes are endpoint concatenations, so the encoder's
    // first layer splits into per-endpoint gathers from the raw tables.
    let e = |list: &crate::graph::EdgeList, enc: &Mlp, ts: &Tensor, tr: &Tensor| {
        enc.apply(
            tape,
            &[
                MlpInput::Gathered { table: ts, idx: list.senders_local() },
                MlpInput::Gathered { table: tr, idx: list.receivers_local() },
            ],
        )
    };
    let intra1 = e(bundle.edges(EdgeRole::Intra1), &params.edge_enc_intra1, raw1, raw1)?;
    let intra2 = e(bundle.edges(EdgeRole::Intra2), &params.edge_enc_intra2, raw2, raw2)?;
    let inter = e(bundle.edges(EdgeRole::Inter), &params.edge_enc_inter, raw1, raw2)?;
    Ok(LatentState { nodes, intra1, intra2, inter })
}

/// Intra-edge convolution: aggregate endpoint attributes by concatenation,
/// then regenerate each edge attribute. The same unit parameters apply to
/// both intra edge lists.
pub fn intra_edge_layer(
    tape: &Tape,
    bundle: &GraphBundle,
    state: &mut LatentState,
    unit: &IntraUnit,
) -> Result<(), ModelError> {
    for role in [EdgeRole::Intra1, EdgeRole::Intra2] {
        let list = bundle.edges(role);
        let current = match role {
            EdgeRole::Intra1 => &state.intra1,
            _ => &state.intra2,
        };
        let updated = unit.edge_update.apply(
            tape,
            &[
                MlpInput::Gathered { table: &state.nodes, idx: list.senders_shared() },
                MlpInput::Gathered { table: &state.nodes, idx: list.receivers_shared() },
                MlpInput::Direct(current),
            ],
        )?;
        match role {
            EdgeRole::Intra1 => state.intra1 = updated,
            _ => state.intra2 = updated,
        }
    }
    Ok(())
}

/// The inter-edge aggregation `W (v_s (c) v_r)` with the kernel stored as
/// sender/receiver blocks applied on the right to row-vector attributes.
pub fn inter_edge_aggregate(
    tape: &Tape,
    bundle: &GraphBundle,
    nodes: &Tensor,
    unit: &InterUnit,
) -> Result<Tensor, ModelError> {
    let list = bundle.edges(EdgeRole::Inter);
    let ps = tape.matmul(nodes, &unit.kernel_s)?;
    let pr = tape.matmul(nodes, &unit.kernel_r)?;
    let gs = tape.gather_rows_shared(&ps, list.senders_shared())?;
    let gr = tape.gather_rows_shared(&pr, list.receivers_shared())?;
    Ok(tape.add(&gs, &gr)?)
}

/// Inter-edge convolution: kernel-transformed endpoint aggregation, then
/// regeneration from `(aggregate (c) current)`.
pub fn inter_edge_layer(
    tape: &Tape,
    bundle: &GraphBundle,
    state: &mut LatentState,
    unit: &InterUnit,
) -> Result<(), ModelError> {
    let list = bundle.edges(EdgeRole::Inter);
    // The update MLP's first layer is linear, so the kernel product composes
    // with the aggregate part's weight at node level; the per-edge sum of
    // the two gathers distributes across it (GatherSum).
    let ps = tape.matmul(&state.nodes, &unit.kernel_s)?;
    let pr = tape.matmul(&state.nodes, &unit.kernel_r)?;
    state.inter = unit.edge_update.apply(
        tape,
        &[
            MlpInput::GatherSum {
                parts: vec![(&ps, list.senders_shared()), (&pr, list.receivers_shared())],
            },
            MlpInput::Direct(&state.inter),
        ],
    )?;
    Ok(())
}

/// Node convolution: mean of incident edge attributes (zero for isolated
/// nodes), then regeneration from `(mean (c) current)`. Intra units
/// aggregate over both intra edge lists; inter units over the inter list.
/// Every node is updated either way.
pub fn node_layer(
    tape: &Tape,
    bundle: &GraphBundle,
    state: &mut LatentState,
    kind: UnitKind,
    node_update: &Mlp,
) -> Result<(), ModelError> {
    let n = bundle.nodes().n();
    let aggregated = match kind {
        UnitKind::Intra => {
            let e1 = bundle.edges(EdgeRole::Intra1);
            let e2 = bundle.edges(EdgeRole::Intra2);
            let stacked = tape.concat_rows(&state.intra1, &state.intra2)?;
            let mut senders = e1.senders().to_vec();
            senders.extend_from_slice(e2.senders());
            let mut receivers = e1.receivers().to_vec();
            receivers.extend_from_slice(e2.receivers());
            tape.incident_mean(&stacked, Rc::new(senders), Rc::new(receivers), n)?
        }
        UnitKind::Inter => {
            let list = bundle.edges(EdgeRole::Inter);
            tape.incident_mean(&state.inter, list.senders_shared(), list.receivers_shared(), n)?
        }
    };
    state.nodes = node_update.apply(
        tape,
        &[MlpInput::Direct(&aggregated), MlpInput::Direct(&state.nodes)],
    )?;
    Ok(())
}

/// Encode and run every stacked unit in schedule order.
pub fn forward_latents(
    tape: &Tape,
    bundle: &GraphBundle,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<LatentState, ModelError> {
    cfg.validate()?;
    if params.intra_units.len() != cfg.n_intra_units || params.inter_units.len() != cfg.n_inter_units {
        return Err(ModelError::Config(format!(
            "parameters hold ({}, {}) units but the config says ({}, {})",
            params.intra_units.len(),
            params.inter_units.len(),
            cfg.n_intra_units,
            cfg.n_inter_units
        )));
    }
    let mut state = encode(tape, bundle, params, cfg)?;
    let mut next_intra = params.intra_units.iter();
    let mut next_inter = params.inter_units.iter();
    for kind in unit_schedule(cfg.n_intra_units, cfg.n_inter_units) {
        match kind {
            UnitKind::Intra => {
                let unit = next_intra.next().expect("schedule matches unit counts");
                intra_edge_layer(tape, bundle, &mut state, unit)?;
                node_layer(tape, bundle, &mut state, UnitKind::Intra, &unit.node_update)?;
            }
            UnitKind::Inter => {
                let unit = next_inter.next().expect("schedule matches unit counts");
                inter_edge_layer(tape, bundle, &mut state, unit)?;
                node_layer(tape, bundle, &mut state, UnitKind::Inter, &unit.node_update)?;
            }
        }
    }
    Ok(state)
}

/// Score edge attributes: decoder MLP ending in a sigmoid, probabilities
/// strictly inside (0, 1).
pub fn decode(tape: &Tape, edge_attrs: &Tensor, decoder: &Mlp) -> Result<Tensor, ModelError> {
    let logits = decoder.apply(tape, &[MlpInput::Direct(edge_attrs)])?;
    Ok(tape.sigmoid(&logits))
}

/// Decode only the selected edge rows. Row-wise identical to decoding
/// everything and then gathering.
pub fn decode_rows(
    tape: &Tape,
    edge_attrs: &Tensor,
    rows: Rc<Vec<usize>>,
    decoder: &Mlp,
) -> Result<Tensor, ModelError> {
    let subset = tape.gather_rows_shared(edge_attrs, rows)?;
    decode(tape, &subset, decoder)
}

/// Full forward pass: probabilities over every inter-edge, in inter-edge
/// order.
pub fn forward(
    tape: &Tape,
    bundle: &GraphBundle,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor, ModelError> {
    let state = forward_latents(tape, bundle, params, cfg)?;
    decode(tape, &state.inter, &params.decoder)
}

/// Cross-entropy loss of inter-edge probabilities against the bundle labels.
pub fn loss(
    tape: &Tape,
    probabilities: &Tensor,
    bundle: &GraphBundle,
    reduction: Reduction,
) -> Result<Tensor, ModelError> {
    let labels = bundle
        .labels()
        .ok_or_else(|| ModelError::State("bundle carries no labels".into()))?;
    let y = Tensor::new(labels.len(), 1, labels.to_vec(), false).map_err(ModelError::Tensor)?;
    Ok(tape.bce_loss_with(probabilities, &y, reduction)?)
}
