//! Test support for the relational reasoning network.
//!
//! The centerpiece is [`naive_forward`]: a tape-free, loop-based reference
//! implementation of the full forward pass. It reads the same parameters and
//! bundle as the production path but computes everything with plain nested
//! loops and explicit concatenations, so the two implementations share no
//! numerical code.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use rrnet_core::graph::{EdgeRole, GraphBundle};
use rrnet_core::net::{unit_schedule, Mlp, ModelConfig, ModelParams, UnitKind};

type Matrix = Vec<Vec<f64>>;

fn tensor_rows(t: &rrnet_core::Tensor) -> Matrix {
    let (rows, cols) = t.shape();
    let v = t.to_vec();
    (0..rows).map(|i| v[i * cols..i * cols + cols].to_vec()).collect()
}

/// A plain-matrix copy of an MLP with the part blocks stacked back into one
/// weight matrix per layer.
pub struct NaiveMlp {
    layers: Vec<(Matrix, Vec<f64>)>,
}

impl NaiveMlp {
    pub fn from_mlp(mlp: &Mlp) -> Self {
        let mut layers = Vec::new();
        for li in 0..mlp.layer_count() {
            let mut weight: Matrix = Vec::new();
            for part in mlp.layer_weights(li) {
                weight.extend(tensor_rows(part));
            }
            layers.push((weight, mlp.layer_bias(li).to_vec()));
        }
        NaiveMlp { layers }
    }

    /// Forward one row vector: linear, ReLU between layers, linear output.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for (li, (weight, bias)) in self.layers.iter().enumerate() {
            assert_eq!(x.len(), weight.len(), "layer {li} input width");
            if li > 0 {
                for v in &mut x {
                    *v = v.max(0.0);
                }
            }
            let mut z = bias.clone();
            for (xi, wrow) in x.iter().zip(weight) {
                for (zj, wj) in z.iter_mut().zip(wrow) {
                    *zj += xi * wj;
                }
            }
            x = z;
        }
        x
    }
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(p);
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Tape-free reference forward pass: probabilities over inter-edges in
/// inter-edge order.
pub fn naive_forward(bundle: &GraphBundle, params: &ModelParams, cfg: &ModelConfig) -> Vec<f64> {
    let n1 = bundle.nodes().n1();
    let n = bundle.nodes().n();
    let h = cfg.hidden;
    let raw1 = tensor_rows(bundle.nodes().raw1());
    let raw2 = tensor_rows(bundle.nodes().raw2());

    // Encoder.
    let enc_v1 = NaiveMlp::from_mlp(&params.node_enc1);
    let enc_v2 = NaiveMlp::from_mlp(&params.node_enc2);
    let mut nodes: Matrix = Vec::with_capacity(n);
    for row in &raw1 {
        nodes.push(enc_v1.apply(row));
    }
    for row in &raw2 {
        nodes.push(enc_v2.apply(row));
    }

    let raw_of = |node: usize| -> &[f64] {
        if node < n1 {
            &raw1[node]
        } else {
            &raw2[node - n1]
        }
    };
    let encode_edges = |role: EdgeRole, enc: &Mlp| -> Matrix {
        let enc = NaiveMlp::from_mlp(enc);
        let list = bundle.edges(role);
        list.senders()
            .iter()
            .zip(list.receivers())
            .map(|(&s, &r)| enc.apply(&concat(&[raw_of(s), raw_of(r)])))
            .collect()
    };
    let mut intra1 = encode_edges(EdgeRole::Intra1, &params.edge_enc_intra1);
    let mut intra2 = encode_edges(EdgeRole::Intra2, &params.edge_enc_intra2);
    let mut inter = encode_edges(EdgeRole::Inter, &params.edge_enc_inter);

    // Units in schedule order.
    let mut intra_units = params.intra_units.iter();
    let mut inter_units = params.inter_units.iter();
    for kind in unit_schedule(cfg.n_intra_units, cfg.n_inter_units) {
        match kind {
            UnitKind::Intra => {
                let unit = intra_units.next().unwrap();
                let edge_mlp = NaiveMlp::from_mlp(&unit.edge_update);
                for (role, attrs) in [(EdgeRole::Intra1, &mut intra1), (EdgeRole::Intra2, &mut intra2)] {
                    let list = bundle.edges(role);
                    let updated: Matrix = list
                        .senders()
                        .iter()
                        .zip(list.receivers())
                        .zip(attrs.iter())
                        .map(|((&s, &r), e)| edge_mlp.apply(&concat(&[&nodes[s], &nodes[r], e])))
                        .collect();
                    *attrs = updated;
                }
                // Node update: mean over incident intra edges of both lists.
                let node_mlp = NaiveMlp::from_mlp(&unit.node_update);
                let mut sums = vec![vec![0.0; h]; n];
                let mut counts = vec![0usize; n];
                for (role, attrs) in [(EdgeRole::Intra1, &intra1), (EdgeRole::Intra2, &intra2)] {
                    let list = bundle.edges(role);
                    for ((&s, &r), e) in list.senders().iter().zip(list.receivers()).zip(attrs.iter()) {
                        for (acc, v) in sums[s].iter_mut().zip(e) {
                            *acc += v;
                        }
                        counts[s] += 1;
                        for (acc, v) in sums[r].iter_mut().zip(e) {
                            *acc += v;
                        }
                        counts[r] += 1;
                    }
                }
                nodes = update_nodes(&node_mlp, &nodes, &sums, &counts);
            }
            UnitKind::Inter => {
                let unit = inter_units.next().unwrap();
                let ks = tensor_rows(&unit.kernel_s);
                let kr = tensor_rows(&unit.kernel_r);
                let edge_mlp = NaiveMlp::from_mlp(&unit.edge_update);
                let list = bundle.edges(EdgeRole::Inter);
                let updated: Matrix = list
                    .senders()
                    .iter()
                    .zip(list.receivers())
                    .zip(inter.iter())
                    .map(|((&s, &r), e)| {
                        // Kernel blocks right-multiply the row vectors.
                        let mut ehat = vec![0.0; h];
                        for (t, &v) in nodes[s].iter().enumerate() {
                            for (j, acc) in ehat.iter_mut().enumerate() {
                                *acc += v * ks[t][j];
                            }
                        }
                        for (t, &v) in nodes[r].iter().enumerate() {
                            for (j, acc) in ehat.iter_mut().enumerate() {
                                *acc += v * kr[t][j];
                            }
                        }
                        edge_mlp.apply(&concat(&[&ehat, e]))
                    })
                    .collect();
                inter = updated;

                let node_mlp = NaiveMlp::from_mlp(&unit.node_update);
                let mut sums = vec![vec![0.0; h]; n];
                let mut counts = vec![0usize; n];
                for ((&s, &r), e) in list.senders().iter().zip(list.receivers()).zip(inter.iter()) {
                    for (acc, v) in sums[s].iter_mut().zip(e) {
                        *acc += v;
                    }
                    counts[s] += 1;
                    for (acc, v) in sums[r].iter_mut().zip(e) {
                        *acc += v;
                    }
                    counts[r] += 1;
                }
                nodes = update_nodes(&node_mlp, &nodes, &sums, &counts);
            }
        }
    }

    // Decoder.
    let decoder = NaiveMlp::from_mlp(&params.decoder);
    inter.iter().map(|e| sigmoid(decoder.apply(e)[0])).collect()
}

fn update_nodes(node_mlp: &NaiveMlp, nodes: &Matrix, sums: &[Vec<f64>], counts: &[usize]) -> Matrix {
    nodes
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mean: Vec<f64> = if counts[i] > 0 {
                sums[i].iter().map(|s| s / counts[i] as f64).collect()
            } else {
                vec![0.0; v.len()]
            };
            node_mlp.apply(&concat(&[&mean, v]))
        })
        .collect()
}

/// Reference cross-entropy: `-sum(y ln p + (1-y) ln(1-p))` with the same
/// clamp as the production loss.
pub fn naive_bce(p: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let pc = pi.clamp(1e-7, 1.0 - 1e-7);
            -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln())
        })
        .sum()
}

/// A randomly generated small bundle plus matching parameters and config.
pub struct RandomCase {
    pub bundle: GraphBundle,
    pub params: ModelParams,
    pub config: ModelConfig,
}

/// Generate a valid random bundle with at most 6 nodes, random edges, random
/// labels, and random unit counts (total >= 1).
pub fn random_case(seed: u64) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = rng.gen_range(1..=3);
    let n2 = rng.gen_range(1..=3);
    let d1 = rng.gen_range(1..=4);
    let d2 = rng.gen_range(1..=4);
    let h = rng.gen_range(2..=5);
    let (n_intra, n_inter) = loop {
        let a = rng.gen_range(0..=2);
        let b = rng.gen_range(0..=2);
        if a + b >= 1 {
            break (a, b);
        }
    };

    let feat = |rng: &mut ChaCha8Rng, n: usize, d: usize| {
        rrnet_core::Tensor::uniform(n, d, -1.0, 1.0, rng)
    };
    let raw1 = feat(&mut rng, n1, d1);
    let raw2 = feat(&mut rng, n2, d2);

    let intra = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for s in 0..n {
            for r in 0..n {
                if s != r && rng.gen_bool(0.4) {
                    pairs.push((s, r));
                }
            }
        }
        pairs
    };
    let intra1 = intra(&mut rng, n1);
    let intra2 = intra(&mut rng, n2);
    let mut inter = Vec::new();
    for s in 0..n1 {
        for r in 0..n2 {
            if rng.gen_bool(0.5) {
                inter.push((s, r));
            }
        }
    }
    if inter.is_empty() {
        inter.push((0, 0));
    }

    let mut bundle = GraphBundle::new(raw1, raw2, &intra1, &intra2, &inter).unwrap();
    let labels = (0..inter.len()).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    bundle.set_labels(labels).unwrap();
    bundle.init_edge_attrs().unwrap();

    let config = ModelConfig {
        hidden: h,
        n_intra_units: n_intra,
        n_inter_units: n_inter,
        encoder_hidden_layers: 1,
        raw_dim1: d1,
        raw_dim2: d2,
    };
    let params = ModelParams::init(&config, rng.gen()).unwrap();
    RandomCase { bundle, params, config }
}

/// Relabel nodes (modality-preserving) and shuffle every edge list. Returns
/// the permuted bundle plus, for each new inter-edge position, the original
/// inter-edge index it corresponds to.
pub fn permute_case(case: &RandomCase, seed: u64) -> (GraphBundle, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = &case.bundle;
    let n1 = bundle.nodes().n1();
    let n2 = bundle.nodes().n2();

    // new_of[old] = new position within the modality.
    let perm_vec = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        p
    };
    let new1 = perm_vec(&mut rng, n1);
    let new2 = perm_vec(&mut rng, n2);

    let permute_rows = |t: &rrnet_core::Tensor, new_of: &[usize]| {
        let (rows, cols) = t.shape();
        let v = t.to_vec();
        let mut data = vec![0.0; rows * cols];
        for old in 0..rows {
            let new = new_of[old];
            data[new * cols..new * cols + cols].copy_from_slice(&v[old * cols..old * cols + cols]);
        }
        rrnet_core::Tensor::new(rows, cols, data, false).unwrap()
    };
    let raw1 = permute_rows(bundle.nodes().raw1(), &new1);
    let raw2 = permute_rows(bundle.nodes().raw2(), &new2);

    let shuffle_edges = |rng: &mut ChaCha8Rng, pairs: Vec<(usize, usize)>| -> (Vec<(usize, usize)>, Vec<usize>) {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(rng);
        let shuffled = order.iter().map(|&i| pairs[i]).collect();
        (shuffled, order)
    };

    let list1 = bundle.edges(EdgeRole::Intra1);
    let intra1: Vec<(usize, usize)> = list1
        .senders()
        .iter()
        .zip(list1.receivers())
        .map(|(&s, &r)| (new1[s], new1[r]))
        .collect();
    let (intra1, _) = shuffle_edges(&mut rng, intra1);

    let list2 = bundle.edges(EdgeRole::Intra2);
    let intra2: Vec<(usize, usize)> = list2
        .senders()
        .iter()
        .zip(list2.receivers())
        .map(|(&s, &r)| (new2[s - n1], new2[r - n1]))
        .collect();
    let (intra2, _) = shuffle_edges(&mut rng, intra2);

    let li = bundle.edges(EdgeRole::Inter);
    let inter: Vec<(usize, usize)> = li
        .senders()
        .iter()
        .zip(li.receivers())
        .map(|(&s, &r)| (new1[s], new2[r - n1]))
        .collect();
    let (inter, edge_map) = shuffle_edges(&mut rng, inter);

    let mut permuted = GraphBundle::new(raw1, raw2, &intra1, &intra2, &inter).unwrap();
    if let Some(labels) = bundle.labels() {
        permuted
            .set_labels(edge_map.iter().map(|&old| labels[old]).collect())
            .unwrap();
    }
    permuted.init_edge_attrs().unwrap();
    (permuted, edge_map)
}
