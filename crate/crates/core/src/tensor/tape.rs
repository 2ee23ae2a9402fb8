//! Operation recording and reverse-mode differentiation.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::pool::PoolVec;
use super::{Data, Node, Tensor, TensorError};

/// Reduction applied by the cross-entropy loss. `Sum` is the default and
/// matches the plain sum over inter-edges; `Mean` divides by the edge count
/// so learning rates transfer across graph sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Predictions are clamped to `[P_CLAMP, 1 - P_CLAMP]` before the logs in
/// the cross-entropy loss; saturated sigmoids would otherwise produce -inf.
pub const P_CLAMP: f64 = 1e-7;

type Indices = Rc<Vec<usize>>;

/// One input block of [`Tape::linear_parts`].
pub enum LinearPart<'a> {
    /// `x * w`, rows aligned with the output.
    Direct { x: &'a Tensor, w: &'a Tensor },
    /// `table[idx[r]] * w` per output row `r`. Several gathered parts may
    /// share one weight tensor; their contributions sum.
    Gathered {
        table: &'a Tensor,
        w: &'a Tensor,
        idx: Indices,
    },
}

enum RulePartKind {
    Direct,
    Gathered { idx: Indices, table_rows: usize },
}

struct RulePart {
    kind: RulePartKind,
    /// Direct input or gather table.
    x_node: Rc<Node>,
    x_data: Data,
    w_node: Rc<Node>,
    w_data: Data,
    in_w: usize,
}

/// Per-operation backward rule. Each variant captures exactly the buffers
/// its gradient formula needs; everything else is free to drop.
enum Rule {
    /// dA = dC * B^T, dB = A^T * dC
    Matmul { a: Data, b: Data, m: usize, k: usize, n: usize },
    /// grad splits by column range
    ConcatCols { a_cols: usize },
    /// grad splits by row range
    ConcatRows { a_rows: usize },
    /// dX = dC where out > 0
    Relu { out: Data },
    /// dX = dC * out * (1 - out)
    Sigmoid { out: Data },
    /// scatter-add of dC rows; duplicate indices accumulate
    Gather { idx: Indices, src_rows: usize },
    /// dV[j] = dC[t_j] / count[t_j]
    ScatterMean { targets: Indices, counts: Rc<Vec<f64>> },
    /// dV[j] = dC[s_j]/count[s_j] + dC[r_j]/count[r_j]
    IncidentMean { senders: Indices, receivers: Indices, counts: Rc<Vec<f64>> },
    /// both inputs receive dC
    Add,
    /// dX = dC, dB = column sum of dC
    AddRowBias,
    /// dX = broadcast of the scalar grad
    Sum,
    /// dX = factor * dC
    Scale { factor: f64 },
    /// dP = scale * (p - y) / (p (1 - p)) inside the clamp, 0 where clamped;
    /// dY = scale * ln((1 - p) / p)
    Bce { p: Data, y: Data, scale: f64 },
    /// Fused multi-part linear layer. Gathered parts group by target row in
    /// backward, so their weight and table gradients reduce to node-level
    /// matmuls.
    LinearParts { parts: Vec<RulePart>, bias: Rc<Node>, rows: usize },
}

struct Record {
    inputs: Vec<Rc<Node>>,
    output: Rc<Node>,
    rule: Rule,
}

/// Ordered record of executed operations for one forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    records: RefCell<Vec<Record>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, inputs: &[&Tensor], output: &Tensor, rule: Rule) {
        if output.needs_grad() {
            self.records.borrow_mut().push(Record {
                inputs: inputs.iter().map(|t| Rc::clone(&t.node)).collect(),
                output: Rc::clone(&output.node),
                rule,
            });
        }
    }

    /// C[i][j] = sum_t A[i][t] * B[t][j]
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.cols() != b.rows() {
            return Err(shape("matmul", a, b));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let data = kernels::matmul_nn(&a.value(), &b.value(), m, k, n);
        let out = Tensor::output_pooled(m, n, data, a.needs_grad() || b.needs_grad());
        self.push(
            &[a, b],
            &out,
            Rule::Matmul { a: Rc::clone(&a.data), b: Rc::clone(&b.data), m, k, n },
        );
        Ok(out)
    }

    /// Columns of `a` followed by columns of `b`.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.rows() != b.rows() {
            return Err(shape("concat_cols", a, b));
        }
        let (m, p, q) = (a.rows(), a.cols(), b.cols());
        let av = a.value();
        let bv = b.value();
        let mut data = PoolVec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&av[i * p..i * p + p]);
            data.extend_from_slice(&bv[i * q..i * q + q]);
        }
        drop(av);
        drop(bv);
        let out = Tensor::output_pooled(m, p + q, data, a.needs_grad() || b.needs_grad());
        self.push(&[a, b], &out, Rule::ConcatCols { a_cols: p });
        Ok(out)
    }

    /// Rows of `a` stacked above rows of `b`.
    pub fn concat_rows(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.cols() != b.cols() {
            return Err(shape("concat_rows", a, b));
        }
        let mut data = PoolVec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.value());
        data.extend_from_slice(&b.value());
        let out = Tensor::output_pooled(a.rows() + b.rows(), a.cols(), data, a.needs_grad() || b.needs_grad());
        self.push(&[a, b], &out, Rule::ConcatRows { a_rows: a.rows() });
        Ok(out)
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let data = kernels::map(&x.value(), |v| v.max(0.0));
        let out = Tensor::output_pooled(x.rows(), x.cols(), data, x.needs_grad());
        self.push(&[x], &out, Rule::Relu { out: Rc::clone(&out.data) });
        out
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        // Branch on sign for overflow safety, then clamp into the open
        // interval: strictly inside (0, 1) for every finite input.
        let lo = f64::MIN_POSITIVE;
        let hi = 1.0 - f64::EPSILON / 2.0;
        let data = kernels::map(&x.value(), |v| {
            let s = if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
            s.clamp(lo, hi)
        });
        let out = Tensor::output_pooled(x.rows(), x.cols(), data, x.needs_grad());
        self.push(&[x], &out, Rule::Sigmoid { out: Rc::clone(&out.data) });
        out
    }

    /// Row `j` of the output is row `idx[j]` of the input.
    pub fn gather_rows(&self, x: &Tensor, idx: &[usize]) -> Result<Tensor, TensorError> {
        self.gather_rows_shared(x, Rc::new(idx.to_vec()))
    }

    /// Like [`Tape::gather_rows`] but shares the index buffer instead of
    /// copying it; the backward rule keeps a reference.
    pub fn gather_rows_shared(&self, x: &Tensor, idx: Indices) -> Result<Tensor, TensorError> {
        check_bounds("gather_rows", &idx, x.rows())?;
        let data = kernels::gather_rows(&x.value(), &idx, x.cols());
        let out = Tensor::output_pooled(idx.len(), x.cols(), data, x.needs_grad());
        self.push(&[x], &out, Rule::Gather { idx, src_rows: x.rows() });
        Ok(out)
    }

    /// Output row `t` is the mean of value rows with target `t`; targets
    /// without contributors yield zero rows.
    pub fn scatter_mean(&self, values: &Tensor, targets: &[usize], n: usize) -> Result<Tensor, TensorError> {
        self.scatter_mean_shared(values, Rc::new(targets.to_vec()), n)
    }

    pub fn scatter_mean_shared(&self, values: &Tensor, targets: Indices, n: usize) -> Result<Tensor, TensorError> {
        if targets.len() != values.rows() {
            return Err(TensorError::Contract(format!(
                "scatter_mean: {} targets for {} value rows",
                targets.len(),
                values.rows()
            )));
        }
        check_bounds("scatter_mean", &targets, n)?;
        let counts = Rc::new(kernels::target_counts(&targets, n));
        let data = kernels::segment_mean(&values.value(), &targets, &counts, n, values.cols());
        let out = Tensor::output_pooled(n, values.cols(), data, values.needs_grad());
        self.push(&[values], &out, Rule::ScatterMean { targets, counts });
        Ok(out)
    }

    /// Mean of edge-attribute rows over node endpoints: edge row `j`
    /// contributes to output rows `senders[j]` and `receivers[j]`.
    pub fn incident_mean(
        &self,
        values: &Tensor,
        senders: Indices,
        receivers: Indices,
        n: usize,
    ) -> Result<Tensor, TensorError> {
        if senders.len() != values.rows() || receivers.len() != values.rows() {
            return Err(TensorError::Contract(format!(
                "incident_mean: {} senders / {} receivers for {} value rows",
                senders.len(),
                receivers.len(),
                values.rows()
            )));
        }
        check_bounds("incident_mean", &senders, n)?;
        check_bounds("incident_mean", &receivers, n)?;
        let mut counts = kernels::target_counts(&senders, n);
        for (c, extra) in counts.iter_mut().zip(kernels::target_counts(&receivers, n)) {
            *c += extra;
        }
        let counts = Rc::new(counts);
        let data = kernels::incident_mean(&values.value(), &senders, &receivers, &counts, n, values.cols());
        let out = Tensor::output_pooled(n, values.cols(), data, values.needs_grad());
        self.push(&[values], &out, Rule::IncidentMean { senders, receivers, counts });
        Ok(out)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(shape("add", a, b));
        }
        let data = kernels::zip2(&a.value(), &b.value(), |x, y| x + y);
        let out = Tensor::output_pooled(a.rows(), a.cols(), data, a.needs_grad() || b.needs_grad());
        self.push(&[a, b], &out, Rule::Add);
        Ok(out)
    }

    /// Add a 1 x n bias row to every row of `x`.
    pub fn add_row_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        if bias.rows() != 1 || bias.cols() != x.cols() {
            return Err(shape("add_row_bias", x, bias));
        }
        let bv = bias.to_vec();
        let xv = x.value();
        let n = x.cols();
        let mut data = PoolVec::with_capacity(x.len());
        for row in xv.chunks(n.max(1)) {
            data.extend(row.iter().zip(&bv).map(|(a, b)| a + b));
        }
        drop(xv);
        let out = Tensor::output_pooled(x.rows(), x.cols(), data, x.needs_grad() || bias.needs_grad());
        self.push(&[x, bias], &out, Rule::AddRowBias);
        Ok(out)
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&self, x: &Tensor) -> Tensor {
        let total = kernels::sum(&x.value());
        let out = Tensor::output(1, 1, vec![total], x.needs_grad());
        self.push(&[x], &out, Rule::Sum);
        out
    }

    pub fn scale(&self, x: &Tensor, factor: f64) -> Tensor {
        let data = kernels::map(&x.value(), |v| v * factor);
        let out = Tensor::output_pooled(x.rows(), x.cols(), data, x.needs_grad());
        self.push(&[x], &out, Rule::Scale { factor });
        out
    }

    /// Binary cross entropy, summed: `-sum(y ln p + (1-y) ln(1-p))` with `p`
    /// clamped to `[P_CLAMP, 1-P_CLAMP]` before the logs.
    pub fn bce_loss(&self, p: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
        self.bce_loss_with(p, y, Reduction::Sum)
    }

    pub fn bce_loss_with(&self, p: &Tensor, y: &Tensor, reduction: Reduction) -> Result<Tensor, TensorError> {
        if p.shape() != y.shape() {
            return Err(shape("bce_loss", p, y));
        }
        if y.value().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TensorError::Contract(
                "bce_loss: targets must lie in [0, 1]".into(),
            ));
        }
        let k = p.rows() * p.cols();
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / k.max(1) as f64,
        };
        let clamped = kernels::map(&p.value(), |v| v.clamp(P_CLAMP, 1.0 - P_CLAMP));
        let yv = y.value();
        let mut total = 0.0;
        for (&pc, &yi) in clamped.iter().zip(yv.iter()) {
            total -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        drop(yv);
        let out = Tensor::output(1, 1, vec![total * scale], p.needs_grad() || y.needs_grad());
        self.push(
            &[p, y],
            &out,
            Rule::Bce {
                p: Rc::new(RefCell::new(clamped)),
                y: Rc::clone(&y.data),
                scale,
            },
        );
        Ok(out)
    }

    /// Fused linear layer `Z = sum_parts input * W_part + bias` computed in
    /// one pass; row counts of all parts must agree.
    pub fn linear_parts(&self, parts: &[LinearPart], bias: &Tensor) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("linear_parts: no input parts".into()));
        }
        let out_w = bias.cols();
        if bias.rows() != 1 {
            return Err(shape("linear_parts", bias, bias));
        }
        let mut rows: Option<usize> = None;
        let mut needs = bias.needs_grad();
        for part in parts {
            let (part_rows, x, w) = match part {
                LinearPart::Direct { x, w } => (x.rows(), *x, *w),
                LinearPart::Gathered { table, w, idx } => {
                    check_bounds("linear_parts", idx, table.rows())?;
                    (idx.len(), *table, *w)
                }
            };
            if x.cols() != w.rows() || w.cols() != out_w {
                return Err(shape("linear_parts", x, w));
            }
            match rows {
                None => rows = Some(part_rows),
                Some(r) if r != part_rows => {
                    return Err(TensorError::Contract(format!(
                        "linear_parts: row counts disagree ({r} vs {part_rows})"
                    )))
                }
                _ => {}
            }
            needs |= x.needs_grad() || w.needs_grad();
        }
        let rows = rows.expect("at least one part");

        // Gathered parts compute their table-level product once; the row
        // pass then only adds cached product rows.
        let products: Vec<Option<super::pool::PoolVec>> = parts
            .iter()
            .map(|p| match p {
                LinearPart::Direct { .. } => None,
                LinearPart::Gathered { table, w, .. } => Some(kernels::matmul_nn(
                    &table.value(),
                    &w.value(),
                    table.rows(),
                    table.cols(),
                    out_w,
                )),
            })
            .collect();
        let xv: Vec<std::cell::Ref<'_, Vec<f64>>> = parts
            .iter()
            .map(|p| match p {
                LinearPart::Direct { x, .. } => x.value(),
                LinearPart::Gathered { table, .. } => table.value(),
            })
            .collect();
        let wv: Vec<std::cell::Ref<'_, Vec<f64>>> = parts
            .iter()
            .map(|p| match p {
                LinearPart::Direct { w, .. } | LinearPart::Gathered { w, .. } => w.value(),
            })
            .collect();
        let srcs: Vec<kernels::PartSrc<'_>> = parts
            .iter()
            .zip(xv.iter().zip(&wv))
            .zip(&products)
            .map(|((part, (x, w)), product)| match part {
                LinearPart::Direct { x: xt, .. } => kernels::PartSrc::Direct {
                    x: x.as_slice(),
                    w: w.as_slice(),
                    in_w: xt.cols(),
                },
                LinearPart::Gathered { idx, .. } => kernels::PartSrc::GatheredProduct {
                    product: product.as_ref().expect("computed above"),
                    idx: idx.as_slice(),
                },
            })
            .collect();
        let data = kernels::linear_parts(&srcs, &bias.value(), rows, out_w);
        drop(srcs);
        drop(xv);
        drop(wv);
        let out = Tensor::output_pooled(rows, out_w, data, needs);
        if out.needs_grad() {
            let rule_parts = parts
                .iter()
                .map(|p| match p {
                    LinearPart::Direct { x, w } => RulePart {
                        kind: RulePartKind::Direct,
                        x_node: Rc::clone(&x.node),
                        x_data: Rc::clone(&x.data),
                        w_node: Rc::clone(&w.node),
                        w_data: Rc::clone(&w.data),
                        in_w: x.cols(),
                    },
                    LinearPart::Gathered { table, w, idx } => RulePart {
                        kind: RulePartKind::Gathered {
                            idx: Rc::clone(idx),
                            table_rows: table.rows(),
                        },
                        x_node: Rc::clone(&table.node),
                        x_data: Rc::clone(&table.data),
                        w_node: Rc::clone(&w.node),
                        w_data: Rc::clone(&w.data),
                        in_w: table.cols(),
                    },
                })
                .collect();
            self.records.borrow_mut().push(Record {
                inputs: Vec::new(),
                output: Rc::clone(&out.node),
                rule: Rule::LinearParts {
                    parts: rule_parts,
                    bias: Rc::clone(&bias.node),
                    rows,
                },
            });
        }
        Ok(out)
    }

    /// Run every recorded backward rule in reverse order, accumulating
    /// `dL/dx` into each `requires_grad` leaf reachable from `loss`.
    /// Repeated calls without `zero_grad` accumulate. Gradients of
    /// intermediates are dropped as soon as their producing rule has run.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if !loss.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                loss.rows(),
                loss.cols()
            )));
        }
        loss.node.accumulate(&[1.0]);
        let records = self.records.borrow();
        for record in records.iter().rev() {
            // No gradient flowed into this output: the op does not lie on a
            // path to the loss (or a later rule already consumed it).
            let Some(gout) = record.output.take_grad() else {
                continue;
            };
            apply_rule(record, &gout);
        }
        // Leaves keep their accumulated gradients; the loss seed itself was
        // consumed by its producing record unless the loss is a leaf.
        Ok(())
    }
}

fn shape(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        a_rows: a.rows(),
        a_cols: a.cols(),
        b_rows: b.rows(),
        b_cols: b.cols(),
    }
}

fn check_bounds(op: &'static str, idx: &[usize], bound: usize) -> Result<(), TensorError> {
    match idx.iter().find(|&&i| i >= bound) {
        Some(&i) => Err(TensorError::Bounds { op, index: i, bound }),
        None => Ok(()),
    }
}

fn apply_rule(record: &Record, gout: &[f64]) {
    let inputs = &record.inputs;
    match &record.rule {
        Rule::Matmul { a, b, m, k, n } => {
            if inputs[0].needs_grad() {
                let da = kernels::matmul_nt(gout, &b.borrow(), *m, *n, *k);
                inputs[0].accumulate_owned(da);
            }
            if inputs[1].needs_grad() {
                let db = kernels::matmul_tn(&a.borrow(), gout, *m, *k, *n);
                inputs[1].accumulate_owned(db);
            }
        }
        Rule::ConcatCols { a_cols } => {
            let rows = record.output.rows;
            let total = record.output.cols;
            let (p, q) = (*a_cols, total - a_cols);
            if inputs[0].needs_grad() {
                let mut da = PoolVec::with_capacity(rows * p);
                for i in 0..rows {
                    da.extend_from_slice(&gout[i * total..i * total + p]);
                }
                inputs[0].accumulate_owned(da);
            }
            if inputs[1].needs_grad() {
                let mut db = PoolVec::with_capacity(rows * q);
                for i in 0..rows {
                    db.extend_from_slice(&gout[i * total + p..(i + 1) * total]);
                }
                inputs[1].accumulate_owned(db);
            }
        }
        Rule::ConcatRows { a_rows } => {
            let cols = record.output.cols;
            let split = a_rows * cols;
            if inputs[0].needs_grad() {
                inputs[0].accumulate(&gout[..split]);
            }
            if inputs[1].needs_grad() {
                inputs[1].accumulate(&gout[split..]);
            }
        }
        Rule::Relu { out } => {
            if inputs[0].needs_grad() {
                let dx = kernels::zip2(gout, &out.borrow(), |g, o| if o > 0.0 { g } else { 0.0 });
                inputs[0].accumulate_owned(dx);
            }
        }
        Rule::Sigmoid { out } => {
            if inputs[0].needs_grad() {
                let dx = kernels::zip2(gout, &out.borrow(), |g, o| g * o * (1.0 - o));
                inputs[0].accumulate_owned(dx);
            }
        }
        Rule::Gather { idx, src_rows } => {
            if inputs[0].needs_grad() {
                let dx = kernels::scatter_add_rows(gout, idx, *src_rows, record.output.cols);
                inputs[0].accumulate_owned(dx);
            }
        }
        Rule::ScatterMean { targets, counts } => {
            if inputs[0].needs_grad() {
                let cols = record.output.cols;
                let mut dv = PoolVec::with_capacity(targets.len() * cols);
                for &t in targets.iter() {
                    let inv = 1.0 / counts[t];
                    dv.extend(gout[t * cols..t * cols + cols].iter().map(|g| g * inv));
                }
                inputs[0].accumulate_owned(dv);
            }
        }
        Rule::IncidentMean { senders, receivers, counts } => {
            if inputs[0].needs_grad() {
                let cols = record.output.cols;
                let mut dv = PoolVec::with_capacity(senders.len() * cols);
                for (&s, &r) in senders.iter().zip(receivers.iter()) {
                    let sinv = 1.0 / counts[s];
                    let rinv = 1.0 / counts[r];
                    for j in 0..cols {
                        dv.push(gout[s * cols + j] * sinv + gout[r * cols + j] * rinv);
                    }
                }
                inputs[0].accumulate_owned(dv);
            }
        }
        Rule::Add => {
            for input in inputs {
                if input.needs_grad() {
                    input.accumulate(gout);
                }
            }
        }
        Rule::AddRowBias => {
            if inputs[0].needs_grad() {
                inputs[0].accumulate(gout);
            }
            if inputs[1].needs_grad() {
                let cols = record.output.cols;
                let mut db = vec![0.0; cols];
                for row in gout.chunks(cols.max(1)) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                inputs[1].accumulate(&db);
            }
        }
        Rule::Sum => {
            if inputs[0].needs_grad() {
                let mut dv = PoolVec::with_capacity(inputs[0].len());
                dv.resize(inputs[0].len(), gout[0]);
                inputs[0].accumulate_owned(dv);
            }
        }
        Rule::Scale { factor } => {
            if inputs[0].needs_grad() {
                let dx = kernels::map(gout, |g| g * factor);
                inputs[0].accumulate_owned(dx);
            }
        }
        Rule::LinearParts { parts, bias, rows } => {
            let out_w = record.output.cols;
            for part in parts {
                match &part.kind {
                    RulePartKind::Direct => {
                        if part.w_node.needs_grad() {
                            let dw = kernels::matmul_tn(&part.x_data.borrow(), gout, *rows, part.in_w, out_w);
                            part.w_node.accumulate_owned(dw);
                        }
                        if part.x_node.needs_grad() {
                            let dx = kernels::matmul_nt(gout, &part.w_data.borrow(), *rows, out_w, part.in_w);
                            part.x_node.accumulate_owned(dx);
                        }
                    }
                    RulePartKind::Gathered { idx, table_rows } => {
                        // Group output-row gradients by table row first; both
                        // gradients then reduce to table-level matmuls.
                        let grouped = kernels::scatter_add_rows(gout, idx, *table_rows, out_w);
                        if part.w_node.needs_grad() {
                            let dw = kernels::matmul_tn(&part.x_data.borrow(), &grouped, *table_rows, part.in_w, out_w);
                            part.w_node.accumulate_owned(dw);
                        }
                        if part.x_node.needs_grad() {
                            let dt = kernels::matmul_nt(&grouped, &part.w_data.borrow(), *table_rows, out_w, part.in_w);
                            part.x_node.accumulate_owned(dt);
                        }
                    }
                }
            }
            if bias.needs_grad() {
                bias.accumulate(&kernels::column_sums(gout, out_w));
            }
        }
        Rule::Bce { p, y, scale } => {
            let g = gout[0] * scale;
            let pc = p.borrow();
            let yv = y.borrow();
            if inputs[0].needs_grad() {
                let lo = P_CLAMP;
                let hi = 1.0 - P_CLAMP;
                let mut dp = PoolVec::with_capacity(pc.len());
                dp.extend(pc.iter().zip(yv.iter()).map(|(&pi, &yi)| {
                    // Clamped entries sit exactly on the bound; the clamp
                    // blocks gradient flow there.
                    if pi <= lo || pi >= hi {
                        0.0
                    } else {
                        g * (pi - yi) / (pi * (1.0 - pi))
                    }
                }));
                inputs[0].accumulate_owned(dp);
            }
            if inputs[1].needs_grad() {
                let mut dy = PoolVec::with_capacity(pc.len());
                dy.extend(pc.iter().map(|&pi| g * ((1.0 - pi).ln() - pi.ln())));
                inputs[1].accumulate_owned(dy);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "{got:?} vs {want:?}");
        }
    }

    /// Finite-difference check of a single-op closure over one parameter.
    fn fd_check<F>(param: &Tensor, build: F)
    where
        F: FnMut() -> Result<(Tape, Tensor), TensorError>,
    {
        let params = vec![("p".to_string(), param.clone())];
        let report = gradcheck(&params, build, 1e-4, 1e-5).unwrap();
        assert!(
            report.passed(),
            "finite differences disagree: {:#?}",
            report.entries
        );
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let y = tape.matmul(&i2, &x).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_small_case() {
        // Triple-loop oracle on [[1,2],[3,4]] x [[5],[6]]:
        // row0: 1*5 + 2*6 = 17; row1: 3*5 + 4*6 = 39.
        let tape = Tape::new();
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_close(&c.to_vec(), &[17.0, 39.0], 1e-12);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let tape = Tape::new();
        let z = Tensor::zeros(2, 2);
        let b = Tensor::from_rows(&[&[1.5, -2.0, 3.0], &[0.5, 7.0, -1.0]]).unwrap();
        let c = tape.matmul(&z, &b).unwrap();
        assert!(c.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::param(3, 4, Tensor::uniform(3, 4, -1.0, 1.0, &mut rng).to_vec()).unwrap();
        let b = Tensor::param(4, 2, Tensor::uniform(4, 2, -1.0, 1.0, &mut rng).to_vec()).unwrap();
        for p in [&a, &b] {
            let (a, b) = (a.clone(), b.clone());
            fd_check(p, move || {
                let tape = Tape::new();
                let c = tape.matmul(&a, &b)?;
                { let loss = tape.sum(&c); Ok((tape, loss)) }
            });
        }
    }

    #[test]
    fn concat_cols_definition() {
        let tape = Tape::new();
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0]]).unwrap();
        let c = tape.concat_cols(&a, &b).unwrap();
        assert_eq!(c.shape(), (1, 3));
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_cols_slices_back_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(4, 3, -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(4, 2, -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let c = tape.concat_cols(&a, &b).unwrap();
        let cv = c.to_vec();
        for i in 0..4 {
            assert_eq!(&cv[i * 5..i * 5 + 3], &a.to_vec()[i * 3..i * 3 + 3]);
            assert_eq!(&cv[i * 5 + 3..i * 5 + 5], &b.to_vec()[i * 2..i * 2 + 2]);
        }
    }

    #[test]
    fn concat_cols_gradient_of_sum_is_ones() {
        let a = Tensor::param(2, 3, vec![0.1; 6]).unwrap();
        let b = Tensor::param(2, 2, vec![0.2; 4]).unwrap();
        let tape = Tape::new();
        let c = tape.concat_cols(&a, &b).unwrap();
        let loss = tape.sum(&c);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 4]);
        let (a2, b2) = (a.clone(), b.clone());
        fd_check(&a, move || {
            let tape = Tape::new();
            let c = tape.concat_cols(&a2, &b2)?;
            { let loss = tape.sum(&c); Ok((tape, loss)) }
        });
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let a = Tensor::param(1, 2, vec![0.4, 0.5]).unwrap();
        let tape = Tape::new();
        // Stack the same tensor twice: gradient contributions accumulate.
        let c = tape.concat_rows(&a, &a).unwrap();
        assert_eq!(c.shape(), (2, 2));
        let loss = tape.sum(&c);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn relu_definition() {
        let tape = Tape::new();
        let x = Tensor::from_rows(&[&[-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(tape.relu(&x).to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_symmetry_point_and_slope() {
        let tape = Tape::new();
        let x = Tensor::param(1, 1, vec![0.0]).unwrap();
        let s = tape.sigmoid(&x);
        assert_eq!(s.item(), 0.5);
        tape.backward(&s).unwrap();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_stays_in_open_interval() {
        let tape = Tape::new();
        let x = Tensor::from_rows(&[&[-1e9, -800.0, 0.0, 800.0, 1e9]]).unwrap();
        for v in tape.sigmoid(&x).to_vec() {
            assert!(v > 0.0 && v < 1.0, "sigmoid produced {v}");
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::param(4, 3, Tensor::uniform(4, 3, -1.0, 1.0, &mut rng).to_vec()).unwrap();
        let xr = x.clone();
        fd_check(&x, move || {
            let tape = Tape::new();
            let r = tape.relu(&xr);
            { let loss = tape.sum(&r); Ok((tape, loss)) }
        });
        let xs = x.clone();
        fd_check(&x, move || {
            let tape = Tape::new();
            let s = tape.sigmoid(&xs);
            { let loss = tape.sum(&s); Ok((tape, loss)) }
        });
    }

    #[test]
    fn gather_definition_and_identity() {
        let tape = Tape::new();
        let t = Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]).unwrap();
        let g = tape.gather_rows(&t, &[2, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![3.0, 1.0]);
        let id = tape.gather_rows(&t, &[0, 1, 2]).unwrap();
        assert_eq!(id.to_vec(), t.to_vec());
    }

    #[test]
    fn gather_out_of_range_names_index() {
        let tape = Tape::new();
        let t = Tensor::zeros(3, 1);
        let err = tape.gather_rows(&t, &[0, 7]).unwrap_err();
        assert!(err.to_string().contains('7'), "{err}");
    }

    #[test]
    fn gather_duplicate_rows_double_gradient() {
        let t = Tensor::param(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let tape = Tape::new();
        let g = tape.gather_rows(&t, &[0, 0]).unwrap();
        let loss = tape.sum(&g);
        tape.backward(&loss).unwrap();
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let tr = t.clone();
        fd_check(&t, move || {
            let tape = Tape::new();
            let g = tape.gather_rows(&tr, &[0, 0])?;
            { let loss = tape.sum(&g); Ok((tape, loss)) }
        });
    }

    #[test]
    fn scatter_mean_two_element_mean() {
        let tape = Tape::new();
        let v = Tensor::from_rows(&[&[2.0], &[4.0]]).unwrap();
        let m = tape.scatter_mean(&v, &[0, 0], 1).unwrap();
        assert_eq!(m.to_vec(), vec![3.0]);
    }

    #[test]
    fn scatter_mean_empty_input_gives_zeros() {
        let tape = Tape::new();
        let v = Tensor::zeros(0, 4);
        let m = tape.scatter_mean(&v, &[], 3).unwrap();
        assert_eq!(m.shape(), (3, 4));
        assert!(m.to_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scatter_mean_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = Tensor::uniform(6, 2, -1.0, 1.0, &mut rng);
        let targets = [2usize, 0, 2, 1, 0, 2];
        let tape = Tape::new();
        let got = tape.scatter_mean(&v, &targets, 3).unwrap();

        // Naive per-target mean.
        let vv = v.to_vec();
        let mut want = vec![0.0; 6];
        let mut counts = [0.0; 3];
        for (row, &t) in targets.iter().enumerate() {
            counts[t] += 1.0;
            want[t * 2] += vv[row * 2];
            want[t * 2 + 1] += vv[row * 2 + 1];
        }
        for t in 0..3 {
            want[t * 2] /= counts[t];
            want[t * 2 + 1] /= counts[t];
        }
        assert_close(&got.to_vec(), &want, 1e-12);
    }

    #[test]
    fn scatter_mean_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let v = Tensor::param(5, 2, Tensor::uniform(5, 2, -1.0, 1.0, &mut rng).to_vec()).unwrap();
        let vr = v.clone();
        fd_check(&v, move || {
            let tape = Tape::new();
            let m = tape.scatter_mean(&vr, &[1, 0, 1, 2, 1], 3)?;
            // Weight rows unevenly so errors cannot cancel.
            let w = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 0.5, -1.5]]).unwrap();
            let prod = tape.matmul(&m, &w)?;
            { let loss = tape.sum(&prod); Ok((tape, loss)) }
        });
    }

    #[test]
    fn scatter_mean_inverts_singleton_gather() {
        // When each target receives exactly one value the mean recovers the
        // original rows.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Tensor::uniform(4, 3, -1.0, 1.0, &mut rng);
        let perm = [3usize, 1, 0, 2];
        let tape = Tape::new();
        let g = tape.gather_rows(&t, &perm).unwrap();
        let back = tape.scatter_mean(&g, &perm, 4).unwrap();
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn incident_mean_matches_scatter_of_stacked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = Tensor::uniform(5, 3, -1.0, 1.0, &mut rng);
        let s: Vec<usize> = vec![0, 1, 2, 0, 3];
        let r: Vec<usize> = vec![1, 2, 3, 2, 0];
        let tape = Tape::new();
        let fused = tape
            .incident_mean(&e, Rc::new(s.clone()), Rc::new(r.clone()), 4)
            .unwrap();
        let stacked = tape.concat_rows(&e, &e).unwrap();
        let mut targets = s;
        targets.extend(r);
        let via_scatter = tape.scatter_mean(&stacked, &targets, 4).unwrap();
        assert_close(&fused.to_vec(), &via_scatter.to_vec(), 1e-12);
    }

    #[test]
    fn incident_mean_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let e = Tensor::param(4, 2, Tensor::uniform(4, 2, -1.0, 1.0, &mut rng).to_vec()).unwrap();
        let er = e.clone();
        fd_check(&e, move || {
            let tape = Tape::new();
            let m = tape.incident_mean(&er, Rc::new(vec![0, 1, 2, 0]), Rc::new(vec![1, 2, 0, 2]), 3)?;
            let w = Tensor::from_rows(&[&[1.0, -1.0, 2.0], &[0.5, 0.25, -3.0]]).unwrap();
            let prod = tape.matmul(&m, &w)?;
            { let loss = tape.sum(&prod); Ok((tape, loss)) }
        });
    }

    #[test]
    fn bce_uniform_prediction_is_ln2() {
        let tape = Tape::new();
        let p = Tensor::from_rows(&[&[0.5]]).unwrap();
        let y = Tensor::from_rows(&[&[1.0]]).unwrap();
        let loss = tape.bce_loss(&p, &y).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_all_half_equals_k_ln2_for_any_binary_targets() {
        let tape = Tape::new();
        let k = 7;
        let p = Tensor::new(k, 1, vec![0.5; k], false).unwrap();
        for pattern in [vec![1.0; k], vec![0.0; k], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]] {
            let y = Tensor::new(k, 1, pattern, false).unwrap();
            let loss = tape.bce_loss(&p, &y).unwrap();
            assert!((loss.item() - k as f64 * std::f64::consts::LN_2).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let tape = Tape::new();
        let eps = 1e-7;
        let p = Tensor::new(2, 1, vec![1.0 - eps, eps], false).unwrap();
        let y = Tensor::new(2, 1, vec![1.0, 0.0], false).unwrap();
        let loss = tape.bce_loss(&p, &y).unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn bce_direct_evaluation() {
        let tape = Tape::new();
        let p = Tensor::new(2, 1, vec![0.9, 0.2], false).unwrap();
        let y = Tensor::new(2, 1, vec![1.0, 0.0], false).unwrap();
        let loss = tape.bce_loss(&p, &y).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln());
        assert!((loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn bce_mean_reduction_divides_by_count() {
        let tape = Tape::new();
        let p = Tensor::new(4, 1, vec![0.5; 4], false).unwrap();
        let y = Tensor::new(4, 1, vec![1.0, 0.0, 1.0, 0.0], false).unwrap();
        let sum = tape.bce_loss_with(&p, &y, Reduction::Sum).unwrap();
        let mean = tape.bce_loss_with(&p, &y, Reduction::Mean).unwrap();
        assert!((sum.item() / 4.0 - mean.item()).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_shape_mismatch_and_bad_targets() {
        let tape = Tape::new();
        let p = Tensor::zeros(2, 1);
        let y3 = Tensor::zeros(3, 1);
        assert!(matches!(tape.bce_loss(&p, &y3), Err(TensorError::Shape { .. })));
        let bad = Tensor::new(2, 1, vec![0.5, 1.5], false).unwrap();
        let p2 = Tensor::new(2, 1, vec![0.5, 0.5], false).unwrap();
        assert!(tape.bce_loss(&p2, &bad).is_err());
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let p = Tensor::param(3, 1, vec![0.3, 0.6, 0.9]).unwrap();
        let y = Tensor::new(3, 1, vec![1.0, 0.25, 0.0], false).unwrap();
        let (pr, yr) = (p.clone(), y.clone());
        fd_check(&p, move || {
            let tape = Tape::new();
            let loss = tape.bce_loss(&pr, &yr)?;
            Ok((tape, loss))
        });
    }

    #[test]
    fn backward_linear_case_broadcasts_x() {
        // L = sum(W x) with x fixed: every row of dW equals x^T.
        let w = Tensor::param(2, 3, vec![0.0; 6]).unwrap();
        let x = Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]).unwrap();
        let tape = Tape::new();
        let prod = tape.matmul(&w, &x).unwrap();
        let loss = tape.sum(&prod);
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        // x was not created with requires_grad: no gradient is stored.
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = Tensor::param(2, 1, vec![1.0, 2.0]).unwrap();
        let y = tape.scale(&x, 2.0);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = Tensor::param(1, 1, vec![2.0]).unwrap();
        let tape = Tape::new();
        let y = tape.scale(&x, 3.0);
        tape.backward(&y).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn disconnected_parameter_has_no_gradient() {
        let used = Tensor::param(1, 1, vec![1.0]).unwrap();
        let unused = Tensor::param(1, 1, vec![5.0]).unwrap();
        let tape = Tape::new();
        let loss = tape.scale(&used, 2.0);
        tape.backward(&loss).unwrap();
        assert_eq!(used.grad().unwrap(), vec![2.0]);
        assert!(unused.grad().is_none());
    }

    #[test]
    fn add_row_bias_gradients() {
        let x = Tensor::param(3, 2, vec![0.0; 6]).unwrap();
        let b = Tensor::param(1, 2, vec![0.5, -0.5]).unwrap();
        let tape = Tape::new();
        let y = tape.add_row_bias(&x, &b).unwrap();
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn operations_keep_values_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform(6, 6, -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(6, 6, -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let c = tape.matmul(&a, &b).unwrap();
        let d = tape.sigmoid(&c);
        let e = tape.relu(&d);
        for t in [&c, &d, &e] {
            assert!(t.all_finite());
        }
    }
}
