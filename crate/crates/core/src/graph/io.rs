//! Plain-text edge-list serialization: a header line naming the edge-list
//! role, then one `sender<TAB>receiver` line per edge.

use std::io::{BufRead, Write};

use super::{EdgeList, GraphError};

pub fn write_edge_list(mut w: impl Write, role: &str, edges: &EdgeList) -> std::io::Result<()> {
    writeln!(w, "{role}")?;
    for (s, r) in edges.senders().iter().zip(edges.receivers()) {
        writeln!(w, "{s}\t{r}")?;
    }
    Ok(())
}

/// Returns the role named in the header and the `(sender, receiver)` pairs.
pub fn read_edge_list(r: impl BufRead) -> Result<(String, Vec<(usize, usize)>), GraphError> {
    let mut lines = r.lines().enumerate();
    let role = match lines.next() {
        Some((_, line)) => line?.trim().to_string(),
        None => {
            return Err(GraphError::Parse {
                line: 1,
                message: "missing header line naming the edge-list role".into(),
            })
        }
    };
    let mut pairs = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let parse = |field: Option<&str>| -> Result<usize, GraphError> {
            field
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| GraphError::Parse {
                    line: idx + 1,
                    message: format!("expected 'sender<TAB>receiver', got {trimmed:?}"),
                })
        };
        let s = parse(fields.next())?;
        let r = parse(fields.next())?;
        pairs.push((s, r));
    }
    Ok((role, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBundle;
    use crate::tensor::Tensor;

    #[test]
    fn round_trips_role_and_edges() {
        let b = GraphBundle::new(
            Tensor::zeros(3, 1),
            Tensor::zeros(2, 1),
            &[(0, 1), (2, 0)],
            &[],
            &[(1, 1)],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_edge_list(&mut buf, "intra1", b.edges(crate::graph::EdgeRole::Intra1)).unwrap();
        let (role, pairs) = read_edge_list(buf.as_slice()).unwrap();
        assert_eq!(role, "intra1");
        assert_eq!(pairs, vec![(0, 1), (2, 0)]);
    }

    #[test]
    fn rejects_garbage_rows() {
        let text = b"inter\n0\tx\n".to_vec();
        assert!(read_edge_list(text.as_slice()).is_err());
    }
}
