use std::collections::{HashMap, HashSet};

use super::{BackwardCtx, Buffer, Tensor};
use crate::error::{Error, Result};

/// Recorded operations reachable from one output, in creation order.
///
/// Every entry's inputs were created before it, so iterating in reverse
/// visits each node after all of its consumers.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn record(output: &Tensor) -> Tape {
        let mut seen = HashSet::new();
        let mut stack = vec![output.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                stack.extend(gf.parents.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(Tensor::id);
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recorded order; leaves appear as `"leaf"`.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|t| t.0.grad_fn.as_ref().map_or("leaf", |g| g.name))
            .collect()
    }

    /// Checks that every recorded input precedes its consumer.
    pub fn is_topological(&self) -> bool {
        let pos: HashMap<u64, usize> = self.nodes.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
        self.nodes.iter().enumerate().all(|(i, t)| {
            t.0.grad_fn.as_ref().is_none_or(|g| {
                g.parents
                    .iter()
                    .filter(|p| p.requires_grad())
                    .all(|p| pos.get(&p.id()).is_some_and(|&j| j < i))
            })
        })
    }
}

/// Propagates d`loss`/d(leaf) into the grad slot of every reachable leaf.
///
/// Gradients accumulate: call `zero_grad` between independent passes.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let tape = Tape::record(loss);
    let mut grads: HashMap<u64, Buffer> = HashMap::new();
    grads.insert(loss.id(), Buffer::new(vec![1.0]));

    for node in tape.nodes.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        match &node.0.grad_fn {
            None => node.accumulate_grad(&g),
            Some(gf) => {
                let needs: Vec<bool> = gf.parents.iter().map(Tensor::requires_grad).collect();
                let ctx = BackwardCtx {
                    grad_out: &g,
                    out: node.data(),
                    parents: &gf.parents,
                    needs: &needs,
                };
                let parent_grads = (gf.rule)(&ctx);
                debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel(), "{}", gf.name);
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(parent.id(), Buffer::new(pg));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::leaf(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        backward(&x.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_sum_gives_twice_input() {
        let v = vec![1.0, -2.0, 3.5];
        let x = Tensor::leaf(&[3], v.clone()).unwrap();
        backward(&x.mul(&x).unwrap().sum()).unwrap();
        let want: Vec<f64> = v.iter().map(|a| 2.0 * a).collect();
        assert_eq!(x.grad().unwrap(), want);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(3.0);
        assert!(matches!(backward(&y), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x*x  -> dy/dx = 4x
        let x = Tensor::leaf(&[2], vec![1.5, -1.0]).unwrap();
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&sq).unwrap().sum();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -4.0]);
    }

    #[test]
    fn tape_is_topological() {
        let x = Tensor::leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.matmul(&x).unwrap().gelu().softmax(1).unwrap().sum();
        let tape = Tape::record(&y);
        assert!(tape.is_topological());
        assert_eq!(tape.op_names().first(), Some(&"leaf"));
        assert_eq!(tape.op_names().last(), Some(&"sum"));
    }
}
