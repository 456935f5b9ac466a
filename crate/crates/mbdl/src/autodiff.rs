//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records primitive operations eagerly (forward values are
//! computed at record time) and [`Tape::backward`] walks the record in strict
//! reverse append order, which is a valid topological order by construction.
//! The primitive set is exactly what the solvers need to be unrolled and
//! differentiated: dense linear algebra, the soft threshold, a few pointwise
//! nonlinearities, reductions, and an SPD solve with a custom adjoint.
//!
//! Tapes are single-threaded; parallel training sums the gradient maps
//! returned by independent tapes.

use crate::error::{Error, Result};
use crate::tensor::{soft_threshold, SpdFactor, Tensor};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    node: usize,
}

/// Names of the recordable primitives, for the generic [`Tape::record`] entry
/// point. The typed methods on [`Tape`] are the usual way in.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Subtract,
    Scale,
    ElementwiseMultiply,
    SoftThreshold,
    Tanh,
    Sigmoid,
    Relu,
    Sum,
    SquaredL2Norm,
    L1Norm,
    Reshape(Vec<usize>),
    Concatenate,
    SpdSolve,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale { scalar: usize, tensor: usize },
    ConstScale { c: f64, tensor: usize },
    Hadamard(usize, usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    SoftThreshold { x: usize, beta: usize },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Sum(usize),
    SquaredL2(usize),
    L1Norm(usize),
    Reshape(usize),
    Concat { parts: Vec<usize> },
    SpdSolve { b: usize, factor: Rc<SpdFactor>, a: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of primitive operations.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    /// Memo of the last SPD factorization, keyed by the matrix node. Unrolled
    /// solvers solve against one fixed matrix many times per tape.
    spd_memo: RefCell<Option<(usize, Rc<SpdFactor>)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            spd_memo: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduces a leaf (input or trainable parameter).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a scalar.
    pub fn leaf_scalar(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        self.nodes.borrow()[v.node].value.clone()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self.id,
            node: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::InvalidArgument(
                "Var recorded on a different tape".into(),
            ));
        }
        Ok(v.node)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[ia].value.add(&nodes[ib].value)?
        };
        Ok(self.push(value, Op::Add(ia, ib)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[ia].value.sub(&nodes[ib].value)?
        };
        Ok(self.push(value, Op::Sub(ia, ib)))
    }

    /// Scalar variable times tensor variable.
    pub fn scale(&self, scalar: Var, tensor: Var) -> Result<Var> {
        let (is, it) = (self.check(scalar)?, self.check(tensor)?);
        let value = {
            let nodes = self.nodes.borrow();
            let s = nodes[is].value.item()?;
            nodes[it].value.scale(s)
        };
        Ok(self.push(value, Op::Scale { scalar: is, tensor: it }))
    }

    /// Fixed constant times tensor variable.
    pub fn scale_const(&self, c: f64, tensor: Var) -> Result<Var> {
        let it = self.check(tensor)?;
        let value = self.nodes.borrow()[it].value.scale(c);
        Ok(self.push(value, Op::ConstScale { c, tensor: it }))
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[ia].value.hadamard(&nodes[ib].value)?
        };
        Ok(self.push(value, Op::Hadamard(ia, ib)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_tt(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand; the
    /// right operand may be rank 1 (untransposed) and is treated as a column.
    pub fn matmul_tt(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[ia].value;
            let bv = &nodes[ib].value;
            if bv.rank() == 1 && tb {
                return Err(Error::shape(
                    "matmul: cannot transpose a rank-1 right operand",
                ));
            }
            let left = if ta { av.transpose() } else { av.clone() };
            if tb {
                left.matmul(&bv.transpose())?
            } else {
                left.matmul(bv)?
            }
        };
        Ok(self.push(value, Op::MatMul { a: ia, b: ib, ta, tb }))
    }

    /// Soft threshold with a variable threshold (`beta` must be scalar).
    pub fn soft_threshold(&self, x: Var, beta: Var) -> Result<Var> {
        let (ix, ibeta) = (self.check(x)?, self.check(beta)?);
        let value = {
            let nodes = self.nodes.borrow();
            let b = nodes[ibeta].value.item()?;
            soft_threshold(&nodes[ix].value, b)?
        };
        Ok(self.push(value, Op::SoftThreshold { x: ix, beta: ibeta }))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes.borrow()[ix].value.map(f64::tanh);
        Ok(self.push(value, Op::Tanh(ix)))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes.borrow()[ix].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(self.push(value, Op::Sigmoid(ix)))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes.borrow()[ix].value.map(|v| v.max(0.0));
        Ok(self.push(value, Op::Relu(ix)))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = Tensor::scalar(self.nodes.borrow()[ix].value.sum());
        Ok(self.push(value, Op::Sum(ix)))
    }

    pub fn squared_l2(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let v = &self.nodes.borrow()[ix].value;
            Tensor::scalar(v.data().iter().map(|x| x * x).sum())
        };
        Ok(self.push(value, Op::SquaredL2(ix)))
    }

    pub fn l1_norm(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = Tensor::scalar(self.nodes.borrow()[ix].value.norm_l1());
        Ok(self.push(value, Op::L1Norm(ix)))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes.borrow()[ix].value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(ix)))
    }

    /// Concatenation along the leading axis; ranks and trailing extents of all
    /// parts must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let idx: Vec<usize> = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[idx[0]].value;
            let rank = first.rank().max(1);
            let trailing: &[usize] = if first.rank() == 0 { &[] } else { &first.shape()[1..] };
            let mut lead = 0usize;
            let mut data = Vec::new();
            for &i in &idx {
                let t = &nodes[i].value;
                let (t_rank, t_trailing): (usize, &[usize]) = if t.rank() == 0 {
                    (1, &[])
                } else {
                    (t.rank(), &t.shape()[1..])
                };
                if t_rank != rank || t_trailing != trailing {
                    return Err(Error::shape(format!(
                        "concat parts disagree: {:?} vs leading part {:?}",
                        t.shape(),
                        first.shape()
                    )));
                }
                lead += if t.rank() == 0 { 1 } else { t.shape()[0] };
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(trailing);
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, Op::Concat { parts: idx }))
    }

    /// `x = A^{-1} b` where `A` is symmetric positive definite. The factor is
    /// computed once and reused by the adjoint (solve with the same factor).
    pub fn spd_solve(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, factor) = {
            let memo = self.spd_memo.borrow().clone();
            let nodes = self.nodes.borrow();
            let factor = match memo {
                Some((key, f)) if key == ia => f,
                _ => Rc::new(SpdFactor::new(&nodes[ia].value)?),
            };
            let value = factor.solve(&nodes[ib].value)?;
            (value, factor)
        };
        *self.spd_memo.borrow_mut() = Some((ia, Rc::clone(&factor)));
        Ok(self.push(value, Op::SpdSolve { b: ib, factor, a: ia }))
    }

    /// Generic entry point mapping a primitive name and inputs to the typed
    /// methods above.
    pub fn record(&self, kind: PrimitiveKind, inputs: &[Var]) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{:?} takes {} inputs, got {}",
                    kind,
                    n,
                    inputs.len()
                )));
            }
            Ok(())
        };
        match &kind {
            PrimitiveKind::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Subtract => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            PrimitiveKind::Scale => {
                need(2)?;
                self.scale(inputs[0], inputs[1])
            }
            PrimitiveKind::ElementwiseMultiply => {
                need(2)?;
                self.hadamard(inputs[0], inputs[1])
            }
            PrimitiveKind::SoftThreshold => {
                need(2)?;
                self.soft_threshold(inputs[0], inputs[1])
            }
            PrimitiveKind::Tanh => {
                need(1)?;
                self.tanh(inputs[0])
            }
            PrimitiveKind::Sigmoid => {
                need(1)?;
                self.sigmoid(inputs[0])
            }
            PrimitiveKind::Relu => {
                need(1)?;
                self.relu(inputs[0])
            }
            PrimitiveKind::Sum => {
                need(1)?;
                self.sum(inputs[0])
            }
            PrimitiveKind::SquaredL2Norm => {
                need(1)?;
                self.squared_l2(inputs[0])
            }
            PrimitiveKind::L1Norm => {
                need(1)?;
                self.l1_norm(inputs[0])
            }
            PrimitiveKind::Reshape(shape) => {
                need(1)?;
                self.reshape(inputs[0], shape.clone())
            }
            PrimitiveKind::Concatenate => self.concat(inputs),
            PrimitiveKind::SpdSolve => {
                need(2)?;
                self.spd_solve(inputs[0], inputs[1])
            }
        }
    }

    /// Reverse pass from a scalar root. Returns the gradient of the root with
    /// respect to every node; leaves not reached by the root get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let iroot = self.check(root)?;
        let nodes = self.nodes.borrow();
        if nodes[iroot].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[iroot].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[iroot] = Some(Tensor::new(
            nodes[iroot].value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=iroot).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.neg());
                }
                Op::Scale { scalar, tensor } => {
                    let s = nodes[*scalar].value.item().expect("scalar checked");
                    let t = &nodes[*tensor].value;
                    let ds = g.dot(t).expect("shapes recorded consistent");
                    acc(
                        &mut grads,
                        *scalar,
                        shaped_scalar(&nodes[*scalar].value, ds),
                    );
                    acc(&mut grads, *tensor, g.scale(s));
                }
                Op::ConstScale { c, tensor } => {
                    acc(&mut grads, *tensor, g.scale(*c));
                }
                Op::Hadamard(a, b) => {
                    acc(&mut grads, *a, g.hadamard(&nodes[*b].value).unwrap());
                    acc(&mut grads, *b, g.hadamard(&nodes[*a].value).unwrap());
                }
                Op::MatMul { a, b, ta, tb } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if bv.rank() == 1 {
                        // C[m] = op_a(A)[m,k] * b[k]
                        let gt = g.reshaped(vec![g.len(), 1]).unwrap();
                        let brow = bv.reshaped(vec![1, bv.len()]).unwrap();
                        let da_used = gt.matmul(&brow).unwrap();
                        let da = if *ta { da_used.transpose() } else { da_used };
                        acc(&mut grads, *a, da);
                        let db = if *ta {
                            av.matmul(&g).unwrap()
                        } else {
                            av.t_matmul(&g).unwrap()
                        };
                        acc(&mut grads, *b, db);
                    } else {
                        let da = match (*ta, *tb) {
                            (false, false) => g.matmul(&bv.transpose()).unwrap(),
                            (false, true) => g.matmul(bv).unwrap(),
                            (true, false) => bv.matmul(&g.transpose()).unwrap(),
                            (true, true) => bv.t_matmul(&g.transpose()).unwrap(),
                        };
                        acc(&mut grads, *a, da);
                        let db = match (*ta, *tb) {
                            (false, false) => av.t_matmul(&g).unwrap(),
                            (true, false) => av.matmul(&g).unwrap(),
                            (false, true) => g.t_matmul(av).unwrap(),
                            (true, true) => g.t_matmul(&av.transpose()).unwrap(),
                        };
                        acc(&mut grads, *b, db);
                    }
                }
                Op::SoftThreshold { x, beta } => {
                    // d/dx = 1 where |x| > beta, 0 at and below the kink;
                    // d/dbeta = -sign(x) on the active set.
                    let xv = &nodes[*x].value;
                    let b = nodes[*beta].value.item().unwrap();
                    let mut dbeta = 0.0;
                    let mut dx = g.clone();
                    for (i, (&xi, gi)) in xv.data().iter().zip(dx.data_mut()).enumerate() {
                        if xi.abs() > b {
                            dbeta -= xi.signum() * g.data()[i];
                        } else {
                            *gi = 0.0;
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *beta, shaped_scalar(&nodes[*beta].value, dbeta));
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    acc(
                        &mut grads,
                        *x,
                        g.hadamard(&y.map(|t| 1.0 - t * t)).unwrap(),
                    );
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    acc(
                        &mut grads,
                        *x,
                        g.hadamard(&y.map(|s| s * (1.0 - s))).unwrap(),
                    );
                }
                Op::Relu(x) => {
                    let mask = nodes[*x].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *x, g.hadamard(&mask).unwrap());
                }
                Op::Sum(x) => {
                    let gs = g.item().unwrap();
                    acc(&mut grads, *x, nodes[*x].value.map(|_| gs));
                }
                Op::SquaredL2(x) => {
                    let gs = g.item().unwrap();
                    acc(&mut grads, *x, nodes[*x].value.scale(2.0 * gs));
                }
                Op::L1Norm(x) => {
                    let gs = g.item().unwrap();
                    acc(
                        &mut grads,
                        *x,
                        nodes[*x].value.map(|v| {
                            if v > 0.0 {
                                gs
                            } else if v < 0.0 {
                                -gs
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::Reshape(x) => {
                    let dx = g.reshaped(nodes[*x].value.shape().to_vec()).unwrap();
                    acc(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        let slice = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        acc(
                            &mut grads,
                            p,
                            Tensor::new(nodes[p].value.shape().to_vec(), slice).unwrap(),
                        );
                    }
                }
                Op::SpdSolve { b, factor, a } => {
                    // x = A^{-1} b:  dL/db = A^{-1} g, dL/dA = -(A^{-1} g) x^T
                    let db = factor.solve(&g).expect("factor matches g rows");
                    let x = &node.value;
                    let da = if x.rank() == 1 {
                        let dbm = db.reshaped(vec![db.len(), 1]).unwrap();
                        let xr = x.reshaped(vec![1, x.len()]).unwrap();
                        dbm.matmul(&xr).unwrap().neg()
                    } else {
                        db.matmul(&x.transpose()).unwrap().neg()
                    };
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
            }
        }

        Ok(Gradients {
            tape_id: self.id,
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn shaped_scalar(like: &Tensor, v: f64) -> Tensor {
    Tensor::new(like.shape().to_vec(), vec![v]).expect("scalar-shaped")
}

fn acc(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(g) => *g = g.add(&delta).expect("gradient shapes agree"),
        slot @ None => *slot = Some(delta),
    }
}

/// Gradient of a scalar root with respect to every tape node.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero tensor if the root does not depend
    /// on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape_id, "Var belongs to a different tape");
        match &self.grads[v.node] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.node]),
        }
    }

    pub fn wrt_scalar(&self, v: Var) -> f64 {
        self.wrt(v).item().expect("scalar var")
    }
}
