//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows the parameter set, records every operation of one
//! forward pass, and runs backward exactly once.

use rand::Rng;

use super::layers::{conv2d_backward, conv2d_raw, dropout_mask, matvec, softmax, softmax_xent, ConvGeometry};
use super::{sigmoid, NnError, ParamSet};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Relu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    MatVec { w: Var, x: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    OneMinus(Var),
    Concat(Vec<Var>),
    Index { x: Var, index: usize },
    SoftmaxXent { logits: Var, label: usize },
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    // Empty for parameter nodes, whose values live in the borrowed set.
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    consumed: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => &self.params.tensors[i].values,
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input. With `track` set, its gradient is kept after backward.
    pub fn input(&mut self, values: Vec<f64>, shape: Vec<usize>, track: bool) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(NnError::ShapeMismatch(format!("{} values for shape {shape:?}", values.len())));
        }
        Ok(self.push(values, shape, Op::Input, track))
    }

    pub fn param(&mut self, index: usize) -> Var {
        let shape = self.params.tensors[index].shape.clone();
        self.push(Vec::new(), shape, Op::Param(index), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), self.shape(b))?;
        let value = conv2d_raw(&geom, self.value(x), self.value(w), self.value(b));
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, geom.out_shape(), Op::Conv2d { x, w, b, geom }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = super::layers::relu(self.value(x));
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(value, shape, Op::Relu(x), needs)
    }

    /// Inverted dropout; identity (and no node) outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p_drop: f64, rng: &mut R, training: bool) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(NnError::InvalidProbability(p_drop));
        }
        if !training || p_drop == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), p_drop, rng)?;
        let value = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(value, shape, Op::Dropout { x, mask }, needs))
    }

    /// `w` is `[rows, cols]`, `x` is `[cols]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, NnError> {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(NnError::ShapeMismatch(format!("matvec {ws:?} x {xs:?}")));
        }
        let rows = ws[0];
        let value = matvec(self.value(w), rows, self.value(x));
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push(value, vec![rows], Op::MatVec { w, x }, needs))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<Vec<usize>, NnError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(NnError::ShapeMismatch(format!(
                "elementwise {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let shape = self.same_shape(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, shape, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let shape = self.same_shape(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, shape, Op::Mul(a, b), needs))
    }

    fn unary(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(value, shape, op, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 - v, Op::OneMinus(x))
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        let needs = parts.iter().any(|&p| self.needs(p));
        let len = value.len();
        self.push(value, vec![len], Op::Concat(parts.to_vec()), needs)
    }

    /// Single element as a length-1 vector.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var, NnError> {
        let v = *self
            .value(x)
            .get(index)
            .ok_or_else(|| NnError::ShapeMismatch(format!("index {index} out of {:?}", self.shape(x))))?;
        let needs = self.needs(x);
        Ok(self.push(vec![v], vec![1], Op::Index { x, index }, needs))
    }

    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var, NnError> {
        let n = self.value(logits).len();
        if label >= n {
            return Err(NnError::ShapeMismatch(format!("label {label} for {n} logits")));
        }
        let (loss, _) = softmax_xent(self.value(logits), label);
        let needs = self.needs(logits);
        Ok(self.push(vec![loss], vec![1], Op::SoftmaxXent { logits, label }, needs))
    }

    pub fn mean(&mut self, scalars: &[Var]) -> Result<Var, NnError> {
        if scalars.is_empty() {
            return Err(NnError::ShapeMismatch("mean of nothing".into()));
        }
        let mut acc = 0.0;
        for &s in scalars {
            let v = self.value(s);
            if v.len() != 1 {
                return Err(NnError::NonScalarLoss(v.len()));
            }
            acc += v[0];
        }
        let needs = scalars.iter().any(|&s| self.needs(s));
        Ok(self.push(vec![acc / scalars.len() as f64], vec![1], Op::Mean(scalars.to_vec()), needs))
    }

    /// Probabilities of a logits node (no tape entry).
    pub fn softmax_of(&self, logits: Var) -> Vec<f64> {
        softmax(self.value(logits))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are then available via
    /// [`Graph::grad`] and [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        let n = self.value(loss).len();
        if n != 1 {
            return Err(NnError::NonScalarLoss(n));
        }
        self.consumed = true;

        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|_| Vec::new()).collect();
        grads[loss.0] = vec![1.0];

        for id in (0..=loss.0).rev() {
            if grads[id].is_empty() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            self.propagate(id, &g, &mut grads);
            grads[id] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let acc = |v: Var, grads: &mut [Vec<f64>]| -> Option<usize> {
            if !self.nodes[v.0].needs_grad {
                return None;
            }
            if grads[v.0].is_empty() {
                grads[v.0] = vec![0.0; self.value(v).len()];
            }
            Some(v.0)
        };
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let xi = acc(*x, grads);
                let wi = acc(*w, grads);
                let bi = acc(*b, grads);
                // Split borrows of three distinct gradient buffers.
                let mut dx = xi.map(|i| std::mem::take(&mut grads[i]));
                let mut dw = wi.map(|i| std::mem::take(&mut grads[i]));
                let mut db = bi.map(|i| std::mem::take(&mut grads[i]));
                conv2d_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (i, buf) in [(xi, dx), (wi, dw), (bi, db)] {
                    if let (Some(i), Some(buf)) = (i, buf) {
                        grads[i] = buf;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(i) = acc(*x, grads) {
                    for ((d, &gv), &xv) in grads[i].iter_mut().zip(g).zip(self.value(*x)) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(i) = acc(*x, grads) {
                    for ((d, &gv), &m) in grads[i].iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::MatVec { w, x } => {
                let cols = self.value(*x).len();
                if let Some(i) = acc(*w, grads) {
                    let xv = self.value(*x);
                    for (r, &gr) in g.iter().enumerate() {
                        for (d, &xc) in grads[i][r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                            *d += gr * xc;
                        }
                    }
                }
                if let Some(i) = acc(*x, grads) {
                    let wv = self.value(*w);
                    for (r, &gr) in g.iter().enumerate() {
                        for (d, &wc) in grads[i].iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                            *d += gr * wc;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(i) = acc(v, grads) {
                        grads[i].iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(i) = acc(*a, grads) {
                    let bv = self.value(*b);
                    for ((d, gv), bv) in grads[i].iter_mut().zip(g).zip(bv) {
                        *d += gv * bv;
                    }
                }
                if let Some(i) = acc(*b, grads) {
                    let av = self.value(*a);
                    for ((d, gv), av) in grads[i].iter_mut().zip(g).zip(av) {
                        *d += gv * av;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(i) = acc(*x, grads) {
                    let y = &self.nodes[id].value;
                    for ((d, gv), y) in grads[i].iter_mut().zip(g).zip(y) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(i) = acc(*x, grads) {
                    let y = &self.nodes[id].value;
                    for ((d, gv), y) in grads[i].iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::OneMinus(x) => {
                if let Some(i) = acc(*x, grads) {
                    grads[i].iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(i) = acc(p, grads) {
                        grads[i].iter_mut().zip(&g[offset..offset + len]).for_each(|(d, gv)| *d += gv);
                    }
                    offset += len;
                }
            }
            Op::Index { x, index } => {
                if let Some(i) = acc(*x, grads) {
                    grads[i][*index] += g[0];
                }
            }
            Op::SoftmaxXent { logits, label } => {
                if let Some(i) = acc(*logits, grads) {
                    let (_, dl) = softmax_xent(self.value(*logits), *label);
                    grads[i].iter_mut().zip(dl).for_each(|(d, v)| *d += g[0] * v);
                }
            }
            Op::Mean(parts) => {
                let scale = g[0] / parts.len() as f64;
                for &p in parts {
                    if let Some(i) = acc(p, grads) {
                        grads[i][0] += scale;
                    }
                }
            }
        }
    }

    /// Gradient of a node after backward; `None` if it did not receive one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(Vec::as_slice)
    }

    /// Per-parameter gradients, summed over every node that reads the
    /// parameter. Untouched parameters get zeros.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let Op::Param(i) = node.op {
                for (o, v) in out[i].iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Central finite differences of `f` around `x`.
    fn numeric_grad(x: &[f64], step: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + step;
                let plus = f(&x);
                x[i] = orig - step;
                let minus = f(&x);
                x[i] = orig;
                (plus - minus) / (2.0 * step)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::glorot(shape, 1, 1, rng)
    }

    #[test]
    fn linear_chain() {
        let mut params = ParamSet::default();
        params.push("k", Tensor::new(vec![3.0], vec![1, 1]).unwrap());
        let mut g = Graph::new(&params);
        let x = g.input(vec![2.0], vec![1], true).unwrap();
        let k = g.param(0);
        let y = g.matvec(k, x).unwrap();
        let loss = g.mean(&[y]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert_eq!(g.param_grads()[0], vec![2.0]);
    }

    #[test]
    fn double_backward_is_rejected() {
        let params = ParamSet::default();
        let mut g = Graph::new(&params);
        let x = g.input(vec![1.0], vec![1], true).unwrap();
        let loss = g.mean(&[x]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(NnError::GraphConsumed));
    }

    #[test]
    fn relu_gradient_zero_for_negative() {
        let params = ParamSet::default();
        let mut g = Graph::new(&params);
        let x = g.input(vec![-0.5, 2.0], vec![2], true).unwrap();
        let y = g.relu(x);
        let a = g.index(y, 0).unwrap();
        let b = g.index(y, 1).unwrap();
        let loss = g.mean(&[a, b]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn non_scalar_loss() {
        let params = ParamSet::default();
        let mut g = Graph::new(&params);
        let x = g.input(vec![1.0, 2.0], vec![2], true).unwrap();
        assert_eq!(g.backward(x), Err(NnError::NonScalarLoss(2)));
    }

    #[test]
    fn dropout_mask_replays_in_backward() {
        let params = ParamSet::default();
        let mut g = Graph::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = g.input(vec![1.0; 64], vec![64], true).unwrap();
        let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
        let parts: Vec<Var> = (0..64).map(|i| g.index(y, i).unwrap()).collect();
        let loss = g.mean(&parts).unwrap();
        let kept: Vec<f64> = g.value(y).to_vec();
        g.backward(loss).unwrap();
        for (gx, y) in g.grad(x).unwrap().iter().zip(kept) {
            assert!((gx * 64.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = ParamSet::default();
        params.push("w", random(&[3, 2, 2, 2], &mut rng));
        params.push("b", random(&[3], &mut rng));
        let x0 = random(&[2, 4, 5], &mut rng);
        let target = random(&[3 * 3 * 4], &mut rng);

        let loss_of = |params: &ParamSet, x: &[f64]| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
            let mut g = Graph::new(params);
            let xv = g.input(x.to_vec(), vec![2, 4, 5], true).unwrap();
            let (w, b) = (g.param(0), g.param(1));
            let y = g.conv2d(xv, w, b).unwrap();
            let y = g.tanh(y);
            let t = g.input(target.values.clone(), vec![36], false).unwrap();
            let p = g.mul(y, t).unwrap();
            let parts: Vec<Var> = (0..36).map(|i| g.index(p, i).unwrap()).collect();
            let loss = g.mean(&parts).unwrap();
            let value = g.value(loss)[0];
            g.backward(loss).unwrap();
            (value, g.param_grads(), g.grad(xv).unwrap().to_vec())
        };

        let (_, pg, xg) = loss_of(&params, &x0.values);
        let num_x = numeric_grad(&x0.values, 1e-5, &|x| loss_of(&params, x).0);
        assert!(max_rel_err(&xg, &num_x) <= 1e-5);
        for pi in 0..2 {
            let num = numeric_grad(&params.tensors[pi].values, 1e-5, &|v| {
                let mut p = params.clone();
                p.tensors[pi].values = v.to_vec();
                loss_of(&p, &x0.values).0
            });
            assert!(max_rel_err(&pg[pi], &num) <= 1e-5, "param {pi}");
        }
    }

    #[test]
    fn xent_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random(&[4], &mut rng).values;
        let f = |l: &[f64]| softmax_xent(l, 2).0;
        let params = ParamSet::default();
        let mut g = Graph::new(&params);
        let x = g.input(logits.clone(), vec![4], true).unwrap();
        let loss = g.softmax_xent(x, 2).unwrap();
        g.backward(loss).unwrap();
        assert!(max_rel_err(g.grad(x).unwrap(), &numeric_grad(&logits, 1e-5, &f)) <= 1e-5);
    }
}
