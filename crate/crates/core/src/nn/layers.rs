use rand::Rng;

use super::{sigmoid, NnError, Tensor};

/// Valid (no padding, stride 1) 2-D cross-correlation with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    /// `[out_ch, in_ch, K, K]`
    pub kernels: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
}

impl Conv2dLayer {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self, NnError> {
        let geom = ConvGeometry::from_kernel(&kernels.shape)?;
        if bias.shape != [geom.out_ch] {
            return Err(NnError::ShapeMismatch(format!(
                "bias shape {:?} for {} output channels",
                bias.shape, geom.out_ch
            )));
        }
        Ok(Conv2dLayer { kernels, bias })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeometry {
    fn from_kernel(shape: &[usize]) -> Result<Self, NnError> {
        match *shape {
            [out_ch, in_ch, k, k2] if k == k2 && k >= 1 => Ok(ConvGeometry {
                in_ch,
                out_ch,
                k,
                h: 0,
                w: 0,
            }),
            _ => Err(NnError::ShapeMismatch(format!("kernel shape {shape:?} is not [out, in, K, K]"))),
        }
    }

    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize]) -> Result<Self, NnError> {
        let mut g = Self::from_kernel(kernel)?;
        let [in_ch, h, w] = *input else {
            return Err(NnError::ShapeMismatch(format!("conv input {input:?} is not [in, H, W]")));
        };
        if in_ch != g.in_ch {
            return Err(NnError::ShapeMismatch(format!(
                "input has {in_ch} channels, kernel expects {}",
                g.in_ch
            )));
        }
        if h < g.k || w < g.k {
            return Err(NnError::ShapeMismatch(format!(
                "input {h}x{w} smaller than kernel {0}x{0}",
                g.k
            )));
        }
        if bias != [g.out_ch] {
            return Err(NnError::ShapeMismatch(format!("bias {bias:?} for {} outputs", g.out_ch)));
        }
        g.h = h;
        g.w = w;
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        self.h - self.k + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.k + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.out_h(), self.out_w()]
    }
}

pub(crate) fn conv2d_raw(g: &ConvGeometry, x: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![0.0; g.out_ch * plane];
    for o in 0..g.out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for i in 0..g.in_ch {
            let src = &x[i * g.h * g.w..(i + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = kernels[((o * g.in_ch + i) * g.k + ky) * g.k + kx];
                    for y in 0..oh {
                        let row = &src[(y + ky) * g.w + kx..(y + ky) * g.w + kx + ow];
                        for (d, s) in dst[y * ow..(y + 1) * ow].iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a valid convolution given the upstream gradient `dout`.
/// Accumulates into `dx`, `dw` and `db` when present.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    kernels: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for o in 0..g.out_ch {
        let go = &dout[o * plane..(o + 1) * plane];
        if let Some(db) = db.as_deref_mut() {
            db[o] += go.iter().sum::<f64>();
        }
        for i in 0..g.in_ch {
            let base = i * g.h * g.w;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((o * g.in_ch + i) * g.k + ky) * g.k + kx;
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let row = &x[base + (y + ky) * g.w + kx..base + (y + ky) * g.w + kx + ow];
                            acc += go[y * ow..(y + 1) * ow]
                                .iter()
                                .zip(row)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = kernels[widx];
                        for y in 0..oh {
                            let start = base + (y + ky) * g.w + kx;
                            for (d, s) in dx[start..start + ow].iter_mut().zip(&go[y * ow..(y + 1) * ow]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `x` is `[in_ch, H, W]`; the result is `[out_ch, H-K+1, W-K+1]`.
pub fn conv2d_forward(x: &Tensor, layer: &Conv2dLayer) -> Result<Tensor, NnError> {
    let g = ConvGeometry::new(&x.shape, &layer.kernels.shape, &layer.bias.shape)?;
    Ok(Tensor {
        values: conv2d_raw(&g, &x.values, &layer.kernels.values, &layer.bias.values),
        shape: g.out_shape(),
    })
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Inverted-dropout mask: each entry is 0 with probability `p_drop`, else
/// `1 / (1 - p_drop)`.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(n: usize, p_drop: f64, rng: &mut R) -> Result<Vec<f64>, NnError> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(NnError::InvalidProbability(p_drop));
    }
    let scale = 1.0 / (1.0 - p_drop);
    Ok((0..n)
        .map(|_| if rng.random::<f64>() < p_drop { 0.0 } else { scale })
        .collect())
}

/// Identity in evaluation mode.
pub fn dropout<R: Rng + ?Sized>(x: &[f64], p_drop: f64, rng: &mut R, training: bool) -> Result<Vec<f64>, NnError> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(NnError::InvalidProbability(p_drop));
    }
    if !training || p_drop == 0.0 {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask(x.len(), p_drop, rng)?;
    Ok(x.iter().zip(&mask).map(|(v, m)| v * m).collect())
}

pub(crate) fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Gated recurrent unit, weights `[hidden, input]` / `[hidden, hidden]`.
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, input]);
        let u = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        GruCell {
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_z.len()
    }

    pub fn input(&self) -> usize {
        self.w_z.shape.get(1).copied().unwrap_or(0)
    }

    pub fn check(&self) -> Result<(), NnError> {
        let (hid, inp) = (self.hidden(), self.input());
        let bad = |name: &str, t: &Tensor| NnError::ShapeMismatch(format!("GRU {name} has shape {:?}", t.shape));
        for (name, t) in [("w_z", &self.w_z), ("w_r", &self.w_r), ("w_h", &self.w_h)] {
            if t.shape != [hid, inp] {
                return Err(bad(name, t));
            }
        }
        for (name, t) in [("u_z", &self.u_z), ("u_r", &self.u_r), ("u_h", &self.u_h)] {
            if t.shape != [hid, hid] {
                return Err(bad(name, t));
            }
        }
        for (name, t) in [("b_z", &self.b_z), ("b_r", &self.b_r), ("b_h", &self.b_h)] {
            if t.shape != [hid] {
                return Err(bad(name, t));
            }
        }
        Ok(())
    }
}

pub fn gru_step(x: &[f64], h: &[f64], cell: &GruCell) -> Result<Vec<f64>, NnError> {
    cell.check()?;
    let hid = cell.hidden();
    if x.len() != cell.input() || h.len() != hid {
        return Err(NnError::ShapeMismatch(format!(
            "GRU step got x[{}], h[{}] for input {}, hidden {hid}",
            x.len(),
            h.len(),
            cell.input()
        )));
    }
    let gate = |w: &Tensor, u: &Tensor, b: &Tensor, hv: &[f64]| -> Vec<f64> {
        let wx = matvec(&w.values, hid, x);
        let uh = matvec(&u.values, hid, hv);
        wx.iter().zip(&uh).zip(&b.values).map(|((a, c), d)| a + c + d).collect()
    };
    let z: Vec<f64> = gate(&cell.w_z, &cell.u_z, &cell.b_z, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(&cell.w_r, &cell.u_r, &cell.b_r, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gate(&cell.w_h, &cell.u_h, &cell.b_h, &rh).into_iter().map(f64::tanh).collect();
    Ok((0..hid).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, and its gradient
/// with respect to the logits.
pub fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn scaling_kernel() {
        let x = Tensor::new(vec![1.0; 9], vec![1, 3, 3]).unwrap();
        let layer = Conv2dLayer::new(Tensor::new(vec![2.0], vec![1, 1, 1, 1]).unwrap(), Tensor::zeros(&[1])).unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        assert_eq!(y.shape, vec![1, 3, 3]);
        assert!(y.values.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn hand_summed_kernel() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], vec![1, 2, 2]).unwrap();
        let layer = Conv2dLayer::new(Tensor::new(vec![1.0; 4], vec![1, 1, 2, 2]).unwrap(), Tensor::new(vec![1.0], vec![1]).unwrap()).unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        assert_eq!(y.shape, vec![1, 1, 1]);
        assert_eq!(y.values, vec![11.0]);
    }

    #[test]
    fn valid_output_shape() {
        let x = Tensor::zeros(&[1, 22, 22]);
        let layer = Conv2dLayer::new(Tensor::zeros(&[128, 1, 3, 3]), Tensor::zeros(&[128])).unwrap();
        assert_eq!(conv2d_forward(&x, &layer).unwrap().shape, vec![128, 20, 20]);
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::glorot(&[2, 5, 4], 1, 1, &mut rng);
        let layer = Conv2dLayer::new(Tensor::glorot(&[3, 2, 2, 2], 1, 1, &mut rng), Tensor::glorot(&[3], 1, 1, &mut rng)).unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        assert_eq!(y.shape, vec![3, 4, 3]);
        let xi = |c: usize, r: usize, q: usize| x.values[(c * 5 + r) * 4 + q];
        let wi = |o: usize, c: usize, r: usize, q: usize| layer.kernels.values[((o * 2 + c) * 2 + r) * 2 + q];
        for o in 0..3 {
            for r in 0..4 {
                for q in 0..3 {
                    let mut acc = layer.bias.values[o];
                    for c in 0..2 {
                        for a in 0..2 {
                            for b in 0..2 {
                                acc += wi(o, c, a, b) * xi(c, r + a, q + b);
                            }
                        }
                    }
                    assert!((acc - y.values[(o * 4 + r) * 3 + q]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let layer = Conv2dLayer::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1])).unwrap();
        assert!(matches!(conv2d_forward(&Tensor::zeros(&[1, 2, 5]), &layer), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(conv2d_forward(&Tensor::zeros(&[2, 5, 5]), &layer), Err(NnError::ShapeMismatch(_))));
        assert!(Conv2dLayer::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn relu_clamps() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [0.5, -2.0, 3.25];
        assert_eq!(dropout(&x, 0.8, &mut rng, false).unwrap(), x.to_vec());
    }

    #[test]
    fn dropout_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = dropout(&vec![1.0; 1_000_000], 0.8, &mut rng, true).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() <= 0.01, "mean {mean}");
        assert!(y.iter().all(|&v| v == 0.0 || (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn dropout_probability_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout(&[1.0], 1.0, &mut rng, true), Err(NnError::InvalidProbability(1.0)));
        assert_eq!(dropout(&[1.0], -0.1, &mut rng, false), Err(NnError::InvalidProbability(-0.1)));
    }

    #[test]
    fn zero_gru_stays_at_zero() {
        let cell = GruCell::zeros(3, 4);
        assert_eq!(gru_step(&[1.0, -2.0, 5.0], &[0.0; 4], &cell).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn saturated_gru() {
        let mut cell = GruCell::zeros(1, 1);
        cell.b_z.values[0] = 100.0;
        cell.b_h.values[0] = 100.0;
        let h = gru_step(&[0.3], &[0.0], &cell).unwrap();
        assert!((h[0] - 100f64.tanh()).abs() < 1e-12);
        assert!((h[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gru_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cell = GruCell::zeros(2, 3);
        for t in [&mut cell.w_z, &mut cell.w_r, &mut cell.w_h, &mut cell.u_z, &mut cell.u_r, &mut cell.u_h] {
            *t = Tensor::glorot(&t.shape.clone(), 1, 1, &mut rng);
        }
        let mut h = vec![0.9, -0.9, 0.0];
        for step in 0..50 {
            let x = (step as f64 * 0.7).sin();
            h = gru_step(&[x, -x], &h, &cell).unwrap();
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_shape_error() {
        let cell = GruCell::zeros(2, 3);
        assert!(gru_step(&[1.0], &[0.0; 3], &cell).is_err());
        assert!(gru_step(&[1.0, 2.0], &[0.0; 2], &cell).is_err());
    }

    #[test]
    fn uniform_logits() {
        for label in 0..2 {
            let (loss, _) = softmax_xent(&[0.0, 0.0], label);
            assert!((loss - LN_2).abs() < 1e-15);
            let (loss, grad) = softmax_xent(&[1000.0, 1000.0], label);
            assert!((loss - LN_2).abs() < 1e-12);
            assert!(grad.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn xent_grad_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-20.0..20.0)).collect();
            let (_, grad) = softmax_xent(&logits, rng.random_range(0..5));
            assert!(grad.iter().sum::<f64>().abs() <= 1e-12);
            assert!((softmax(&logits).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
