//! Graph nodes and the op set: affine maps, frame splicing, ReLU, statistics
//! pooling, softmax cross-entropy, and reverse-order gradient accumulation.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use thiserror::Error;

use super::scalar::Scalar;

/// Epsilon inside the stats-pool standard deviation so the square root stays
/// differentiable at zero variance.
pub(crate) const VAR_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence too short: need at least {required} frames, got {actual}")]
    SequenceTooShort { required: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar (1x1) root")]
    NonScalarRoot,
    #[error("invalid taps: {0}")]
    InvalidTaps(String),
}

type BackwardFn<S> = Box<dyn Fn(&Array2<S>) -> Vec<Array2<S>>>;

struct Node<S: Scalar> {
    data: Array2<S>,
    grad: Array2<S>,
    parents: Vec<Value<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Handle to a node in the computation graph. Cloning is cheap and aliases
/// the same node; a graph is confined to one thread.
pub struct Value<S: Scalar>(Rc<RefCell<Node<S>>>);

impl<S: Scalar> Clone for Value<S> {
    fn clone(&self) -> Self {
        Value(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Value<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        write!(f, "Value{:?}", n.data.dim())
    }
}

impl<S: Scalar> Value<S> {
    /// Leaf node with no backward rule; parameters and inputs start here.
    pub fn new(data: Array2<S>) -> Self {
        let grad = Array2::zeros(data.raw_dim());
        Value(Rc::new(RefCell::new(Node {
            data,
            grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    pub fn scalar(v: S) -> Self {
        Self::new(Array2::from_elem((1, 1), v))
    }

    fn from_op(data: Array2<S>, parents: Vec<Value<S>>, backward: BackwardFn<S>) -> Self {
        let grad = Array2::zeros(data.raw_dim());
        Value(Rc::new(RefCell::new(Node {
            data,
            grad,
            parents,
            backward: Some(backward),
        })))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.borrow().data.dim()
    }

    pub fn data_clone(&self) -> Array2<S> {
        self.0.borrow().data.clone()
    }

    /// Read the node's data without cloning.
    pub fn with_data<R>(&self, f: impl FnOnce(&Array2<S>) -> R) -> R {
        f(&self.0.borrow().data)
    }

    pub fn grad_clone(&self) -> Array2<S> {
        self.0.borrow().grad.clone()
    }

    /// Replace the stored data; the new array must keep the shape.
    pub fn set_data(&self, data: Array2<S>) -> Result<(), AdError> {
        let mut n = self.0.borrow_mut();
        if n.data.dim() != data.dim() {
            return Err(AdError::ShapeMismatch(format!(
                "set_data {:?} into {:?}",
                data.dim(),
                n.data.dim()
            )));
        }
        n.data = data;
        Ok(())
    }

    pub fn zero_grad(&self) {
        let mut n = self.0.borrow_mut();
        n.grad.fill(S::zero());
    }

    /// Mutate data with the gradient visible; used by optimizers.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut Array2<S>, &Array2<S>)) {
        let mut n = self.0.borrow_mut();
        let n = &mut *n;
        f(&mut n.data, &n.grad);
    }

    pub fn all_finite(&self) -> bool {
        self.0
            .borrow()
            .data
            .iter()
            .all(|v| v.to_f64_lossy().is_finite())
    }

    fn ptr(&self) -> *const () {
        Rc::as_ptr(&self.0) as *const ()
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&self, other: &Value<S>) -> Result<Value<S>, AdError> {
        let (a, b) = (self.0.borrow(), other.0.borrow());
        if a.data.dim() != b.data.dim() {
            return Err(AdError::ShapeMismatch(format!(
                "add {:?} + {:?}",
                a.data.dim(),
                b.data.dim()
            )));
        }
        let data = &a.data + &b.data;
        drop(a);
        drop(b);
        Ok(Value::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.clone(), g.clone()]),
        ))
    }

    /// Add a `1 x D` row vector to every row of a `T x D` matrix.
    pub fn add_row(&self, row: &Value<S>) -> Result<Value<S>, AdError> {
        let (x, r) = (self.0.borrow(), row.0.borrow());
        let (t, d) = x.data.dim();
        if r.data.dim() != (1, d) {
            return Err(AdError::ShapeMismatch(format!(
                "add_row {:?} + {:?}",
                (t, d),
                r.data.dim()
            )));
        }
        let data = &x.data + &r.data;
        drop(x);
        drop(r);
        Ok(Value::from_op(
            data,
            vec![self.clone(), row.clone()],
            Box::new(|g| {
                let row_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![g.clone(), row_grad]
            }),
        ))
    }

    /// Matrix product `self (M x K) . other (K x N)`.
    pub fn matmul(&self, other: &Value<S>) -> Result<Value<S>, AdError> {
        let (a, b) = (self.0.borrow(), other.0.borrow());
        if a.data.ncols() != b.data.nrows() {
            return Err(AdError::ShapeMismatch(format!(
                "matmul {:?} . {:?}",
                a.data.dim(),
                b.data.dim()
            )));
        }
        let data = a.data.dot(&b.data);
        drop(a);
        drop(b);
        let pa = self.clone();
        let pb = other.clone();
        Ok(Value::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = pb.with_data(|bd| g.dot(&bd.t()));
                let gb = pa.with_data(|ad| ad.t().dot(g));
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&self) -> Value<S> {
        let data = self.0.borrow().data.mapv(|v| v.max(S::zero()));
        let px = self.clone();
        Value::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mask = px.with_data(|xd| {
                    Array2::from_shape_fn(xd.raw_dim(), |ix| {
                        if xd[ix] > S::zero() {
                            S::one()
                        } else {
                            S::zero()
                        }
                    })
                });
                vec![g * &mask]
            }),
        )
    }

    /// Gather frames at the given (already dilated) offsets and concatenate
    /// them per output frame: row `t` of the result is
    /// `[x[t + o_0 - o_min], ..., x[t + o_{k-1} - o_min]]`.
    /// Valid convolution semantics: the output has `T - (o_max - o_min)` rows.
    pub fn splice(&self, eff_offsets: &[isize]) -> Result<Value<S>, AdError> {
        if eff_offsets.is_empty() {
            return Err(AdError::InvalidTaps("empty offset list".into()));
        }
        if eff_offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AdError::InvalidTaps(format!(
                "offsets must be strictly ascending: {eff_offsets:?}"
            )));
        }
        let min = eff_offsets[0];
        let max = *eff_offsets.last().unwrap();
        let span = (max - min) as usize;
        let x = self.0.borrow();
        let (t_in, d) = x.data.dim();
        if t_in <= span {
            return Err(AdError::SequenceTooShort {
                required: span + 1,
                actual: t_in,
            });
        }
        let t_out = t_in - span;
        let k = eff_offsets.len();
        let shifts: Vec<usize> = eff_offsets.iter().map(|o| (o - min) as usize).collect();
        let mut data = Array2::zeros((t_out, k * d));
        for (ki, &sh) in shifts.iter().enumerate() {
            data.slice_mut(s![.., ki * d..(ki + 1) * d])
                .assign(&x.data.slice(s![sh..sh + t_out, ..]));
        }
        drop(x);
        let shifts_bw = shifts.clone();
        Ok(Value::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Array2::zeros((t_in, d));
                for (ki, &sh) in shifts_bw.iter().enumerate() {
                    let mut dst = gx.slice_mut(s![sh..sh + t_out, ..]);
                    dst += &g.slice(s![.., ki * d..(ki + 1) * d]);
                }
                vec![gx]
            }),
        ))
    }

    /// Temporal statistics pooling: concatenate the per-dimension mean and
    /// population standard deviation over all rows into a `1 x 2D` vector.
    ///
    /// Sums run over value-sorted addends so the result is bitwise invariant
    /// under any permutation of the input rows.
    pub fn stats_pool(&self) -> Result<Value<S>, AdError> {
        let x = self.0.borrow();
        let (t, d) = x.data.dim();
        if t < 2 {
            return Err(AdError::SequenceTooShort {
                required: 2,
                actual: t,
            });
        }
        let tn = S::from_f64(t as f64);
        let eps = S::from_f64(VAR_EPS);
        let mut mean = Vec::with_capacity(d);
        let mut std = Vec::with_capacity(d);
        let mut col = vec![S::zero(); t];
        for j in 0..d {
            for (i, v) in col.iter_mut().enumerate() {
                *v = x.data[(i, j)];
            }
            col.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
            let mut sum = S::zero();
            for &v in &col {
                sum = sum + v;
            }
            let mu = sum / tn;
            for v in col.iter_mut() {
                let dev = *v - mu;
                *v = dev * dev;
            }
            col.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
            let mut ss = S::zero();
            for &v in &col {
                ss = ss + v;
            }
            mean.push(mu);
            std.push((ss / tn + eps).sqrt());
        }
        drop(x);
        let mut data = Array2::zeros((1, 2 * d));
        for j in 0..d {
            data[(0, j)] = mean[j];
            data[(0, d + j)] = std[j];
        }
        let px = self.clone();
        Ok(Value::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gx = px.with_data(|xd| {
                    Array2::from_shape_fn((t, d), |(i, j)| {
                        let gm = g[(0, j)] / tn;
                        let gs = g[(0, d + j)] * (xd[(i, j)] - mean[j]) / (tn * std[j]);
                        gm + gs
                    })
                });
                vec![gx]
            }),
        ))
    }
}

/// Stack `1 x D` rows into an `N x D` matrix.
pub fn vstack<S: Scalar>(rows: &[Value<S>]) -> Result<Value<S>, AdError> {
    if rows.is_empty() {
        return Err(AdError::ShapeMismatch("vstack of zero rows".into()));
    }
    let d = rows[0].shape().1;
    let mut data = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        let (rr, rd) = r.shape();
        if (rr, rd) != (1, d) {
            return Err(AdError::ShapeMismatch(format!(
                "vstack row {i} is {:?}, want (1, {d})",
                (rr, rd)
            )));
        }
        r.with_data(|rdat| data.slice_mut(s![i..i + 1, ..]).assign(rdat));
    }
    Ok(Value::from_op(
        data,
        rows.to_vec(),
        Box::new(move |g| {
            (0..g.nrows())
                .map(|i| g.slice(s![i..i + 1, ..]).to_owned())
                .collect()
        }),
    ))
}

/// Affine map `x . w + b` with the bias broadcast over rows.
pub fn linear<S: Scalar>(
    x: &Value<S>,
    w: &Value<S>,
    b: &Value<S>,
) -> Result<Value<S>, AdError> {
    x.matmul(w)?.add_row(b)
}

/// One TDNN layer: splice frames at `taps` scaled by `dilation`, then apply an
/// affine map. `taps = [0], dilation = 1` degenerates to a per-frame linear
/// layer.
pub fn tdnn_layer<S: Scalar>(
    x: &Value<S>,
    taps: &[i32],
    dilation: u32,
    w: &Value<S>,
    b: &Value<S>,
) -> Result<Value<S>, AdError> {
    if dilation == 0 {
        return Err(AdError::InvalidTaps("dilation must be positive".into()));
    }
    let d_in = x.shape().1;
    let expected_rows = taps.len() * d_in;
    if w.shape().0 != expected_rows {
        return Err(AdError::ShapeMismatch(format!(
            "tdnn weight has {} rows, want |taps| * D_in = {}",
            w.shape().0,
            expected_rows
        )));
    }
    let eff: Vec<isize> = taps
        .iter()
        .map(|&t| t as isize * dilation as isize)
        .collect();
    linear(&x.splice(&eff)?, w, b)
}

/// Mean over the batch of `-log softmax(logits)[label]`, computed with the
/// max-shift trick. Backward yields `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Value<S>,
    labels: &[usize],
) -> Result<Value<S>, AdError> {
    let x = logits.0.borrow();
    let (n, l) = x.data.dim();
    if labels.len() != n {
        return Err(AdError::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&lab| lab >= l) {
        return Err(AdError::LabelOutOfRange {
            label: bad,
            classes: l,
        });
    }
    let mut probs = Array2::zeros((n, l));
    let mut loss = S::zero();
    for i in 0..n {
        let row = x.data.row(i);
        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for j in 0..l {
            let e = (row[j] - m).exp();
            probs[(i, j)] = e;
            sum = sum + e;
        }
        for j in 0..l {
            probs[(i, j)] = probs[(i, j)] / sum;
        }
        loss = loss + sum.ln() - (row[labels[i]] - m);
    }
    drop(x);
    let nn = S::from_f64(n as f64);
    loss = loss / nn;
    let labels = labels.to_vec();
    Ok(Value::from_op(
        Array2::from_elem((1, 1), loss),
        vec![logits.clone()],
        Box::new(move |g| {
            let scale = g[(0, 0)] / nn;
            let mut gx = probs.clone();
            for (i, &lab) in labels.iter().enumerate() {
                gx[(i, lab)] = gx[(i, lab)] - S::one();
            }
            vec![gx * scale]
        }),
    ))
}

/// Softmax of each row, outside the graph; used for inference.
pub fn softmax_rows<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let (n, l) = logits.dim();
    let mut out = Array2::zeros((n, l));
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for j in 0..l {
            let e = (row[j] - m).exp();
            out[(i, j)] = e;
            sum = sum + e;
        }
        for j in 0..l {
            out[(i, j)] = out[(i, j)] / sum;
        }
    }
    out
}

/// Reverse topological order starting at `root`.
fn topo_order<S: Scalar>(root: &Value<S>) -> Vec<Value<S>> {
    let mut order = Vec::new();
    let mut seen: HashSet<*const ()> = HashSet::new();
    let mut stack: Vec<(Value<S>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.ptr()) {
            continue;
        }
        let parents = node.0.borrow().parents.clone();
        stack.push((node, true));
        for p in parents {
            stack.push((p, false));
        }
    }
    order
}

/// Backpropagate from a scalar root: every reachable node's `grad` receives
/// its contribution to `d root / d node`, accumulated across fan-out.
pub fn backward<S: Scalar>(root: &Value<S>) -> Result<(), AdError> {
    if root.shape() != (1, 1) {
        return Err(AdError::NonScalarRoot);
    }
    let order = topo_order(root);
    {
        let mut n = root.0.borrow_mut();
        let one = S::one();
        n.grad[(0, 0)] = n.grad[(0, 0)] + one;
    }
    for node in order.iter().rev() {
        let (parents, grads) = {
            let n = node.0.borrow();
            match &n.backward {
                None => continue,
                Some(f) => (n.parents.clone(), f(&n.grad)),
            }
        };
        debug_assert_eq!(parents.len(), grads.len());
        for (p, g) in parents.iter().zip(grads) {
            let mut pn = p.0.borrow_mut();
            debug_assert_eq!(pn.grad.dim(), g.dim());
            pn.grad += &g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_identity_passthrough() {
        let x = Value::new(array![[1.0f64, -2.0], [3.0, 4.0]]);
        let w = Value::new(array![[1.0, 0.0], [0.0, 1.0]]);
        let b = Value::new(array![[0.0, 0.0]]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data_clone(), x.data_clone());
    }

    #[test]
    fn linear_hand_arithmetic() {
        let x = Value::new(array![[1.0f64, 1.0]]);
        let w = Value::new(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = Value::new(array![[0.0, 0.0]]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data_clone(), array![[4.0, 6.0]]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Value::new(array![[-1.0f64, 0.0, 2.0]]);
        assert_eq!(x.relu().data_clone(), array![[0.0, 0.0, 2.0]]);
    }

    #[test]
    fn grad_of_root_is_one() {
        let x = Value::<f64>::scalar(3.5);
        backward(&x).unwrap();
        assert_eq!(x.grad_clone()[(0, 0)], 1.0);
    }

    #[test]
    fn fanout_accumulates() {
        let x = Value::<f64>::scalar(2.0);
        let y = x.add(&x).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad_clone()[(0, 0)], 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Value::new(array![[1.0f64, 2.0]]);
        assert!(matches!(backward(&x), Err(AdError::NonScalarRoot)));
    }

    #[test]
    fn splice_one_by_one_is_identity() {
        let x = Value::new(array![[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let y = x.splice(&[0]).unwrap();
        assert_eq!(y.data_clone(), x.data_clone());
    }

    #[test]
    fn splice_length_law() {
        let x = Value::new(Array2::<f64>::ones((10, 3)));
        // taps {-1,0,1} at dilation 2 -> effective {-2,0,2}
        let y = x.splice(&[-2, 0, 2]).unwrap();
        assert_eq!(y.shape(), (6, 9));
    }

    #[test]
    fn splice_too_short_errors() {
        let x = Value::new(Array2::<f64>::ones((4, 3)));
        assert!(matches!(
            x.splice(&[-2, 0, 2]),
            Err(AdError::SequenceTooShort { required: 5, actual: 4 })
        ));
    }

    #[test]
    fn stats_pool_constant_rows() {
        let x = Value::new(Array2::<f64>::from_elem((5, 3), 2.5));
        let y = x.stats_pool().unwrap();
        let d = y.data_clone();
        for j in 0..3 {
            assert_eq!(d[(0, j)], 2.5);
            assert!((d[(0, 3 + j)] - VAR_EPS.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_pool_bitwise_permutation_invariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let base = Array2::from_shape_fn((9, 4), |(i, j)| ((i * 7 + j * 3) as f64).sin());
        let ref_out = Value::new(base.clone()).stats_pool().unwrap().data_clone();
        let mut rows: Vec<usize> = (0..9).collect();
        for _ in 0..20 {
            rows.shuffle(&mut rng);
            let perm = Array2::from_shape_fn((9, 4), |(i, j)| base[(rows[i], j)]);
            let out = Value::new(perm).stats_pool().unwrap().data_clone();
            assert_eq!(out, ref_out);
        }
    }

    #[test]
    fn stats_pool_requires_two_frames() {
        let x = Value::new(Array2::<f64>::ones((1, 3)));
        assert!(matches!(
            x.stats_pool(),
            Err(AdError::SequenceTooShort { required: 2, actual: 1 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = Value::new(Array2::<f64>::zeros((1, 10)));
        let loss = softmax_cross_entropy(&x, &[3]).unwrap();
        assert!((loss.data_clone()[(0, 0)] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_huge_logit_is_stable() {
        let mut logits = Array2::<f64>::zeros((1, 10));
        logits[(0, 2)] = 1000.0;
        let loss = softmax_cross_entropy(&Value::new(logits), &[2]).unwrap();
        let v = loss.data_clone()[(0, 0)];
        assert!(v.is_finite());
        assert!(v < 1e-6, "loss {v}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let x = Value::new(Array2::<f64>::zeros((1, 4)));
        assert!(matches!(
            softmax_cross_entropy(&x, &[4]),
            Err(AdError::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let logits: Array2<f64> = Array2::from_shape_fn((5, 10), |_| rng.random_range(-2.0..2.0));
        let labels = [1usize, 0, 9, 4, 4];
        let x = Value::new(logits.clone());
        let loss = softmax_cross_entropy(&x, &labels).unwrap();
        backward(&loss).unwrap();
        let p = softmax_rows(&logits);
        let g = x.grad_clone();
        for i in 0..5 {
            for j in 0..10 {
                let want = (p[(i, j)] - if labels[i] == j { 1.0 } else { 0.0 }) / 5.0;
                assert!((g[(i, j)] - want).abs() < 1e-9);
            }
        }
    }

    /// Central finite differences for a scalar-valued function of one leaf.
    fn fd_check(x0: Array2<f64>, f: impl Fn(&Value<f64>) -> Value<f64>) {
        let leaf = Value::new(x0.clone());
        let loss = f(&leaf);
        backward(&loss).unwrap();
        let g = leaf.grad_clone();
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut plus = x0.clone();
                plus[(i, j)] += h;
                let mut minus = x0.clone();
                minus[(i, j)] -= h;
                let lp = f(&Value::new(plus)).data_clone()[(0, 0)];
                let lm = f(&Value::new(minus)).data_clone()[(0, 0)];
                let num = (lp - lm) / (2.0 * h);
                let denom = g[(i, j)].abs().max(num.abs());
                if denom < 1e-8 {
                    continue;
                }
                let rel = (g[(i, j)] - num).abs() / denom;
                assert!(rel < 1e-4, "rel err {rel} at ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let w = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let x0 = Array2::from_shape_fn((7, 5), |_| rng.random_range(-1.0..1.0));
        fd_check(x0, move |x| {
            let y = x.matmul(&Value::new(w.clone())).unwrap();
            // reduce to scalar: sum via ones
            let ones = Value::new(Array2::<f64>::ones((3, 1)));
            let col = y.matmul(&ones).unwrap();
            let ones_r = Value::new(Array2::<f64>::ones((1, 7)));
            ones_r.matmul(&col).unwrap()
        });
    }

    #[test]
    fn stats_pool_gradients_match_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let x0 = Array2::from_shape_fn((9, 4), |_| rng.random_range(-1.0..1.0));
        let mix = Array2::from_shape_fn((8, 1), |_| rng.random_range(-1.0..1.0));
        fd_check(x0, move |x| {
            let pooled = x.stats_pool().unwrap();
            pooled.matmul(&Value::new(mix.clone())).unwrap()
        });
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        // keep entries away from the kink at 0
        let x0 = Array2::from_shape_fn((6, 4), |_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let mix = Array2::from_shape_fn((4, 1), |_| rng.random_range(-1.0..1.0));
        fd_check(x0, move |x| {
            let y = x.relu();
            let col = y.matmul(&Value::new(mix.clone())).unwrap();
            let ones_r = Value::new(Array2::<f64>::ones((1, 6)));
            ones_r.matmul(&col).unwrap()
        });
    }
}
