//! Minimal reverse-mode autodiff over f64 matrices.
//!
//! A [`Tape`] records operations in topological order; [`Tape::backward`]
//! replays them in reverse and accumulates gradients for every leaf. All
//! tensors are rank-2 (row vectors for biases), which covers everything the
//! seq2seq model needs.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::objectives;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type Sink<'a> = dyn FnMut(usize, Array2<f64>) + 'a;
type BackFn = Box<dyn Fn(&[Array2<f64>], &Array2<f64>, &mut Sink)>;

pub struct Tape {
    values: Vec<Array2<f64>>,
    backfns: Vec<Option<BackFn>>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            backfns: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Array2<f64>, backfn: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backfns.push(backfn);
        Var(self.values.len() - 1)
    }

    /// A leaf node. Gradients are accumulated for leaves like for any other
    /// node; callers read the ones they care about.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, -g);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g * &vals[b.0]);
                sink(b.0, g * &vals[a.0]);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g * c);
            })),
        )
    }

    /// Adds a constant matrix (no gradient flows into it).
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = &self.values[a.0] + c;
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.clone());
            })),
        )
    }

    /// Broadcasts a 1xD row bias over a TxD matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = &self.values[a.0] + &self.values[bias.0];
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.clone());
                sink(bias.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g.dot(&vals[b.0].t()));
                sink(b.0, vals[a.0].t().dot(g));
            })),
        )
    }

    /// a . b^T without materializing the transpose as a node.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0].t());
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g.dot(&vals[b.0]));
                sink(b.0, g.t().dot(&vals[a.0]));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                let mask = vals[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                sink(a.0, g * &mask);
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut y = self.values[a.0].clone();
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let out = self.push(y, None);
        let out_id = out.0;
        self.backfns[out_id] = Some(Box::new(move |vals, g, sink| {
            let y = &vals[out_id];
            let mut dx = g * y;
            for (mut drow, yrow) in dx.rows_mut().into_iter().zip(vals[out_id].rows()) {
                let dot: f64 = drow.sum();
                drow.iter_mut()
                    .zip(yrow.iter())
                    .for_each(|(d, &yv)| *d -= dot * yv);
            }
            let _ = y;
            sink(a.0, dx);
        }));
        out
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut y = self.values[a.0].clone();
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - logsum);
        }
        let out = self.push(y, None);
        let out_id = out.0;
        self.backfns[out_id] = Some(Box::new(move |vals, g, sink| {
            // dx = g - softmax(a) * rowsum(g)
            let mut dx = g.clone();
            for (mut drow, lsrow) in dx.rows_mut().into_iter().zip(vals[out_id].rows()) {
                let rowsum: f64 = drow.sum();
                drow.iter_mut()
                    .zip(lsrow.iter())
                    .for_each(|(d, &ls)| *d -= rowsum * ls.exp());
            }
            sink(a.0, dx);
        }));
        out
    }

    /// Per-row layer norm with learned 1xD gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.values[x.0];
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            row.mapv_inplace(|v| (v - mean) * istd);
        }
        let y = &xhat * &self.values[gamma.0] + &self.values[beta.0];
        let out = self.push(y, None);
        let out_id = out.0;
        self.backfns[out_id] = Some(Box::new(move |vals, g, sink| {
            sink(beta.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            sink(gamma.0, (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
            let dxhat = g * &vals[gamma.0];
            let mut dx = Array2::zeros(dxhat.raw_dim());
            let d = dxhat.ncols() as f64;
            for (t, (dh_row, xh_row)) in dxhat.rows().into_iter().zip(xhat.rows()).enumerate() {
                let mean_dh: f64 = dh_row.sum() / d;
                let mean_dh_xh: f64 = dh_row
                    .iter()
                    .zip(xh_row.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / d;
                for (j, ((&dh, &xh), out)) in dh_row
                    .iter()
                    .zip(xh_row.iter())
                    .zip(dx.row_mut(t).into_iter())
                    .enumerate()
                {
                    let _ = j;
                    *out = inv_std[t] * (dh - mean_dh - xh * mean_dh_xh);
                }
            }
            sink(x.0, dx);
        }));
        out
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.values[a.0]
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let full_cols = self.values[a.0].ncols();
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                let mut da = Array2::zeros((vals[a.0].nrows(), full_cols));
                da.slice_mut(ndarray::s![.., start..start + len]).assign(g);
                sink(a.0, da);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts match");
        let parts: Vec<Var> = parts.to_vec();
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].ncols()).collect();
        self.push(
            v,
            Some(Box::new(move |_vals, g, sink| {
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    sink(p.0, g.slice(ndarray::s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.values[a.0]
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |vals, g, sink| {
                let mut da: Array2<f64> = Array2::zeros(vals[a.0].raw_dim());
                da.slice_mut(ndarray::s![start..start + len, ..]).assign(g);
                sink(a.0, da);
            })),
        )
    }

    /// Unfolds a TxC time series into Tx(k*C) patches with symmetric zero
    /// padding of (k-1)/2 (k must be odd). Convolution is then a matmul.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "same-padding conv needs odd kernel");
        let pad = (kernel - 1) / 2;
        let xv = &self.values[x.0];
        let (t_len, c) = (xv.nrows(), xv.ncols());
        let mut out = Array2::zeros((t_len, kernel * c));
        for t in 0..t_len {
            for j in 0..kernel {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < t_len {
                    for ch in 0..c {
                        out[[t, j * c + ch]] = xv[[src as usize, ch]];
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                let mut dx = Array2::zeros((t_len, c));
                for t in 0..t_len {
                    for j in 0..kernel {
                        let src = t as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < t_len {
                            for ch in 0..c {
                                dx[[src as usize, ch]] += g[[t, j * c + ch]];
                            }
                        }
                    }
                }
                sink(x.0, dx);
            })),
        )
    }

    /// Transposed 1-D convolution. `x` is TxCin, `w` is (k*Cin)xCout with
    /// w[j*Cin + c, o] the tap for kernel offset j. Output length is
    /// (T-1)*stride + k.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize) -> Var {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let (t_len, c_in) = (xv.nrows(), xv.ncols());
        let c_out = wv.ncols();
        assert_eq!(wv.nrows(), kernel * c_in, "weight shape mismatch");
        let out_len = (t_len - 1) * stride + kernel;
        let mut out = Array2::zeros((out_len, c_out));
        for t in 0..t_len {
            for j in 0..kernel {
                let o_t = t * stride + j;
                for ci in 0..c_in {
                    let xval = xv[[t, ci]];
                    if xval == 0.0 {
                        continue;
                    }
                    for co in 0..c_out {
                        out[[o_t, co]] += xval * wv[[j * c_in + ci, co]];
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let xv = &vals[x.0];
                let wv = &vals[w.0];
                let mut dx = Array2::zeros((t_len, c_in));
                let mut dw = Array2::zeros((kernel * c_in, c_out));
                for t in 0..t_len {
                    for j in 0..kernel {
                        let o_t = t * stride + j;
                        for ci in 0..c_in {
                            let mut acc = 0.0;
                            for co in 0..c_out {
                                let gv = g[[o_t, co]];
                                acc += gv * wv[[j * c_in + ci, co]];
                                dw[[j * c_in + ci, co]] += xv[[t, ci]] * gv;
                            }
                            dx[[t, ci]] += acc;
                        }
                    }
                }
                sink(x.0, dx);
                sink(w.0, dw);
            })),
        )
    }

    /// Row lookup into an embedding table (VxD).
    pub fn embedding(&mut self, ids: &[u32], table: Var) -> Var {
        let tv = &self.values[table.0];
        let d = tv.ncols();
        let mut out = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            out.row_mut(t).assign(&tv.row(id as usize));
        }
        let ids: Vec<u32> = ids.to_vec();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let mut dt: Array2<f64> = Array2::zeros(vals[table.0].raw_dim());
                for (t, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id as usize);
                    row += &g.row(t);
                }
                sink(table.0, dt);
            })),
        )
    }

    /// Mean-over-time cross entropy against integer targets; 1x1 output.
    pub fn ce_loss(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = &self.values[logits.0];
        let units = crate::featureio::UnitSequence::new(
            targets.to_vec(),
            lv.ncols() as u32,
            1,
        )?;
        let loss = objectives::cross_entropy_units(lv, &units)?;
        let targets: Vec<u32> = targets.to_vec();
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Some(Box::new(move |vals, g, sink| {
                let lv = &vals[logits.0];
                let t_len = lv.nrows() as f64;
                let mut dl = Array2::zeros(lv.raw_dim());
                for (t, &target) in targets.iter().enumerate() {
                    let row = lv.row(t);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for (k, &v) in row.iter().enumerate() {
                        let soft = (v - max).exp() / denom;
                        let onehot = if k == target as usize { 1.0 } else { 0.0 };
                        dl[[t, k]] = (soft - onehot) / t_len;
                    }
                }
                sink(logits.0, dl * g[[0, 0]]);
            })),
        ))
    }

    /// Masked time-averaged L1 against a constant target; gradient at exact
    /// ties is 0. Frames at or beyond `t_eff` are excluded.
    pub fn l1_loss(&mut self, pred: Var, target: &Array2<f64>, t_eff: usize) -> Result<Var> {
        let pv = &self.values[pred.0];
        if pv.ncols() != target.ncols() {
            return Err(Error::Shape(format!(
                "prediction dim {} vs target dim {}",
                pv.ncols(),
                target.ncols()
            )));
        }
        if t_eff == 0 || t_eff > pv.nrows() || t_eff > target.nrows() {
            return Err(Error::Shape(format!(
                "bad effective length {t_eff} for pred {} target {}",
                pv.nrows(),
                target.nrows()
            )));
        }
        let mut total = 0.0;
        for t in 0..t_eff {
            for d in 0..pv.ncols() {
                total += (pv[[t, d]] - target[[t, d]]).abs();
            }
        }
        let loss = total / t_eff as f64;
        let target = target.clone();
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Some(Box::new(move |vals, g, sink| {
                let pv = &vals[pred.0];
                let mut dp = Array2::zeros(pv.raw_dim());
                for t in 0..t_eff {
                    for d in 0..pv.ncols() {
                        let diff = pv[[t, d]] - target[[t, d]];
                        dp[[t, d]] = diff.signum() * (diff != 0.0) as i32 as f64 / t_eff as f64;
                    }
                }
                sink(pred.0, dp * g[[0, 0]]);
            })),
        ))
    }

    /// CTC negative log likelihood of `tokens` given log-softmax-normalized
    /// rows; 1x1 output.
    pub fn ctc_loss(&mut self, log_probs: Var, tokens: &[usize]) -> Result<Var> {
        let (loss, grad) = objectives::ctc_loss_and_grad(&self.values[log_probs.0], tokens)?;
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Some(Box::new(move |_vals, g, sink| {
                sink(log_probs.0, &grad * g[[0, 0]]);
            })),
        ))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Array2::from_elem(self.values[loss.0].raw_dim(), 1.0));
        for i in (0..self.values.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(backfn) = &self.backfns[i] {
                let mut sink = |parent: usize, delta: Array2<f64>| {
                    match &mut grads[parent] {
                        Some(acc) => *acc += &delta,
                        slot @ None => *slot = Some(delta),
                    }
                };
                backfn(&self.values, &g, &mut sink);
            }
            grads[i] = Some(g);
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences on every entry of every leaf.
    fn check_grad<F>(leaves: &[Array2<f64>], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).dim(), (1, 1));
        let grads = tape.backward(loss);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads[vars[li].0]
                .as_ref()
                .unwrap_or_else(|| panic!("no grad for leaf {li}"));
            for r in 0..leaf.nrows() {
                for c in 0..leaf.ncols() {
                    let eval = |delta: f64| {
                        let mut tape = Tape::new();
                        let vars: Vec<Var> = leaves
                            .iter()
                            .enumerate()
                            .map(|(i, l)| {
                                let mut l = l.clone();
                                if i == li {
                                    l[[r, c]] += delta;
                                }
                                tape.leaf(l)
                            })
                            .collect();
                        let loss = build(&mut tape, &vars);
                        tape.value(loss)[[0, 0]]
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let got = g[[r, c]];
                    let denom = fd.abs().max(got.abs()).max(1e-4);
                    assert!(
                        (fd - got).abs() / denom < 1e-5,
                        "leaf {li} [{r},{c}]: fd={fd} got={got}"
                    );
                }
            }
        }
    }

    fn sum_all(tape: &mut Tape, x: Var) -> Var {
        // Reduce to 1x1 by two matmuls with ones.
        let (r, c) = tape.value(x).dim();
        let ones_l = tape.leaf(Array2::from_elem((1, r), 1.0));
        let ones_r = tape.leaf(Array2::from_elem((c, 1), 1.0));
        let m = tape.matmul(ones_l, x);
        tape.matmul(m, ones_r)
    }

    #[test]
    fn grad_matmul_add_mul() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 3, 2);
        check_grad(&[a, b, c], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.add(m, v[2]);
            let s2 = t.mul(s, s);
            sum_all(t, s2)
        });
    }

    #[test]
    fn grad_matmul_nt_and_scale() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 5);
        let b = rand_mat(&mut rng, 4, 5);
        check_grad(&[a, b], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            let s = t.scale(m, 0.37);
            let r = t.relu(s);
            sum_all(t, r)
        });
    }

    #[test]
    fn grad_softmax_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 5);
        let w = rand_mat(&mut rng, 5, 1);
        check_grad(&[a, w], |t, v| {
            let s = t.softmax_rows(v[0]);
            let m = t.matmul(s, v[1]);
            sum_all(t, m)
        });
    }

    #[test]
    fn grad_log_softmax_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 1);
        check_grad(&[a, w], |t, v| {
            let s = t.log_softmax_rows(v[0]);
            let sq = t.mul(s, s);
            let m = t.matmul(sq, v[1]);
            sum_all(t, m)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 4, 6);
        let gamma = rand_mat(&mut rng, 1, 6);
        let beta = rand_mat(&mut rng, 1, 6);
        check_grad(&[x, gamma, beta], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let y2 = t.mul(y, y);
            sum_all(t, y2)
        });
    }

    #[test]
    fn grad_slice_concat() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 3, 6);
        check_grad(&[x], |t, v| {
            let a = t.slice_cols(v[0], 0, 3);
            let b = t.slice_cols(v[0], 3, 3);
            let m = t.matmul_nt(a, b);
            let sm = t.softmax_rows(m);
            let c = t.concat_cols(&[sm, a]);
            let r = t.slice_rows(c, 1, 2);
            let r2 = t.mul(r, r);
            sum_all(t, r2)
        });
    }

    #[test]
    fn grad_conv_via_im2col() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = rand_mat(&mut rng, 5, 3);
        let w = rand_mat(&mut rng, 9, 2); // kernel 3, Cin 3, Cout 2
        let b = rand_mat(&mut rng, 1, 2);
        check_grad(&[x, w, b], |t, v| {
            let col = t.im2col(v[0], 3);
            let y = t.matmul(col, v[1]);
            let y = t.add_row(y, v[2]);
            let y = t.relu(y);
            sum_all(t, y)
        });
    }

    #[test]
    fn grad_conv_transpose() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = rand_mat(&mut rng, 4, 3);
        let w1 = rand_mat(&mut rng, 12, 3); // kernel 4, Cin 3, Cout 3
        let w2 = rand_mat(&mut rng, 9, 2); // kernel 3, Cin 3, Cout 2
        check_grad(&[x, w1, w2], |t, v| {
            let y1 = t.conv_transpose1d(v[0], v[1], 4, 2);
            let y2 = t.conv_transpose1d(y1, v[2], 3, 1);
            let y3 = t.slice_rows(y2, 2, 8);
            let y4 = t.mul(y3, y3);
            sum_all(t, y4)
        });
    }

    #[test]
    fn conv_transpose_lengths() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_elem((10, 2), 1.0));
        let w1 = tape.leaf(Array2::from_elem((8, 2), 0.5)); // k=4
        let w2 = tape.leaf(Array2::from_elem((6, 2), 0.5)); // k=3
        let y1 = tape.conv_transpose1d(x, w1, 4, 2);
        assert_eq!(tape.value(y1).nrows(), 22); // (10-1)*2+4
        let y2 = tape.conv_transpose1d(y1, w2, 3, 1);
        assert_eq!(tape.value(y2).nrows(), 24); // 22+2
    }

    #[test]
    fn grad_embedding() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let table = rand_mat(&mut rng, 5, 4);
        check_grad(&[table], |t, v| {
            let e = t.embedding(&[0, 2, 2, 4], v[0]);
            let e2 = t.mul(e, e);
            sum_all(t, e2)
        });
    }

    #[test]
    fn grad_ce_loss() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let logits = rand_mat(&mut rng, 4, 5);
        check_grad(&[logits], |t, v| t.ce_loss(v[0], &[1, 0, 4, 2]).unwrap());
    }

    #[test]
    fn grad_l1_loss_away_from_ties() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let pred = rand_mat(&mut rng, 4, 3);
        let target = rand_mat(&mut rng, 4, 3);
        check_grad(&[pred], |t, v| t.l1_loss(v[0], &target, 3).unwrap());
    }

    #[test]
    fn l1_subgradient_zero_at_ties() {
        let mut tape = Tape::new();
        let target = Array2::from_elem((2, 3), 0.5);
        let pred = tape.leaf(target.clone());
        let loss = tape.l1_loss(pred, &target, 2).unwrap();
        let grads = tape.backward(loss);
        let g = grads[pred.0].as_ref().unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_ctc_loss_through_log_softmax() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let logits = rand_mat(&mut rng, 5, 4);
        check_grad(&[logits], |t, v| {
            let lp = t.log_softmax_rows(v[0]);
            t.ctc_loss(lp, &[1, 3]).unwrap()
        });
    }

    #[test]
    fn grad_accumulates_over_shared_use() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let x = rand_mat(&mut rng, 3, 3);
        check_grad(&[x], |t, v| {
            // x used twice: residual-style
            let y = t.matmul(v[0], v[0]);
            let z = t.add(y, v[0]);
            sum_all(t, z)
        });
    }
}
