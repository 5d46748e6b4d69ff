//! Hand-derived backward passes mirroring `forward.rs`, layer by layer in
//! reverse. Gradients accumulate into one flat vector aligned with the
//! parameter layout.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::forward::{par_matmul, ForwardCache, NormCache, PAR_CHUNK_ROWS};
use super::{NetFloat, QNetwork};

impl<F: NetFloat> QNetwork<F> {
    /// Exact gradient of a scalar loss with respect to every parameter,
    /// given d(loss)/d(Q-values).
    pub fn backward(&self, cache: &ForwardCache<F>, d_q: &Array2<F>) -> Vec<F> {
        let mut grads = self.zero_gradients();
        let batch = cache.batch;
        let tokens = cache.tokens;
        let d = self.config.d_model;
        debug_assert_eq!(d_q.dim(), (batch, crate::env::ACTION_COUNT));

        // Dueling head: Q[b,a] = V[b] + A[b,a] - mean_a' A[b,a'].
        let inv_actions = F::from_f64(1.0 / crate::env::ACTION_COUNT as f64);
        let mut d_v = Array2::<F>::zeros((batch, 1));
        let mut d_adv = d_q.clone();
        for (mut adv_row, (q_row, mut v_row)) in d_adv
            .rows_mut()
            .into_iter()
            .zip(d_q.rows().into_iter().zip(d_v.rows_mut()))
        {
            let total = q_row.sum();
            v_row[0] = total;
            let mean = total * inv_actions;
            adv_row.mapv_inplace(|g| g - mean);
        }

        self.acc2(&mut grads, self.layout.value_w, &cache.h_cls.t().dot(&d_v));
        self.acc1(&mut grads, self.layout.value_b, &d_v.sum_axis(Axis(0)));
        self.acc2(&mut grads, self.layout.adv_w, &cache.h_cls.t().dot(&d_adv));
        self.acc1(&mut grads, self.layout.adv_b, &d_adv.sum_axis(Axis(0)));

        let mut d_h_cls = d_v.dot(&self.view(self.layout.value_w).t());
        d_h_cls = d_h_cls + d_adv.dot(&self.view(self.layout.adv_w).t());

        // Scatter CLS gradients into the token grid.
        let mut d_x = Array2::<F>::zeros((batch * tokens, d));
        for b in 0..batch {
            d_x.row_mut(b * tokens).assign(&d_h_cls.row(b));
        }

        for (layer_idx, layer_cache) in cache.layers.iter().enumerate().rev() {
            d_x = self.layer_backward(layer_idx, layer_cache, d_x, batch, tokens, &mut grads);
        }

        self.embed_backward(cache, &d_x, &mut grads);
        grads
    }

    fn layer_backward(
        &self,
        layer_idx: usize,
        cache: &super::forward::LayerCache<F>,
        d_out: Array2<F>,
        batch: usize,
        tokens: usize,
        grads: &mut [F],
    ) -> Array2<F> {
        let lid = self.layout.layers[layer_idx];
        let heads = self.config.n_heads;
        let dk = self.config.head_dim();
        let scale = F::from_f64(1.0 / (dk as f64).sqrt());

        // Final add & norm.
        let (d_r2, dg2, db2) =
            layer_norm_backward(&d_out, &cache.norm2, &self.view(lid.ln2_g));
        self.acc1(grads, lid.ln2_g, &dg2);
        self.acc1(grads, lid.ln2_b, &db2);

        // Residual split: r2 = x1 + ffn(x1).
        let mut d_x1 = d_r2.clone();
        let d_ffn = d_r2;

        // FFN: ffn = relu(x1 w1 + b1) w2 + b2.
        self.acc2(grads, lid.w2, &cache.hidden.t().dot(&d_ffn));
        self.acc1(grads, lid.b2, &d_ffn.sum_axis(Axis(0)));
        let mut d_z = par_matmul(&d_ffn.view(), &self.view(lid.w2).t());
        ndarray::Zip::from(&mut d_z)
            .and(&cache.hidden)
            .for_each(|dz, &h| {
                if h <= F::zero() {
                    *dz = F::zero();
                }
            });
        self.acc2(grads, lid.w1, &cache.x1.t().dot(&d_z));
        self.acc1(grads, lid.b1, &d_z.sum_axis(Axis(0)));
        d_x1 = d_x1 + par_matmul(&d_z.view(), &self.view(lid.w1).t());

        // First add & norm.
        let (d_r1, dg1, db1) =
            layer_norm_backward(&d_x1, &cache.norm1, &self.view(lid.ln1_g));
        self.acc1(grads, lid.ln1_g, &dg1);
        self.acc1(grads, lid.ln1_b, &db1);

        // Residual split: r1 = input + attention(input).
        let mut d_input = d_r1.clone();
        let d_att = d_r1;

        // Output projection of the concatenated heads.
        self.acc2(grads, lid.wo, &cache.concat.t().dot(&d_att));
        self.acc1(grads, lid.bo, &d_att.sum_axis(Axis(0)));
        let d_concat = par_matmul(&d_att.view(), &self.view(lid.wo).t());

        // Per-(sample, head) scaled dot-product attention backward.
        let d = self.config.d_model;
        let mut d_q = Array2::<F>::zeros((batch * tokens, d));
        let mut d_k = Array2::<F>::zeros((batch * tokens, d));
        let mut d_v = Array2::<F>::zeros((batch * tokens, d));
        d_q.axis_chunks_iter_mut(Axis(0), tokens)
            .into_par_iter()
            .zip(d_k.axis_chunks_iter_mut(Axis(0), tokens).into_par_iter())
            .zip(d_v.axis_chunks_iter_mut(Axis(0), tokens).into_par_iter())
            .enumerate()
            .for_each(|(b, ((mut dq_b, mut dk_b), mut dv_b))| {
                let rows = s![b * tokens..(b + 1) * tokens, ..];
                let qb = cache.q.slice(rows);
                let kb = cache.k.slice(rows);
                let vb = cache.v.slice(rows);
                let dcon_b = d_concat.slice(rows);
                let mut d_s = Array2::<F>::zeros((tokens, tokens));
                for h in 0..heads {
                    let cols = s![.., h * dk..(h + 1) * dk];
                    let attn = cache.attn.slice(s![b * heads + h, .., ..]);
                    let d_o = dcon_b.slice(cols);
                    let vh = vb.slice(cols);

                    general_mat_mul(F::one(), &d_o, &vh.t(), F::zero(), &mut d_s);
                    let mut dv_h = dv_b.slice_mut(cols);
                    general_mat_mul(F::one(), &attn.t(), &d_o, F::zero(), &mut dv_h);

                    // Softmax backward: dS = A o (dA - rowsum(dA o A)),
                    // with the 1/sqrt(dk) scale folded into the products
                    // below.
                    for (mut ds_row, a_row) in d_s.rows_mut().into_iter().zip(attn.rows()) {
                        let dot = ds_row
                            .iter()
                            .zip(a_row.iter())
                            .fold(F::zero(), |acc, (&g, &a)| acc + g * a);
                        for (ds, &a) in ds_row.iter_mut().zip(a_row.iter()) {
                            *ds = a * (*ds - dot);
                        }
                    }
                    let mut dq_h = dq_b.slice_mut(cols);
                    general_mat_mul(scale, &d_s.view(), &kb.slice(cols), F::zero(), &mut dq_h);
                    let mut dk_h = dk_b.slice_mut(cols);
                    general_mat_mul(scale, &d_s.t(), &qb.slice(cols), F::zero(), &mut dk_h);
                }
            });

        // Q/K/V projections.
        let input_t = cache.input.t();
        self.acc2(grads, lid.wq, &input_t.dot(&d_q));
        self.acc1(grads, lid.bq, &d_q.sum_axis(Axis(0)));
        self.acc2(grads, lid.wk, &input_t.dot(&d_k));
        self.acc1(grads, lid.bk, &d_k.sum_axis(Axis(0)));
        self.acc2(grads, lid.wv, &input_t.dot(&d_v));
        self.acc1(grads, lid.bv, &d_v.sum_axis(Axis(0)));

        d_input = d_input + par_matmul(&d_q.view(), &self.view(lid.wq).t());
        d_input = d_input + par_matmul(&d_k.view(), &self.view(lid.wk).t());
        d_input = d_input + par_matmul(&d_v.view(), &self.view(lid.wv).t());
        d_input
    }

    fn embed_backward(&self, cache: &ForwardCache<F>, d_h0: &Array2<F>, grads: &mut [F]) {
        let batch = cache.batch;
        let tokens = cache.tokens;
        let residues = cache.residues;
        let d = self.config.d_model;

        // CLS rows.
        let mut d_cls = Array1::<F>::zeros(d);
        for b in 0..batch {
            d_cls += &d_h0.row(b * tokens);
        }
        self.acc1(grads, self.layout.cls, &d_cls);

        // Residue rows (positional encodings are constants).
        let mut d_proj = Array2::<F>::zeros((batch * residues, d));
        for b in 0..batch {
            for i in 0..residues {
                d_proj
                    .row_mut(b * residues + i)
                    .assign(&d_h0.row(b * tokens + 1 + i));
            }
        }
        self.acc2(grads, self.layout.in_w, &cache.token_feats.t().dot(&d_proj));
        self.acc1(grads, self.layout.in_b, &d_proj.sum_axis(Axis(0)));

        // Type-embedding rows via the projection.
        let d_tokens = par_matmul(&d_proj.view(), &self.view(self.layout.in_w).t());
        let entry = &self.layout.entries[self.layout.type_embed];
        let d_type = self.config.d_type;
        let type_grads = &mut grads[entry.offset..entry.offset + entry.len()];
        for (row, &type_id) in d_tokens.rows().into_iter().zip(&cache.type_ids) {
            let base = type_id * d_type;
            for t in 0..d_type {
                type_grads[base + t] += row[3 + t];
            }
        }
    }

    fn acc2(&self, grads: &mut [F], id: usize, delta: &Array2<F>) {
        let e = &self.layout.entries[id];
        debug_assert_eq!(delta.dim(), (e.rows, e.cols));
        let slice = &mut grads[e.offset..e.offset + e.len()];
        for (g, &v) in slice.iter_mut().zip(delta.iter()) {
            *g += v;
        }
    }

    fn acc1(&self, grads: &mut [F], id: usize, delta: &Array1<F>) {
        let e = &self.layout.entries[id];
        debug_assert_eq!(delta.len(), e.len());
        let slice = &mut grads[e.offset..e.offset + e.len()];
        for (g, &v) in slice.iter_mut().zip(delta.iter()) {
            *g += v;
        }
    }
}

/// Backward through y = gain * (x - mean)/sqrt(var + eps) + bias, given the
/// cached normalized values and inverse standard deviations. Rows are
/// processed in fixed parallel chunks; per-chunk gain/bias partial sums
/// merge in chunk order so the result is thread-count independent.
fn layer_norm_backward<F: NetFloat>(
    d_y: &Array2<F>,
    cache: &NormCache<F>,
    gain: &ArrayView2<'_, F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (rows, d) = d_y.dim();
    let inv_d = F::from_f64(1.0 / d as f64);
    let mut d_x = Array2::<F>::zeros((rows, d));

    let dy_s = d_y.as_slice().expect("standard layout");
    let n_s = cache.normed.as_slice().expect("standard layout");
    let is_s = cache.inv_std.as_slice().expect("contiguous");
    let gain_row = gain.row(0);
    let g_s = gain_row.to_slice().expect("contiguous gain");

    let partials: Vec<(Vec<F>, Vec<F>)> = d_x
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(PAR_CHUNK_ROWS * d)
        .zip(dy_s.par_chunks(PAR_CHUNK_ROWS * d))
        .zip(n_s.par_chunks(PAR_CHUNK_ROWS * d))
        .zip(is_s.par_chunks(PAR_CHUNK_ROWS))
        .map(|(((dx_c, dy_c), n_c), is_c)| {
            let mut dg = vec![F::zero(); d];
            let mut db = vec![F::zero(); d];
            for (((dx_r, dy_r), n_r), &inv_std) in dx_c
                .chunks_exact_mut(d)
                .zip(dy_c.chunks_exact(d))
                .zip(n_c.chunks_exact(d))
                .zip(is_c.iter())
            {
                let mut m1 = F::zero();
                let mut m2 = F::zero();
                for (((&dy, &n), &g), (dg_i, db_i)) in dy_r
                    .iter()
                    .zip(n_r)
                    .zip(g_s)
                    .zip(dg.iter_mut().zip(db.iter_mut()))
                {
                    *dg_i += dy * n;
                    *db_i += dy;
                    let dn = dy * g;
                    m1 += dn;
                    m2 += dn * n;
                }
                m1 *= inv_d;
                m2 *= inv_d;
                for ((dx, (&dy, &g)), &n) in
                    dx_r.iter_mut().zip(dy_r.iter().zip(g_s)).zip(n_r)
                {
                    let dn = dy * g;
                    *dx = inv_std * (dn - m1 - n * m2);
                }
            }
            (dg, db)
        })
        .collect();

    let mut d_gain = Array1::<F>::zeros(d);
    let mut d_bias = Array1::<F>::zeros(d);
    for (dg, db) in partials {
        for i in 0..d {
            d_gain[i] += dg[i];
            d_bias[i] += db[i];
        }
    }
    (d_x, d_gain, d_bias)
}
