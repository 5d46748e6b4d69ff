//! Forward pass: token embedding, post-norm encoder layers, dueling head.
//! Every intermediate the backward pass needs is kept in [`ForwardCache`].
//!
//! The hot paths work on contiguous row slices and split large batched
//! products into fixed row chunks evaluated in parallel; chunk boundaries
//! are constant, so results never depend on the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use super::{LayerIds, NetError, NetFloat, QNetwork};
use crate::env::{Observation, ACTION_COUNT, OBS_FIELDS};

/// Layer-norm epsilon.
pub(crate) const LN_EPS: f64 = 1e-5;

/// Row count per parallel chunk for batched products and row-wise kernels.
pub(crate) const PAR_CHUNK_ROWS: usize = 2048;

pub(crate) fn par_matmul<F: NetFloat>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    let mut out = Array2::<F>::zeros((a.nrows(), b.ncols()));
    if a.nrows() <= PAR_CHUNK_ROWS {
        general_mat_mul(F::one(), a, b, F::zero(), &mut out);
    } else {
        out.axis_chunks_iter_mut(Axis(0), PAR_CHUNK_ROWS)
            .into_par_iter()
            .zip(a.axis_chunks_iter(Axis(0), PAR_CHUNK_ROWS).into_par_iter())
            .for_each(|(mut oc, ac)| {
                general_mat_mul(F::one(), &ac, b, F::zero(), &mut oc);
            });
    }
    out
}

/// x * w + bias row.
pub(crate) fn affine<F: NetFloat>(
    x: &ArrayView2<'_, F>,
    w: &ArrayView2<'_, F>,
    bias: &ArrayView2<'_, F>,
) -> Array2<F> {
    let mut out = par_matmul(x, w);
    out += bias;
    out
}

/// Per-row layer normalization state needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<F> {
    /// (x - mean) / sqrt(var + eps), before gain and bias.
    pub normed: Array2<F>,
    pub inv_std: Array1<F>,
}

/// Fused residual + layer norm: normalizes `a + b` row-wise and applies
/// gain and bias, without materializing the sum.
pub(crate) fn add_layer_norm_forward<F: NetFloat>(
    a: &Array2<F>,
    b: &Array2<F>,
    gain: &ArrayView2<'_, F>,
    bias: &ArrayView2<'_, F>,
) -> (Array2<F>, NormCache<F>) {
    let (rows, d) = a.dim();
    debug_assert_eq!(b.dim(), (rows, d));
    let inv_d = F::from_f64(1.0 / d as f64);
    let eps = F::from_f64(LN_EPS);
    let mut out = Array2::<F>::zeros((rows, d));
    let mut normed = Array2::<F>::zeros((rows, d));
    let mut inv_std = Array1::<F>::zeros(rows);

    let a_s = a.as_slice().expect("standard layout");
    let b_s = b.as_slice().expect("standard layout");
    let gain_row = gain.row(0);
    let g_s = gain_row.to_slice().expect("contiguous gain");
    let bias_row = bias.row(0);
    let c_s = bias_row.to_slice().expect("contiguous bias");

    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(PAR_CHUNK_ROWS * d)
        .zip(
            normed
                .as_slice_mut()
                .expect("standard layout")
                .par_chunks_mut(PAR_CHUNK_ROWS * d),
        )
        .zip(
            inv_std
                .as_slice_mut()
                .expect("contiguous")
                .par_chunks_mut(PAR_CHUNK_ROWS),
        )
        .zip(a_s.par_chunks(PAR_CHUNK_ROWS * d))
        .zip(b_s.par_chunks(PAR_CHUNK_ROWS * d))
        .for_each(|((((out_c, normed_c), inv_c), a_c), b_c)| {
            for (((out_r, n_r), is), (a_r, b_r)) in out_c
                .chunks_exact_mut(d)
                .zip(normed_c.chunks_exact_mut(d))
                .zip(inv_c.iter_mut())
                .zip(a_c.chunks_exact(d).zip(b_c.chunks_exact(d)))
            {
                let mut sum = F::zero();
                for (&x, &y) in a_r.iter().zip(b_r) {
                    sum = sum + x + y;
                }
                let mean = sum * inv_d;
                let mut var = F::zero();
                for ((n, &x), &y) in n_r.iter_mut().zip(a_r).zip(b_r) {
                    let centered = x + y - mean;
                    *n = centered;
                    var += centered * centered;
                }
                let s = (var * inv_d + eps).sqrt().recip();
                *is = s;
                for ((o, n), (&g, &c)) in out_r
                    .iter_mut()
                    .zip(n_r.iter_mut())
                    .zip(g_s.iter().zip(c_s))
                {
                    *n *= s;
                    *o = g * *n + c;
                }
            }
        });

    (out, NormCache { normed, inv_std })
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    /// Layer input (B*T, d).
    pub input: Array2<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Softmax attention weights, one (T, T) slab per (sample, head).
    pub attn: Array3<F>,
    /// Concatenated head outputs before the output projection.
    pub concat: Array2<F>,
    pub norm1: NormCache<F>,
    /// Post-LN1 activations (FFN input and residual source).
    pub x1: Array2<F>,
    /// Post-ReLU hidden activations (B*T, d_ff).
    pub hidden: Array2<F>,
    pub norm2: NormCache<F>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub(crate) batch: usize,
    /// Tokens per sample (residues + CLS).
    pub(crate) tokens: usize,
    pub(crate) residues: usize,
    /// Raw residue token features (B*L, 4 + d_type).
    pub(crate) token_feats: Array2<F>,
    /// Type-table row used by each residue token.
    pub(crate) type_ids: Vec<usize>,
    pub(crate) layers: Vec<LayerCache<F>>,
    /// CLS hidden state after the last layer (B, d).
    pub(crate) h_cls: Array2<F>,
}

impl<F: NetFloat> QNetwork<F> {
    /// Q-values for a batch of observations (B x 5).
    pub fn forward_batch(&self, observations: &[&Observation]) -> Result<Array2<F>, NetError> {
        self.forward_cached(observations).map(|(q, _)| q)
    }

    /// Q-values for a single observation.
    pub fn forward_one(&self, observation: &Observation) -> Result<[F; ACTION_COUNT], NetError> {
        let q = self.forward_batch(&[observation])?;
        let mut out = [F::zero(); ACTION_COUNT];
        for (o, v) in out.iter_mut().zip(q.row(0)) {
            *o = *v;
        }
        Ok(out)
    }

    /// Q-values plus the dueling components V(s) and A(s, .).
    #[allow(clippy::type_complexity)]
    pub fn forward_parts(
        &self,
        observations: &[&Observation],
    ) -> Result<(Array2<F>, Array1<F>, Array2<F>), NetError> {
        let (_, cache) = self.forward_cached(observations)?;
        let (q, v, adv) = self.head_forward(&cache.h_cls);
        Ok((q, v, adv))
    }

    /// Full forward pass returning Q-values and the backward cache.
    pub fn forward_cached(
        &self,
        observations: &[&Observation],
    ) -> Result<(Array2<F>, ForwardCache<F>), NetError> {
        let (h0, token_feats, type_ids, residues) = self.embed(observations)?;
        let batch = observations.len();
        let tokens = residues + 1;

        let mut layers = Vec::with_capacity(self.layout.layers.len());
        let mut x = h0;
        let layer_ids: Vec<LayerIds> = self.layout.layers.clone();
        for lid in &layer_ids {
            let (out, cache) = self.layer_forward(lid, x, batch, tokens);
            layers.push(cache);
            x = out;
        }

        let mut h_cls = Array2::zeros((batch, self.config.d_model));
        for b in 0..batch {
            h_cls.row_mut(b).assign(&x.row(b * tokens));
        }

        let cache = ForwardCache {
            batch,
            tokens,
            residues,
            token_feats,
            type_ids,
            layers,
            h_cls,
        };
        let (q, _, _) = self.head_forward(&cache.h_cls);
        if q.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("Q-value output".into()));
        }
        Ok((q, cache))
    }

    /// Token embedding: [coords, typeEmb(type), index] projected to
    /// d_model, positional encodings added, CLS prepended (the CLS row
    /// carries no positional encoding).
    #[allow(clippy::type_complexity)]
    fn embed(
        &self,
        observations: &[&Observation],
    ) -> Result<(Array2<F>, Array2<F>, Vec<usize>, usize), NetError> {
        if observations.is_empty() {
            return Err(NetError::BadObservation("empty batch".into()));
        }
        let residues = observations[0].residue_count();
        if residues < 2 {
            return Err(NetError::BadObservation(format!(
                "need at least 2 residues, got {residues}"
            )));
        }
        let batch = observations.len();
        let d = self.config.d_model;
        let tw = self.config.token_width();
        let d_type = self.config.d_type;
        let type_table = self.view(self.layout.type_embed);

        let mut token_feats = Array2::zeros((batch * residues, tw));
        let mut type_ids = Vec::with_capacity(batch * residues);
        for (b, obs) in observations.iter().enumerate() {
            if obs.values().len() != residues * OBS_FIELDS {
                return Err(NetError::BadObservation(format!(
                    "observation {b} has length {}, expected {}",
                    obs.values().len(),
                    residues * OBS_FIELDS
                )));
            }
            for i in 0..residues {
                let fields = obs.residue_fields(i);
                let type_id = if fields[3] > 0.5 { 1usize } else { 0usize };
                type_ids.push(type_id);
                let mut row = token_feats.row_mut(b * residues + i);
                row[0] = F::from_f64(fields[0] as f64);
                row[1] = F::from_f64(fields[1] as f64);
                row[2] = F::from_f64(fields[2] as f64);
                for t in 0..d_type {
                    row[3 + t] = type_table[[type_id, t]];
                }
                row[3 + d_type] = F::from_f64(fields[4] as f64);
            }
        }

        let projected = affine(
            &token_feats.view(),
            &self.view(self.layout.in_w),
            &self.view(self.layout.in_b),
        );
        let pe = super::positional_encoding::<F>(residues, d);
        let cls = self.view(self.layout.cls);

        let tokens = residues + 1;
        let mut h0 = Array2::zeros((batch * tokens, d));
        for b in 0..batch {
            h0.row_mut(b * tokens).assign(&cls.row(0));
            for i in 0..residues {
                let mut row = h0.row_mut(b * tokens + 1 + i);
                row.assign(&projected.row(b * residues + i));
                row += &pe.row(i);
            }
        }
        Ok((h0, token_feats, type_ids, residues))
    }

    /// One post-norm encoder layer: self-attention, add & norm, ReLU FFN,
    /// add & norm.
    pub(crate) fn layer_forward(
        &self,
        lid: &LayerIds,
        input: Array2<F>,
        batch: usize,
        tokens: usize,
    ) -> (Array2<F>, LayerCache<F>) {
        let heads = self.config.n_heads;
        let dk = self.config.head_dim();
        let scale = F::from_f64(1.0 / (dk as f64).sqrt());

        let q = affine(&input.view(), &self.view(lid.wq), &self.view(lid.bq));
        let k = affine(&input.view(), &self.view(lid.wk), &self.view(lid.bk));
        let v = affine(&input.view(), &self.view(lid.wv), &self.view(lid.bv));

        let mut attn = Array3::<F>::zeros((batch * heads, tokens, tokens));
        let mut concat = Array2::<F>::zeros((batch * tokens, self.config.d_model));
        concat
            .axis_chunks_iter_mut(Axis(0), tokens)
            .into_par_iter()
            .zip(attn.axis_chunks_iter_mut(Axis(0), heads).into_par_iter())
            .enumerate()
            .for_each(|(b, (mut concat_b, mut attn_b))| {
                let rows = s![b * tokens..(b + 1) * tokens, ..];
                let qb = q.slice(rows);
                let kb = k.slice(rows);
                let vb = v.slice(rows);
                for h in 0..heads {
                    let cols = s![.., h * dk..(h + 1) * dk];
                    let qh = qb.slice(cols);
                    let kh = kb.slice(cols);
                    let vh = vb.slice(cols);
                    // Scores land directly in the cache slab; the
                    // 1/sqrt(dk) scale folds into the product.
                    let mut scores = attn_b.slice_mut(s![h, .., ..]);
                    general_mat_mul(scale, &qh, &kh.t(), F::zero(), &mut scores);
                    softmax_rows(&mut scores);
                    let mut out = concat_b.slice_mut(cols);
                    general_mat_mul(F::one(), &scores.view(), &vh, F::zero(), &mut out);
                }
            });

        let att_out = affine(&concat.view(), &self.view(lid.wo), &self.view(lid.bo));
        let (x1, norm1) = add_layer_norm_forward(
            &input,
            &att_out,
            &self.view(lid.ln1_g),
            &self.view(lid.ln1_b),
        );

        let mut hidden = affine(&x1.view(), &self.view(lid.w1), &self.view(lid.b1));
        hidden.mapv_inplace(|z| z.max(F::zero()));
        let ffn = affine(&hidden.view(), &self.view(lid.w2), &self.view(lid.b2));

        let (out, norm2) =
            add_layer_norm_forward(&x1, &ffn, &self.view(lid.ln2_g), &self.view(lid.ln2_b));

        (
            out,
            LayerCache {
                input,
                q,
                k,
                v,
                attn,
                concat,
                norm1,
                x1,
                hidden,
                norm2,
            },
        )
    }

    /// Dueling head on the CLS representation: Q = V + A - mean(A).
    pub(crate) fn head_forward(&self, h_cls: &Array2<F>) -> (Array2<F>, Array1<F>, Array2<F>) {
        let v = affine(
            &h_cls.view(),
            &self.view(self.layout.value_w),
            &self.view(self.layout.value_b),
        );
        let adv = affine(
            &h_cls.view(),
            &self.view(self.layout.adv_w),
            &self.view(self.layout.adv_b),
        );
        let inv_a = F::from_f64(1.0 / ACTION_COUNT as f64);
        let mut q = adv.clone();
        for (mut q_row, (adv_row, v_row)) in q
            .rows_mut()
            .into_iter()
            .zip(adv.rows().into_iter().zip(v.rows()))
        {
            let mean = adv_row.sum() * inv_a;
            let value = v_row[0];
            q_row.mapv_inplace(|a| value + a - mean);
        }
        (q, v.column(0).to_owned(), adv)
    }
}

pub(crate) fn softmax_rows<F, S>(m: &mut ndarray::ArrayBase<S, ndarray::Ix2>)
where
    F: NetFloat,
    S: ndarray::DataMut<Elem = F>,
{
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        let inv = sum.recip();
        row.mapv_inplace(|x| x * inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FeasibilityMode, HpEnv, Sequence};
    use crate::qnet::{positional_encoding, NetworkConfig};

    fn obs(seq: &str) -> Observation {
        let env = HpEnv::new(Sequence::parse(seq).unwrap(), FeasibilityMode::Off);
        env.state().observation()
    }

    fn tiny_net(seed: u64) -> QNetwork<f64> {
        QNetwork::<f64>::new(NetworkConfig::tiny(), seed).unwrap()
    }

    #[test]
    fn output_is_always_five_wide() {
        let net = tiny_net(0);
        for seq in ["HPH", "HPPH", "HPHPHPHPHPHP"] {
            let o = obs(seq);
            let q = net.forward_batch(&[&o]).unwrap();
            assert_eq!(q.dim(), (1, 5));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = tiny_net(3);
        let o = obs("HPPHHP");
        let a = net.forward_one(&o).unwrap();
        let b = net.forward_one(&o).unwrap();
        assert_eq!(
            a.map(|x| x.to_bits()),
            b.map(|x| x.to_bits()),
            "same parameters and input must give bitwise-identical output"
        );
    }

    #[test]
    fn batch_of_identical_observations_gives_identical_rows() {
        let net = tiny_net(1);
        let o = obs("HHPPHH");
        let q = net.forward_batch(&[&o, &o, &o]).unwrap();
        for b in 1..3 {
            for a in 0..5 {
                assert_eq!(q[[0, a]].to_bits(), q[[b, a]].to_bits());
            }
        }
    }

    #[test]
    fn batch_rows_match_single_forwards() {
        let net = tiny_net(13);
        let o1 = obs("HPPHHP");
        let o2 = obs("PPPPHH");
        let q = net.forward_batch(&[&o1, &o2]).unwrap();
        let q1 = net.forward_one(&o1).unwrap();
        let q2 = net.forward_one(&o2).unwrap();
        for a in 0..5 {
            assert!((q[[0, a]] - q1[a]).abs() < 1e-12);
            assert!((q[[1, a]] - q2[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn type_flip_changes_only_that_token() {
        let net = tiny_net(2);
        let a = obs("HPPH");
        let mut values = a.values().to_vec();
        values[OBS_FIELDS + 3] = 1.0; // flip residue 1 from P to H
        let b = Observation::from_values(values);
        let (_, ca) = net.forward_cached(&[&a]).unwrap();
        let (_, cb) = net.forward_cached(&[&b]).unwrap();
        // Compare layer-0 inputs: CLS row and all residue rows except 1.
        let xa = &ca.layers[0].input;
        let xb = &cb.layers[0].input;
        for row in 0..5 {
            let same = xa.row(row) == xb.row(row);
            assert_eq!(same, row != 2, "row {row} (token for residue 1 is row 2)");
        }
    }

    #[test]
    fn zero_projection_leaves_positional_encodings() {
        let mut net = tiny_net(4);
        for name in ["input_proj.weight", "input_proj.bias", "cls"] {
            net.tensor_mut(name).unwrap().fill(0.0);
        }
        let o = obs("HPPH");
        let (_, cache) = net.forward_cached(&[&o]).unwrap();
        let pe = positional_encoding::<f64>(4, net.config().d_model);
        let h0 = &cache.layers[0].input;
        assert!(h0.row(0).iter().all(|&v| v == 0.0), "CLS row is zero");
        for i in 0..4 {
            let row = h0.row(1 + i);
            for (a, b) in row.iter().zip(pe.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let net = tiny_net(5);
        let o = obs("HPHPPH");
        let (_, cache) = net.forward_cached(&[&o, &o]).unwrap();
        for layer in &cache.layers {
            for slab in layer.attn.outer_iter() {
                for row in slab.rows() {
                    let s: f64 = row.sum();
                    assert!((s - 1.0).abs() < 1e-6, "attention row sums to {s}");
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_identity_on_v() {
        let net = tiny_net(6);
        let lid = net.layout.layers[0];
        let d = net.config().d_model;
        let input = Array2::from_shape_fn((1, d), |(_, j)| (j as f64 * 0.31).sin());
        let (_, cache) = net.layer_forward(&lid, input, 1, 1);
        // Softmax over one key is 1, so the head outputs equal V exactly.
        assert_eq!(cache.attn[[0, 0, 0]], 1.0);
        for (c, v) in cache.concat.row(0).iter().zip(cache.v.row(0)) {
            assert!((c - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let net = tiny_net(7);
        let o = obs("HHPPHP");
        let (_, cache) = net.forward_cached(&[&o]).unwrap();
        let d = net.config().d_model as f64;
        for nc in [&cache.layers[0].norm1, &cache.layers[0].norm2] {
            for row in nc.normed.rows() {
                let mean: f64 = row.sum() / d;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                assert!(mean.abs() < 1e-5, "normalized mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "normalized variance {var}");
            }
        }
    }

    #[test]
    fn dueling_head_arithmetic() {
        let mut net = tiny_net(8);
        net.tensor_mut("value.weight").unwrap().fill(0.0);
        net.tensor_mut("value.bias").unwrap().fill(0.0);
        net.tensor_mut("advantage.weight").unwrap().fill(0.0);
        {
            let mut ab = net.tensor_mut("advantage.bias").unwrap();
            ab.fill(0.0);
            ab[[0, 0]] = 1.0;
        }
        let o = obs("HPPH");
        let q = net.forward_batch(&[&o]).unwrap();
        let expected = [0.8, -0.2, -0.2, -0.2, -0.2];
        for a in 0..5 {
            assert!((q[[0, a]] - expected[a]).abs() < 1e-12);
        }

        // A constant advantage vector cancels: Q = V everywhere.
        let mut net = tiny_net(9);
        net.tensor_mut("advantage.weight").unwrap().fill(0.0);
        net.tensor_mut("advantage.bias").unwrap().fill(3.25);
        let (q, v, _) = net.forward_parts(&[&o]).unwrap();
        for a in 0..5 {
            assert!((q[[0, a]] - v[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_q_equals_v() {
        let net = tiny_net(10);
        for seq in ["HPPH", "HHHPPP", "HPHPHPHP"] {
            let o = obs(seq);
            let (q, v, _) = net.forward_parts(&[&o]).unwrap();
            let mean = q.row(0).sum() / 5.0;
            assert!((mean - v[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let mut net = tiny_net(11);
        net.tensor_mut("value.bias").unwrap().fill(f64::NAN);
        let o = obs("HPPH");
        assert!(matches!(
            net.forward_batch(&[&o]),
            Err(NetError::NonFinite(_))
        ));
    }

    #[test]
    fn malformed_observation_is_rejected() {
        let net = tiny_net(12);
        let bad = Observation::from_values(vec![0.0; 7]);
        assert!(matches!(
            net.forward_batch(&[&bad]),
            Err(NetError::BadObservation(_))
        ));
    }
}
