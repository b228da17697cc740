//! Differentiable tensor layer: values, tape, seeded randomness, layers and
//! finite-difference checks.

pub mod gradcheck;
pub mod layers;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradient, check_param_gradient, relative_error, GradReport};
pub use layers::{add_positions, Attended, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention};
pub use rng::RngStream;
pub use tape::{log_add_exp, log_sum_exp, Gradients, Graph, ParamId, ParamStore, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn attention(dim: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let attn = MultiHeadAttention::new(&mut init, "attn", dim, heads).unwrap();
        (store, attn)
    }

    #[test]
    fn single_key_takes_all_mass() {
        let (store, attn) = attention(4, 1, 1);
        let mut rng = RngStream::new(3);
        let mut g = Graph::with_params(&store);
        let q = g.constant(rng.normal_tensor(&[1, 4], 1.0));
        let k = g.constant(rng.normal_tensor(&[1, 4], 1.0));
        let out = attn.forward(&mut g, q, k, k, None).unwrap();
        assert_eq!(g.value(out.scores[0]).data(), &[1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_scores() {
        let (store, attn) = attention(8, 2, 2);
        let mut rng = RngStream::new(4);
        let mut g = Graph::with_params(&store);
        let q = g.constant(rng.normal_tensor(&[2, 8], 1.0));
        let row = rng.normal_tensor(&[1, 8], 1.0);
        let keys = Tensor::new(vec![3, 8], row.data().repeat(3)).unwrap();
        let k = g.constant(keys);
        let out = attn.forward(&mut g, q, k, k, None).unwrap();
        for &s in &out.scores {
            for &p in g.value(s).data() {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_contract_error() {
        let (store, attn) = attention(4, 1, 1);
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::zeros(&[2, 4]));
        let k = g.constant(Tensor::zeros(&[2, 4]));
        let mask = [true, true, false, false];
        let err = attn.forward(&mut g, q, k, k, Some(&mask)).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let (store, attn) = attention(4, 2, 1);
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::zeros(&[2, 4]));
        let k = g.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(
            attn.forward(&mut g, q, k, k, None),
            Err(crate::Error::Shape(_))
        ));
        let mut init_store = ParamStore::new();
        let mut init = Init::new(&mut init_store, 0);
        assert!(MultiHeadAttention::new(&mut init, "bad", 6, 4).is_err());
    }

    /// Straight-line recomputation of multi-head attention from raw weights.
    fn reference_attention(
        store: &ParamStore,
        attn: &MultiHeadAttention,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> Tensor {
        let affine = |x: &Tensor, lin: &Linear| -> Vec<Vec<f64>> {
            let w = store.get(lin.weight);
            let b = lin.bias.map(|b| store.get(b));
            (0..x.rows())
                .map(|i| {
                    (0..lin.d_out)
                        .map(|o| {
                            let mut s = b.map_or(0.0, |b| b.data()[o]);
                            for p in 0..lin.d_in {
                                s += x.at(&[i, p]) * w.at(&[p, o]);
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };
        let qp = affine(q, &attn.query);
        let kp = affine(k, &attn.key);
        let vp = affine(v, &attn.value);
        let dh = attn.dim / attn.heads;
        let mut concat = vec![vec![0.0; attn.dim]; q.rows()];
        for h in 0..attn.heads {
            for i in 0..q.rows() {
                let logits: Vec<f64> = (0..k.rows())
                    .map(|j| {
                        (0..dh).map(|c| qp[i][h * dh + c] * kp[j][h * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    concat[i][h * dh + c] =
                        (0..k.rows()).map(|j| exps[j] / z * vp[j][h * dh + c]).sum();
                }
            }
        }
        let concat = Tensor::from_rows(&concat).unwrap();
        Tensor::from_rows(&affine(&concat, &attn.output)).unwrap()
    }

    #[test]
    fn attention_matches_straight_line_reference() {
        for seed in 0..5 {
            let (store, attn) = attention(8, 2, seed);
            let mut rng = RngStream::new(100 + seed);
            let (q, k, v) = (
                rng.normal_tensor(&[4, 8], 1.0),
                rng.normal_tensor(&[4, 8], 1.0),
                rng.normal_tensor(&[4, 8], 1.0),
            );
            let mut g = Graph::with_params(&store);
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let out = attn.forward(&mut g, qv, kv, vv, None).unwrap();
            let expected = reference_attention(&store, &attn, &q, &k, &v);
            assert!(g.value(out.output).max_abs_diff(&expected) < 1e-10);
            for &s in &out.scores {
                for i in 0..4 {
                    let row: f64 = g.value(s).row(i).iter().sum();
                    assert!((row - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let mut rng = RngStream::new(9);
        for _ in 0..3 {
            let a = rng.normal_tensor(&[3, 4], 1.0);
            let b = rng.normal_tensor(&[4, 5], 1.0);
            let r = rng.normal_tensor(&[5], 1.0);
            let report = check_gradient(
                |g, v| {
                    let m = g.matmul(v[0], v[1])?;
                    let m = g.mul_row(m, v[2])?;
                    let m = g.add_row(m, v[2])?;
                    let s = g.gelu(m);
                    let s2 = g.sigmoid(m);
                    let s3 = g.silu(m);
                    let x = g.add(s, s2)?;
                    let x = g.sub(x, s3)?;
                    let n = g.layer_norm(x, 1e-5)?;
                    let sm = g.softmax(n, None)?;
                    let ls = g.log_softmax(x)?;
                    let p = g.mul(sm, ls)?;
                    let t = g.transpose(p)?;
                    let c = g.concat_cols(&[t, t])?;
                    let c = g.slice_cols(c, 1, 4)?;
                    let rws = g.concat_rows(&[c, c])?;
                    let rws = g.slice_rows(rws, 2, 6)?;
                    let gat = g.gather_rows(rws, vec![Some(0), None, Some(5), Some(0)])?;
                    let gm = g.group_mean(gat, 2)?;
                    let rs = g.reshape(gm, &[4, 2])?;
                    let ab = g.abs(rs);
                    let sc = g.scale(ab, 0.7);
                    let sc = g.add_scalar(sc, 0.3);
                    Ok(g.sum(sc))
                },
                &[a, b, r],
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn depthwise_conv_gradient() {
        let mut rng = RngStream::new(11);
        for _ in 0..3 {
            let x = rng.normal_tensor(&[6, 3], 1.0);
            let w = rng.normal_tensor(&[3, 3], 1.0);
            let report = check_gradient(
                |g, v| {
                    let y = g.depthwise_conv1d(v[0], v[1])?;
                    let y = g.mul(y, y)?;
                    Ok(g.sum(y))
                },
                &[x, w],
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn attention_gradient_and_masked_softmax() {
        let mut rng = RngStream::new(12);
        for seed in 0..3 {
            let (store, attn) = attention(4, 2, seed);
            let q = rng.normal_tensor(&[3, 4], 1.0);
            let k = rng.normal_tensor(&[5, 4], 1.0);
            let mask: Vec<bool> = (0..15).map(|i| i % 5 != 4).collect();
            let report = check_gradient(
                |g, v| {
                    let out = {
                        let qh = v[0];
                        let kh = v[1];
                        let wq = g.constant(store.get(attn.query.weight).clone());
                        let wk = g.constant(store.get(attn.key.weight).clone());
                        let qp = g.matmul(qh, wq)?;
                        let kp = g.matmul(kh, wk)?;
                        let kt = g.transpose(kp)?;
                        let l = g.matmul(qp, kt)?;
                        let p = g.softmax(l, Some(&mask))?;
                        g.matmul(p, kh)?
                    };
                    let sq = g.mul(out, out)?;
                    Ok(g.sum(sq))
                },
                &[q.clone(), k.clone()],
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");

            let coords: Vec<(ParamId, usize)> = store
                .iter()
                .flat_map(|(p, _, t)| (0..t.numel()).step_by(3).map(move |i| (p, i)))
                .collect();
            let report = check_param_gradient(
                &store,
                |g| {
                    let qv = g.constant(q.clone());
                    let kv = g.constant(k.clone());
                    let out = attn.forward(g, qv, kv, kv, Some(&mask))?;
                    let sq = g.mul(out.output, out.output)?;
                    Ok(g.sum(sq))
                },
                1e-5,
                Some(&coords),
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }
}
