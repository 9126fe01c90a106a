use rand::Rng;

use super::kernels::{accumulate_weight_grad, affine, input_grad};
use super::{Head, Matrix, MlpSpec, ParamVector, SegmentKind, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::exec::RngKey;

/// Result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// Actions, Gaussian means, logits or values; one row per input row.
    pub output: Matrix,
    /// Clamped log-std (Gaussian head only).
    pub log_std: Option<Vec<f64>>,
}

#[derive(Debug)]
struct LayerTape {
    input: Vec<f64>,
    norm: Option<NormTape>,
}

#[derive(Debug)]
struct NormTape {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Activations cached by [`forward_with_tape`]; consumed by [`backward`].
#[derive(Debug)]
pub struct GradTape {
    batch: usize,
    layers: Vec<LayerTape>,
    // tanh(pre) for the deterministic head
    tanh: Option<Vec<f64>>,
}

impl GradTape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: ParamVector,
    /// Gradient with respect to the network input.
    pub input: Matrix,
}

struct LayerOffsets {
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
}

fn offsets(spec: &MlpSpec) -> (Vec<LayerOffsets>, Option<usize>, usize) {
    let dims = spec.layer_dims();
    let n_layers = dims.len();
    let mut out = Vec::with_capacity(n_layers);
    let mut off = 0;
    for (l, &(fi, fo)) in dims.iter().enumerate() {
        let weight = off;
        off += fi * fo;
        let bias = off;
        off += fo;
        let norm = if spec.layer_norm && l + 1 < n_layers {
            let g = off;
            off += fo;
            let o = off;
            off += fo;
            Some((g, o))
        } else {
            None
        };
        out.push(LayerOffsets { weight, bias, norm });
    }
    let log_std = if matches!(spec.head, Head::Gaussian { .. }) {
        let o = off;
        off += spec.output_dim;
        Some(o)
    } else {
        None
    };
    (out, log_std, off)
}

pub fn init_params(spec: &MlpSpec, key: RngKey) -> ParamVector {
    let layout = spec.layout();
    let mut rng = key.rng();
    let mut p = vec![0.0; layout.len()];
    for seg in &layout.segments {
        let dst = &mut p[seg.range()];
        match seg.kind {
            SegmentKind::Weight => {
                let (fan_in, fan_out) = seg.shape;
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in dst.iter_mut() {
                    *v = -limit + 2.0 * limit * rng.random::<f64>();
                }
            }
            SegmentKind::NormGain => dst.fill(1.0),
            SegmentKind::Bias | SegmentKind::NormOffset | SegmentKind::LogStd => dst.fill(0.0),
        }
    }
    ParamVector(p)
}

pub fn forward(spec: &MlpSpec, params: &[f64], obs: &Matrix) -> Result<HeadOutput> {
    forward_impl(spec, params, obs, false).map(|(o, _)| o)
}

pub fn forward_with_tape(
    spec: &MlpSpec,
    params: &[f64],
    obs: &Matrix,
) -> Result<(HeadOutput, GradTape)> {
    let (o, t) = forward_impl(spec, params, obs, true)?;
    Ok((o, t.expect("tape requested")))
}

fn forward_impl(
    spec: &MlpSpec,
    params: &[f64],
    obs: &Matrix,
    record: bool,
) -> Result<(HeadOutput, Option<GradTape>)> {
    let (offs, log_std_off, total) = offsets(spec);
    if params.len() != total {
        return Err(Error::shape(format!(
            "{} parameters for a network of {total}",
            params.len()
        )));
    }
    if obs.cols() != spec.input_dim {
        return Err(Error::shape(format!(
            "input width {} for a network expecting {}",
            obs.cols(),
            spec.input_dim
        )));
    }
    let batch = obs.rows();
    let dims = spec.layer_dims();
    let mut layers = Vec::new();
    let mut x = obs.as_slice().to_vec();
    for (l, (&(fi, fo), off)) in dims.iter().zip(&offs).enumerate() {
        let w = &params[off.weight..off.weight + fi * fo];
        let b = &params[off.bias..off.bias + fo];
        let mut z = vec![0.0; batch * fo];
        affine(&x, fi, w, b, &mut z);
        let hidden = l + 1 < dims.len();
        let mut norm_tape = None;
        if hidden {
            if let Some((go, oo)) = off.norm {
                let gain = &params[go..go + fo];
                let shift = &params[oo..oo + fo];
                let mut xhat = vec![0.0; batch * fo];
                let mut inv_std = vec![0.0; batch];
                for r in 0..batch {
                    let zr = &mut z[r * fo..(r + 1) * fo];
                    let mean = zr.iter().sum::<f64>() / fo as f64;
                    let var = zr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fo as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std[r] = inv;
                    let xr = &mut xhat[r * fo..(r + 1) * fo];
                    for j in 0..fo {
                        xr[j] = (zr[j] - mean) * inv;
                        zr[j] = gain[j] * xr[j] + shift[j];
                    }
                }
                if record {
                    norm_tape = Some(NormTape { xhat, inv_std });
                }
            }
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite activation in layer {}", l + 1)));
        }
        if record {
            layers.push(LayerTape {
                input: std::mem::replace(&mut x, z),
                norm: norm_tape,
            });
        } else {
            x = z;
        }
    }
    let mut tanh = None;
    let mut log_std = None;
    match spec.head {
        Head::DeterministicTanh { scale } => {
            let t: Vec<f64> = x.iter().map(|v| v.tanh()).collect();
            for (o, tv) in x.iter_mut().zip(&t) {
                *o = scale * tv;
            }
            if record {
                tanh = Some(t);
            }
        }
        Head::Gaussian {
            min_log_std,
            max_log_std,
        } => {
            let o = log_std_off.expect("gaussian head has a log-std segment");
            log_std = Some(
                params[o..o + spec.output_dim]
                    .iter()
                    .map(|v| v.clamp(min_log_std, max_log_std))
                    .collect(),
            );
        }
        Head::Categorical | Head::Linear => {}
    }
    let output = Matrix::from_vec(batch, spec.output_dim, x)?;
    let tape = record.then(|| GradTape {
        batch,
        layers,
        tanh,
    });
    Ok((HeadOutput { output, log_std }, tape))
}

/// Reverse pass. `output_grad` is the loss gradient with respect to
/// [`HeadOutput::output`]; `log_std_grad` the gradient with respect to the
/// clamped log-std (Gaussian head only).
pub fn backward(
    spec: &MlpSpec,
    params: &[f64],
    tape: GradTape,
    output_grad: &Matrix,
    log_std_grad: Option<&[f64]>,
) -> Result<Gradients> {
    let (offs, log_std_off, total) = offsets(spec);
    if params.len() != total {
        return Err(Error::shape("parameter count does not match the network"));
    }
    let batch = tape.batch;
    if output_grad.rows() != batch || output_grad.cols() != spec.output_dim {
        return Err(Error::shape(format!(
            "output gradient is {}x{}, tape expects {batch}x{}",
            output_grad.rows(),
            output_grad.cols(),
            spec.output_dim
        )));
    }
    let mut grad = vec![0.0; total];
    let mut dz: Vec<f64> = output_grad.as_slice().to_vec();
    match spec.head {
        Head::DeterministicTanh { scale } => {
            let t = tape.tanh.as_ref().expect("tanh cache");
            for (g, tv) in dz.iter_mut().zip(t) {
                *g *= scale * (1.0 - tv * tv);
            }
        }
        Head::Gaussian {
            min_log_std,
            max_log_std,
        } => {
            if let Some(lg) = log_std_grad {
                if lg.len() != spec.output_dim {
                    return Err(Error::shape("log-std gradient width"));
                }
                let o = log_std_off.expect("log-std segment");
                for i in 0..spec.output_dim {
                    let p = params[o + i];
                    if p > min_log_std && p < max_log_std {
                        grad[o + i] = lg[i];
                    }
                }
            }
        }
        Head::Categorical | Head::Linear => {}
    }
    let dims = spec.layer_dims();
    let mut input = Matrix::zeros(batch, spec.input_dim);
    for l in (0..dims.len()).rev() {
        let (fi, fo) = dims[l];
        let off = &offs[l];
        let lt = &tape.layers[l];
        {
            let (head, tail) = grad.split_at_mut(off.bias);
            accumulate_weight_grad(
                &lt.input,
                fi,
                &dz,
                fo,
                &mut head[off.weight..off.weight + fi * fo],
                &mut tail[..fo],
            );
        }
        let w = &params[off.weight..off.weight + fi * fo];
        let mut dx = vec![0.0; batch * fi];
        input_grad(&dz, fo, w, fi, &mut dx);
        if l == 0 {
            input = Matrix::from_vec(batch, fi, dx)?;
            break;
        }
        // dx is the gradient w.r.t. the previous layer's post-ReLU output, which is lt.input.
        for (g, h) in dx.iter_mut().zip(&lt.input) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let prev = &offs[l - 1];
        let prev_tape = &tape.layers[l - 1];
        if let (Some((go, oo)), Some(nt)) = (prev.norm, prev_tape.norm.as_ref()) {
            let width = fi;
            let gain = &params[go..go + width];
            let mut dgain = vec![0.0; width];
            let mut dshift = vec![0.0; width];
            for r in 0..batch {
                let dy = &mut dx[r * width..(r + 1) * width];
                let xh = &nt.xhat[r * width..(r + 1) * width];
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..width {
                    dgain[j] += dy[j] * xh[j];
                    dshift[j] += dy[j];
                    let dxh = dy[j] * gain[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                }
                mean_dxh /= width as f64;
                mean_dxh_xh /= width as f64;
                let inv = nt.inv_std[r];
                for j in 0..width {
                    let dxh = dy[j] * gain[j];
                    dy[j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
            grad[go..go + width].copy_from_slice(&dgain);
            grad[oo..oo + width].copy_from_slice(&dshift);
        }
        dz = dx;
    }
    Ok(Gradients {
        params: ParamVector(grad),
        input,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `fan_in x fan_out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub norm_gain: Option<Vec<f64>>,
    pub norm_offset: Option<Vec<f64>>,
}

/// Per-layer view of a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredParams {
    pub layers: Vec<LayerParams>,
    pub log_std: Option<Vec<f64>>,
}

pub fn unflatten(spec: &MlpSpec, params: &[f64]) -> Result<StructuredParams> {
    let (offs, log_std_off, total) = offsets(spec);
    if params.len() != total {
        return Err(Error::shape(format!(
            "{} parameters for a layout of {total}",
            params.len()
        )));
    }
    let layers = spec
        .layer_dims()
        .iter()
        .zip(&offs)
        .map(|(&(fi, fo), off)| {
            Ok(LayerParams {
                weight: Matrix::from_vec(fi, fo, params[off.weight..off.weight + fi * fo].to_vec())?,
                bias: params[off.bias..off.bias + fo].to_vec(),
                norm_gain: off.norm.map(|(g, _)| params[g..g + fo].to_vec()),
                norm_offset: off.norm.map(|(_, o)| params[o..o + fo].to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let log_std = log_std_off.map(|o| params[o..o + spec.output_dim].to_vec());
    Ok(StructuredParams { layers, log_std })
}

pub fn flatten(spec: &MlpSpec, s: &StructuredParams) -> Result<ParamVector> {
    let dims = spec.layer_dims();
    if s.layers.len() != dims.len() {
        return Err(Error::shape("layer count mismatch"));
    }
    let mut out = Vec::with_capacity(spec.param_count());
    for (l, (lp, &(fi, fo))) in s.layers.iter().zip(&dims).enumerate() {
        if lp.weight.rows() != fi || lp.weight.cols() != fo || lp.bias.len() != fo {
            return Err(Error::shape(format!("layer {} has the wrong shape", l + 1)));
        }
        out.extend_from_slice(lp.weight.as_slice());
        out.extend_from_slice(&lp.bias);
        let wants_norm = spec.layer_norm && l + 1 < dims.len();
        match (wants_norm, &lp.norm_gain, &lp.norm_offset) {
            (true, Some(g), Some(o)) if g.len() == fo && o.len() == fo => {
                out.extend_from_slice(g);
                out.extend_from_slice(o);
            }
            (false, None, None) => {}
            _ => return Err(Error::shape(format!("layer {} norm parameters", l + 1))),
        }
    }
    match (&spec.head, &s.log_std) {
        (Head::Gaussian { .. }, Some(ls)) if ls.len() == spec.output_dim => {
            out.extend_from_slice(ls)
        }
        (Head::Gaussian { .. }, _) => return Err(Error::shape("missing log-std")),
        (_, None) => {}
        (_, Some(_)) => return Err(Error::shape("unexpected log-std")),
    }
    Ok(ParamVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layout;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_obs(b: usize, d: usize, seed: u64) -> Matrix {
        let mut r = RngKey::from_seed(seed).rng();
        Matrix::from_vec(b, d, (0..b * d).map(|_| r.random::<f64>() * 4.0 - 2.0).collect()).unwrap()
    }

    fn specs() -> Vec<MlpSpec> {
        let heads = [
            Head::DeterministicTanh { scale: 2.0 },
            Head::gaussian(),
            Head::Categorical,
            Head::Linear,
        ];
        let mut v = Vec::new();
        for h in heads {
            for ln in [false, true] {
                v.push(MlpSpec::new(3, &[7, 5], 2, h).unwrap().with_layer_norm(ln));
            }
        }
        v
    }

    #[test]
    fn fresh_biases_are_zero_and_init_deterministic() {
        let spec = MlpSpec::new(3, &[16, 16], 1, Head::Linear).unwrap().with_layer_norm(true);
        let p = init_params(&spec, RngKey::from_seed(1));
        assert_eq!(p, init_params(&spec, RngKey::from_seed(1)));
        let layout: Layout = spec.layout();
        for seg in &layout.segments {
            let vals = &p[seg.range()];
            match seg.kind {
                SegmentKind::Bias | SegmentKind::NormOffset => assert!(vals.iter().all(|v| *v == 0.0)),
                SegmentKind::NormGain => assert!(vals.iter().all(|v| *v == 1.0)),
                SegmentKind::Weight => {
                    let lim = (6.0 / (seg.shape.0 + seg.shape.1) as f64).sqrt();
                    assert!(vals.iter().all(|v| v.abs() <= lim));
                }
                SegmentKind::LogStd => {}
            }
        }
    }

    #[test]
    fn zero_params_tanh_head_outputs_zero() {
        let spec = MlpSpec::new(3, &[8, 8], 1, Head::DeterministicTanh { scale: 2.0 }).unwrap();
        let p = vec![0.0; spec.param_count()];
        let out = forward(&spec, &p, &random_obs(5, 3, 2)).unwrap();
        assert!(out.output.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_rows_match_single_row_bitwise() {
        for (i, spec) in specs().into_iter().enumerate() {
            let p = init_params(&spec, RngKey::from_seed(i as u64));
            let one = random_obs(1, 3, 40 + i as u64);
            let single = forward(&spec, &p, &one).unwrap();
            let rep = Matrix::from_vec(32, 3, one.as_slice().repeat(32)).unwrap();
            let batched = forward(&spec, &p, &rep).unwrap();
            for r in 0..32 {
                assert_eq!(batched.output.row(r), single.output.row(0));
            }
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_gradient() {
        for spec in specs() {
            let p = init_params(&spec, RngKey::from_seed(3));
            let (_, tape) = forward_with_tape(&spec, &p, &random_obs(4, 3, 3)).unwrap();
            let g = backward(&spec, &p, tape, &Matrix::zeros(4, 2), Some(&[0.0, 0.0])).unwrap();
            assert!(g.params.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn linear_weight_gradient_is_input() {
        // hidden ReLU layer of width 1 with unit weight passes positive inputs through
        let spec = MlpSpec::new(1, &[1], 1, Head::Linear).unwrap();
        let p = vec![1.0, 0.0, 0.7, 0.0];
        let x = Matrix::from_vec(1, 1, vec![1.3]).unwrap();
        let (_, tape) = forward_with_tape(&spec, &p, &x).unwrap();
        let g = backward(&spec, &p, tape, &Matrix::from_vec(1, 1, vec![1.0]).unwrap(), None).unwrap();
        // d(out)/d(w2) = h = 1.3
        assert!((g.params[2] - 1.3).abs() < 1e-15);
        assert!((g.input.get(0, 0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let spec = MlpSpec::new(3, &[4], 2, Head::Linear).unwrap();
        let p = init_params(&spec, RngKey::from_seed(0));
        assert!(forward(&spec, &p[1..], &random_obs(1, 3, 0)).is_err());
        assert!(forward(&spec, &p, &random_obs(1, 4, 0)).is_err());
        let (_, tape) = forward_with_tape(&spec, &p, &random_obs(2, 3, 0)).unwrap();
        assert!(backward(&spec, &p, tape, &Matrix::zeros(3, 2), None).is_err());
    }

    #[test]
    fn non_finite_input_faults_with_layer() {
        let spec = MlpSpec::new(2, &[3], 1, Head::Linear).unwrap();
        let p = init_params(&spec, RngKey::from_seed(0));
        let x = Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        let err = forward(&spec, &p, &x).unwrap_err();
        assert!(err.to_string().contains("layer 1"));
    }

    #[test]
    fn gaussian_log_std_is_clamped() {
        let spec = MlpSpec::new(2, &[3], 1, Head::gaussian()).unwrap();
        let mut p = init_params(&spec, RngKey::from_seed(0));
        let n = p.len();
        p[n - 1] = 5.0;
        let out = forward(&spec, &p, &random_obs(1, 2, 0)).unwrap();
        assert_eq!(out.log_std.unwrap(), vec![2.0]);
    }

    #[test]
    fn flatten_roundtrip_and_index_zero() {
        for spec in specs() {
            let p = init_params(&spec, RngKey::from_seed(8));
            let s = unflatten(&spec, &p).unwrap();
            assert_eq!(flatten(&spec, &s).unwrap(), p);
            let mut q = p.clone();
            q[0] += 1.0;
            let sq = unflatten(&spec, &q).unwrap();
            assert_eq!(sq.layers[0].weight.get(0, 0), s.layers[0].weight.get(0, 0) + 1.0);
            let mut changed = 0;
            for (a, b) in flatten(&spec, &sq).unwrap().iter().zip(p.iter()) {
                if a != b {
                    changed += 1;
                }
            }
            assert_eq!(changed, 1);
        }
        let spec = MlpSpec::new(3, &[4], 2, Head::Linear).unwrap();
        assert!(unflatten(&spec, &[0.0; 3]).is_err());
    }

    fn arb_spec() -> impl Strategy<Value = MlpSpec> {
        let head = prop_oneof![
            Just(Head::DeterministicTanh { scale: 2.0 }),
            Just(Head::gaussian()),
            Just(Head::Categorical),
            Just(Head::Linear),
        ];
        (1usize..5, prop::collection::vec(1usize..7, 1..3), 1usize..4, head, any::<bool>())
            .prop_map(|(i, h, o, head, ln)| MlpSpec::new(i, &h, o, head).unwrap().with_layer_norm(ln))
    }

    fn loss(spec: &MlpSpec, p: &[f64], x: &Matrix, g: &Matrix, gs: &[f64]) -> f64 {
        let out = forward(spec, p, x).unwrap();
        let mut l: f64 = out.output.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        if let Some(ls) = out.log_std {
            l += ls.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
        }
        l
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradient_matches_central_differences(spec in arb_spec(), seed in 0u64..1000, b in 1usize..5) {
            let mut p = init_params(&spec, RngKey::from_seed(seed));
            // move biases and norm parameters off their initial values
            let mut r = RngKey::from_seed(seed).fold_in(1).rng();
            for v in p.iter_mut() {
                *v += 0.1 * (r.random::<f64>() - 0.5);
            }
            let x = random_obs(b, spec.input_dim, seed);
            let g = random_obs(b, spec.output_dim, seed + 1);
            let gs: Vec<f64> = (0..spec.output_dim).map(|_| r.random::<f64>() - 0.5).collect();
            let (_, tape) = forward_with_tape(&spec, &p, &x).unwrap();
            let log_std_grad = matches!(spec.head, Head::Gaussian { .. }).then_some(&gs[..]);
            let analytic = backward(&spec, &p, tape, &g, log_std_grad).unwrap();
            let h = 1e-5;
            let mut q = p.0.clone();
            let mut num = Vec::with_capacity(q.len());
            for i in 0..q.len() {
                let v = q[i];
                q[i] = v + h;
                let up = loss(&spec, &q, &x, &g, &gs);
                q[i] = v - h;
                let dn = loss(&spec, &q, &x, &g, &gs);
                q[i] = v;
                num.push((up - dn) / (2.0 * h));
            }
            let diff: f64 = num.iter().zip(analytic.params.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
            prop_assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
        }

        #[test]
        fn permuting_rows_permutes_outputs(spec in arb_spec(), seed in 0u64..1000, b in 2usize..9) {
            let p = init_params(&spec, RngKey::from_seed(seed));
            let x = random_obs(b, spec.input_dim, seed);
            let perm: Vec<usize> = (0..b).rev().collect();
            let y = forward(&spec, &p, &x).unwrap().output;
            let yp = forward(&spec, &p, &x.gather_rows(&perm)).unwrap().output;
            prop_assert_eq!(yp, y.gather_rows(&perm));
        }

        #[test]
        fn param_count_matches_layout(spec in arb_spec()) {
            let layout = spec.layout();
            let total: usize = layout.segments.iter().map(|s| s.len()).sum();
            prop_assert_eq!(spec.param_count(), total);
            prop_assert_eq!(init_params(&spec, RngKey::from_seed(0)).len(), total);
        }
    }
}
