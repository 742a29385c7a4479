use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::{FeatureBundle, InferenceError, ViewLabel};
use crate::exec::stream_rng;
use crate::losses::ProbVector;

const N_VIEWS: usize = ViewLabel::ALL.len();

/// Single-layer LSTM over the feature slots followed by a linear view head.
///
/// Gate blocks are stacked row-wise in the order input, forget, candidate,
/// output: rows `[0, H)` of `w_ih`, `w_hh` and `b` belong to the input gate,
/// `[H, 2H)` to the forget gate and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
            w_out: Array2::zeros((N_VIEWS, hidden)),
            b_out: Array1::zeros(N_VIEWS),
        }
    }

    /// Uniform `[-scale, scale)` weights from a seeded stream.
    pub fn random(input: usize, hidden: usize, scale: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[0x157b]);
        let mut p = Self::zeros(input, hidden);
        for v in p
            .w_ih
            .iter_mut()
            .chain(p.w_hh.iter_mut())
            .chain(p.b.iter_mut())
            .chain(p.w_out.iter_mut())
            .chain(p.b_out.iter_mut())
        {
            *v = rng.random_range(-scale..scale);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input(&self) -> usize {
        self.w_ih.ncols()
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let h = self.hidden();
        let bad = |what: &str| Err(InferenceError::Shape(format!("{what} inconsistent with hidden size {h}")));
        if self.w_ih.nrows() != 4 * h {
            return bad("w_ih");
        }
        if self.w_hh.nrows() != 4 * h {
            return bad("w_hh");
        }
        if self.b.len() != 4 * h {
            return bad("b");
        }
        if self.w_out.dim() != (N_VIEWS, h) {
            return bad("w_out");
        }
        if self.b_out.len() != N_VIEWS {
            return bad("b_out");
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step gate activations and states.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrace {
    pub gates: Vec<[Array1<f64>; 4]>,
    pub hidden: Vec<Array1<f64>>,
    pub cell: Vec<Array1<f64>>,
    pub logits: [f64; N_VIEWS],
}

pub fn lstm_forward_trace(bundle: &FeatureBundle, params: &LstmParams) -> Result<LstmTrace, InferenceError> {
    params.validate()?;
    let x = bundle.rows();
    if x.ncols() != params.input() {
        return Err(InferenceError::Shape(format!(
            "feature dimension {} but LSTM expects {}",
            x.ncols(),
            params.input()
        )));
    }
    let hs = params.hidden();
    let mut h = Array1::<f64>::zeros(hs);
    let mut c = Array1::<f64>::zeros(hs);
    let mut trace = LstmTrace { gates: Vec::new(), hidden: Vec::new(), cell: Vec::new(), logits: [0.0; N_VIEWS] };
    for t in 0..x.nrows() {
        let z = params.w_ih.dot(&x.row(t)) + params.w_hh.dot(&h) + &params.b;
        let i = z.slice(s![0..hs]).mapv(sigmoid);
        let f = z.slice(s![hs..2 * hs]).mapv(sigmoid);
        let g = z.slice(s![2 * hs..3 * hs]).mapv(f64::tanh);
        let o = z.slice(s![3 * hs..4 * hs]).mapv(sigmoid);
        c = &f * &c + &i * &g;
        h = &o * &c.mapv(f64::tanh);
        trace.gates.push([i, f, g, o]);
        trace.hidden.push(h.clone());
        trace.cell.push(c.clone());
    }
    let out = params.w_out.dot(&h) + &params.b_out;
    for (k, v) in out.iter().enumerate() {
        trace.logits[k] = *v;
    }
    Ok(trace)
}

/// Runs the slots as a sequence (global first, then structures in canonical
/// order) and projects the final hidden state to four view logits.
pub fn lstm_forward(bundle: &FeatureBundle, params: &LstmParams) -> Result<[f64; N_VIEWS], InferenceError> {
    lstm_forward_trace(bundle, params).map(|t| t.logits)
}

pub fn lstm_view_probs(bundle: &FeatureBundle, params: &LstmParams) -> Result<ProbVector, InferenceError> {
    Ok(ProbVector::softmax(&lstm_forward(bundle, params)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{assemble_features, StructureLabel, FEATURE_DIM};
    use std::collections::BTreeMap;

    fn bundle(seed: u64, locals: &[StructureLabel]) -> FeatureBundle {
        let mut rng = stream_rng(seed, &[1]);
        let mut v = || (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let global = v();
        let locals: BTreeMap<_, _> = locals.iter().map(|&l| (l, v())).collect();
        assemble_features(&global, &locals).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let b = bundle(3, &StructureLabel::ALL);
        let t = lstm_forward_trace(&b, &LstmParams::zeros(FEATURE_DIM, 8)).unwrap();
        assert_eq!(t.logits, [0.0; 4]);
        assert!(t.hidden.iter().all(|h| h.iter().all(|&v| v == 0.0)));
        assert!(t.cell.iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn blank_rows_do_not_depend_on_occupancy() {
        let zeros = vec![0.0; FEATURE_DIM];
        let params = LstmParams::random(FEATURE_DIM, 8, 0.1, 9);
        let empty = assemble_features(&zeros, &BTreeMap::new()).unwrap();
        let full: BTreeMap<_, _> = StructureLabel::ALL.iter().map(|&l| (l, zeros.clone())).collect();
        let full = assemble_features(&zeros, &full).unwrap();
        assert_ne!(empty.occupancy(), full.occupancy());
        assert_eq!(lstm_forward(&empty, &params).unwrap(), lstm_forward(&full, &params).unwrap());
    }

    #[test]
    fn gates_bounded_and_finite() {
        let params = LstmParams::random(FEATURE_DIM, 16, 0.05, 4);
        let t = lstm_forward_trace(&bundle(5, &[StructureLabel::CleftLip]), &params).unwrap();
        assert_eq!(t.gates.len(), 6);
        for [i, f, g, o] in &t.gates {
            for v in i.iter().chain(f.iter()).chain(o.iter()) {
                assert!(*v > 0.0 && *v < 1.0);
            }
            assert!(g.iter().all(|v| v.abs() < 1.0));
        }
        assert!(t.logits.iter().all(|v| v.is_finite()));
        let p = lstm_view_probs(&bundle(5, &[]), &params).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let b = bundle(1, &[]);
        assert!(lstm_forward(&b, &LstmParams::zeros(100, 4)).is_err());
        let mut p = LstmParams::zeros(FEATURE_DIM, 4);
        p.b = Array1::zeros(3);
        assert!(matches!(lstm_forward(&b, &p), Err(InferenceError::Shape(_))));
    }
}
