use super::ScoreKind;
use crate::error::{Error, Result};
use crate::tensor::tape::softmax_row;
use crate::tensor::Tensor;

/// Weights used by the parametric score kinds.
///
/// * `additive` / `add_eq25`: `w_a: [d_a×2H]` (the stacked `[W₁ W₂]`) and `v_a: [d_a]`
/// * `general` / `mul_eq25`: `w_a: [H×H]`
/// * `location_based`: `w_a: [H]`
#[derive(Clone, Debug, Default)]
pub struct ScoreParams {
    pub w_a: Option<Tensor>,
    pub v_a: Option<Tensor>,
}

fn need<'a>(t: &'a Option<Tensor>, what: &str, kind: ScoreKind) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::config(format!("{} score needs {what}", kind.name())))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scalar compatibility of a target vector `h_t` and a source vector `h_s`.
pub fn alignment_score(kind: ScoreKind, h_t: &[f64], h_s: &[f64], params: &ScoreParams) -> Result<f64> {
    let h = h_t.len();
    if h == 0 || h_s.len() != h {
        return Err(Error::dim(format!(
            "score vectors must share a nonzero length, got {} and {}",
            h,
            h_s.len()
        )));
    }
    match kind {
        ScoreKind::Dot => Ok(dot(h_t, h_s)),
        ScoreKind::ScaledDot => Ok(dot(h_t, h_s) / (h as f64).sqrt()),
        ScoreKind::ContentBased => {
            let (nt, ns) = (dot(h_t, h_t).sqrt(), dot(h_s, h_s).sqrt());
            if nt == 0.0 || ns == 0.0 {
                return Err(Error::Numeric("cosine score of a zero-norm vector".into()));
            }
            Ok(dot(h_t, h_s) / (nt * ns))
        }
        ScoreKind::General | ScoreKind::MulEq25 => {
            let w = need(&params.w_a, "W_a [H×H]", kind)?;
            if w.shape() != [h, h] {
                return Err(Error::dim(format!("W_a must be [{h}×{h}], got {:?}", w.shape())));
            }
            let wd = w.data();
            Ok((0..h).map(|i| h_t[i] * dot(&wd[i * h..(i + 1) * h], h_s)).sum())
        }
        ScoreKind::LocationBased => {
            let w = need(&params.w_a, "W_a [H]", kind)?;
            if w.numel() != h {
                return Err(Error::dim(format!("W_a must have {h} entries, got {:?}", w.shape())));
            }
            Ok(dot(w.data(), h_t))
        }
        ScoreKind::Additive | ScoreKind::AddEq25 => {
            let w = need(&params.w_a, "W_a [d_a×2H]", kind)?;
            let v = need(&params.v_a, "v_a [d_a]", kind)?;
            let da = v.numel();
            if w.shape() != [da, 2 * h] {
                return Err(Error::dim(format!("W_a must be [{da}×{}], got {:?}", 2 * h, w.shape())));
            }
            let joint: Vec<f64> = h_t.iter().chain(h_s).copied().collect();
            let wd = w.data();
            Ok((0..da)
                .map(|r| v.data()[r] * dot(&wd[r * 2 * h..(r + 1) * 2 * h], &joint).tanh())
                .sum())
        }
    }
}

/// Softmax of a score vector (max-subtracted).
pub fn attention_weights(scores: &Tensor) -> Result<Tensor> {
    if !scores.is_finite() {
        return Err(Error::Numeric("attention scores must be finite".into()));
    }
    Tensor::new(scores.shape().to_vec(), softmax_row(scores.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn none() -> ScoreParams {
        ScoreParams::default()
    }

    #[test]
    fn table_examples() {
        assert_eq!(
            alignment_score(ScoreKind::Dot, &[1.0, 1.0], &[1.0, 1.0], &none()).unwrap(),
            2.0
        );
        assert_eq!(
            alignment_score(ScoreKind::ScaledDot, &[1.0; 4], &[1.0; 4], &none()).unwrap(),
            2.0
        );
        assert_eq!(
            alignment_score(ScoreKind::ContentBased, &[1.0, 0.0], &[0.0, 1.0], &none()).unwrap(),
            0.0
        );
    }

    #[test]
    fn missing_parameters_are_config_errors() {
        for kind in [
            ScoreKind::General,
            ScoreKind::Additive,
            ScoreKind::LocationBased,
            ScoreKind::MulEq25,
        ] {
            assert!(matches!(
                alignment_score(kind, &[1.0], &[1.0], &none()),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn zero_norm_cosine_is_numeric_error() {
        assert!(matches!(
            alignment_score(ScoreKind::ContentBased, &[0.0, 0.0], &[1.0, 0.0], &none()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn additive_by_hand() {
        // W_a = [[1, 0, 0, 1]], v_a = [2]: 2·tanh(h_t[0] + h_s[1])
        let p = ScoreParams {
            w_a: Some(Tensor::matrix(&[&[1.0, 0.0, 0.0, 1.0]])),
            v_a: Some(Tensor::vector(&[2.0])),
        };
        let s = alignment_score(ScoreKind::Additive, &[0.3, 9.0], &[9.0, 0.2], &p).unwrap();
        assert!((s - 2.0 * 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn location_ignores_source() {
        let p = ScoreParams {
            w_a: Some(Tensor::vector(&[1.0, -1.0])),
            v_a: None,
        };
        let a = alignment_score(ScoreKind::LocationBased, &[3.0, 1.0], &[0.0, 5.0], &p).unwrap();
        let b = alignment_score(ScoreKind::LocationBased, &[3.0, 1.0], &[7.0, -2.0], &p).unwrap();
        assert_eq!(a, 2.0);
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_examples() {
        let w = attention_weights(&Tensor::vector(&[0.0, 0.0, 0.0])).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = attention_weights(&Tensor::vector(&[2f64.ln(), 0.0])).unwrap();
        assert!((w.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn dot_equals_general_with_identity(v in proptest::collection::vec(-5.0f64..5.0, 2..10)) {
            let h = v.len() / 2;
            let (a, b) = (&v[..h], &v[h..2 * h]);
            let p = ScoreParams { w_a: Some(Tensor::eye(h)), v_a: None };
            let d = alignment_score(ScoreKind::Dot, a, b, &none()).unwrap();
            let g = alignment_score(ScoreKind::General, a, b, &p).unwrap();
            prop_assert!((d - g).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(a in -10.0f64..10.0, b in -10.0f64..10.0, c in -50.0f64..50.0) {
            let w1 = attention_weights(&Tensor::vector(&[a, b])).unwrap();
            let w2 = attention_weights(&Tensor::vector(&[a + c, b + c])).unwrap();
            for (x, y) in w1.data().iter().zip(w2.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(w1.data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }
}
