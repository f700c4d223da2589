//! Total / aleatoric / epistemic uncertainty from posterior samples.
//!
//! * total: entropy of the predictive mean, `H(mean_k p_k)`
//! * aleatoric: mean entropy of the samples, `mean_k H(p_k)`
//! * epistemic: their difference, the mutual information between the label
//!   and the weights
//!
//! All three are bounded by `ln C`; [`report`] divides by it so every value
//! lands in `[0, 1]`.

use std::io::Write;

use crate::bayes::{predictive_mean, PosteriorSamples};
use crate::error::{Error, Result};
use crate::ndcore::{check_distribution, xlogx_unchecked};

/// Negative epistemic values down to this are rounding noise and clamp to 0.
pub const EPISTEMIC_CLAMP: f64 = 1e-9;
/// Epistemic values below this indicate a broken decomposition.
pub const EPISTEMIC_FAIL: f64 = 1e-6;

/// Shannon entropy in nats, `-Σ p ln p`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p).map_err(Error::Domain)?;
    Ok(entropy_unchecked(p))
}

#[inline]
fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx_unchecked(v)).sum::<f64>()
}

/// Entropy of the predictive mean for every input, in nats.
pub fn total_uncertainty(samples: &PosteriorSamples) -> Vec<f64> {
    let mean = predictive_mean(samples);
    (0..samples.n()).map(|i| entropy_unchecked(mean.row(i))).collect()
}

/// Average per-sample entropy for every input, in nats.
pub fn aleatoric_uncertainty(samples: &PosteriorSamples) -> Vec<f64> {
    (0..samples.n())
        .map(|i| {
            let h: Vec<f64> = (0..samples.k()).map(|s| entropy_unchecked(samples.row(s, i))).collect();
            exact_mean(&h)
        })
        .collect()
}

// Plain mean, except that equal values average to themselves bit for bit,
// so identical posterior samples give an epistemic term of exactly 0.
fn exact_mean(v: &[f64]) -> f64 {
    if v.iter().all(|&x| x == v[0]) {
        v[0]
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn epistemic_from(total: &[f64], aleatoric: &[f64]) -> Result<Vec<f64>> {
    total
        .iter()
        .zip(aleatoric)
        .enumerate()
        .map(|(i, (&t, &a))| {
            let e = t - a;
            if e < -EPISTEMIC_FAIL {
                Err(Error::Consistency(format!(
                    "sample {i}: total {t} below aleatoric {a}"
                )))
            } else if (-EPISTEMIC_CLAMP..0.0).contains(&e) {
                Ok(0.0)
            } else {
                Ok(e)
            }
        })
        .collect()
}

/// Total minus aleatoric for every input, in nats.
pub fn epistemic_uncertainty(samples: &PosteriorSamples) -> Result<Vec<f64>> {
    epistemic_from(&total_uncertainty(samples), &aleatoric_uncertainty(samples))
}

/// Divides nats by `ln c`.
pub fn normalize(u: f64, c: usize) -> Result<f64> {
    if c < 2 {
        return Err(Error::Domain(format!("normalization needs at least 2 classes, got {c}")));
    }
    if u < 0.0 {
        return Err(Error::Domain(format!("uncertainty {u} is negative")));
    }
    Ok(u / (c as f64).ln())
}

/// Normalized uncertainties, one entry per input.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub c: usize,
    pub total: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

impl UncertaintyReport {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn mean_total(&self) -> f64 {
        mean(&self.total)
    }

    pub fn mean_aleatoric(&self) -> f64 {
        mean(&self.aleatoric)
    }

    pub fn mean_epistemic(&self) -> f64 {
        mean(&self.epistemic)
    }

    /// Writes `sample_id,total,aleatoric,epistemic,label,predicted,correct`.
    pub fn write_csv<W: Write>(&self, mut w: W, labels: &[usize], predicted: &[usize]) -> Result<()> {
        if labels.len() != self.len() || predicted.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} report rows, {} labels, {} predictions",
                self.len(),
                labels.len(),
                predicted.len()
            )));
        }
        let io = |e| Error::io("<csv>", e);
        writeln!(w, "sample_id,total,aleatoric,epistemic,label,predicted,correct").map_err(io)?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{i},{},{},{},{},{},{}",
                format_sig6(self.total[i]),
                format_sig6(self.aleatoric[i]),
                format_sig6(self.epistemic[i]),
                labels[i],
                predicted[i],
                u8::from(labels[i] == predicted[i])
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// All three uncertainties for every input, normalized by `ln C`.
pub fn report(samples: &PosteriorSamples) -> Result<UncertaintyReport> {
    let c = samples.c();
    if c < 2 {
        return Err(Error::Domain(format!("uncertainty report needs at least 2 classes, got {c}")));
    }
    let total = total_uncertainty(samples);
    let aleatoric = aleatoric_uncertainty(samples);
    let epistemic = epistemic_from(&total, &aleatoric)?;
    let scale = (c as f64).ln();
    let norm = |v: Vec<f64>| v.into_iter().map(|u| u / scale).collect::<Vec<_>>();
    Ok(UncertaintyReport {
        c,
        total: norm(total),
        aleatoric: norm(aleatoric),
        epistemic: norm(epistemic),
    })
}

/// Formats with 6 significant digits, like C's `%.6g`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    // rounding may carry into the next decade (e.g. 999999.7)
    let sci = format!("{v:.5e}");
    let exp = sci
        .split_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let (mantissa, e) = sci.split_once('e').expect("scientific format");
        format!("{}e{e}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{Array2, ProbMatrix};
    use proptest::prelude::*;

    fn samples(slices: &[&[&[f64]]]) -> PosteriorSamples {
        PosteriorSamples::from_slices(
            slices
                .iter()
                .map(|rows| ProbMatrix::new(Array2::from_rows(rows).unwrap()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let u = entropy(&[0.1; 10]).unwrap();
        assert!((u - 10f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.7, 0.3]).unwrap() - 0.610_864).abs() < 1e-6);
        assert!(matches!(entropy(&[0.7, 0.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn opposed_one_hots() {
        let s = samples(&[&[&[1.0, 0.0]], &[&[0.0, 1.0]]]);
        assert!((total_uncertainty(&s)[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(aleatoric_uncertainty(&s)[0], 0.0);
        assert!((epistemic_uncertainty(&s).unwrap()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn agreeing_one_hots_have_no_uncertainty() {
        let s = samples(&[&[&[0.0, 1.0, 0.0]], &[&[0.0, 1.0, 0.0]]]);
        assert_eq!(total_uncertainty(&s), vec![0.0]);
        assert_eq!(aleatoric_uncertainty(&s), vec![0.0]);
        assert_eq!(epistemic_uncertainty(&s).unwrap(), vec![0.0]);
    }

    #[test]
    fn uniform_slices_are_purely_aleatoric() {
        let u: &[f64] = &[0.25; 4];
        let s = samples(&[&[u, u], &[u, u], &[u, u]]);
        assert!(aleatoric_uncertainty(&s).iter().all(|&a| (a - 4f64.ln()).abs() < 1e-12));
        let r = report(&s).unwrap();
        for i in 0..2 {
            assert!((r.total[i] - 1.0).abs() < 1e-12);
            assert!((r.aleatoric[i] - 1.0).abs() < 1e-12);
            assert_eq!(r.epistemic[i], 0.0);
        }
    }

    #[test]
    fn normalize_examples() {
        assert!((normalize(10f64.ln(), 10).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(normalize(0.0, 10).unwrap(), 0.0);
        assert!((normalize(2f64.ln(), 10).unwrap() - std::f64::consts::LOG10_2).abs() < 1e-15);
        assert!(normalize(0.5, 1).is_err());
        assert!(normalize(-0.5, 3).is_err());
    }

    #[test]
    fn single_slice_report_has_zero_epistemic() {
        let s = samples(&[&[&[0.2, 0.8], &[0.5, 0.5], &[0.9, 0.1]]]);
        let r = report(&s).unwrap();
        assert_eq!(r.epistemic, vec![0.0; 3]);
    }

    #[test]
    fn csv_export() {
        let s = samples(&[&[&[1.0, 0.0], &[0.5, 0.5]], &[&[0.0, 1.0], &[0.5, 0.5]]]);
        let r = report(&s).unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out, &[0, 1], &[0, 0]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "sample_id,total,aleatoric,epistemic,label,predicted,correct\n0,1,0,1,0,0,1\n1,1,1,0,1,0,0\n"
        );
        assert!(r.write_csv(Vec::new(), &[0], &[0]).is_err());
    }

    #[test]
    fn identical_slices_have_exactly_zero_epistemic() {
        let row: &[f64] = &[0.1, 0.2, 0.7];
        for k in 1..12 {
            let pair = [row, row];
            let stack: Vec<&[&[f64]]> = vec![&pair[..]; k];
            let s = samples(&stack);
            assert!(epistemic_uncertainty(&s).unwrap().iter().all(|&e| e == 0.0), "k={k}");
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(std::f64::consts::LOG10_2), "0.30103");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(999999.7), "1e6");
        assert_eq!(format_sig6(0.000012345678), "1.23457e-5");
        assert_eq!(format_sig6(-0.5), "-0.5");
        assert_eq!(format_sig6(2.5e-3), "0.0025");
    }

    fn arb_stack() -> impl Strategy<Value = PosteriorSamples> {
        (1usize..6, 1usize..4, 2usize..6).prop_flat_map(|(k, n, c)| {
            prop::collection::vec(0.0f64..1.0, k * n * c).prop_map(move |raw| {
                let mut probs = Vec::with_capacity(raw.len());
                for row in raw.chunks(c) {
                    let s: f64 = row.iter().sum::<f64>() + 1e-12;
                    let mut r: Vec<f64> = row.iter().map(|v| (v + 1e-12 / c as f64) / s).collect();
                    let fix: f64 = r.iter().sum();
                    r.iter_mut().for_each(|v| *v /= fix);
                    probs.extend(r);
                }
                PosteriorSamples::from_flat(k, n, c, probs).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn decomposition_bounds(s in arb_stack()) {
            let t = total_uncertainty(&s);
            let a = aleatoric_uncertainty(&s);
            let lnc = (s.c() as f64).ln();
            for (t, a) in t.iter().zip(&a) {
                prop_assert!(*a >= -1e-12);
                prop_assert!(*a <= t + 1e-9);
                prop_assert!(*t <= lnc + 1e-9);
            }
            let r = report(&s).unwrap();
            for i in 0..r.len() {
                prop_assert!((r.total[i] - r.aleatoric[i] - r.epistemic[i]).abs() <= 1e-9);
                for v in [r.total[i], r.aleatoric[i], r.epistemic[i]] {
                    prop_assert!((-1e-9..=1.0 + 1e-9).contains(&v));
                }
            }
        }

        #[test]
        fn slice_permutation_invariance(s in arb_stack()) {
            let slices: Vec<_> = (0..s.k()).rev().map(|i| s.slice(i)).collect();
            let r = PosteriorSamples::from_slices(slices).unwrap();
            let (a, b) = (report(&s).unwrap(), report(&r).unwrap());
            for i in 0..a.len() {
                prop_assert!((a.total[i] - b.total[i]).abs() <= 1e-12);
                prop_assert!((a.aleatoric[i] - b.aleatoric[i]).abs() <= 1e-12);
                prop_assert!((a.epistemic[i] - b.epistemic[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn class_relabeling_invariance(s in arb_stack(), rot in 1usize..5) {
            let c = s.c();
            let mut permuted = Vec::with_capacity(s.as_flat().len());
            for row in s.as_flat().chunks(c) {
                permuted.extend((0..c).map(|j| row[(j + rot) % c]));
            }
            let p = PosteriorSamples::from_flat(s.k(), s.n(), c, permuted).unwrap();
            let (a, b) = (report(&s).unwrap(), report(&p).unwrap());
            for i in 0..a.len() {
                prop_assert!((a.total[i] - b.total[i]).abs() <= 1e-12);
                prop_assert!((a.aleatoric[i] - b.aleatoric[i]).abs() <= 1e-12);
                prop_assert!((a.epistemic[i] - b.epistemic[i]).abs() <= 1e-12);
            }
        }
    }
}
