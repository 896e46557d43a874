//! Precision, recall and F-measure of a predicted change map.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::raster::ChangeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Swap the roles of prediction and reference.
    pub fn transposed(&self) -> Self {
        Self {
            tp: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tn,
        }
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// A ratio plus a flag recording that its denominator was zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Metric {
    if den == 0 {
        Metric {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Metric {
            value: num as f64 / den as f64,
            degenerate: false,
        }
    }
}

pub fn confusion(pred: &ChangeMap, reference: &ChangeMap) -> Result<Confusion> {
    if pred.height() != reference.height() || pred.width() != reference.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs reference {}x{}",
            pred.height(),
            pred.width(),
            reference.height(),
            reference.width()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        match (p, r) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn precision(c: &Confusion) -> Metric {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &Confusion) -> Metric {
    ratio(c.tp, c.tp + c.fn_)
}

/// Weighted harmonic mean of precision and recall.
pub fn fmeasure_from(pr: f64, rc: f64, a: f64) -> Result<f64> {
    if a.is_nan() || a <= 0.0 {
        return Err(Error::Argument(format!(
            "F-measure weight must be positive, got {a}"
        )));
    }
    if pr + rc == 0.0 {
        return Ok(0.0);
    }
    let a2 = a * a;
    Ok((a2 + 1.0) * pr * rc / (a2 * (pr + rc)))
}

pub fn fmeasure(c: &Confusion, a: f64) -> Result<f64> {
    fmeasure_from(precision(c).value, recall(c).value, a)
}

pub fn f1(c: &Confusion) -> f64 {
    fmeasure(c, 1.0).expect("unit weight is valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_confusion(c: &Confusion) -> Self {
        Self {
            precision: precision(c).value,
            recall: recall(c).value,
            f1: f1(c),
        }
    }

    /// `Pr,Rc,F1` as percentages with one decimal.
    pub fn csv_fields(&self) -> String {
        format!(
            "{:.1},{:.1},{:.1}",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1
        )
    }
}

pub fn evaluate(pred: &ChangeMap, reference: &ChangeMap) -> Result<Scores> {
    Ok(Scores::from_confusion(&confusion(pred, reference)?))
}

/// Comparison table with a `method,Pr,Rc,F1` header.
pub fn report<'a>(rows: impl IntoIterator<Item = (&'a str, Scores)>) -> String {
    let mut out = String::from("method,Pr,Rc,F1\n");
    for (method, s) in rows {
        let _ = writeln!(out, "{method},{}", s.csv_fields());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Confusion {
        Confusion { tp, fp, fn_, tn }
    }

    #[test]
    fn identical_and_inverted_maps() {
        let r = ChangeMap::from_fn(6, 5, |i, j| (i + 2 * j) % 3 == 0);
        let c = confusion(&r, &r).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion(&r.complement(), &r).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 30);
    }

    #[test]
    fn shape_mismatch() {
        assert!(confusion(&ChangeMap::zeros(2, 2), &ChangeMap::zeros(2, 3)).is_err());
    }

    #[test]
    fn ratios() {
        assert_eq!(precision(&counts(2, 1, 0, 0)).value, 2.0 / 3.0);
        assert_eq!(recall(&counts(2, 0, 1, 0)).value, 2.0 / 3.0);
        let p = precision(&counts(0, 0, 3, 1));
        assert_eq!(p.value, 0.0);
        assert!(p.degenerate);
    }

    #[test]
    fn f_measures() {
        assert_eq!(fmeasure_from(2.0 / 3.0, 2.0 / 3.0, 1.0).unwrap(), 2.0 / 3.0);
        let perfect = counts(5, 0, 0, 5);
        assert_eq!(
            Scores::from_confusion(&perfect).csv_fields(),
            "100.0,100.0,100.0"
        );
        assert_eq!(fmeasure_from(0.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(fmeasure_from(0.5, 0.5, 0.0).is_err());
        assert!(fmeasure_from(0.5, 0.5, -1.0).is_err());
    }

    #[test]
    fn report_layout() {
        let s = Scores::from_confusion(&counts(1, 1, 1, 1));
        assert_eq!(
            report([("CVA", s)]),
            "method,Pr,Rc,F1\nCVA,50.0,50.0,50.0\n"
        );
    }

    proptest! {
        #[test]
        fn f1_fixed_point(p in 0.0f64..=1.0) {
            let f = fmeasure_from(p, p, 1.0).unwrap();
            prop_assert!((f - p).abs() <= 1e-15);
        }

        #[test]
        fn f1_between_and_symmetric(pr in 1e-6f64..=1.0, rc in 1e-6f64..=1.0) {
            let f = fmeasure_from(pr, rc, 1.0).unwrap();
            prop_assert!(f >= pr.min(rc) * (1.0 - 1e-12) && f <= pr.max(rc) * (1.0 + 1e-12));
            prop_assert_eq!(f, fmeasure_from(rc, pr, 1.0).unwrap());
            prop_assert_eq!(f, 2.0 * pr * rc / (pr + rc));
        }

        #[test]
        fn swap_transposes(bits in proptest::collection::vec((0u8..=1, 0u8..=1), 1..300)) {
            let n = bits.len();
            let pred = ChangeMap::new(1, n, bits.iter().map(|b| b.0).collect()).unwrap();
            let reference = ChangeMap::new(1, n, bits.iter().map(|b| b.1).collect()).unwrap();
            let c = confusion(&pred, &reference).unwrap();
            let swapped = confusion(&reference, &pred).unwrap();
            prop_assert_eq!(swapped, c.transposed());
            prop_assert_eq!(precision(&swapped), recall(&c));
            prop_assert_eq!(c.total(), n as u64);
        }
    }
}
