//! Masked-region reconstruction metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Reported PSNR when the masked region is reproduced exactly.
pub const PSNR_CAP: f64 = 99.0;

/// Upper coverage edges of the stratification bins; the last bin is closed.
pub const COVERAGE_EDGES: [f64; 4] = [0.1, 0.3, 0.5, 1.0];

/// Sums of absolute and squared error over the masked pixels of one or
/// more image pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSums {
    pub abs: f64,
    pub sq: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn of(pred: &Image, truth: &Image, mask: &Mask) -> Result<ErrorSums> {
        if !pred.same_dims(truth) || mask.height != truth.height || mask.width != truth.width {
            return Err(Error::shape(
                "masked metric",
                &[pred.height, pred.width, pred.channels],
                &[truth.height, truth.width, truth.channels],
            ));
        }
        let c = truth.channels;
        let mut s = ErrorSums::default();
        for (i, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
            for k in 0..c {
                let d = pred.data[i * c + k] - truth.data[i * c + k];
                s.abs += d.abs();
                s.sq += d * d;
                s.count += 1;
            }
        }
        Ok(s)
    }

    pub fn add(&mut self, other: ErrorSums) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.count += other.count;
    }

    /// Mean absolute error, `None` for an empty region.
    pub fn l1(&self) -> Option<f64> {
        (self.count > 0).then(|| self.abs / self.count as f64)
    }

    pub fn psnr(&self, max: f64) -> Option<f64> {
        (self.count > 0).then(|| psnr_from_mse(self.sq / self.count as f64, max))
    }
}

pub fn psnr_from_mse(mse: f64, max: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (max * max / mse).log10()).min(PSNR_CAP)
    }
}

pub fn masked_l1(pred: &Image, truth: &Image, mask: &Mask) -> Result<Option<f64>> {
    Ok(ErrorSums::of(pred, truth, mask)?.l1())
}

/// PSNR over the masked region with peak value `max`.
pub fn masked_psnr(pred: &Image, truth: &Image, mask: &Mask, max: f64) -> Result<Option<f64>> {
    Ok(ErrorSums::of(pred, truth, mask)?.psnr(max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageBin {
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    pub sums: ErrorSums,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub total: ErrorSums,
    pub bins: Vec<CoverageBin>,
}

impl EvalReport {
    pub fn new() -> Self {
        let mut lo = 0.0;
        let bins = COVERAGE_EDGES
            .iter()
            .map(|&hi| {
                let b = CoverageBin {
                    lo,
                    hi,
                    samples: 0,
                    sums: ErrorSums::default(),
                };
                lo = hi;
                b
            })
            .collect();
        EvalReport {
            samples: 0,
            total: ErrorSums::default(),
            bins,
        }
    }

    pub fn add(&mut self, pred: &Image, truth: &Image, mask: &Mask) -> Result<()> {
        let sums = ErrorSums::of(pred, truth, mask)?;
        let cov = mask.coverage();
        let last = self.bins.len() - 1;
        let bin = self.bins.iter().position(|b| cov < b.hi).unwrap_or(last);
        self.bins[bin].samples += 1;
        self.bins[bin].sums.add(sums);
        self.total.add(sums);
        self.samples += 1;
        Ok(())
    }

    pub fn masked_l1(&self) -> Option<f64> {
        self.total.l1()
    }

    pub fn psnr(&self) -> Option<f64> {
        self.total.psnr(1.0)
    }

    /// Line-oriented report; `header` lines are written first.
    pub fn to_text(&self, header: &[(&str, String)]) -> String {
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let mut out = String::new();
        for (k, v) in header {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "samples = {}", self.samples);
        let _ = writeln!(out, "masked_l1 = {}", fmt(self.masked_l1()));
        let _ = writeln!(out, "psnr_db = {}", fmt(self.psnr()));
        for b in &self.bins {
            let _ = writeln!(
                out,
                "coverage [{:.2}, {:.2}{} samples = {} masked_l1 = {} psnr_db = {}",
                b.lo,
                b.hi,
                if b.hi >= 1.0 { "]" } else { ")" },
                b.samples,
                fmt(b.sums.l1()),
                fmt(b.sums.psnr(1.0))
            );
        }
        out
    }
}

impl Default for EvalReport {
    fn default() -> Self {
        EvalReport::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pair_hits_the_cap() {
        let img = Image::filled(4, 4, 3, 0.3);
        let mask = Mask::ones(4, 4);
        assert_eq!(masked_psnr(&img, &img, &mask, 1.0).unwrap(), Some(PSNR_CAP));
        assert_eq!(masked_l1(&img, &img, &mask).unwrap(), Some(0.0));
    }

    #[test]
    fn zero_versus_max_is_zero_db() {
        let a = Image::filled(2, 3, 1, 0.0);
        let b = Image::filled(2, 3, 1, 1.0);
        let mask = Mask::ones(2, 3);
        assert_eq!(masked_psnr(&a, &b, &mask, 1.0).unwrap(), Some(0.0));
        assert_eq!(masked_l1(&a, &b, &mask).unwrap(), Some(1.0));
    }

    #[test]
    fn only_masked_pixels_count() {
        let a = Image::new(1, 2, 1, vec![0.0, 0.0]).unwrap();
        let b = Image::new(1, 2, 1, vec![0.5, 1.0]).unwrap();
        let mut mask = Mask::zeros(1, 2);
        assert_eq!(masked_l1(&a, &b, &mask).unwrap(), None);
        mask.set(0, 0, true);
        assert_eq!(masked_l1(&a, &b, &mask).unwrap(), Some(0.5));
    }

    #[test]
    fn report_bins_by_coverage() {
        let a = Image::filled(2, 5, 1, 0.0);
        let b = Image::filled(2, 5, 1, 0.5);
        let mut r = EvalReport::new();
        let mut m = Mask::zeros(2, 5);
        m.set(0, 0, true);
        r.add(&a, &b, &m).unwrap();
        r.add(&a, &b, &Mask::ones(2, 5)).unwrap();
        assert_eq!(r.bins[1].samples, 1);
        assert_eq!(r.bins[3].samples, 1);
        assert_eq!(r.masked_l1(), Some(0.5));
        let text = r.to_text(&[("version", "1".into())]);
        assert!(text.starts_with("version = 1\nsamples = 2\n"), "{text}");
    }
}
