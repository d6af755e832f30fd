//! Abundance, reconstruction and detection metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{check_dim, Result};
use crate::model::{AbundanceField, HyperCube};
use crate::synth::ClassMap;

/// `sqrt(sum |a - a_hat|^2 / (N R))`.
pub fn rnmse(a_true: &AbundanceField, a_est: &AbundanceField) -> Result<f64> {
    check_shapes(a_true, a_est)?;
    let n = a_true.as_slice().len() as f64;
    let sq: f64 = a_true.as_slice().iter().zip(a_est.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / n).sqrt())
}

fn check_shapes(a: &AbundanceField, b: &AbundanceField) -> Result<()> {
    check_dim("abundance depth", a.depth(), b.depth())?;
    check_dim("abundance rows", a.rows(), b.rows())?;
    check_dim("abundance cols", a.cols(), b.cols())
}

/// Per-pixel sums of squared differences grouped by class, divided by
/// `N_k * depth` and rooted. Classes without pixels are omitted.
fn per_class(
    truth: &[f64],
    est: &[f64],
    depth: usize,
    class_map: &ClassMap,
) -> Result<BTreeMap<usize, f64>> {
    check_dim("class map pixels", truth.len() / depth.max(1), class_map.n_pixels())?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (p, label) in class_map.labels.iter().enumerate() {
        let sq: f64 = truth[p * depth..(p + 1) * depth]
            .iter()
            .zip(&est[p * depth..(p + 1) * depth])
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let e = acc.entry(*label).or_insert((0.0, 0));
        e.0 += sq;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(k, (sq, n))| (k, (sq / (n * depth) as f64).sqrt()))
        .collect())
}

/// RNMSE restricted to each class of `class_map`.
pub fn rnmse_per_class(a_true: &AbundanceField, a_est: &AbundanceField, class_map: &ClassMap) -> Result<BTreeMap<usize, f64>> {
    check_shapes(a_true, a_est)?;
    per_class(a_true.as_slice(), a_est.as_slice(), a_true.depth(), class_map)
}

/// `RE_k = sqrt(sum_{I_k} |y - y_hat|^2 / (N_k L))`.
pub fn reconstruction_error_per_class(y: &HyperCube, y_hat: &HyperCube, class_map: &ClassMap) -> Result<BTreeMap<usize, f64>> {
    check_dim("cube bands", y.bands(), y_hat.bands())?;
    check_dim("cube pixels", y.n_pixels(), y_hat.n_pixels())?;
    per_class(y.as_slice(), y_hat.as_slice(), y.bands(), class_map)
}

/// `(P_FA, P_D)`; a rate is `None` when its reference set is empty.
pub fn detection_rates(decisions: &[bool], mask: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    check_dim("decision map", mask.len(), decisions.len())?;
    let (mut fa, mut neg, mut hit, mut pos) = (0usize, 0usize, 0usize, 0usize);
    for (d, m) in decisions.iter().zip(mask) {
        if *m {
            pos += 1;
            hit += usize::from(*d);
        } else {
            neg += 1;
            fa += usize::from(*d);
        }
    }
    let rate = |k: usize, n: usize| (n > 0).then(|| k as f64 / n as f64);
    Ok((rate(fa, neg), rate(hit, pos)))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rnmse_global: f64,
    pub rnmse_per_class: BTreeMap<String, f64>,
    pub re_per_class: BTreeMap<String, f64>,
    pub p_fa: Option<f64>,
    pub p_d: Option<f64>,
}

impl MetricReport {
    /// `key = value` lines, one per metric.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        writeln!(out, "rnmse_global = {:e}", self.rnmse_global).unwrap();
        for (k, v) in &self.rnmse_per_class {
            writeln!(out, "rnmse.{k} = {v:e}").unwrap();
        }
        for (k, v) in &self.re_per_class {
            writeln!(out, "re.{k} = {v:e}").unwrap();
        }
        if let Some(v) = self.p_fa {
            writeln!(out, "p_fa = {v:e}").unwrap();
        }
        if let Some(v) = self.p_d {
            writeln!(out, "p_d = {v:e}").unwrap();
        }
        out
    }

    /// `class,rnmse,re` table with an `all` row for the global value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,rnmse,re\n");
        writeln!(out, "all,{:e},", self.rnmse_global).unwrap();
        let mut classes: Vec<&String> = self.rnmse_per_class.keys().chain(self.re_per_class.keys()).collect();
        classes.sort();
        classes.dedup();
        for c in classes {
            let f = |m: &BTreeMap<String, f64>| m.get(c).map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(out, "{c},{},{}", f(&self.rnmse_per_class), f(&self.re_per_class)).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PixelField;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(rng: &mut ChaCha8Rng, r: usize, rows: usize, cols: usize) -> AbundanceField {
        PixelField::new(r, rows, cols, (0..r * rows * cols).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rnmse_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = field(&mut rng, 3, 4, 5);
        assert_eq!(rnmse(&a, &a).unwrap(), 0.0);
        let shifted = PixelField::new(3, 4, 5, a.as_slice().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((rnmse(&a, &shifted).unwrap() - 0.1).abs() < 1e-12);
        let single = ClassMap::uniform(4, 5, 0);
        let per = rnmse_per_class(&a, &shifted, &single).unwrap();
        assert!((per[&0] - rnmse(&a, &shifted).unwrap()).abs() < 1e-15);
        assert!(rnmse(&a, &field(&mut rng, 2, 4, 5)).is_err());
    }

    #[test]
    fn reconstruction_error_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = HyperCube::new(4, 2, 3, (0..24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let yh = HyperCube::new(4, 2, 3, (0..24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let map = ClassMap {
            rows: 2,
            cols: 3,
            labels: vec![0, 1, 1, 0, 2, 1],
        };
        let re = reconstruction_error_per_class(&y, &yh, &map).unwrap();
        for class in 0..3 {
            let (mut sq, mut n) = (0.0, 0);
            for p in 0..6 {
                if map.labels[p] == class {
                    n += 1;
                    for b in 0..4 {
                        sq += (y.pixel(p)[b] - yh.pixel(p)[b]).powi(2);
                    }
                }
            }
            assert!((re[&class] - (sq / (4 * n) as f64).sqrt()).abs() < 1e-14);
        }
        assert!(reconstruction_error_per_class(&y, &y, &map).unwrap().values().all(|v| *v == 0.0));
    }

    #[test]
    fn detection_rate_identities() {
        let mask = [true, false, true, false, false];
        let not: Vec<bool> = mask.iter().map(|m| !m).collect();
        assert_eq!(detection_rates(&mask, &mask).unwrap(), (Some(0.0), Some(1.0)));
        assert_eq!(detection_rates(&not, &mask).unwrap(), (Some(1.0), Some(0.0)));
        assert_eq!(detection_rates(&[true, false], &[true, true]).unwrap(), (None, Some(0.5)));
    }

    #[test]
    fn report_formats() {
        let mut r = MetricReport {
            rnmse_global: 0.5,
            p_d: Some(0.75),
            ..MetricReport::default()
        };
        r.rnmse_per_class.insert("lmm_sto".into(), 0.25);
        r.re_per_class.insert("lmm_sto".into(), 0.125);
        let kv = r.to_key_value();
        assert!(kv.contains("rnmse.lmm_sto = 2.5e-1"));
        assert!(kv.contains("p_d = 7.5e-1"));
        assert!(!kv.contains("p_fa"));
        assert_eq!(r.to_csv(), "class,rnmse,re\nall,5e-1,\nlmm_sto,2.5e-1,1.25e-1\n");
    }

    proptest! {
        #[test]
        fn global_is_weighted_mean_of_classes(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = field(&mut rng, 3, 5, 5);
            let b = field(&mut rng, 3, 5, 5);
            let map = ClassMap { rows: 5, cols: 5, labels: (0..25).map(|_| rng.random_range(0..4)).collect() };
            let per = rnmse_per_class(&a, &b, &map).unwrap();
            let mut weighted = 0.0;
            for (k, v) in &per {
                let nk = map.labels.iter().filter(|l| *l == k).count();
                weighted += nk as f64 * v * v / 25.0;
            }
            prop_assert!((weighted - rnmse(&a, &b).unwrap().powi(2)).abs() < 1e-12);
        }

        #[test]
        fn rnmse_triangle_inequality(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (field(&mut rng, 2, 3, 3), field(&mut rng, 2, 3, 3), field(&mut rng, 2, 3, 3));
            prop_assert!(rnmse(&a, &c).unwrap() <= rnmse(&a, &b).unwrap() + rnmse(&b, &c).unwrap() + 1e-12);
        }

        #[test]
        fn detection_rates_ignore_pixel_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<bool> = (0..30).map(|_| rng.random()).collect();
            let m: Vec<bool> = (0..30).map(|_| rng.random()).collect();
            let mut idx: Vec<usize> = (0..30).collect();
            idx.shuffle(&mut rng);
            let dp: Vec<bool> = idx.iter().map(|&i| d[i]).collect();
            let mp: Vec<bool> = idx.iter().map(|&i| m[i]).collect();
            prop_assert_eq!(detection_rates(&d, &m).unwrap(), detection_rates(&dp, &mp).unwrap());
        }
    }
}
