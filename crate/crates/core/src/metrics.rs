//! PSNR/SSIM, metric reports and similarity heat-maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::degrade::DegradationKind;
use crate::error::{Error, Result};
use crate::image::Image;

/// Returned by [`psnr`] when the images are numerically identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64)
}

pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::Param(format!("max_val must be positive, got {max_val}")));
    }
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

fn ssim_window_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable Gaussian filter of a `w×h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over valid 11×11 Gaussian windows, averaged over channels.
/// Pixel range is taken as `[0, 1]`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = ssim_window_1d();
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data()[i * 3 + c]).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data()[i * 3 + c]).collect();
        let prod = |f: &dyn Fn(usize) -> f64| (0..w * h).map(f).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let aa = filter_valid(&prod(&|i| pa[i] * pa[i]), w, h, &k);
        let bb = filter_valid(&prod(&|i| pb[i] * pb[i]), w, h, &k);
        let ab = filter_valid(&prod(&|i| pa[i] * pb[i]), w, h, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetric {
    pub id: String,
    pub kind: DegradationKind,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetric>,
}

impl MetricReport {
    pub fn push(&mut self, m: ImageMetric) {
        self.per_image.push(m);
    }

    fn aggregate<'a>(it: impl Iterator<Item = &'a ImageMetric>) -> Option<Aggregate> {
        let (mut n, mut p, mut s) = (0usize, 0.0, 0.0);
        for m in it {
            n += 1;
            p += m.psnr_db;
            s += m.ssim;
        }
        (n > 0).then(|| Aggregate { count: n, psnr_db: p / n as f64, ssim: s / n as f64 })
    }

    pub fn overall(&self) -> Option<Aggregate> {
        Self::aggregate(self.per_image.iter())
    }

    pub fn per_kind(&self) -> BTreeMap<DegradationKind, Aggregate> {
        let mut out = BTreeMap::new();
        for k in DegradationKind::ALL {
            if let Some(a) = Self::aggregate(self.per_image.iter().filter(|m| m.kind == k)) {
                out.insert(k, a);
            }
        }
        out
    }

    /// One `id kind psnr ssim` line per image, then the aggregate block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.per_image {
            let _ = writeln!(s, "{} {} {:.2} {:.4}", m.id, m.kind, m.psnr_db, m.ssim);
        }
        s.push_str("# aggregate\n");
        for (k, a) in self.per_kind() {
            let _ = writeln!(s, "mean {k} n={} psnr={:.2} ssim={:.4}", a.count, a.psnr_db, a.ssim);
        }
        if let Some(a) = self.overall() {
            let _ = writeln!(s, "mean all n={} psnr={:.2} ssim={:.4}", a.count, a.psnr_db, a.ssim);
        }
        s
    }
}

/// Rows are datasets, columns labels; each row is a mean of softmax vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// True when every row's diagonal entry strictly exceeds the rest of the row.
    pub fn diagonal_dominant(&self) -> bool {
        let cols: Vec<usize> = (0..self.rows.len()).collect();
        self.dominant_at(&cols)
    }

    /// Row `r` must peak strictly at column `cols[r]`.
    pub fn dominant_at(&self, cols: &[usize]) -> bool {
        cols.len() == self.values.len()
            && self.values.iter().zip(cols).all(|(row, &d)| d < row.len() && row.iter().enumerate().all(|(c, v)| c == d || row[d] > *v))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("dataset");
        for c in &self.cols {
            let _ = write!(s, "\t{}", c.replace(' ', "_"));
        }
        s.push('\n');
        for (name, row) in self.rows.iter().zip(&self.values) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, "\t{v:.4}");
            }
            s.push('\n');
        }
        s
    }

    /// Grayscale cells, 16 px each, brightness = value.
    pub fn to_image(&self) -> Image {
        const CELL: usize = 16;
        let (nr, nc) = (self.rows.len(), self.cols.len());
        Image::from_fn(nc * CELL, nr * CELL, |x, y, _| self.values[y / CELL][x / CELL].clamp(0.0, 1.0))
    }

    pub fn save(&self, png: &Path, text: &Path) -> Result<()> {
        self.to_image().save_png(png)?;
        crate::nn::checkpoint::atomic_write(text, self.to_text().as_bytes())
    }
}

/// Averages `score(img)` over each dataset. `score` must return one
/// probability per label.
pub fn similarity_heatmap(
    mut score: impl FnMut(&Image) -> Result<Vec<f64>>,
    datasets: &[(String, Vec<Image>)],
    labels: &[String],
) -> Result<SimilarityMatrix> {
    let mut values = Vec::with_capacity(datasets.len());
    for (name, imgs) in datasets {
        if imgs.is_empty() {
            return Err(Error::Dataset(format!("heat-map dataset {name:?} is empty")));
        }
        let mut row = vec![0.0; labels.len()];
        for img in imgs {
            let s = score(img)?;
            if s.len() != labels.len() {
                return Err(Error::Shape(format!("{} scores for {} labels", s.len(), labels.len())));
            }
            row.iter_mut().zip(&s).for_each(|(r, v)| *r += v);
        }
        row.iter_mut().for_each(|r| *r /= imgs.len() as f64);
        values.push(row);
    }
    Ok(SimilarityMatrix { rows: datasets.iter().map(|d| d.0.clone()).collect(), cols: labels.to_vec(), values })
}

/// Per-image min-max normalization to `[0, 1]`; a constant map becomes 0.
pub fn min_max_normalize(img: &Image) -> Image {
    let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span < 1e-12 {
        img.map(|_| 0.0)
    } else {
        img.map(|v| (v - lo) / span)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::apply_noise;
    use proptest::prelude::*;

    fn gradient(n: usize) -> Image {
        Image::from_fn(n, n, |x, y, c| (x as f64 + 2.0 * y as f64 + c as f64) / (3.0 * n as f64 + 2.0))
    }

    // Per-window evaluation with a 2-D Gaussian, straight from the definition.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let r = 5i64;
        let mut g = [[0.0f64; 11]; 11];
        let mut gs = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as i64 - r, j as i64 - r);
                *v = (-((di * di + dj * dj) as f64) / (2.0 * 1.5 * 1.5)).exp();
                gs += *v;
            }
        }
        let (w, h) = (a.width(), a.height());
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut n = 0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i][j] / gs;
                            ma += wt * a.get(x0 + j, y0 + i, c);
                            mb += wt * b.get(x0 + j, y0 + i, c);
                        }
                    }
                    let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i][j] / gs;
                            let (da, db) = (a.get(x0 + j, y0 + i, c) - ma, b.get(x0 + j, y0 + i, c) - mb);
                            va += wt * da * da;
                            vb += wt * db * db;
                            cv += wt * da * db;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    acc += (2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / 3.0
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(8, 8, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 10.0 / 255.0);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0 * 25.5f64.log10()).abs() < 0.01);
        assert!((psnr(&a, &b, 1.0).unwrap() - 28.13).abs() < 0.01);
        assert_eq!(psnr(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 1.0), 1.0).unwrap(), 0.0);
        assert!(psnr(&a, &Image::filled(4, 8, 0.3), 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = gradient(16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 1.0);
        assert!(ssim(&Image::filled(10, 16, 0.5), &Image::filled(10, 16, 0.5)).is_err());
    }

    #[test]
    fn ssim_matches_per_window_reference() {
        let a = gradient(16);
        let b = apply_noise(&a, 25.0, 3).unwrap();
        let got = ssim(&a, &b).unwrap();
        let want = ssim_reference(&a, &b);
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        assert!(got < 0.99);
    }

    #[test]
    fn psnr_decreases_with_sigma() {
        let img = Image::filled(16, 16, 0.5);
        let means: Vec<f64> = [5.0, 15.0, 25.0, 50.0]
            .iter()
            .map(|s| (0..30).map(|seed| psnr(&img, &apply_noise(&img, *s, seed).unwrap(), 1.0).unwrap()).sum::<f64>() / 30.0)
            .collect();
        assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
    }

    #[test]
    fn report_means_and_text() {
        let mut r = MetricReport::default();
        r.push(ImageMetric { id: "a".into(), kind: DegradationKind::Noise, psnr_db: 20.0, ssim: 0.5 });
        r.push(ImageMetric { id: "b".into(), kind: DegradationKind::Noise, psnr_db: 30.0, ssim: 0.7 });
        r.push(ImageMetric { id: "c".into(), kind: DegradationKind::Rain, psnr_db: 25.0, ssim: 0.9 });
        let k = r.per_kind();
        assert_eq!(k[&DegradationKind::Noise].psnr_db, 25.0);
        assert!((r.overall().unwrap().ssim - 0.7).abs() < 1e-12);
        let text = r.to_text();
        assert!(text.starts_with("a noise 20.00 0.5000\n"));
        assert!(text.contains("mean all n=3 psnr=25.00 ssim=0.7000"));
    }

    #[test]
    fn heatmap_rows_and_errors() {
        let imgs = vec![Image::filled(4, 4, 0.1), Image::filled(4, 4, 0.9)];
        let one = similarity_heatmap(|_| Ok(vec![1.0]), &[("n".into(), imgs.clone())], &["x".into()]).unwrap();
        assert_eq!(one.values, vec![vec![1.0]]);
        let m = similarity_heatmap(
            |img| {
                let p = img.mean();
                Ok(vec![p, 1.0 - p])
            },
            &[("a".into(), imgs.clone()), ("b".into(), imgs[..1].to_vec())],
            &["x".into(), "y".into()],
        )
        .unwrap();
        assert!(m.values.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        assert!(!m.diagonal_dominant());
        let swapped = SimilarityMatrix { rows: vec!["a".into(), "b".into()], cols: m.cols.clone(), values: vec![vec![0.2, 0.8], vec![0.7, 0.3]] };
        assert!(!swapped.diagonal_dominant());
        assert!(swapped.dominant_at(&[1, 0]));
        assert!(!swapped.dominant_at(&[1]));
        assert!(similarity_heatmap(|_| Ok(vec![1.0]), &[("e".into(), vec![])], &["x".into()]).is_err());
        assert_eq!(m.to_image().width(), 32);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000, sigma in 1.0f64..60.0) {
            let a = gradient(12);
            let b = apply_noise(&a, sigma, seed).unwrap();
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-10);
        }
    }
}
