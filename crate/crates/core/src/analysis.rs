//! Inspection of trained universal pooling: extraction of the weights π,
//! per-channel classification into average, flexible and fixed pooling, and
//! CSV / PGM export of weight maps with their feature maps.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::models::Model;
use crate::scalar::{Precision, Real};
use crate::tensor::{nchw, Tensor};

/// π and the pooled feature map of one universal pooling site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteWeights {
    pub site: usize,
    pub name: String,
    /// Pooling block extent S.
    pub size: usize,
    /// `[N, C, H, W]`; zero outside the covered ⌊H/S⌋·S × ⌊W/S⌋·S region.
    pub weights: Tensor<f64>,
    /// `[N, C, H, W]` feature map entering the site.
    pub features: Tensor<f64>,
}

impl SiteWeights {
    pub fn dims(&self) -> [usize; 4] {
        nchw("site weights", self.weights.shape()).expect("validated on construction")
    }

    /// π of (`input`, `channel`) as a row-major H×W slice.
    pub fn map(&self, input: usize, channel: usize) -> &[f64] {
        let [_, c, h, w] = self.dims();
        let off = (input * c + channel) * h * w;
        &self.weights.data()[off..off + h * w]
    }

    pub fn feature_map(&self, input: usize, channel: usize) -> &[f64] {
        let [_, c, h, w] = self.dims();
        let off = (input * c + channel) * h * w;
        &self.features.data()[off..off + h * w]
    }

    /// Largest deviation of any block sum from one.
    pub fn max_block_sum_error(&self) -> f64 {
        let [n, c, h, w] = self.dims();
        let s = self.size;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for ch in 0..c {
                let m = self.map(i, ch);
                for p in 0..h / s {
                    for q in 0..w / s {
                        let sum: f64 = (0..s)
                            .flat_map(|r| (0..s).map(move |cc| (p * s + r) * w + q * s + cc))
                            .map(|k| m[k])
                            .sum();
                        worst = worst.max((sum - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Block-sum tolerance for π computed at the given precision.
pub fn block_sum_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F32 => 1e-5,
        Precision::F64 => 1e-12,
    }
}

/// Runs `batch` through the model in evaluation mode and returns π at every
/// universal pooling site.
pub fn extract_weights<T: Real>(model: &Model<T>, batch: &Tensor<T>) -> Result<Vec<SiteWeights>> {
    let mut tape = Tape::new();
    let out = {
        let mut ctx = ForwardCtx::new(&mut tape, &model.store, false);
        let input = ctx.tape.constant(batch.clone());
        model.forward(&mut ctx, input)?
    };
    let mut sites = Vec::new();
    for (k, site) in model.sites().iter().enumerate() {
        let Some(pi) = out.pool_weights[k] else {
            continue;
        };
        let sw = SiteWeights {
            site: k,
            name: site.name.clone(),
            size: site.spec.size,
            weights: tape.value(pi).cast(),
            features: tape.value(out.pool_inputs[k]).cast(),
        };
        let err = sw.max_block_sum_error();
        if err > block_sum_tolerance(T::PRECISION) {
            return Err(Error::Numerical(format!(
                "{}: pooling weights deviate from unit block sums by {err:e}",
                sw.name
            )));
        }
        sites.push(sw);
    }
    if sites.is_empty() {
        return Err(Error::Config(
            "the model has no universal pooling site to analyze".into(),
        ));
    }
    Ok(sites)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    /// Input-independent, uniform weights.
    Average,
    /// Weights that respond to the input.
    Flexible,
    /// Input-independent, non-uniform weights.
    Fixed,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Average => "average",
            Category::Flexible => "flexible",
            Category::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Uniformity bound; `None` means `0.05·(1 − 1/S²)` for the site's S.
    pub eps_u: Option<f64>,
    pub eps_s: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            eps_u: None,
            eps_s: 0.1,
        }
    }
}

impl Thresholds {
    pub fn uniformity_bound(&self, size: usize) -> f64 {
        self.eps_u
            .unwrap_or_else(|| 0.05 * (1.0 - 1.0 / (size * size) as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProfile {
    pub site: usize,
    pub channel: usize,
    pub category: Category,
    pub uniformity: f64,
    pub sensitivity: f64,
    pub n_inputs: usize,
}

/// Average iff `uniformity < eps_u`; otherwise flexible iff
/// `sensitivity ≥ eps_s`; otherwise fixed.
pub fn classify(uniformity: f64, sensitivity: f64, eps_u: f64, eps_s: f64) -> Category {
    if uniformity < eps_u {
        Category::Average
    } else if sensitivity >= eps_s {
        Category::Flexible
    } else {
        Category::Fixed
    }
}

/// Uniformity and sensitivity of one channel's π maps over several inputs.
///
/// Uniformity is the mean over inputs of `max |π − 1/S²|` on the covered
/// region. Sensitivity is the mean over unordered input pairs of the L1
/// distance between their maps, divided by the number of blocks.
pub fn channel_statistics(maps: &[&[f64]], h: usize, w: usize, size: usize) -> Result<(f64, f64)> {
    if maps.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least 2 inputs are needed, got {}",
            maps.len()
        )));
    }
    let (bp, bq) = (h / size, w / size);
    if bp == 0 || bq == 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}×{w} map has no {size}×{size} block"
        )));
    }
    let covered: Vec<usize> = (0..bp * size)
        .flat_map(|r| (0..bq * size).map(move |c| r * w + c))
        .collect();
    let uniform = 1.0 / (size * size) as f64;
    let uniformity = maps
        .iter()
        .map(|m| {
            covered
                .iter()
                .map(|&k| (m[k] - uniform).abs())
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / maps.len() as f64;
    let blocks = (bp * bq) as f64;
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            total += covered
                .iter()
                .map(|&k| (maps[i][k] - maps[j][k]).abs())
                .sum::<f64>()
                / blocks;
            pairs += 1;
        }
    }
    Ok((uniformity, total / pairs as f64))
}

/// Profiles every channel of a site.
pub fn categorize(site: &SiteWeights, thresholds: &Thresholds) -> Result<Vec<ChannelProfile>> {
    let [n, c, h, w] = site.dims();
    let eps_u = thresholds.uniformity_bound(site.size);
    (0..c)
        .map(|ch| {
            let maps: Vec<&[f64]> = (0..n).map(|i| site.map(i, ch)).collect();
            let (uniformity, sensitivity) = channel_statistics(&maps, h, w, site.size)?;
            Ok(ChannelProfile {
                site: site.site,
                channel: ch,
                category: classify(uniformity, sensitivity, eps_u, thresholds.eps_s),
                uniformity,
                sensitivity,
                n_inputs: n,
            })
        })
        .collect()
}

/// `(site, [average, flexible, fixed])` counts in site order.
pub fn summarize(profiles: &[ChannelProfile]) -> Vec<(usize, [usize; 3])> {
    let mut out: Vec<(usize, [usize; 3])> = Vec::new();
    for p in profiles {
        let slot = match out.iter_mut().find(|(s, _)| *s == p.site) {
            Some(slot) => slot,
            None => {
                out.push((p.site, [0; 3]));
                out.last_mut().expect("just pushed")
            }
        };
        slot.1[p.category as usize] += 1;
    }
    out
}

pub const PROFILE_CSV_HEADER: &str = "site,channel,category,uniformity,sensitivity";

pub fn profiles_csv(profiles: &[ChannelProfile]) -> String {
    let mut s = String::from(PROFILE_CSV_HEADER);
    s.push('\n');
    for p in profiles {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.site, p.channel, p.category, p.uniformity, p.sensitivity
        ));
    }
    s
}

/// Fixed-width per-site category counts.
pub fn summary_table(profiles: &[ChannelProfile], site_names: &[String]) -> String {
    let mut s = format!(
        "{:<8} {:>8} {:>8} {:>8} {:>8}\n",
        "site", "average", "flexible", "fixed", "total"
    );
    for (site, [a, f, x]) in summarize(profiles) {
        let name = site_names
            .get(site)
            .cloned()
            .unwrap_or_else(|| site.to_string());
        s.push_str(&format!(
            "{name:<8} {a:>8} {f:>8} {x:>8} {:>8}\n",
            a + f + x
        ));
    }
    s
}

pub const WEIGHTS_CSV_HEADER: &str = "site,channel,input,row,col,pi,feature";

/// One row per pixel. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn export_csv(sites: &[SiteWeights], path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut out = String::from(WEIGHTS_CSV_HEADER);
    out.push('\n');
    for sw in sites {
        let [n, c, h, w] = sw.dims();
        for ch in 0..c {
            for i in 0..n {
                let (m, f) = (sw.map(i, ch), sw.feature_map(i, ch));
                for r in 0..h {
                    for col in 0..w {
                        let k = r * w + col;
                        out.push_str(&format!(
                            "{},{ch},{i},{r},{col},{},{}\n",
                            sw.name, m[k], f[k]
                        ));
                    }
                }
            }
        }
    }
    write_file(path, out.as_bytes())?;
    Ok(path.to_path_buf())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub site: String,
    pub channel: usize,
    pub input: usize,
    pub row: usize,
    pub col: usize,
    pub pi: f64,
    pub feature: f64,
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<WeightRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(WEIGHTS_CSV_HEADER) {
        return Err(Error::Data(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Data(format!("{}: line {}: {line:?}", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(WeightRecord {
                site: f[0].to_string(),
                channel: f[1].parse().map_err(|_| bad())?,
                input: f[2].parse().map_err(|_| bad())?,
                row: f[3].parse().map_err(|_| bad())?,
                col: f[4].parse().map_err(|_| bad())?,
                pi: f[5].parse().map_err(|_| bad())?,
                feature: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// 8-bit binary PGM of `values` rescaled by min–max; a constant map is all
/// zeros. Returns the (min, max) used.
pub fn write_pgm(path: impl AsRef<Path>, values: &[f64], h: usize, w: usize) -> Result<(f64, f64)> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| {
            (l.min(v), u.max(v))
        });
    let range = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    write_file(path.as_ref(), &bytes)?;
    Ok((lo, hi))
}

/// Reads back an 8-bit P5 file written by [`write_pgm`].
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Data(format!("{}: not an 8-bit P5 image", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad())?
                .to_string(),
        );
    }
    pos += 1;
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + w * h {
        return Err(bad());
    }
    Ok((h, w, bytes[pos..].to_vec()))
}

/// Writes `{site}_in{i}_ch{c}_pi.pgm` and `_feature.pgm` for every map plus
/// a `.txt` sidecar with the min–max scale of each image.
pub fn export_pgm(sites: &[SiteWeights], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for sw in sites {
        let [n, c, h, w] = sw.dims();
        for i in 0..n {
            for ch in 0..c {
                let stem = format!("{}_in{i}_ch{ch}", sw.name);
                let mut sidecar = String::new();
                for (kind, values) in [("pi", sw.map(i, ch)), ("feature", sw.feature_map(i, ch))] {
                    let p = dir.join(format!("{stem}_{kind}.pgm"));
                    let (lo, hi) = write_pgm(&p, values, h, w)?;
                    sidecar.push_str(&format!("{kind}.min = {lo}\n{kind}.max = {hi}\n"));
                    paths.push(p);
                }
                let p = dir.join(format!("{stem}.txt"));
                write_file(&p, sidecar.as_bytes())?;
                paths.push(p);
            }
        }
    }
    Ok(paths)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site_from(maps: Vec<Vec<f64>>, c: usize, h: usize, w: usize, size: usize) -> SiteWeights {
        let n = maps.len() / c;
        let data: Vec<f64> = maps.concat();
        SiteWeights {
            site: 0,
            name: "pool1".into(),
            size,
            weights: Tensor::new(vec![n, c, h, w], data.clone()).unwrap(),
            features: Tensor::new(vec![n, c, h, w], data).unwrap(),
        }
    }

    #[test]
    fn uniform_maps_are_average() {
        let maps = vec![vec![0.25; 16]; 5];
        let p = categorize(&site_from(maps, 1, 4, 4, 2), &Thresholds::default()).unwrap();
        assert_eq!(p[0].category, Category::Average);
        assert_eq!(p[0].uniformity, 0.0);
        assert_eq!(p[0].sensitivity, 0.0);
    }

    #[test]
    fn fixed_top_left_is_fixed() {
        let mut m = vec![0.0; 16];
        for k in [0, 2, 8, 10] {
            m[k] = 1.0;
        }
        let p = categorize(&site_from(vec![m; 4], 1, 4, 4, 2), &Thresholds::default()).unwrap();
        assert_eq!(p[0].category, Category::Fixed);
        assert!((p[0].uniformity - 0.75).abs() < 1e-15);
    }

    #[test]
    fn moving_one_hot_is_flexible_with_expected_sensitivity() {
        let one_hot = |k: usize| {
            let mut m = vec![0.0; 4];
            m[k] = 1.0;
            m
        };
        let p = categorize(
            &site_from(vec![one_hot(0), one_hot(3)], 1, 2, 2, 2),
            &Thresholds::default(),
        )
        .unwrap();
        assert_eq!(p[0].category, Category::Flexible);
        assert!((p[0].sensitivity - 2.0).abs() < 1e-15);
    }

    #[test]
    fn remainder_is_ignored() {
        let mut a = vec![0.25; 9];
        let mut b = a.clone();
        a[2] = 5.0;
        b[8] = -3.0;
        let (u, s) = channel_statistics(&[&a, &b], 3, 3, 2).unwrap();
        assert_eq!((u, s), (0.0, 0.0));
    }

    #[test]
    fn summary_counts_per_site() {
        let mk = |site, category| ChannelProfile {
            site,
            channel: 0,
            category,
            uniformity: 0.0,
            sensitivity: 0.0,
            n_inputs: 2,
        };
        let s = summarize(&[
            mk(0, Category::Fixed),
            mk(1, Category::Average),
            mk(0, Category::Flexible),
        ]);
        assert_eq!(s, vec![(0, [0, 1, 1]), (1, [1, 0, 0])]);
    }

    #[test]
    fn constant_map_becomes_black_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        write_pgm(&p, &[0.25; 6], 2, 3).unwrap();
        let (h, w, px) = read_pgm(&p).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(px, vec![0; 6]);
    }
}
