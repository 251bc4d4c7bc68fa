//! Diagnostics: positional similarity maps, norm-versus-sigma trends and
//! prediction heatmaps, written as CSV and binary PGM.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::data::MaskSpec;
use crate::error::{Error, Result};
use crate::model::{BatchMask, ModelState, StepNoise};
use crate::tensor::{softmax_in_place, Graph, Scalar, Tensor, TokenIndex};

pub const SIMILARITY_HEADER: &str = "position,row,col,similarity";
pub const NORM_TREND_HEADER: &str = "sigma,norm_A,norm_m_tilde,source";
pub const HEATMAP_HEADER: &str = "position,row,col,probability";
/// Softmax temperature for heatmaps.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Pixels per grid cell in rendered images.
pub const PGM_SCALE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityMode {
    Deterministic,
    Stop,
}

impl FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(SimilarityMode::Deterministic),
            "stop" => Ok(SimilarityMode::Stop),
            _ => Err(Error::Config(format!(
                "unknown similarity mode '{s}' (expected deterministic or stop)"
            ))),
        }
    }
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            SimilarityMode::Deterministic => "deterministic",
            SimilarityMode::Stop => "stop",
        })
    }
}

/// Cosine similarity of one query position to every grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub query: usize,
    pub values: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Similarity map from a position table `psi` `[K, d]` and projection `a`
/// `[d, d_e]`. Stop mode averages `cos(psi_q + A n, psi_j)` over
/// `num_samples` draws of `n ~ N(0, sigma I)`.
#[allow(clippy::too_many_arguments)]
pub fn similarity_from_table<R: Rng + ?Sized>(
    psi: &Tensor<f64>,
    a: &Tensor<f64>,
    sigma: f64,
    grid: (usize, usize),
    query: usize,
    mode: SimilarityMode,
    num_samples: usize,
    rng: &mut R,
) -> Result<SimilarityMap> {
    let (k, d) = (psi.shape()[0], psi.shape()[1]);
    if grid.0 * grid.1 != k {
        return Err(Error::Dimension(format!(
            "grid {}x{} does not cover {k} positions",
            grid.0, grid.1
        )));
    }
    if query >= k {
        return Err(Error::Config(format!(
            "query position {query} is outside the {k}-position grid"
        )));
    }
    if a.shape()[0] != d {
        return Err(Error::dim("similarity", psi.shape(), a.shape()));
    }
    let d_e = a.shape()[1];
    let rows: Vec<&[f64]> = psi.data().chunks(d).collect();
    let values = match mode {
        SimilarityMode::Deterministic => rows.iter().map(|r| cosine(rows[query], r)).collect(),
        SimilarityMode::Stop => {
            if num_samples == 0 {
                return Err(Error::Config("stop-mode similarity needs at least one sample".into()));
            }
            if !(sigma >= 0.0) {
                return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
            }
            let std = sigma.sqrt();
            let mut acc = vec![0.0; k];
            let mut q = vec![0.0; d];
            let mut n = vec![0.0; d_e];
            for _ in 0..num_samples {
                for v in n.iter_mut() {
                    *v = if std == 0.0 {
                        0.0
                    } else {
                        std * rng.sample::<f64, _>(StandardNormal)
                    };
                }
                for (r, qv) in q.iter_mut().enumerate() {
                    let an: f64 = a.data()[r * d_e..(r + 1) * d_e]
                        .iter()
                        .zip(&n)
                        .map(|(x, y)| x * y)
                        .sum();
                    *qv = rows[query][r] + an;
                }
                for (s, row) in acc.iter_mut().zip(&rows) {
                    *s += cosine(&q, row);
                }
            }
            acc.iter().map(|s| s / num_samples as f64).collect()
        }
    };
    Ok(SimilarityMap {
        grid_h: grid.0,
        grid_w: grid.1,
        query,
        values,
    })
}

/// [`similarity_from_table`] on a model's predictor positions, `A` and
/// configured sigma.
pub fn pos_similarity<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    query: usize,
    mode: SimilarityMode,
    num_samples: usize,
    rng: &mut R,
) -> Result<SimilarityMap> {
    let c = &state.config;
    similarity_from_table(
        &state.predictor_positions().cast(),
        &state.a().cast(),
        c.stop.sigma,
        (c.grid_h, c.grid_w),
        query,
        mode,
        num_samples,
        rng,
    )
}

impl SimilarityMap {
    /// 4-neighbors of the query on the grid.
    pub fn neighbors(&self) -> Vec<usize> {
        grid_neighbors(self.query, self.grid_h, self.grid_w)
    }

    /// Mean similarity over the query's 4-neighbors minus the mean over all
    /// other non-query positions.
    pub fn neighbor_spread(&self) -> f64 {
        let nb = self.neighbors();
        let (mut sn, mut cn, mut so, mut co) = (0.0, 0usize, 0.0, 0usize);
        for (j, v) in self.values.iter().enumerate() {
            if j == self.query {
                continue;
            }
            if nb.contains(&j) {
                sn += v;
                cn += 1;
            } else {
                so += v;
                co += 1;
            }
        }
        let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
        mean(sn, cn) - mean(so, co)
    }

    pub fn to_csv(&self) -> String {
        grid_csv(SIMILARITY_HEADER, self.grid_w, &self.values)
    }

    /// Grayscale with -1 black and +1 white.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let gray: Vec<u8> = self
            .values
            .iter()
            .map(|v| (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        encode_pgm_grid(&gray, self.grid_h, self.grid_w, scale)
    }
}

pub fn grid_neighbors(q: usize, gh: usize, gw: usize) -> Vec<usize> {
    let (r, c) = (q / gw, q % gw);
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push(q - gw);
    }
    if r + 1 < gh {
        out.push(q + gw);
    }
    if c > 0 {
        out.push(q - 1);
    }
    if c + 1 < gw {
        out.push(q + 1);
    }
    out
}

/// Per-query neighbor spread in both modes.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingRow {
    pub query: usize,
    pub deterministic: f64,
    pub stop: f64,
}

/// Neighbor spread for every query position; the fraction of queries where
/// stop mode is larger is `rows.filter(stop > deterministic) / K`.
pub fn smoothing_comparison<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    num_samples: usize,
    rng: &mut R,
) -> Result<Vec<SmoothingRow>> {
    (0..state.config.num_patches())
        .map(|q| {
            let det = pos_similarity(state, q, SimilarityMode::Deterministic, 0, rng)?;
            let stop = pos_similarity(state, q, SimilarityMode::Stop, num_samples, rng)?;
            Ok(SmoothingRow {
                query: q,
                deterministic: det.neighbor_spread(),
                stop: stop.neighbor_spread(),
            })
        })
        .collect()
}

pub fn smoothing_fraction(rows: &[SmoothingRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.stop > r.deterministic).count() as f64 / rows.len() as f64
}

/// Final norms of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct NormRow {
    pub sigma: f64,
    pub norm_a: f64,
    pub norm_m_tilde: f64,
    pub source: PathBuf,
}

/// Reads the last metrics row of each run. Each path is a run directory or
/// a `metrics.csv`; sigma comes from the `config.resolved` next to it.
/// Rows come back sorted by sigma.
pub fn norm_trend(paths: &[PathBuf]) -> Result<Vec<NormRow>> {
    let mut rows = Vec::with_capacity(paths.len());
    for p in paths {
        let (metrics, dir) = if p.is_dir() {
            (p.join("metrics.csv"), p.clone())
        } else {
            (p.clone(), p.parent().map(Path::to_path_buf).unwrap_or_default())
        };
        let cfg = RunConfig::load(&dir.join("config.resolved"))?;
        let (norm_a, norm_m_tilde) = last_norms(&metrics)?;
        rows.push(NormRow {
            sigma: cfg.model.stop.sigma,
            norm_a,
            norm_m_tilde,
            source: metrics,
        });
    }
    rows.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
    Ok(rows)
}

fn last_norms(path: &Path) -> Result<(f64, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("{} has no '{name}' column", path.display()),
            })
    };
    let (ia, im) = (col("norm_A")?, col("norm_m_tilde")?);
    let last = lines.rfind(|l| !l.trim().is_empty()).ok_or_else(|| Error::Format {
        offset: 0,
        message: format!("{} has no data rows", path.display()),
    })?;
    let f: Vec<&str> = last.split(',').collect();
    let num = |i: usize| {
        f.get(i)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Format {
                offset: (text.len() - last.len()) as u64,
                message: format!("malformed metrics row '{last}'"),
            })
    };
    Ok((num(ia)?, num(im)?))
}

/// Median norms per distinct sigma, ascending.
pub fn median_by_sigma(rows: &[NormRow]) -> Vec<(f64, f64, f64)> {
    let mut sigmas: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    sigmas
        .into_iter()
        .map(|s| {
            let group: Vec<&NormRow> = rows.iter().filter(|r| r.sigma == s).collect();
            let a = median(group.iter().map(|r| r.norm_a).collect());
            let m = median(group.iter().map(|r| r.norm_m_tilde).collect());
            (s, a, m)
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn norm_trend_csv(rows: &[NormRow]) -> String {
    let mut s = format!("{NORM_TREND_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.sigma, r.norm_a, r.norm_m_tilde, r.source.display());
    }
    s
}

/// Softmax over grid positions of how much each target-encoder token looks
/// like one predicted token.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub probs: Vec<f64>,
}

/// `patches` is one image, `[K, patch_dim]` or `[1, K, patch_dim]`.
/// Positions are deterministic (no noise is drawn).
pub fn prediction_heatmap<T: Scalar>(
    state: &ModelState<T>,
    patches: &Tensor<T>,
    mask: &MaskSpec,
    patch_of_interest: usize,
    temperature: f64,
) -> Result<Heatmap> {
    let c = &state.config;
    let k = c.num_patches();
    let slot = mask
        .targets()
        .iter()
        .position(|&t| t == patch_of_interest)
        .ok_or_else(|| {
            Error::Usage(format!(
                "patch {patch_of_interest} is not masked, so nothing is predicted there"
            ))
        })?;
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let img = match patches.shape() {
        [kk, pd] if *kk == k && *pd == c.patch_dim => patches.clone().reshape(&[1, k, c.patch_dim])?,
        [1, kk, pd] if *kk == k && *pd == c.patch_dim => patches.clone(),
        s => {
            return Err(Error::Dimension(format!(
                "heatmap expects one image of {k} patches of width {}, got {s:?}",
                c.patch_dim
            )))
        }
    };

    let mut g = Graph::new();
    let p = state.online.bind_frozen(&mut g);
    let x = g.constant(img.clone());
    let pred = state.forward(&mut g, &p, x, &BatchMask::shared(mask), &StepNoise::none())?;
    let width = c.target_dim();
    let pred: Vec<f64> = g.value(pred)[slot * width..(slot + 1) * width]
        .iter()
        .map(|v| v.f64())
        .collect();

    let everything = BatchMask {
        context: TokenIndex::Shared(mask.context().to_vec()),
        targets: TokenIndex::Shared((0..k).collect()),
    };
    let targets = state.make_targets(&img, &everything)?;
    let mut probs: Vec<f64> = targets
        .data()
        .chunks(width)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            cosine(&pred, &row) / temperature
        })
        .collect();
    softmax_in_place(&mut probs);
    Ok(Heatmap {
        grid_h: c.grid_h,
        grid_w: c.grid_w,
        patch: patch_of_interest,
        probs,
    })
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        grid_csv(HEATMAP_HEADER, self.grid_w, &self.probs)
    }

    /// Grayscale scaled so the most likely position is white.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let top = self.probs.iter().cloned().fold(0.0, f64::max);
        let gray: Vec<u8> = self
            .probs
            .iter()
            .map(|p| if top > 0.0 { (p / top * 255.0).round() as u8 } else { 0 })
            .collect();
        encode_pgm_grid(&gray, self.grid_h, self.grid_w, scale)
    }
}

fn grid_csv(header: &str, gw: usize, values: &[f64]) -> String {
    let mut s = format!("{header}\n");
    for (j, v) in values.iter().enumerate() {
        let _ = writeln!(s, "{j},{},{},{v}", j / gw, j % gw);
    }
    s
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Each grid cell becomes a `scale x scale` block.
fn encode_pgm_grid(cells: &[u8], gh: usize, gw: usize, scale: usize) -> Vec<u8> {
    let (w, h) = (gw * scale, gh * scale);
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            px.push(cells[(y / scale) * gw + x / scale]);
        }
    }
    encode_pgm(w, h, &px).expect("grid size matches by construction")
}

/// Parses a P5 header and returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.into(),
    };
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad(i, "truncated PGM header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..i])
                .map_err(|_| bad(start, "non-ascii PGM header"))?
                .to_string(),
        );
    }
    if fields[0] != "P5" {
        return Err(bad(0, "not a binary PGM (P5)"));
    }
    let num = |s: &str, at: usize| s.parse::<usize>().map_err(|_| bad(at, "bad number in PGM header"));
    let (w, h, maxval) = (num(&fields[1], 3)?, num(&fields[2], 3)?, num(&fields[3], 3)?);
    if maxval != 255 {
        return Err(bad(i, "only maxval 255 is supported"));
    }
    let data = &bytes[(i + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(bad(i + 1, "pixel count does not match the header"));
    }
    Ok((w, h, data.to_vec()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posembed::sincos_2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_self_similarity_is_one() {
        let psi = sincos_2d::<f64>(4, 4, 8).unwrap().psi;
        let a = Tensor::from_fn(&[8, 8], |i| ((i * 7) % 5) as f64 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for q in [0, 5, 15] {
            let m =
                similarity_from_table(&psi, &a, 0.25, (4, 4), q, SimilarityMode::Deterministic, 0, &mut rng).unwrap();
            assert!((m.values[q] - 1.0).abs() < 1e-12);
            assert!(m.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn stop_at_zero_sigma_equals_deterministic() {
        let psi = sincos_2d::<f64>(3, 3, 8).unwrap().psi;
        let a = Tensor::from_fn(&[8, 4], |i| i as f64 * 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = similarity_from_table(&psi, &a, 0.0, (3, 3), 4, SimilarityMode::Deterministic, 0, &mut rng).unwrap();
        let s = similarity_from_table(&psi, &a, 0.0, (3, 3), 4, SimilarityMode::Stop, 10, &mut rng).unwrap();
        for (x, y) in d.values.iter().zip(&s.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_errors() {
        let psi = sincos_2d::<f64>(2, 2, 4).unwrap().psi;
        let a = Tensor::zeros(&[4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            similarity_from_table(&psi, &a, 0.1, (2, 2), 0, SimilarityMode::Stop, 0, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(similarity_from_table(&psi, &a, 0.1, (2, 2), 4, SimilarityMode::Deterministic, 1, &mut rng).is_err());
        assert!("bogus".parse::<SimilarityMode>().is_err());
    }

    #[test]
    fn neighbors_and_spread() {
        assert_eq!(grid_neighbors(0, 3, 3), vec![3, 1]);
        let mut nb = grid_neighbors(4, 3, 3);
        nb.sort();
        assert_eq!(nb, vec![1, 3, 5, 7]);
        let mut values = vec![0.0; 9];
        for j in [1, 3, 5, 7] {
            values[j] = 1.0;
        }
        values[4] = 1.0;
        let m = SimilarityMap {
            grid_h: 3,
            grid_w: 3,
            query: 4,
            values,
        };
        assert_eq!(m.neighbor_spread(), 1.0);
    }

    #[test]
    fn pgm_roundtrip_and_scale() {
        let m = SimilarityMap {
            grid_h: 2,
            grid_w: 3,
            query: 0,
            values: vec![1.0, -1.0, 0.0, 0.5, 0.25, -0.5],
        };
        let bytes = m.to_pgm(PGM_SCALE);
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (48, 32));
        assert_eq!(px[0], 255);
        assert_eq!(px[16], 0);
        assert_eq!(px[47], 128);
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }
}
