use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::dataset::DatasetBundle;
use super::train::build_batch;
use super::PipelineError;
use crate::knowledge::EmbeddingStore;
use crate::model::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Projected knowledge tokens, mean pooled.
    Chem,
    /// GIN readout.
    Mol,
    /// Molecular tokens after fusion, mean pooled.
    Fused,
}

impl Representation {
    pub const ALL: [Representation; 3] = [
        Representation::Chem,
        Representation::Mol,
        Representation::Fused,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Representation::Chem => "chem",
            Representation::Mol => "mol",
            Representation::Fused => "fused",
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Representation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown representation `{s}` (expected chem, mol or fused)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// First two principal coordinates per sample.
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub representation: Representation,
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub pca: Pca,
    pub entropy: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize, PipelineError> {
    if x.len() < 3 {
        return Err(PipelineError::Data(format!(
            "analysis needs at least 3 samples, got {}",
            x.len()
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(PipelineError::Data(
            "feature vectors must share a positive width".into(),
        ));
    }
    Ok(d)
}

/// Covariance eigendecomposition. Each component's largest-magnitude
/// loading is made positive so coordinates are reproducible.
pub fn pca(x: &[Vec<f64>]) -> Result<Pca, PipelineError> {
    let d = check_rows(x)?;
    let n = x.len();
    let mut m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = (m.transpose() * &m) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut explained = [0.0; 2];
    let mut coords = vec![[0.0; 2]; n];
    for (k, &c) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(c).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.neg_mut();
        }
        explained[k] = if total > 0.0 {
            eig.eigenvalues[c].max(0.0) / total
        } else {
            0.0
        };
        let proj = &m * v;
        for i in 0..n {
            coords[i][k] = proj[i];
        }
    }
    Ok(Pca { coords, explained })
}

/// Entropy of `p_i = |x_i| / Σ|x_j|` in nats; zero for an all-zero vector.
pub fn shannon_entropy(x: &[f64]) -> f64 {
    let total: f64 = x.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    -x.iter()
        .map(|v| v.abs() / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Pearson correlation between feature dimensions. A constant dimension
/// correlates 1 with itself and 0 with everything else.
pub fn correlation_matrix(x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, PipelineError> {
    let d = check_rows(x)?;
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let centered: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let norm: Vec<f64> = (0..d)
        .map(|j| centered.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt())
        .collect();
    let mut c = vec![vec![0.0; d]; d];
    for a in 0..d {
        c[a][a] = 1.0;
        for b in a + 1..d {
            if norm[a] == 0.0 || norm[b] == 0.0 {
                continue;
            }
            let dot: f64 = centered.iter().map(|r| r[a] * r[b]).sum();
            let v = (dot / (norm[a] * norm[b])).clamp(-1.0, 1.0);
            c[a][b] = v;
            c[b][a] = v;
        }
    }
    Ok(c)
}

pub fn analyze_features(
    net: &Network<f64>,
    bundle: &DatasetBundle,
    idx: &[usize],
    knowledge: Option<&EmbeddingStore>,
    rep: Representation,
) -> Result<Analysis, PipelineError> {
    let mut vectors = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let batch = build_batch(&net.config, bundle, chunk, knowledge)?;
        let pred = net.predict(&batch)?;
        let t = match rep {
            Representation::Chem => pred.chem_pooled,
            Representation::Mol => pred.mol_pooled,
            Representation::Fused => pred.fused_pooled,
        }
        .ok_or_else(|| {
            PipelineError::Config(format!(
                "variant {} has no `{}` representation",
                net.config.variant,
                rep.as_str()
            ))
        })?;
        let d = t.shape()[1];
        vectors.extend(t.data().chunks(d).map(<[f64]>::to_vec));
    }
    let pca = pca(&vectors)?;
    let correlation = correlation_matrix(&vectors)?;
    Ok(Analysis {
        representation: rep,
        ids: idx.iter().map(|&i| bundle.records[i].id.clone()).collect(),
        entropy: vectors.iter().map(|v| shannon_entropy(v)).collect(),
        vectors,
        pca,
        correlation,
    })
}

/// Writes `{rep}_pca.csv`, `{rep}_entropy.csv`, `{rep}_correlation.csv` and a
/// matching SVG for each.
pub fn write_analysis(dir: &Path, a: &Analysis) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let rep = a.representation.as_str();

    let mut w = csv::Writer::from_path(dir.join(format!("{rep}_pca.csv")))?;
    w.write_record(["id", "pc1", "pc2"])?;
    for (id, c) in a.ids.iter().zip(&a.pca.coords) {
        w.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(format!("{rep}_entropy.csv")))?;
    w.write_record(["id", "entropy"])?;
    for (id, h) in a.ids.iter().zip(&a.entropy) {
        w.write_record([id.clone(), h.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(format!("{rep}_correlation.csv")))?;
    for row in &a.correlation {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;

    fs::write(dir.join(format!("{rep}_pca.svg")), scatter_svg(a))?;
    fs::write(
        dir.join(format!("{rep}_entropy.svg")),
        histogram_svg(&a.entropy, rep),
    )?;
    fs::write(
        dir.join(format!("{rep}_correlation.svg")),
        heatmap_svg(&a.correlation, rep),
    )?;
    Ok(())
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 40.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
        W / 2.0
    )
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn scatter_svg(a: &Analysis) -> String {
    let rep = a.representation.as_str();
    let mut s = svg_open(&format!("{rep}: PCA"));
    let (x0, x1) = range(a.pca.coords.iter().map(|c| c[0]));
    let (y0, y1) = range(a.pca.coords.iter().map(|c| c[1]));
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    writeln!(
        s,
        "<rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - 2.0 * M,
        H - 2.0 * M
    )
    .unwrap();
    for c in &a.pca.coords {
        writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"#3465a4\" fill-opacity=\"0.6\"/>",
            px(c[0]),
            py(c[1])
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">PC1 ({:.1}%)</text>",
        W / 2.0,
        H - 10.0,
        100.0 * a.pca.explained[0]
    )
    .unwrap();
    writeln!(
        s,
        "<text x=\"12\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 12 {})\">PC2 ({:.1}%)</text>",
        H / 2.0,
        H / 2.0,
        100.0 * a.pca.explained[1]
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn histogram_svg(values: &[f64], rep: &str) -> String {
    const BINS: usize = 20;
    let mut s = svg_open(&format!("{rep}: Shannon entropy"));
    let (lo, hi) = range(values.iter().copied());
    let mut counts = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * BINS as f64).floor() as usize;
        counts[b.min(BINS - 1)] += 1;
    }
    let top = *counts.iter().max().unwrap_or(&1).max(&1) as f64;
    let bw = (W - 2.0 * M) / BINS as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = c as f64 / top * (H - 2.0 * M);
        writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#73a857\"/>",
            M + i as f64 * bw,
            H - M - h,
            bw - 1.0,
            h
        )
        .unwrap();
    }
    writeln!(s, "<text x=\"{M}\" y=\"{}\">{lo:.3}</text>", H - 10.0).unwrap();
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.3}</text>",
        W - M,
        H - 10.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn heatmap_svg(c: &[Vec<f64>], rep: &str) -> String {
    let mut s = svg_open(&format!("{rep}: feature correlation"));
    let d = c.len().max(1);
    let side = (H - 2.0 * M).min(W - 2.0 * M);
    let cell = side / d as f64;
    let x0 = (W - side) / 2.0;
    for (i, row) in c.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = v.clamp(-1.0, 1.0);
            let (r, g, b) = if t >= 0.0 {
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
            };
            writeln!(
                s,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"rgb({},{},{})\"/>",
                x0 + j as f64 * cell,
                M + i as f64 * cell,
                cell,
                cell,
                r as u8,
                g as u8,
                b as u8
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}
