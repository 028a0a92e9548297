//! Correlation and attention maps of the encoder, written as CSV and 8-bit
//! PGM images.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backbone::GridFeatureSet;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Captioner;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Row-wise cosine similarity `[n, n]`.
pub fn cosine_similarity(x: &Tensor<f32>) -> Tensor<f32> {
    let n = x.rows();
    let norms: Vec<f64> = (0..n)
        .map(|r| x.row(r).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    Tensor::from_fn(n, n, |i, j| {
        let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| *a as f64 * *b as f64).sum();
        let d = norms[i] * norms[j];
        if d == 0.0 {
            0.0
        } else {
            (dot / d) as f32
        }
    })
}

/// Named matrices for one image: the gate `E`, position similarities of `M`
/// and `M_e`, and every attention head of every refining layer.
pub fn collect(model: &Captioner, store: &ParamStore<f32>, features: &GridFeatureSet) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut g = Graph::new(store);
    let (_, trace) = model.encode(&mut g, features)?;
    let mut maps = Vec::new();
    if let Some(e) = trace.gate {
        maps.push(("gate".to_string(), g.value(e).clone()));
    }
    if let Some(m) = trace.multi_sight {
        maps.push(("multi_sight_similarity".to_string(), cosine_similarity(g.value(m))));
    }
    if let Some(m) = trace.embedded {
        maps.push(("embedded_similarity".to_string(), cosine_similarity(g.value(m))));
    }
    for (l, layer) in trace.layers.iter().enumerate() {
        for (h, p) in layer.spatial.iter().enumerate() {
            maps.push((format!("layer{l}_spatial_head{h}"), g.value(*p).clone()));
        }
        for (h, p) in layer.channel.iter().enumerate() {
            maps.push((format!("layer{l}_channel_head{h}"), g.value(*p).clone()));
        }
    }
    Ok(maps)
}

pub fn to_csv(t: &Tensor<f32>) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Binary PGM (P5), min-max scaled to 0..=255; a constant matrix maps to 0.
pub fn to_pgm(t: &Tensor<f32>) -> Vec<u8> {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", t.cols(), t.rows()).into_bytes();
    out.extend(t.data().iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

#[derive(Serialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    csv: String,
    pgm: String,
}

/// Writes `<name>.csv` and `<name>.pgm` per map plus `manifest.json`;
/// returns every written path.
pub fn write(dir: impl AsRef<Path>, maps: &[(String, Tensor<f32>)]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    for (name, t) in maps {
        let csv = format!("{name}.csv");
        let pgm = format!("{name}.pgm");
        put(&csv, to_csv(t).as_bytes())?;
        put(&pgm, &to_pgm(t))?;
        entries.push(Entry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            csv,
            pgm,
        });
    }
    let manifest = serde_json::to_string_pretty(&entries).expect("manifest serializes") + "\n";
    put("manifest.json", manifest.as_bytes())?;
    Ok(written)
}
