//! Two-component PCA of a representation bank, exported as CSV and SVG.
//!
//! CSV columns: `member,category,category_name,kind,pc1,pc2`, one row per
//! bank member in canonical order (`kind` is `exemplar` or `variant`).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use super::{write_file, Result, RunConfig};
use crate::bank::{
    curate_descriptions, extended_categories, train_categorical_prompts, AttributeGrids, RepresentationBank,
    SyntheticEmbedder,
};

const PALETTE: [&str; 10] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Projects rows onto the two leading principal axes. Each axis is signed so
/// that its largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<_> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v = eig.eigenvectors.column(k).into_owned();
            let pivot = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
            if pivot < 0.0 {
                -v
            } else {
                v
            }
        })
        .collect();
    (0..n)
        .map(|i| {
            let r = x.row(i);
            let mut p = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                p[k] = r.iter().zip(axis.iter()).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg(bank: &RepresentationBank, coords: &[[f64; 2]], title: &str) -> String {
    let (w, h, m) = (560.0, 480.0, 40.0);
    let plot_w = w - m - 160.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in coords {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let span = |k: usize| if hi[k] - lo[k] > 1e-12 { hi[k] - lo[k] } else { 1.0 };
    let sx = |v: f64| m + (v - lo[0]) / span(0) * (plot_w - m);
    let sy = |v: f64| h - m - (v - lo[1]) / span(1) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{m}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        plot_w - m,
        h - 2.0 * m
    );
    for (member, c) in coords.iter().enumerate() {
        let cat = bank.category_of(member);
        let colour = PALETTE[cat % PALETTE.len()];
        let (x, y) = (sx(c[0]), sy(c[1]));
        if member == bank.exemplar_index(cat) {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="9" height="9" fill="{colour}" stroke="black" stroke-width="1.5"/>"#,
                x - 4.5,
                y - 4.5
            );
        } else {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{colour}" fill-opacity="0.8"/>"#);
        }
    }
    for cat in 0..bank.num_categories() {
        let y = m + 10.0 + 18.0 * cat as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{y:.1}" r="5" fill="{}"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            plot_w + 15.0,
            PALETTE[cat % PALETTE.len()],
            plot_w + 25.0,
            y + 4.0,
            escape(bank.category_name(cat))
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">square: exemplar</text>"#,
        plot_w + 15.0,
        m + 20.0 + 18.0 * bank.num_categories() as f64
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` and `<stem>.svg`; returns the PCA coordinates.
pub fn plot_bank(bank: &RepresentationBank, stem: &Path, title: &str) -> Result<Vec<[f64; 2]>> {
    let coords = pca_2d(bank.merged());
    let mut csv = String::from("member,category,category_name,kind,pc1,pc2\n");
    for (member, c) in coords.iter().enumerate() {
        let cat = bank.category_of(member);
        let kind = if member == bank.exemplar_index(cat) { "exemplar" } else { "variant" };
        let _ = writeln!(csv, "{member},{cat},{},{kind},{},{}", bank.category_name(cat), c[0], c[1]);
    }
    write_file(&stem.with_extension("csv"), csv)?;
    write_file(&stem.with_extension("svg"), svg(bank, &coords, title))?;
    Ok(coords)
}

/// Builds the extended-category bank from `config.bank` and writes
/// `bank_pre.{csv,svg}` (initial prompts) and `bank_post.{csv,svg}` (after
/// contrastive training) under `out`.
pub fn plot_bank_training(config: &RunConfig, out: &Path) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let b = &config.bank;
    let embedder = SyntheticEmbedder {
        dim: b.embed_dim,
        intra_spread: b.intra_spread,
        inter_separation: b.inter_separation,
        orthogonal_centroids: false,
        seed: b.seed,
    };
    let descriptions = curate_descriptions(&extended_categories(), &AttributeGrids::default(), b.variants, b.seed)?;
    let d = embedder.embed(&descriptions)?;
    let outcome = train_categorical_prompts(&d, &b.prompt)?;
    let pre = RepresentationBank::new(d.clone(), outcome.initial, b.prompt.seed)?;
    let post = RepresentationBank::new(d, outcome.prompts, b.prompt.seed)?;
    let a = plot_bank(&pre, &out.join("bank_pre"), "bank before prompt training")?;
    let z = plot_bank(&post, &out.join("bank_post"), "bank after prompt training")?;
    Ok((a, z))
}
