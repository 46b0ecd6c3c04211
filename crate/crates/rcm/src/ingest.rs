//! Multi-study data ingestion: load per-study observation matrices, select
//! features by pooled variance, center, and produce sufficient statistics;
//! plus posthoc conversion of a covariance estimate to a correlation matrix
//! with Ward-linkage module extraction.

use std::path::Path;

use ndarray::Array2;

use crate::error::{RcmError, Result};
use crate::likelihood::StudyData;

/// One named study: an n_i x p observation matrix.
#[derive(Debug, Clone)]
pub struct Study {
    pub name: String,
    pub data: Array2<f64>,
}

/// Studies over a shared, identically ordered feature vector.
#[derive(Debug, Clone)]
pub struct StudySet {
    pub studies: Vec<Study>,
    pub features: Vec<String>,
}

impl StudySet {
    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Module labels, the merge tree, and per-feature intra-module connectivity.
#[derive(Debug, Clone)]
pub struct ModuleAssignment {
    /// Per-feature module id in 0..n_modules, numbered by first occurrence.
    pub labels: Vec<usize>,
    /// Agglomeration steps (a, b, height); cluster ids >= p refer to the
    /// cluster created at step id - p.
    pub linkage: Vec<(usize, usize, f64)>,
    /// Sum of |R_ij| over same-module partners (self excluded).
    pub connectivity: Vec<f64>,
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => b'\t',
        _ => b',',
    }
}

fn parse_study(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path))
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| {
            let msg = format!("{}: {e}", path.display());
            match e.into_kind() {
                csv::ErrorKind::Io(io) => RcmError::Io(io),
                _ => RcmError::Parse(msg),
            }
        })?;
    let header: Vec<String> =
        rdr.headers()
            .map_err(|e| RcmError::Parse(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
    if header.is_empty() {
        return Err(RcmError::Schema(format!("{}: empty header", path.display())));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ri, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| RcmError::Parse(format!("{}: {e}", path.display())))?;
        if rec.len() != header.len() {
            return Err(RcmError::Schema(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                ri + 2,
                rec.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(header.len());
        for (ci, field) in rec.iter().enumerate() {
            if field.is_empty() || field.eq_ignore_ascii_case("na") || field == "NaN" {
                return Err(RcmError::MissingValue(format!(
                    "{}: row {}, column '{}'",
                    path.display(),
                    ri + 2,
                    header[ci]
                )));
            }
            let v: f64 = field.parse().map_err(|_| {
                RcmError::Parse(format!(
                    "{}: row {}, column '{}': not a number: '{field}'",
                    path.display(),
                    ri + 2,
                    header[ci]
                ))
            })?;
            if !v.is_finite() {
                return Err(RcmError::MissingValue(format!(
                    "{}: row {}, column '{}'",
                    path.display(),
                    ri + 2,
                    header[ci]
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(RcmError::Schema(format!("{}: no sample rows", path.display())));
    }
    let data = Array2::from_shape_fn((rows.len(), header.len()), |(i, j)| rows[i][j]);
    Ok((header, data))
}

/// Loads per-study CSV/TSV files (header = feature names, one sample per
/// row), intersects the feature sets, and reorders every study's columns
/// to the common order (first study's order restricted to the
/// intersection).
pub fn load_studies(paths: &[impl AsRef<Path>]) -> Result<StudySet> {
    if paths.is_empty() {
        return Err(RcmError::Schema("no input files given".into()));
    }
    let mut parsed = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let name = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("study")
            .to_string();
        let (features, data) = parse_study(p)?;
        parsed.push((name, features, data));
    }
    let common: Vec<String> = parsed[0]
        .1
        .iter()
        .filter(|f| parsed.iter().all(|(_, fs, _)| fs.contains(f)))
        .cloned()
        .collect();
    if common.is_empty() {
        return Err(RcmError::Schema("studies share no common features".into()));
    }
    let studies = parsed
        .into_iter()
        .map(|(name, features, data)| {
            let cols: Vec<usize> = common
                .iter()
                .map(|f| features.iter().position(|g| g == f).expect("intersection"))
                .collect();
            let reordered =
                Array2::from_shape_fn((data.nrows(), cols.len()), |(i, j)| data[(i, cols[j])]);
            Study { name, data: reordered }
        })
        .collect();
    Ok(StudySet { studies, features: common })
}

/// Pooled variance per feature with within-study centering:
/// sum_i sum_j (x_ij - mean_i)^2 / (n_total - k).
pub fn pooled_variances(s: &StudySet) -> Vec<f64> {
    let p = s.dim();
    let k = s.studies.len();
    let n_total: usize = s.studies.iter().map(|st| st.data.nrows()).sum();
    let denom = (n_total.saturating_sub(k)).max(1) as f64;
    let mut acc = vec![0.0; p];
    for st in &s.studies {
        let n = st.data.nrows() as f64;
        for j in 0..p {
            let mean = st.data.column(j).sum() / n;
            for r in 0..st.data.nrows() {
                acc[j] += (st.data[(r, j)] - mean).powi(2);
            }
        }
    }
    for v in acc.iter_mut() {
        *v /= denom;
    }
    acc
}

/// Keeps the `top` features with the largest pooled variance, ties broken
/// by original column order. Selected features stay in their original
/// relative order.
pub fn select_top_variance(s: &StudySet, top: usize) -> Result<StudySet> {
    let p = s.dim();
    if top == 0 || top > p {
        return Err(RcmError::domain(format!("top = {top} must be in 1..={p}")));
    }
    let vars = pooled_variances(s);
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| vars[b].partial_cmp(&vars[a]).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<usize> = idx.into_iter().take(top).collect();
    keep.sort_unstable();
    let features = keep.iter().map(|&j| s.features[j].clone()).collect();
    let studies = s
        .studies
        .iter()
        .map(|st| Study {
            name: st.name.clone(),
            data: Array2::from_shape_fn((st.data.nrows(), keep.len()), |(i, j)| {
                st.data[(i, keep[j])]
            }),
        })
        .collect();
    Ok(StudySet { studies, features })
}

/// Subtracts per-column means.
pub fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / col.len() as f64;
        col.mapv_inplace(|v| v - mean);
    }
    out
}

/// Per-study sufficient statistics (S_i = X_i^T X_i, n_i), optionally
/// centering each study's columns first.
pub fn to_study_data(s: &StudySet, center: bool) -> Result<Vec<StudyData>> {
    s.studies
        .iter()
        .map(|st| {
            let x = if center { center_columns(&st.data) } else { st.data.clone() };
            StudyData::from_observations(&x)
        })
        .collect()
}

/// Scales a covariance matrix to its correlation matrix:
/// R_ij = Sigma_ij / sqrt(Sigma_ii Sigma_jj), with an exactly unit diagonal.
pub fn to_correlation(sigma: &Array2<f64>) -> Result<Array2<f64>> {
    let p = sigma.nrows();
    if p != sigma.ncols() {
        return Err(RcmError::DimensionMismatch { expected: p, got: sigma.ncols() });
    }
    for i in 0..p {
        if !(sigma[(i, i)] > 0.0) {
            return Err(RcmError::domain(format!(
                "to_correlation: nonpositive diagonal entry at {i}"
            )));
        }
    }
    let mut r = Array2::<f64>::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            r[(i, j)] = if i == j {
                1.0
            } else {
                sigma[(i, j)] / (sigma[(i, i)] * sigma[(j, j)]).sqrt()
            };
        }
    }
    Ok(r)
}

/// Ward-linkage agglomerative clustering on d_ij = 1 - |R_ij| (Ward.D2:
/// the Lance-Williams recurrence runs on squared distances), cut to
/// `n_modules`, with intra-module connectivity from |R| edge weights.
pub fn cluster_modules(r: &Array2<f64>, n_modules: usize) -> Result<ModuleAssignment> {
    let p = r.nrows();
    if p != r.ncols() {
        return Err(RcmError::DimensionMismatch { expected: p, got: r.ncols() });
    }
    if n_modules == 0 || n_modules > p {
        return Err(RcmError::domain(format!("n_modules = {n_modules} must be in 1..={p}")));
    }

    // Squared distances between active clusters; usize::MAX marks inactive.
    let mut d2 = vec![vec![0.0_f64; p]; p];
    for i in 0..p {
        for j in 0..p {
            if i != j {
                let d = 1.0 - r[(i, j)].abs();
                d2[i][j] = d * d;
            }
        }
    }
    let mut active: Vec<bool> = vec![true; p];
    let mut size: Vec<f64> = vec![1.0; p];
    // cluster id currently occupying slot s (scipy-style ids: merged
    // clusters get ids p, p+1, ...)
    let mut slot_id: Vec<usize> = (0..p).collect();
    let mut members: Vec<Vec<usize>> = (0..p).map(|i| vec![i]).collect();
    let mut linkage = Vec::with_capacity(p - 1);
    let mut labels_at_cut: Option<Vec<usize>> = None;

    let mut remaining = p;
    while remaining > 1 {
        if remaining == n_modules {
            // capture the cut before continuing to the full tree
            let mut labels = vec![usize::MAX; p];
            let mut next = 0;
            let mut order: Vec<usize> = (0..p).filter(|&s| active[s]).collect();
            order.sort_by_key(|&s| *members[s].iter().min().unwrap());
            for s in order {
                for &m in &members[s] {
                    labels[m] = next;
                }
                next += 1;
            }
            labels_at_cut = Some(labels);
        }
        // closest active pair
        let mut best = (0, 0, f64::INFINITY);
        for i in 0..p {
            if !active[i] {
                continue;
            }
            for j in i + 1..p {
                if active[j] && d2[i][j] < best.2 {
                    best = (i, j, d2[i][j]);
                }
            }
        }
        let (a, b, d2ab) = best;
        linkage.push((slot_id[a].min(slot_id[b]), slot_id[a].max(slot_id[b]), d2ab.max(0.0).sqrt()));
        // Lance-Williams Ward update into slot a
        for k in 0..p {
            if !active[k] || k == a || k == b {
                continue;
            }
            let (na, nb, nk) = (size[a], size[b], size[k]);
            let upd = ((na + nk) * d2[a][k] + (nb + nk) * d2[b][k] - nk * d2ab)
                / (na + nb + nk);
            d2[a][k] = upd;
            d2[k][a] = upd;
        }
        size[a] += size[b];
        active[b] = false;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        slot_id[a] = p + linkage.len() - 1;
        remaining -= 1;
    }

    let labels = labels_at_cut.unwrap_or_else(|| {
        if n_modules == p {
            (0..p).collect()
        } else {
            vec![0; p] // n_modules == 1
        }
    });

    let mut connectivity = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            if i != j && labels[i] == labels[j] {
                connectivity[i] += r[(i, j)].abs();
            }
        }
    }
    Ok(ModuleAssignment { labels, linkage, connectivity })
}
