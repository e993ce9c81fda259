use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::ModalityAttention;
use crate::error::{Error, Result};
use crate::volume::N_MODALITIES;

/// Student-t CDF through the regularized incomplete beta function.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * t_two_sided(t, df);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(0.5 * df, 0.5, df / (df + t * t))
}

pub fn f_cdf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 0.0;
    }
    if f.is_infinite() {
        return 1.0;
    }
    beta_reg(0.5 * d1, 0.5 * d2, d1 * f / (d1 * f + d2))
}

/// Upper tail `P(F > f)`, evaluated directly so small p-values keep their
/// precision.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_reg(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
fn sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<Anova> {
    if groups.len() < 2 {
        return Err(Error::invalid("groups", "ANOVA needs at least two groups"));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::invalid("groups", "every group needs at least two values"));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = mean(g);
        ss_between += g.len() as f64 * (m - grand) * (m - grand);
        ss_within += g.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let (df_b, df_w) = (groups.len() - 1, n - groups.len());
    let (f, p) = if ss_within == 0.0 {
        if ss_between == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        }
    } else {
        let f = (ss_between / df_b as f64) / (ss_within / df_w as f64);
        (f, f_sf(f, df_b as f64, df_w as f64))
    };
    Ok(Anova {
        f,
        df_between: df_b,
        df_within: df_w,
        p,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
}

fn diffs(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("need at least two pairs".to_string()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if sd(&d) == 0.0 {
        return Err(Error::Degenerate("differences have zero variance".to_string()));
    }
    Ok(d)
}

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    let d = diffs(a, b)?;
    let n = d.len();
    let m = mean(&d);
    let t = m / (sd(&d) / (n as f64).sqrt());
    Ok(PairedTest {
        mean_diff: m,
        t,
        df: n - 1,
        p: t_two_sided(t, (n - 1) as f64),
    })
}

pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m.max(1) as f64).min(1.0)
}

/// `mean(a − b) / sd(a − b)`.
pub fn cohens_d_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = diffs(a, b)?;
    Ok(mean(&d) / sd(&d))
}

/// `None` when either sample has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub test: PairedTest,
    pub cohens_d: f64,
}

/// Paired test of the last layer's T2/FLAIR preference against the first
/// layer's, across cases.
pub fn trend_test(cases: &[ModalityAttention]) -> Result<Trend> {
    let layers = common_layers(cases)?;
    if layers < 2 {
        return Err(Error::invalid("layers", "a trend needs at least two layers"));
    }
    let last: Vec<f64> = cases.iter().map(|c| c.delta(layers - 1)).collect();
    let first: Vec<f64> = cases.iter().map(|c| c.delta(0)).collect();
    let no_trend = |e| match e {
        Error::Degenerate(_) => Error::Degenerate("no trend detectable".to_string()),
        other => other,
    };
    Ok(Trend {
        test: paired_ttest(&last, &first).map_err(no_trend)?,
        cohens_d: cohens_d_paired(&last, &first).map_err(no_trend)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelations {
    /// Pearson r between layer index and delta, `None` for flat cases.
    pub per_case: Vec<Option<f64>>,
    pub mean_r: Option<f64>,
    pub excluded: usize,
}

pub fn layer_correlations(cases: &[ModalityAttention]) -> Result<LayerCorrelations> {
    let layers = common_layers(cases)?;
    let idx: Vec<f64> = (0..layers).map(|l| l as f64).collect();
    let per_case: Vec<Option<f64>> = cases
        .iter()
        .map(|c| pearson(&idx, &(0..layers).map(|l| c.delta(l)).collect::<Vec<_>>()))
        .collect();
    let valid: Vec<f64> = per_case.iter().flatten().copied().collect();
    Ok(LayerCorrelations {
        excluded: per_case.len() - valid.len(),
        mean_r: (!valid.is_empty()).then(|| mean(&valid)),
        per_case,
    })
}

fn common_layers(cases: &[ModalityAttention]) -> Result<usize> {
    let first = cases
        .first()
        .ok_or_else(|| Error::invalid("cases", "no cases to analyse"))?;
    let l = first.layers.len();
    if cases.iter().any(|c| c.layers.len() != l) {
        return Err(Error::shape("cases disagree on the number of layers".to_string()));
    }
    Ok(l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Mean attention per modality over cases.
    pub modality_means: [f64; N_MODALITIES],
    pub anova: Option<Anova>,
    /// T2+FLAIR against T1+T1ce.
    pub contrast: Option<PairedTest>,
    pub contrast_p_bonferroni: Option<f64>,
    pub contrast_cohens_d: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub n_cases: usize,
    /// Multiplicity used for the Bonferroni correction of the per-layer
    /// contrasts.
    pub bonferroni_m: usize,
    pub layers: Vec<LayerStats>,
    pub trend: Option<Trend>,
    /// Why `trend` is missing, if it is.
    pub trend_error: Option<String>,
    pub correlations: LayerCorrelations,
}

/// Runs the whole protocol on case-level modality attention. Tests that are
/// undefined for the data (for example zero-variance differences) are
/// reported as missing rather than failing the report.
pub fn stat_report(cases: &[ModalityAttention]) -> Result<StatReport> {
    let layers = common_layers(cases)?;
    let m = layers;
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let groups: Vec<Vec<f64>> = (0..N_MODALITIES)
            .map(|k| cases.iter().map(|c| c.layers[l][k]).collect())
            .collect();
        let hi: Vec<f64> = cases.iter().map(|c| 0.5 * (c.layers[l][2] + c.layers[l][3])).collect();
        let lo: Vec<f64> = cases.iter().map(|c| 0.5 * (c.layers[l][0] + c.layers[l][1])).collect();
        let contrast = paired_ttest(&hi, &lo).ok();
        out.push(LayerStats {
            layer: l,
            modality_means: std::array::from_fn(|k| mean(&groups[k])),
            anova: one_way_anova(&groups).ok(),
            contrast,
            contrast_p_bonferroni: contrast.map(|c| bonferroni(c.p, m)),
            contrast_cohens_d: cohens_d_paired(&hi, &lo).ok(),
        });
    }
    let (trend, trend_error) = match trend_test(cases) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(StatReport {
        n_cases: cases.len(),
        bonferroni_m: m,
        layers: out,
        trend,
        trend_error,
        correlations: layer_correlations(cases)?,
    })
}
