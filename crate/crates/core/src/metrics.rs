//! Correlation histograms, depth profiles, rank and parameter reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_two_stream, Architecture, BackboneConfig, MultimodalModel};
use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::tensor::Tensor;

pub const BIN_COUNT: usize = 10;
pub const MIN_VALID_PAIRS: usize = 30;
pub const CSV_SCHEMA_VERSION: u32 = 1;
/// Samples pushed through the model at once during analysis.
const ANALYSIS_CHUNK: usize = 32;

/// `Some(ρ)` for two equal-length series, `None` when either has zero variance.
///
/// Single pass over the data with running co-moments.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Statistic(format!(
            "correlation needs two equal series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (n, (&x, &y)) in a.iter().zip(b).enumerate() {
        let k = (n + 1) as f64;
        let dx = x - ma;
        let dy = y - mb;
        ma += dx / k;
        mb += dy / k;
        saa += dx * (x - ma);
        sbb += dy * (y - mb);
        sab += dx * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// `|ρ|`; zero-variance input is reported as an undefined statistic.
pub fn pearson_abs(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(a, b)?
        .map(f64::abs)
        .ok_or_else(|| Error::Statistic("correlation undefined: zero variance".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSource {
    /// Shared kernel branch of the split forward.
    SharedPath,
    /// Adaptor branch of the split forward.
    AdaptorPath,
    /// Full per-modality pre-activation (the merged path; independent streams for two-stream models).
    TwoStream,
    /// The paired input rasters themselves.
    RawInput,
}

impl BiasSource {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasSource::SharedPath => "shared_path",
            BiasSource::AdaptorPath => "adaptor_path",
            BiasSource::TwoStream => "two_stream",
            BiasSource::RawInput => "raw_input",
        }
    }
}

impl std::str::FromStr for BiasSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "shared_path" => BiasSource::SharedPath,
            "adaptor_path" => BiasSource::AdaptorPath,
            "two_stream" => BiasSource::TwoStream,
            "raw_input" => BiasSource::RawInput,
            _ => return Err(Error::InvalidArgument(format!("unknown bias source {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasHistogram {
    pub tap: String,
    pub source: BiasSource,
    /// Bin `j` covers `[j/10, (j+1)/10)`; the last bin also holds 1.0.
    pub proportions: [f64; BIN_COUNT],
    pub counts: [usize; BIN_COUNT],
    pub valid_pairs: usize,
    pub excluded_pairs: usize,
    pub mean_abs_rho: f64,
}

impl BiasHistogram {
    pub fn total_pairs(&self) -> usize {
        self.valid_pairs + self.excluded_pairs
    }

    pub fn top_bin_mass(&self) -> f64 {
        self.proportions[BIN_COUNT - 1]
    }
}

pub fn bin_index(rho_abs: f64) -> usize {
    ((rho_abs * BIN_COUNT as f64).floor() as usize).min(BIN_COUNT - 1)
}

/// Aggregates per-pair `|ρ|` values (`None` = undefined) into a histogram.
pub fn histogram_from(tap: &str, source: BiasSource, values: &[Option<f64>]) -> Result<BiasHistogram> {
    let mut counts = [0usize; BIN_COUNT];
    let mut sum = 0.0;
    let mut valid = 0;
    for v in values.iter().flatten() {
        counts[bin_index(*v)] += 1;
        sum += v;
        valid += 1;
    }
    if valid < MIN_VALID_PAIRS {
        return Err(Error::Statistic(format!(
            "tap {tap}: only {valid} valid channel pairs (need {MIN_VALID_PAIRS})"
        )));
    }
    let mut proportions = [0.0; BIN_COUNT];
    for (p, &c) in proportions.iter_mut().zip(&counts) {
        *p = c as f64 / valid as f64;
    }
    Ok(BiasHistogram {
        tap: tap.to_string(),
        source,
        proportions,
        counts,
        valid_pairs: valid,
        excluded_pairs: values.len() - valid,
        mean_abs_rho: sum / valid as f64,
    })
}

/// Per-sample, per-channel `|ρ|` between two `[N, C, H, W]` feature tensors.
pub fn channel_correlations(a: &Tensor, b: &Tensor) -> Result<Vec<Option<f64>>> {
    if a.shape() != b.shape() || a.shape().len() != 4 {
        return Err(Error::shape(
            "channel_correlations",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = a.shape()[2] * a.shape()[3];
    a.data()
        .chunks(plane)
        .zip(b.data().chunks(plane))
        .map(|(x, y)| Ok(pearson(x, y)?.map(f64::abs)))
        .collect()
}

/// Name of the pseudo-tap used for raw inputs.
pub const RAW_TAP: &str = "input";

/// Paired features at every tap for one chunk of samples.
fn tap_pairs(model: &MultimodalModel, data: &Dataset, idx: &[usize], source: BiasSource) -> Result<Vec<(String, Tensor, Tensor)>> {
    let batch = data.batch(idx);
    if source == BiasSource::RawInput {
        let [v, t]: [Tensor; 2] = batch.inputs.try_into().expect("two modalities");
        return Ok(vec![(RAW_TAP.to_string(), v, t)]);
    }
    if model.input_modalities() < 2 {
        return Err(Error::InvalidArgument(
            "bias analysis needs a model that consumes both modalities".into(),
        ));
    }
    let a = model.forward_split(&batch.inputs[0], 0)?;
    let b = model.forward_split(&batch.inputs[1], 1)?;
    let pick = |l: &crate::backbone::SplitLayer| match source {
        BiasSource::SharedPath => l.shared.clone(),
        BiasSource::AdaptorPath => l.adaptor.clone(),
        _ => l.merged.clone(),
    };
    Ok(a
        .iter()
        .zip(&b)
        .filter_map(|(la, lb)| la.tap.as_ref().map(|t| (t.clone(), pick(la), pick(lb))))
        .collect())
}

/// One histogram per tap (or a single `input` histogram for raw inputs) over `samples`.
pub fn bias_histograms(model: &MultimodalModel, data: &Dataset, samples: &[usize], source: BiasSource) -> Result<Vec<BiasHistogram>> {
    let mut per_tap: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for chunk in samples.chunks(ANALYSIS_CHUNK) {
        for (t, (name, a, b)) in tap_pairs(model, data, chunk, source)?.into_iter().enumerate() {
            if per_tap.len() <= t {
                per_tap.push((name, Vec::new()));
            }
            per_tap[t].1.extend(channel_correlations(&a, &b)?);
        }
    }
    per_tap.iter().map(|(name, v)| histogram_from(name, source, v)).collect()
}

pub fn bias_histogram(model: &MultimodalModel, data: &Dataset, samples: &[usize], tap: &str, source: BiasSource) -> Result<BiasHistogram> {
    let all = bias_histograms(model, data, samples, source)?;
    all.into_iter()
        .find(|h| source == BiasSource::RawInput || h.tap == tap)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown tap {tap:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthPoint {
    pub tap: String,
    /// `1 − mean |ρ|`.
    pub heterogeneity: f64,
    pub mean_abs_rho: f64,
    pub valid_pairs: usize,
}

/// Heterogeneity proxy per tap from the full per-modality features.
pub fn depth_profile(model: &MultimodalModel, data: &Dataset, samples: &[usize]) -> Result<Vec<DepthPoint>> {
    Ok(bias_histograms(model, data, samples, BiasSource::TwoStream)?
        .into_iter()
        .map(|h| DepthPoint {
            tap: h.tap,
            heterogeneity: 1.0 - h.mean_abs_rho,
            mean_abs_rho: h.mean_abs_rho,
            valid_pairs: h.valid_pairs,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockRank {
    pub block: usize,
    pub adaptors: usize,
    pub average_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    /// In data-flow order.
    pub blocks: Vec<BlockRank>,
    pub global_average: f64,
    pub r_init: usize,
    pub r_target: usize,
}

pub fn rank_report(model: &MultimodalModel, r_init: usize, r_target: usize) -> RankReport {
    let blocks_of = model.adaptor_blocks();
    let ranks: Vec<usize> = model.adaptors().map(|a| a.active_rank()).collect();
    let nb = model.config().blocks.len();
    let mut blocks = Vec::with_capacity(nb);
    for b in 0..nb {
        let r: Vec<usize> = blocks_of.iter().zip(&ranks).filter(|(k, _)| **k == b).map(|(_, r)| *r).collect();
        if r.is_empty() {
            continue;
        }
        blocks.push(BlockRank {
            block: b,
            adaptors: r.len(),
            average_rank: r.iter().sum::<usize>() as f64 / r.len() as f64,
        });
    }
    let global_average = if ranks.is_empty() {
        0.0
    } else {
        ranks.iter().sum::<usize>() as f64 / ranks.len() as f64
    };
    RankReport {
        blocks,
        global_average,
        r_init,
        r_target,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub architecture: Architecture,
    pub total_params: usize,
    pub unimodal_params: usize,
    pub increment_params: usize,
    pub increment_percent: f64,
    pub adaptor_params: usize,
    /// Total predicted from layer geometry and ranks alone.
    pub closed_form_total: usize,
}

impl ParamReport {
    pub fn storage_matches_closed_form(&self) -> bool {
        self.total_params == self.closed_form_total
    }

    /// `lma: +38.76% (7128) over unimodal 18388`.
    pub fn increment_line(&self) -> String {
        format!(
            "{}: +{:.2}% ({}) over unimodal {}",
            arch_name(self.architecture),
            self.increment_percent,
            self.increment_params,
            self.unimodal_params
        )
    }
}

pub fn arch_name(a: Architecture) -> &'static str {
    match a {
        Architecture::Lma => "lma",
        Architecture::TwoStream => "two_stream",
        Architecture::Unimodal => "unimodal",
    }
}

pub fn param_report(model: &MultimodalModel) -> ParamReport {
    let unimodal = model.unimodal_param_count();
    let total = model.total_param_count();
    let cf = model.closed_form_counts();
    ParamReport {
        architecture: model.architecture(),
        total_params: total,
        unimodal_params: unimodal,
        increment_params: total - unimodal,
        increment_percent: 100.0 * (total - unimodal) as f64 / unimodal as f64,
        adaptor_params: model.adaptor_param_count(),
        closed_form_total: cf.shared + cf.adaptors,
    }
}

/// Reports for the unimodal, LMA (at `config.rank`) and two-stream builds of `config`.
pub fn param_reports_for(config: &BackboneConfig) -> Result<Vec<ParamReport>> {
    Ok(vec![
        param_report(&MultimodalModel::build_unimodal(config, 0)?),
        param_report(&MultimodalModel::build_lma(config, 0)?),
        param_report(&build_two_stream(config, 0)?),
    ])
}

fn csv_preamble(header: &str) -> String {
    format!("schema_version,{CSV_SCHEMA_VERSION}\n{header}\n")
}

/// One row per (tap, source, bin).
pub fn histograms_csv(hists: &[BiasHistogram]) -> String {
    let mut s = csv_preamble("tap,source,bin_lo,bin_hi,count,proportion,valid_pairs,excluded_pairs,mean_abs_rho");
    for h in hists {
        for j in 0..BIN_COUNT {
            let _ = writeln!(
                s,
                "{},{},{:.1},{:.1},{},{:.6},{},{},{:.6}",
                h.tap,
                h.source.as_str(),
                j as f64 / 10.0,
                (j + 1) as f64 / 10.0,
                h.counts[j],
                h.proportions[j],
                h.valid_pairs,
                h.excluded_pairs,
                h.mean_abs_rho
            );
        }
    }
    s
}

pub fn depth_profile_csv(points: &[DepthPoint]) -> String {
    let mut s = csv_preamble("tap,heterogeneity,mean_abs_rho,valid_pairs");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6},{}", p.tap, p.heterogeneity, p.mean_abs_rho, p.valid_pairs);
    }
    s
}

/// One row per block.
pub fn rank_report_csv(r: &RankReport) -> String {
    let mut s = csv_preamble("block,adaptors,average_rank,r_init,r_target");
    for b in &r.blocks {
        let _ = writeln!(s, "{},{},{:.4},{},{}", b.block, b.adaptors, b.average_rank, r.r_init, r.r_target);
    }
    s
}

/// One row per model.
pub fn param_reports_csv(reports: &[ParamReport]) -> String {
    let mut s = csv_preamble(
        "architecture,total_params,unimodal_params,increment_params,increment_percent,adaptor_params,closed_form_total",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{},{}",
            arch_name(r.architecture),
            r.total_params,
            r.unimodal_params,
            r.increment_params,
            r.increment_percent,
            r.adaptor_params,
            r.closed_form_total
        );
    }
    s
}
