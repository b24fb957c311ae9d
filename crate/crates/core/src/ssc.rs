//! Selective-convolution preprocessing layer and its filter bank.
//!
//! The selective pipeline, end to end differentiable:
//!
//! 1. edge extraction: a fixed high-pass filter convolves the input, channel
//!    responses summed into one gray-scale map, magnitude taken (Sobel pairs
//!    combine as sqrt(gx^2 + gy^2));
//! 2. edge selection: a steep sigmoid centered at the threshold `t_k` maps
//!    weak edges toward 0 and strong edges toward 1;
//! 3. masking: the selection mask multiplies every input channel, so only
//!    pixels near strong edges survive.
//!
//! The conventional configuration instead feeds the raw per-channel filter
//! response to the network.
//!
//! Edge maps are normalized by the L1 mass of the positive kernel
//! coefficients (times the channel count), so thresholds in [0,1] are
//! comparable across filters when inputs live in [0,1].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::{Graph, Kernel, PadMode, Tensor, Var};

/// Offset inside the Sobel magnitude sqrt, keeping its derivative finite
/// where both axis responses vanish.
pub const SOBEL_MAGNITUDE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterId {
    Laplacian4,
    Laplacian8,
    SobelX,
    SobelY,
    SobelPair,
    Identity,
}

impl FilterId {
    pub const ALL: [FilterId; 6] = [
        FilterId::Laplacian4,
        FilterId::Laplacian8,
        FilterId::SobelX,
        FilterId::SobelY,
        FilterId::SobelPair,
        FilterId::Identity,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FilterId::Laplacian4 => "laplacian4",
            FilterId::Laplacian8 => "laplacian8",
            FilterId::SobelX => "sobel_x",
            FilterId::SobelY => "sobel_y",
            FilterId::SobelPair => "sobel_pair",
            FilterId::Identity => "identity",
        }
    }
}

impl fmt::Display for FilterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterId::ALL
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownFilter(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Conventional,
    Selective,
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::Conventional => "conventional",
            FilterMode::Selective => "selective",
        })
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(FilterMode::Conventional),
            "selective" => Ok(FilterMode::Selective),
            other => Err(Error::InvalidConfig(format!(
                "unknown filter mode '{other}' (expected conventional|selective)"
            ))),
        }
    }
}

/// Parameters of the preprocessing layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SscConfig {
    pub filter: FilterId,
    /// Edge-strength threshold in [0,1]; edges weaker than this are
    /// suppressed.
    pub threshold_tk: f64,
    /// Sigmoid sharpness. Large values push the mask toward a 0/1
    /// binarization while staying differentiable.
    pub steepness_k: f64,
    pub mode: FilterMode,
}

impl SscConfig {
    /// Operating point used across experiments: threshold 0.11, steepness
    /// 1000, selective mode.
    pub fn selective(filter: FilterId) -> Self {
        SscConfig {
            filter,
            threshold_tk: 0.11,
            steepness_k: 1000.0,
            mode: FilterMode::Selective,
        }
    }

    pub fn conventional(filter: FilterId) -> Self {
        SscConfig {
            filter,
            threshold_tk: 0.11,
            steepness_k: 1000.0,
            mode: FilterMode::Conventional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold_tk) {
            return Err(Error::InvalidConfig(format!(
                "threshold_tk must be in [0,1], got {}",
                self.threshold_tk
            )));
        }
        if !(self.steepness_k > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "steepness_k must be > 0, got {}",
                self.steepness_k
            )));
        }
        Ok(())
    }
}

/// Gray-scale edge-strength map, shape [N,1,H,W], one channel regardless of
/// how many channels the input has.
#[derive(Debug, Clone, Copy)]
pub struct EdgeMap(Var);

impl EdgeMap {
    pub fn var(&self) -> Var {
        self.0
    }

    /// Wrap an existing [N,1,H,W] graph node as an edge map.
    pub fn from_var<T: Scalar>(g: &Graph<T>, v: Var) -> Result<Self> {
        let s = g.shape_of(v);
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(
                "edge_map",
                format!("expected [N,1,H,W], got {:?}", s),
            ));
        }
        Ok(EdgeMap(v))
    }
}

/// Soft 0/1 edge-selection mask, shape [N,1,H,W], entries in (0,1).
#[derive(Debug, Clone, Copy)]
pub struct SelectionMask(Var);

impl SelectionMask {
    pub fn var(&self) -> Var {
        self.0
    }
}

const LAPLACIAN4: [f64; 9] = [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0];
const LAPLACIAN8: [f64; 9] = [-1.0, -1.0, -1.0, -1.0, 8.0, -1.0, -1.0, -1.0, -1.0];
const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
const IDENTITY: [f64; 1] = [1.0];

fn coeffs(id: FilterId) -> &'static [f64] {
    match id {
        FilterId::Laplacian4 => &LAPLACIAN4,
        FilterId::Laplacian8 => &LAPLACIAN8,
        FilterId::SobelX => &SOBEL_X,
        FilterId::SobelY => &SOBEL_Y,
        FilterId::SobelPair => unreachable!("sobel_pair is a kernel pair"),
        FilterId::Identity => &IDENTITY,
    }
}

fn side(id: FilterId) -> usize {
    match id {
        FilterId::Identity => 1,
        _ => 3,
    }
}

/// Sum of the positive coefficients of one base kernel; the edge-map
/// normalizer for a C-channel input is `positive_l1 * C`.
pub fn positive_l1(id: FilterId) -> f64 {
    let cs: &[f64] = match id {
        // Both pair members share the same positive mass.
        FilterId::SobelPair => &SOBEL_X,
        other => coeffs(other),
    };
    cs.iter().filter(|&&c| c > 0.0).sum()
}

/// The named single-channel kernel prototypes, each shaped
/// [filters, 1, side, side] (the Sobel pair stacks its two members).
pub fn filter_bank<T: Scalar>() -> Vec<(FilterId, Kernel<T>)> {
    FilterId::ALL
        .iter()
        .map(|&id| (id, base_kernel(id)))
        .collect()
}

pub fn base_kernel<T: Scalar>(id: FilterId) -> Kernel<T> {
    let s = side(id);
    let data: Vec<T> = match id {
        FilterId::SobelPair => SOBEL_X
            .iter()
            .chain(SOBEL_Y.iter())
            .map(|&c| T::from_f64_lossy(c))
            .collect(),
        other => coeffs(other).iter().map(|&c| T::from_f64_lossy(c)).collect(),
    };
    let out = if id == FilterId::SobelPair { 2 } else { 1 };
    Kernel::from_coeffs(out, 1, s, s, data).expect("bank kernels are well-formed")
}

/// Kernel that sums one base filter's response over `channels` input
/// channels: shape [1, C, s, s] with the same coefficients in every slice.
fn summing_kernel<T: Scalar>(base: &'static [f64], s: usize, channels: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(channels * s * s);
    for _ in 0..channels {
        data.extend(base.iter().map(|&c| T::from_f64_lossy(c)));
    }
    Tensor::new(vec![1, channels, s, s], data).expect("kernel construction")
}

/// Depthwise kernel [C, C, s, s]: channel c of the output is channel c of
/// the input convolved with the base filter.
fn depthwise_kernel<T: Scalar>(base: &'static [f64], s: usize, channels: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); channels * channels * s * s];
    for c in 0..channels {
        let off = (c * channels + c) * s * s;
        for (i, &v) in base.iter().enumerate() {
            data[off + i] = T::from_f64_lossy(v);
        }
    }
    Tensor::new(vec![channels, channels, s, s], data).expect("kernel construction")
}

fn input_channels<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<usize> {
    let s = g.shape_of(x);
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected [N,C,H,W], got {:?}", s)));
    }
    Ok(s[1])
}

fn same_padding(id: FilterId) -> usize {
    // 3x3 kernels keep spatial size with pad 1; the 1x1 identity with pad 0.
    match id {
        FilterId::Identity => 0,
        _ => 1,
    }
}

/// Conventional configuration: the raw per-channel filter response, spatial
/// size preserved. The Sobel pair produces the per-channel gradient
/// magnitude so the output keeps C channels.
pub fn conventional_filter<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &SscConfig) -> Result<Var> {
    cfg.validate()?;
    if cfg.mode != FilterMode::Conventional {
        return Err(Error::InvalidConfig(
            "conventional_filter requires mode=conventional".into(),
        ));
    }
    let c = input_channels(g, x, "conventional_filter")?;
    let pad = same_padding(cfg.filter);
    match cfg.filter {
        FilterId::SobelPair => {
            let wx = g.constant(depthwise_kernel(&SOBEL_X, 3, c));
            let wy = g.constant(depthwise_kernel(&SOBEL_Y, 3, c));
            let gx = g.conv2d(x, wx, 1, pad)?;
            let gy = g.conv2d(x, wy, 1, pad)?;
            let gx2 = g.square(gx);
            let gy2 = g.square(gy);
            let sum = g.add(gx2, gy2)?;
            g.sqrt_eps(sum, T::from_f64_lossy(SOBEL_MAGNITUDE_EPS))
        }
        id => {
            let w = g.constant(depthwise_kernel(coeffs(id), side(id), c));
            g.conv2d(x, w, 1, pad)
        }
    }
}

/// Edge-strength map: channel responses summed into one gray-scale map,
/// magnitude taken, normalized by the positive kernel mass so strengths are
/// comparable with thresholds in [0,1].
///
/// Borders are padded by edge replication rather than zeros: a constant
/// image has no edges anywhere, including at the image boundary.
pub fn edge_map<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &SscConfig) -> Result<EdgeMap> {
    cfg.validate()?;
    let c = input_channels(g, x, "edge_map")?;
    if c != 1 && c != 3 {
        return Err(Error::shape(
            "edge_map",
            format!("supported channel counts are 1 and 3, got {c}"),
        ));
    }
    let pad = same_padding(cfg.filter);
    let mode = PadMode::Replicate;
    let norm = T::from_f64_lossy(1.0 / (positive_l1(cfg.filter) * c as f64));
    let e = match cfg.filter {
        FilterId::SobelPair => {
            let wx = g.constant(summing_kernel(&SOBEL_X, 3, c));
            let wy = g.constant(summing_kernel(&SOBEL_Y, 3, c));
            let gx = g.conv2d_padded(x, wx, 1, pad, mode)?;
            let gy = g.conv2d_padded(x, wy, 1, pad, mode)?;
            let gxn = g.mul_scalar(gx, norm);
            let gyn = g.mul_scalar(gy, norm);
            let gx2 = g.square(gxn);
            let gy2 = g.square(gyn);
            let sum = g.add(gx2, gy2)?;
            g.sqrt_eps(sum, T::from_f64_lossy(SOBEL_MAGNITUDE_EPS))?
        }
        id => {
            let w = g.constant(summing_kernel(coeffs(id), side(id), c));
            let r = g.conv2d_padded(x, w, 1, pad, mode)?;
            let a = g.abs(r);
            g.mul_scalar(a, norm)
        }
    };
    Ok(EdgeMap(e))
}

/// Soft thresholding: sigmoid(steepness * (E - t_k)), monotone in E, equal
/// to 0.5 exactly where E hits the threshold.
pub fn select_edges<T: Scalar>(
    g: &mut Graph<T>,
    e: &EdgeMap,
    cfg: &SscConfig,
) -> Result<SelectionMask> {
    cfg.validate()?;
    let shifted = g.add_scalar(e.var(), -T::from_f64_lossy(cfg.threshold_tk));
    let scaled = g.mul_scalar(shifted, T::from_f64_lossy(cfg.steepness_k));
    Ok(SelectionMask(g.sigmoid(scaled)))
}

/// The full selective pipeline: x * broadcast(select_edges(edge_map(x))).
/// Differentiable end to end, so gradient attacks see through the defense.
pub fn ssc_forward<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &SscConfig) -> Result<Var> {
    if cfg.mode != FilterMode::Selective {
        return Err(Error::InvalidConfig(
            "ssc_forward requires mode=selective".into(),
        ));
    }
    let e = edge_map(g, x, cfg)?;
    let s = select_edges(g, &e, cfg)?;
    g.mul(x, s.var())
}

/// Apply the configured preprocessing (selective or conventional).
pub fn preprocess<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &SscConfig) -> Result<Var> {
    match cfg.mode {
        FilterMode::Selective => ssc_forward(g, x, cfg),
        FilterMode::Conventional => conventional_filter(g, x, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_has_six_unique_entries() {
        let bank = filter_bank::<f64>();
        assert!(bank.len() >= 6);
        let mut ids: Vec<&str> = bank.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), bank.len());
    }

    #[test]
    fn high_pass_kernels_sum_to_zero() {
        for (id, kernel) in filter_bank::<f64>() {
            if id == FilterId::Identity {
                continue;
            }
            // Sobel pair members sum to zero individually, so check each
            // output slice on its own.
            let per = kernel.in_channels * kernel.height * kernel.width;
            for o in 0..kernel.out_channels {
                let s: f64 = kernel.weights.data()[o * per..(o + 1) * per].iter().sum();
                assert_eq!(s, 0.0, "{id} slice {o} does not sum to 0");
            }
        }
    }

    #[test]
    fn filter_id_round_trips_through_strings() {
        for id in FilterId::ALL {
            assert_eq!(id.as_str().parse::<FilterId>().unwrap(), id);
        }
        assert!(matches!(
            "gaussian".parse::<FilterId>(),
            Err(Error::UnknownFilter(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SscConfig::selective(FilterId::SobelPair);
        assert!(cfg.validate().is_ok());
        cfg.threshold_tk = 1.5;
        assert!(cfg.validate().is_err());
        cfg.threshold_tk = 0.11;
        cfg.steepness_k = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn select_edges_midpoint_and_saturation() {
        let cfg = SscConfig::selective(FilterId::Laplacian8);
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![0.11, 0.2, 0.05]).unwrap());
        let e = EdgeMap::from_var(&g, e).unwrap();
        let s = select_edges(&mut g, &e, &cfg).unwrap();
        let v = g.value(s.var()).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_zero_edges_everywhere() {
        let cfg = SscConfig::selective(FilterId::Laplacian8);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 5, 5], 0.6).unwrap());
        let e = edge_map(&mut g, x, &cfg).unwrap();
        let v = g.value(e.var());
        assert_eq!(v.shape(), &[1, 1, 5, 5]);
        // Cancellation leaves only summation rounding, ~1e-16.
        assert!(v.data().iter().all(|&s| s.abs() < 1e-15));
    }

    #[test]
    fn conventional_identity_is_identity() {
        let cfg = SscConfig::conventional(FilterId::Identity);
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::new(vec![1, 3, 2, 2], (0..12).map(|i| i as f64 / 12.0).collect()).unwrap(),
        );
        let y = conventional_filter(&mut g, x, &cfg).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn mode_is_enforced() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let sel = SscConfig::selective(FilterId::SobelPair);
        let conv = SscConfig::conventional(FilterId::SobelPair);
        assert!(conventional_filter(&mut g, x, &sel).is_err());
        assert!(ssc_forward(&mut g, x, &conv).is_err());
    }

    #[test]
    fn edge_map_rejects_two_channels() {
        let cfg = SscConfig::selective(FilterId::SobelPair);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(edge_map(&mut g, x, &cfg).is_err());
    }
}
