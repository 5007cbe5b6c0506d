//! Scalar quantizers: uniform, k-quantile and Lloyd-Max (k-means).
//!
//! A [`QuantizerSpec`] holds `k - 1` finite thresholds and `k` levels. Bin
//! `i` is `[t_{i-1}, t_i)` with `t_0 = -inf`, `t_k = +inf`; a value equal to
//! a threshold goes to the higher bin. The same rule is used for the unit
//! uniform quantizer of the uniformization route, so
//! `quantile(Q_uni(cdf(x)))` and `apply(build_kquantile(..), x)` select the
//! same level.

use crate::dist::DistModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Weight,
    Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    thresholds: Vec<f64>,
    levels: Vec<f64>,
    domain: Domain,
}

impl QuantizerSpec {
    /// Validates `t_{i-1} < q_i < t_i` for every bin.
    pub fn new(thresholds: Vec<f64>, levels: Vec<f64>, domain: Domain) -> Result<Self> {
        let k = levels.len();
        if k < 2 {
            return Err(Error::invalid(
                "k",
                format!("need at least 2 levels, got {k}"),
            ));
        }
        if thresholds.len() != k - 1 {
            return Err(Error::invalid(
                "thresholds",
                format!("{} thresholds for {k} levels", thresholds.len()),
            ));
        }
        if thresholds.iter().chain(&levels).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite threshold or level".into()));
        }
        for i in 0..k {
            let below = if i == 0 {
                f64::NEG_INFINITY
            } else {
                thresholds[i - 1]
            };
            let above = if i == k - 1 {
                f64::INFINITY
            } else {
                thresholds[i]
            };
            if !(below < levels[i] && levels[i] < above) {
                return Err(Error::invalid(
                    "levels",
                    format!(
                        "level {i} = {} is not inside its bin ({below}, {above})",
                        levels[i]
                    ),
                ));
            }
        }
        Ok(QuantizerSpec {
            thresholds,
            levels,
            domain,
        })
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    /// Bin index of `x`: the number of thresholds `<= x`.
    #[inline]
    pub fn index_of(&self, x: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= x)
    }

    /// Quantized value of a finite input; NaN falls into the top bin.
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        self.levels[self.index_of(x)]
    }

    pub fn apply(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::Numeric("cannot quantize NaN".into()));
        }
        Ok(self.quantize(x))
    }

    /// Little-endian layout: `k: u32`, thresholds then levels as `f64`.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        for v in self.thresholds.iter().chain(&self.levels) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn read_from(buf: &mut &[u8], domain: Domain) -> Result<Self> {
        let k = take_u32(buf)? as usize;
        if !(2..=1 << 20).contains(&k) {
            return Err(Error::Format(format!(
                "quantizer level count {k} out of range"
            )));
        }
        let mut vals = Vec::with_capacity(2 * k - 1);
        for _ in 0..2 * k - 1 {
            vals.push(take_f64(buf)?);
        }
        let levels = vals.split_off(k - 1);
        QuantizerSpec::new(vals, levels, domain).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn take_bytes<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!(
            "unexpected end of data: need {n} bytes, have {}",
            buf.len()
        )));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

pub(crate) fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take_bytes(buf, 4)?.try_into().unwrap()))
}

pub(crate) fn take_f64(buf: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_le_bytes(take_bytes(buf, 8)?.try_into().unwrap()))
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid("k", format!("need k >= 2, got {k}")));
    }
    Ok(())
}

/// Centre of bin `idx` of the k-level uniform quantizer on `[0, 1]`.
#[inline]
pub(crate) fn unit_level(idx: usize, k: usize) -> f64 {
    (2 * idx + 1) as f64 / (2 * k) as f64
}

#[inline]
pub(crate) fn unit_threshold(i: usize, k: usize) -> f64 {
    i as f64 / k as f64
}

/// The k-level uniform quantizer on `[0, 1]` (thresholds `i/k`, midpoint levels).
pub fn build_unit_uniform(k: usize) -> Result<QuantizerSpec> {
    check_k(k)?;
    QuantizerSpec::new(
        (1..k).map(|i| unit_threshold(i, k)).collect(),
        (0..k).map(|i| unit_level(i, k)).collect(),
        Domain::Weight,
    )
}

/// `k` equal bins on `[-range_mult·σ, +range_mult·σ]`; outside inputs saturate.
pub fn build_uniform(sigma: f64, range_mult: f64, k: usize) -> Result<QuantizerSpec> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("must be > 0, got {sigma}")));
    }
    if !(range_mult > 0.0 && range_mult.is_finite()) {
        return Err(Error::invalid(
            "range_mult",
            format!("must be > 0, got {range_mult}"),
        ));
    }
    check_k(k)?;
    let half = range_mult * sigma;
    let delta = 2.0 * half / k as f64;
    QuantizerSpec::new(
        (1..k).map(|i| -half + i as f64 * delta).collect(),
        (0..k).map(|i| -half + (i as f64 + 0.5) * delta).collect(),
        Domain::Weight,
    )
}

/// Smallest float `t` with `F(t) >= p`, so that comparing `x` against `t` and
/// comparing `F(x)` against `p` pick the same side.
fn snap_threshold(dist: &DistModel, p: f64) -> Result<f64> {
    let mut t = dist.quantile(p)?;
    for _ in 0..64 {
        if dist.cdf(t) >= p {
            break;
        }
        t = t.next_up();
    }
    for _ in 0..64 {
        let below = t.next_down();
        if dist.cdf(below) < p {
            break;
        }
        t = below;
    }
    Ok(t)
}

/// Equiprobable bins `t_i = F⁻¹(i/k)` with levels at bin medians `F⁻¹((i-½)/k)`.
pub fn build_kquantile(dist: &DistModel, k: usize) -> Result<QuantizerSpec> {
    check_k(k)?;
    let thresholds = (1..k)
        .map(|i| snap_threshold(dist, unit_threshold(i, k)))
        .collect::<Result<Vec<_>>>()?;
    let levels = (0..k)
        .map(|i| dist.quantile(unit_level(i, k)))
        .collect::<Result<Vec<_>>>()?;
    QuantizerSpec::new(thresholds, levels, Domain::Weight)
}

/// Inverse-CDF of the unit uniform quantizer applied to the uniformized input.
pub fn quantize_via_uniformization(dist: &DistModel, k: usize, x: f64) -> Result<f64> {
    check_k(k)?;
    if x.is_nan() {
        return Err(Error::Numeric("cannot quantize NaN".into()));
    }
    let u = dist.cdf(x);
    let idx = uniform_unit_index(u, k);
    dist.quantile(unit_level(idx, k))
}

/// Bin of `u` under the unit uniform quantizer, ties to the higher bin.
#[inline]
pub(crate) fn uniform_unit_index(u: f64, k: usize) -> usize {
    let mut idx = ((u * k as f64).floor().max(0.0) as usize).min(k - 1);
    // Correct any floor() disagreement with the exact threshold comparison.
    while idx > 0 && u < unit_threshold(idx, k) {
        idx -= 1;
    }
    while idx + 1 < k && u >= unit_threshold(idx + 1, k) {
        idx += 1;
    }
    idx
}

pub fn mse(spec: &QuantizerSpec, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid(
            "samples",
            "mean squared error of an empty set",
        ));
    }
    let mut acc = 0.0;
    for &x in samples {
        let d = x - spec.apply(x)?;
        acc += d * d;
    }
    Ok(acc / samples.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct LloydMaxOptions {
    pub max_iter: usize,
    /// Stop once no level moves more than this; `None` means `1e-7·σ`.
    pub tol: Option<f64>,
}

impl Default for LloydMaxOptions {
    fn default() -> Self {
        LloydMaxOptions {
            max_iter: 200,
            tol: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LloydMaxFit {
    pub spec: QuantizerSpec,
    /// Empirical MSE of the initial quantizer followed by one entry per iteration.
    pub mse_history: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

pub fn build_kmeans(samples: &[f64], k: usize, max_iter: usize, tol: f64) -> Result<QuantizerSpec> {
    lloyd_max(
        samples,
        k,
        LloydMaxOptions {
            max_iter,
            tol: Some(tol),
        },
    )
    .map(|f| f.spec)
}

fn sse_sorted(sorted: &[f64], levels: &[f64], bounds: &[usize]) -> f64 {
    let mut sse = 0.0;
    for (i, &q) in levels.iter().enumerate() {
        for &x in &sorted[bounds[i]..bounds[i + 1]] {
            sse += (x - q) * (x - q);
        }
    }
    sse
}

/// `bounds[i]..bounds[i+1]` is the slice of `sorted` falling in bin `i`.
fn bin_bounds(sorted: &[f64], thresholds: &[f64]) -> Vec<usize> {
    let mut b = Vec::with_capacity(thresholds.len() + 2);
    b.push(0);
    b.extend(
        thresholds
            .iter()
            .map(|&t| sorted.partition_point(|&x| x < t)),
    );
    b.push(sorted.len());
    b
}

fn midpoints(levels: &[f64]) -> Vec<f64> {
    levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Lloyd-Max iteration seeded with the k-quantile levels of a Gaussian fit.
///
/// An empty bin has its level moved to the sample with the largest current
/// quantization error, which cannot raise the MSE because no sample was
/// assigned to that level.
pub fn lloyd_max(samples: &[f64], k: usize, opts: LloydMaxOptions) -> Result<LloydMaxFit> {
    check_k(k)?;
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = 1 + sorted.windows(2).filter(|w| w[1] > w[0]).count();
    if sorted.is_empty() || distinct < k {
        return Err(Error::Degenerate(format!(
            "{distinct} distinct values cannot populate {k} levels"
        )));
    }
    let gauss = DistModel::fit_gaussian(&sorted)?;
    let tol = opts.tol.unwrap_or(1e-7 * gauss.sigma());
    let n = sorted.len() as f64;

    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    for &x in &sorted {
        prefix.push(prefix.last().unwrap() + x);
    }

    let mut levels = build_kquantile(&gauss, k)?.levels;
    let mut bounds = bin_bounds(&sorted, &midpoints(&levels));
    let mut history = vec![sse_sorted(&sorted, &levels, &bounds) / n];
    let mut iterations = 0;
    let mut reseeded = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        // Re-seed empty bins one at a time at the worst-served sample.
        for _ in 0..k {
            let Some(empty) = (0..k).find(|&i| bounds[i] == bounds[i + 1]) else {
                break;
            };
            let (far_idx, _) = sorted
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let bin = (0..k).find(|&i| j < bounds[i + 1]).unwrap();
                    (j, (x - levels[bin]).abs())
                })
                .fold(
                    (0, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            levels[empty] = sorted[far_idx];
            levels.sort_by(f64::total_cmp);
            bounds = bin_bounds(&sorted, &midpoints(&levels));
            reseeded += 1;
        }
        if (0..k).any(|i| bounds[i] == bounds[i + 1]) {
            return Err(Error::Degenerate(
                "Lloyd-Max could not populate every bin".into(),
            ));
        }
        let mut moved: f64 = 0.0;
        for i in 0..k {
            let (a, b) = (bounds[i], bounds[i + 1]);
            let c = (prefix[b] - prefix[a]) / (b - a) as f64;
            moved = moved.max((c - levels[i]).abs());
            levels[i] = c;
        }
        bounds = bin_bounds(&sorted, &midpoints(&levels));
        history.push(sse_sorted(&sorted, &levels, &bounds) / n);
        if moved < tol {
            break;
        }
    }

    let spec = QuantizerSpec::new(midpoints(&levels), levels, Domain::Weight)?;
    Ok(LloydMaxFit {
        spec,
        mse_history: history,
        iterations,
        reseeded,
    })
}

/// Re-expresses `spec` in the uniformized domain of `dist`: `u_i = F(t_i)`, `c_i = F(q_i)`.
pub fn to_uniform_domain(spec: &QuantizerSpec, dist: &DistModel) -> Result<QuantizerSpec> {
    QuantizerSpec::new(
        spec.thresholds.iter().map(|&t| dist.cdf(t)).collect(),
        spec.levels.iter().map(|&q| dist.cdf(q)).collect(),
        spec.domain,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_k4() {
        let s = build_uniform(1.0, 3.0, 4).unwrap();
        assert_eq!(s.thresholds(), &[-1.5, 0.0, 1.5]);
        assert_eq!(s.levels(), &[-2.25, -0.75, 0.75, 2.25]);
        assert_eq!(s.apply(5.0).unwrap(), 2.25);
        assert_eq!(s.apply(-50.0).unwrap(), -2.25);
    }

    #[test]
    fn uniform_k2() {
        let s = build_uniform(1.0, 3.0, 2).unwrap();
        assert_eq!(s.thresholds(), &[0.0]);
        assert_eq!(s.levels(), &[-1.5, 1.5]);
    }

    #[test]
    fn uniform_rejects_bad_args() {
        assert!(build_uniform(0.0, 3.0, 4).is_err());
        assert!(build_uniform(1.0, 3.0, 1).is_err());
        assert!(build_uniform(1.0, -1.0, 4).is_err());
    }

    #[test]
    fn ties_go_up() {
        let s = build_uniform(1.0, 3.0, 4).unwrap();
        assert_eq!(s.apply(0.0).unwrap(), 0.75);
        assert_eq!(s.apply(-1.5).unwrap(), -0.75);
    }

    #[test]
    fn nan_rejected() {
        let s = build_unit_uniform(4).unwrap();
        assert!(s.apply(f64::NAN).is_err());
        assert!(mse(&s, &[]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(QuantizerSpec::new(vec![0.0], vec![0.5, 1.0], Domain::Weight).is_err());
        assert!(QuantizerSpec::new(vec![], vec![1.0], Domain::Weight).is_err());
        assert!(QuantizerSpec::new(vec![0.0, 1.0], vec![-1.0, 2.0], Domain::Weight).is_err());
    }

    #[test]
    fn kmeans_two_clusters_exact() {
        let fit = lloyd_max(&[0.0, 0.0, 10.0, 10.0], 2, LloydMaxOptions::default()).unwrap();
        assert_eq!(fit.spec.levels(), &[0.0, 10.0]);
        assert_eq!(fit.spec.thresholds(), &[5.0]);
        assert_eq!(mse(&fit.spec, &[0.0, 0.0, 10.0, 10.0]).unwrap(), 0.0);
    }

    #[test]
    fn kmeans_needs_distinct_values() {
        assert!(matches!(
            build_kmeans(&[1.0, 1.0, 2.0], 3, 10, 1e-9),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn kmeans_reseeds_empty_bins() {
        // A far outlier cluster leaves a k-quantile seed bin empty.
        let mut s = vec![0.0; 50];
        s.extend([0.1, 0.2, 1000.0]);
        let fit = lloyd_max(&s, 4, LloydMaxOptions::default()).unwrap();
        assert_eq!(fit.spec.k(), 4);
        assert!(fit.spec.levels().contains(&1000.0));
        assert!(fit
            .mse_history
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn spec_bytes_round_trip() {
        let s = build_uniform(0.7, 3.0, 8).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf);
        assert_eq!(buf.len(), 4 + 15 * 8);
        let back = QuantizerSpec::read_from(&mut buf.as_slice(), Domain::Weight).unwrap();
        assert_eq!(back, s);
        assert!(QuantizerSpec::read_from(&mut &buf[..10], Domain::Weight).is_err());
    }

    #[test]
    fn unit_index_matches_spec_apply() {
        for k in [2usize, 3, 7, 8, 256] {
            let spec = build_unit_uniform(k).unwrap();
            for i in 0..=4 * k {
                let u = i as f64 / (4 * k) as f64;
                assert_eq!(uniform_unit_index(u, k), spec.index_of(u), "k={k} u={u}");
            }
        }
    }

    #[test]
    fn uniform_domain_translation_keeps_order() {
        let d = DistModel::gaussian(0.0, 1.0).unwrap();
        let s = build_uniform(1.0, 3.0, 8).unwrap();
        let u = to_uniform_domain(&s, &d).unwrap();
        assert!(u.thresholds().iter().all(|&t| t > 0.0 && t < 1.0));
        assert!(close(&[u.thresholds()[3]], &[0.5], 1e-15));
    }
}
