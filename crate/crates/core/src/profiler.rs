//! Complexity instrumentation: analytic MAC counts over the two transfer
//! modules' op graphs, measured peak tensor bytes and wall time, log-log
//! scaling fits, a CSV report, and a deterministic memory-cap check.
//!
//! The analytic counts are assembled from the same closed-form cost
//! functions the kernels charge at run time, walking the op graph in the
//! same order as the composites in [`crate::transfer`]; a test pins the two
//! routes to exact equality.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{self, cost};
use crate::tensor::Tensor;
use crate::transfer::{
    self, AttnWeights, HsiBlockWeights, HsiConfig, RelationMode, ScoreNorm,
};

/// Transfer module under measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Hsi,
    Attention,
}

impl Module {
    pub fn name(self) -> &'static str {
        match self {
            Module::Hsi => "hsi",
            Module::Attention => "attention",
        }
    }
}

/// Counters observed for one measured run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterSet {
    pub macs: u64,
    pub allocated_bytes_peak: u64,
    pub wall_seconds: f64,
}

/// Analytic MAC count split by how each term scales with the pixel count.
/// Elementwise additions are worth half a MAC and reported separately in
/// `half_adds`, never folded into the MAC buckets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MacCount {
    /// Terms proportional to (H*W)^2 (the attention map and its uses).
    pub quadratic: u64,
    /// Terms proportional to H*W.
    pub linear: u64,
    /// Terms independent of the spatial extent (per-channel work).
    pub constant: u64,
    /// Elementwise adds, in half-MAC units of one add each.
    pub half_adds: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.quadratic + self.linear + self.constant
    }
}

#[derive(Clone, Copy)]
enum Bucket {
    Quad,
    Lin,
    Const,
}

struct OpCounter {
    count: MacCount,
}

impl OpCounter {
    fn new() -> Self {
        OpCounter {
            count: MacCount::default(),
        }
    }

    fn macs(&mut self, bucket: Bucket, n: u64) {
        match bucket {
            Bucket::Quad => self.count.quadratic += n,
            Bucket::Lin => self.count.linear += n,
            Bucket::Const => self.count.constant += n,
        }
    }

    fn adds(&mut self, n: u64) {
        self.count.half_adds += n;
    }

    fn channel_norm(&mut self, b: Bucket, c: u64, h: u64, w: u64) {
        self.macs(b, cost::channel_norm_macs(1, c, h, w));
        self.adds(cost::channel_norm_adds(1, c, h, w));
    }

    fn conv1x1(&mut self, b: Bucket, h: u64, w: u64, cin: u64, cout: u64) {
        self.macs(b, cost::conv1x1_macs(1, h, w, cin, cout));
        self.adds(cost::conv_bias_adds(1, h, w, cout));
    }

    fn dwconv3x3(&mut self, b: Bucket, h: u64, w: u64, c: u64) {
        self.macs(b, cost::dwconv3x3_macs(1, h, w, c));
    }

    fn pool_avg(&mut self, c: u64, h: u64, w: u64) {
        self.macs(Bucket::Const, cost::pool_avg_macs(1, c));
        self.adds(cost::pool_avg_adds(1, c, h, w));
    }

    fn elementwise_mul(&mut self, b: Bucket, numel: u64) {
        self.macs(b, cost::elementwise_macs(numel));
    }

    fn elementwise_add(&mut self, numel: u64) {
        self.adds(cost::elementwise_adds(numel));
    }

    fn powi(&mut self, b: Bucket, numel: u64, e: u32) {
        self.macs(b, cost::powi_macs(numel, e));
    }

    fn unary(&mut self, b: Bucket, numel: u64) {
        self.macs(b, cost::unary_macs(numel));
    }

    fn softmax(&mut self, b: Bucket, numel: u64) {
        self.macs(b, cost::softmax_macs(numel));
        self.adds(cost::softmax_adds(numel));
    }

    fn matmul(&mut self, b: Bucket, r: u64, k: u64, s: u64) {
        self.macs(b, cost::matmul_macs(r, k, s));
    }

    fn sum_chw(&mut self, numel: u64) {
        self.adds(cost::sum_adds(numel));
    }
}

/// QKV front end shared by both modules; content and style have the same
/// channel count but may differ spatially.
fn count_qkv(ctr: &mut OpCounter, c: u64, hc: u64, wc: u64, hs: u64, ws: u64) {
    ctr.channel_norm(Bucket::Lin, c, hc, wc);
    ctr.conv1x1(Bucket::Lin, hc, wc, c, c); // query
    ctr.channel_norm(Bucket::Lin, c, hs, ws);
    ctr.conv1x1(Bucket::Lin, hs, ws, c, c); // key
    ctr.conv1x1(Bucket::Lin, hs, ws, c, c); // value
}

/// Matches [`crate::stats::taped_channel_statistics`].
fn count_channel_statistics(ctr: &mut OpCounter, c: u64, h: u64, w: u64) {
    let numel = c * h * w;
    ctr.pool_avg(c, h, w); // mean
    ctr.elementwise_add(numel); // centering subtraction
    ctr.elementwise_mul(Bucket::Lin, numel); // square
    ctr.pool_avg(c, h, w); // variance
    ctr.unary(Bucket::Const, c); // sqrt
    ctr.elementwise_add(c); // eps shift
    ctr.elementwise_mul(Bucket::Lin, numel); // standardize (divide)
    ctr.powi(Bucket::Lin, numel, 3);
    ctr.pool_avg(c, h, w); // skew
    ctr.powi(Bucket::Lin, numel, 4);
    ctr.pool_avg(c, h, w); // kurt
}

/// Matches [`crate::stats::taped_dw_conv`] (reflection pad is free).
fn count_dw_conv(ctr: &mut OpCounter, c: u64, h: u64, w: u64) {
    ctr.dwconv3x3(Bucket::Lin, h, w, c);
    ctr.conv1x1(Bucket::Lin, h, w, c, c);
}

/// Matches [`crate::stats::taped_dynamic_affine`].
fn count_dynamic_affine(ctr: &mut OpCounter, c: u64, h: u64, w: u64) {
    count_dw_conv(ctr, c, h, w);
    ctr.pool_avg(c, h, w);
    count_dw_conv(ctr, c, h, w);
    // max pool costs no MACs
}

/// Matches `taped_style_descriptor`: statistics, per-statistic dynamic
/// affines, and the weighted aggregation.
fn count_style_descriptor(ctr: &mut OpCounter, c: u64, h: u64, w: u64, enabled: usize) {
    count_channel_statistics(ctr, c, h, w);
    for _ in 0..enabled {
        count_dynamic_affine(ctr, c, h, w);
    }
    // aggregation over (N, C, 1, 1) terms
    for i in 0..enabled {
        ctr.elementwise_mul(Bucket::Const, c);
        ctr.elementwise_add(c); // + bias
        if i > 0 {
            ctr.elementwise_add(c); // accumulate
        }
    }
}

/// Matches [`crate::transfer::taped_cosine_lambda`] (all constant-size work).
fn count_cosine_lambda(ctr: &mut OpCounter, c: u64) {
    ctr.pool_avg(c, 1, 1); // qbar is free of spatial extent at count time
    ctr.pool_avg(c, 1, 1);
    ctr.elementwise_mul(Bucket::Const, c);
    ctr.sum_chw(c);
    ctr.elementwise_mul(Bucket::Const, c);
    ctr.sum_chw(c);
    ctr.unary(Bucket::Const, 1);
    ctr.elementwise_mul(Bucket::Const, c);
    ctr.sum_chw(c);
    ctr.unary(Bucket::Const, 1);
    ctr.elementwise_mul(Bucket::Const, 1);
    ctr.elementwise_mul(Bucket::Const, 1); // divide
    ctr.elementwise_add(1);
    ctr.elementwise_mul(Bucket::Const, 1);
}

/// Analytic MAC count of one transfer-module forward pass on (1, C, H, W)
/// content and style features of equal size.
pub fn count_macs(module: Module, h: usize, w: usize, c: usize, cfg: &HsiConfig) -> MacCount {
    let (h, w, c) = (h as u64, w as u64, c as u64);
    let mut ctr = OpCounter::new();
    match module {
        Module::Attention => {
            count_qkv(&mut ctr, c, h, w, h, w);
            let hw = h * w;
            ctr.matmul(Bucket::Quad, hw, c, hw);
            ctr.softmax(Bucket::Quad, hw * hw);
            ctr.matmul(Bucket::Quad, hw, hw, c);
            ctr.conv1x1(Bucket::Lin, h, w, c, c); // output projection
            ctr.elementwise_add(c * h * w); // residual
        }
        Module::Hsi => {
            let numel = c * h * w;
            let enabled = cfg.enabled_statistics.enabled_indices().len();
            for _ in 0..cfg.block_count {
                count_qkv(&mut ctr, c, h, w, h, w);
                count_style_descriptor(&mut ctr, c, h, w, enabled); // K_s
                match cfg.relation_mode {
                    RelationMode::Dual => {
                        // cosine lambda pools over the full maps
                        let mut lam = OpCounter::new();
                        lam.pool_avg(c, h, w);
                        lam.pool_avg(c, h, w);
                        ctr.count.half_adds += lam.count.half_adds;
                        ctr.count.constant += lam.count.constant;
                        let mut rest = OpCounter::new();
                        count_cosine_lambda(&mut rest, c);
                        // drop the two placeholder pools counted above
                        rest.count.half_adds -= 2 * cost::pool_avg_adds(1, c, 1, 1);
                        rest.count.constant -= 2 * cost::pool_avg_macs(1, c);
                        ctr.count.quadratic += rest.count.quadratic;
                        ctr.count.linear += rest.count.linear;
                        ctr.count.constant += rest.count.constant;
                        ctr.count.half_adds += rest.count.half_adds;
                    }
                    RelationMode::LocalOnly | RelationMode::GlobalOnly => {}
                }
                // dual-relation fusion
                ctr.pool_avg(c, h, w); // Q_c
                ctr.elementwise_mul(Bucket::Const, c); // global term
                ctr.elementwise_mul(Bucket::Lin, numel); // local term
                ctr.elementwise_mul(Bucket::Const, c); // lambda * global
                ctr.elementwise_mul(Bucket::Const, 1); // -lambda
                ctr.elementwise_add(1); // 1 - lambda
                ctr.elementwise_mul(Bucket::Lin, numel); // (1-lambda) * local
                ctr.elementwise_add(numel); // blend
                // score normalization
                match cfg.score_norm {
                    ScoreNorm::ChannelSoftmax => ctr.softmax(Bucket::Lin, numel),
                    ScoreNorm::Sigmoid => {
                        ctr.unary(Bucket::Lin, numel);
                        ctr.unary(Bucket::Lin, numel);
                        ctr.elementwise_add(numel);
                    }
                }
                count_style_descriptor(&mut ctr, c, h, w, enabled); // V_s
                ctr.elementwise_mul(Bucket::Lin, numel); // scores * V_s
                ctr.conv1x1(Bucket::Lin, h, w, c, c); // output projection
                ctr.elementwise_add(numel); // residual
            }
        }
    }
    ctr.count
}

/// Largest single buffer the module must materialize on (1, C, H, W)
/// features, in bytes. This is the deterministic stand-in for the
/// out-of-memory pattern: the attention map alone dominates its module,
/// while the injector never materializes anything beyond one padded
/// feature map.
pub fn analytic_peak_buffer_bytes(module: Module, h: usize, w: usize, c: usize) -> u64 {
    let (h, w, c) = (h as u64, w as u64, c as u64);
    match module {
        Module::Hsi => (h + 2) * (w + 2) * c * 4,
        Module::Attention => {
            let hw = h * w;
            (hw * hw * 4).max(hw * c * 4)
        }
    }
}

/// Peak transient tensor-buffer bytes allocated while `run` executes.
pub fn measure_peak_alloc<T>(run: impl FnOnce() -> T) -> (T, u64) {
    let (out, delta) = metrics::measure(run);
    (out, delta.peak_bytes)
}

/// Seeded forward pass of one module on equal-size content/style features.
pub fn run_module_forward(
    module: Module,
    h: usize,
    w: usize,
    c: usize,
    cfg: &HsiConfig,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_c = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(-1.0..1.0))?;
    let f_s = Tensor::from_fn(&[1, c, h, w], |_| rng.gen_range(-1.0..1.0))?;
    match module {
        Module::Hsi => {
            let weights = HsiBlockWeights::seeded(c, &mut rng);
            let single = HsiConfig {
                block_count: 1,
                ..*cfg
            };
            transfer::hsi_forward(&f_c, &f_s, &weights, &single)
        }
        Module::Attention => {
            let weights = AttnWeights::seeded(c, &mut rng);
            transfer::self_attention_forward(&f_c, &f_s, &weights, cfg.eps)
        }
    }
}

/// Measure one module at one size: MACs and peak bytes from an instrumented
/// run, wall time as the median of `timing_runs` warm runs.
pub fn measure_module(
    module: Module,
    h: usize,
    w: usize,
    c: usize,
    cfg: &HsiConfig,
    seed: u64,
    timing_runs: usize,
) -> Result<CounterSet> {
    let (result, delta) = metrics::measure(|| run_module_forward(module, h, w, c, cfg, seed));
    result?;
    let mut times = Vec::with_capacity(timing_runs);
    for _ in 0..timing_runs.max(1) {
        let start = Instant::now();
        run_module_forward(module, h, w, c, cfg, seed)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median = times[times.len() / 2];
    Ok(CounterSet {
        macs: delta.macs,
        allocated_bytes_peak: delta.peak_bytes,
        wall_seconds: median,
    })
}

/// Least-squares slope of log(value) against log(pixel count).
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints { got: points.len() });
    }
    for win in points.windows(2) {
        if win[1].0 <= win[0].0 {
            return Err(Error::InvalidConfig {
                message: "scaling fit needs strictly increasing pixel counts".into(),
            });
        }
    }
    for &(x, y) in points {
        if x <= 0.0 || y <= 0.0 {
            return Err(Error::NonPositiveSample {
                value: if x <= 0.0 { x } else { y },
            });
        }
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    Ok((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// One measurement row of the complexity report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub module: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub macs: u64,
    pub peak_bytes: u64,
    pub seconds: f64,
}

/// Rows plus fitted log-log slopes per module.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComplexityReport {
    pub rows: Vec<ReportRow>,
}

impl ComplexityReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// Slope of log(macs) vs log(H*W) over this module's rows.
    pub fn mac_slope(&self, module: &str) -> Result<f64> {
        scaling_fit(&self.points(module, |r| r.macs as f64)?)
    }

    /// Slope of log(peak bytes) vs log(H*W) over this module's rows.
    pub fn byte_slope(&self, module: &str) -> Result<f64> {
        scaling_fit(&self.points(module, |r| r.peak_bytes as f64)?)
    }

    fn points(&self, module: &str, f: impl Fn(&ReportRow) -> f64) -> Result<Vec<(f64, f64)>> {
        Ok(self
            .rows
            .iter()
            .filter(|r| r.module == module)
            .map(|r| ((r.h * r.w) as f64, f(r)))
            .collect())
    }
}

/// Write the report as CSV: header then one row per measurement, UTF-8
/// with LF line endings.
pub fn emit_report(report: &ComplexityReport, path: &std::path::Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"module,h,w,c,macs,peak_bytes,seconds\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.module, r.h, r.w, r.c, r.macs, r.peak_bytes, r.seconds
        )
        .expect("writing to a Vec cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a CSV produced by [`emit_report`].
pub fn parse_report(text: &str) -> Result<ComplexityReport> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "module,h,w,c,macs,peak_bytes,seconds" {
                return Err(Error::Io {
                    message: format!("unexpected report header '{line}'"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Io {
                message: format!("report line {i} has {} fields", fields.len()),
            });
        }
        let parse_int = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Io {
                message: format!("bad integer '{s}' on line {i}"),
            })
        };
        rows.push(ReportRow {
            module: fields[0].to_string(),
            h: parse_int(fields[1])? as usize,
            w: parse_int(fields[2])? as usize,
            c: parse_int(fields[3])? as usize,
            macs: parse_int(fields[4])?,
            peak_bytes: parse_int(fields[5])?,
            seconds: fields[6].parse().map_err(|_| Error::Io {
                message: format!("bad float '{}' on line {i}", fields[6]),
            })?,
        });
    }
    Ok(ComplexityReport { rows })
}

/// Cap-check verdict for one size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapStatus {
    Ok,
    ExceedsCap,
}

/// Compare the analytic peak-buffer requirement against a byte cap at each
/// feature size.
pub fn simulate_memory_cap(
    module: Module,
    sizes: &[usize],
    c: usize,
    cap_bytes: u64,
) -> Vec<(usize, CapStatus)> {
    sizes
        .iter()
        .map(|&s| {
            let need = analytic_peak_buffer_bytes(module, s, s, c);
            let status = if need > cap_bytes {
                CapStatus::ExceedsCap
            } else {
                CapStatus::Ok
            };
            (s, status)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::StatSet;

    #[test]
    fn attention_quadratic_terms_match_hand_count() {
        // H*W = 64, C = 8: each matmul contributes 64*64*8 MACs
        assert_eq!(cost::matmul_macs(64, 8, 64), 32768);
        assert_eq!(cost::matmul_macs(64, 64, 8), 32768);
        let count = count_macs(Module::Attention, 8, 8, 8, &HsiConfig::default());
        let softmax = cost::softmax_macs(64 * 64);
        assert_eq!(count.quadratic, 2 * 32768 + softmax);
    }

    #[test]
    fn hsi_linear_terms_scale_exactly_4x() {
        let cfg = HsiConfig::default();
        for &(h, w) in &[(16usize, 16usize), (32, 32), (64, 64)] {
            let base = count_macs(Module::Hsi, h, w, 16, &cfg);
            let doubled = count_macs(Module::Hsi, 2 * h, 2 * w, 16, &cfg);
            assert_eq!(doubled.linear, 4 * base.linear);
            assert_eq!(doubled.constant, base.constant);
            assert_eq!(doubled.quadratic, 0);
        }
    }

    #[test]
    fn attention_quadratic_terms_scale_exactly_16x() {
        let cfg = HsiConfig::default();
        for &(h, w) in &[(16usize, 16usize), (32, 32), (64, 64)] {
            let base = count_macs(Module::Attention, h, w, 16, &cfg);
            let doubled = count_macs(Module::Attention, 2 * h, 2 * w, 16, &cfg);
            assert_eq!(doubled.quadratic, 16 * base.quadratic);
            assert_eq!(doubled.linear, 4 * base.linear);
        }
    }

    #[test]
    fn analytic_count_matches_instrumented_run_exactly() {
        let cfg = HsiConfig {
            block_count: 1,
            ..HsiConfig::default()
        };
        for module in [Module::Hsi, Module::Attention] {
            for &(h, w, c) in &[(6usize, 6usize, 4usize), (8, 10, 3)] {
                let analytic = count_macs(module, h, w, c, &cfg);
                let (result, delta) =
                    metrics::measure(|| run_module_forward(module, h, w, c, &cfg, 77));
                result.unwrap();
                assert_eq!(
                    delta.macs,
                    analytic.total(),
                    "{} macs at {h}x{w}x{c}",
                    module.name()
                );
                assert_eq!(
                    delta.half_add_macs,
                    analytic.half_adds,
                    "{} adds at {h}x{w}x{c}",
                    module.name()
                );
            }
        }
    }

    #[test]
    fn analytic_count_matches_run_with_masked_stats_and_modes() {
        let cfg = HsiConfig {
            block_count: 1,
            enabled_statistics: StatSet::only(1),
            relation_mode: RelationMode::LocalOnly,
            ..HsiConfig::default()
        };
        let analytic = count_macs(Module::Hsi, 6, 6, 4, &cfg);
        let (result, delta) =
            metrics::measure(|| run_module_forward(Module::Hsi, 6, 6, 4, &cfg, 78));
        result.unwrap();
        assert_eq!(delta.macs, analytic.total());
        assert_eq!(delta.half_add_macs, analytic.half_adds);
    }

    #[test]
    fn scaling_fit_recovers_power_laws() {
        let lin: Vec<(f64, f64)> = (1..=4).map(|i| (i as f64 * 100.0, i as f64 * 300.0)).collect();
        assert!((scaling_fit(&lin).unwrap() - 1.0).abs() < 1e-9);
        let quad: Vec<(f64, f64)> = (1..=4)
            .map(|i| {
                let n = i as f64 * 100.0;
                (n, 7.0 * n * n)
            })
            .collect();
        assert!((scaling_fit(&quad).unwrap() - 2.0).abs() < 1e-9);
        assert!(matches!(
            scaling_fit(&lin[..2]),
            Err(Error::TooFewPoints { got: 2 })
        ));
    }

    #[test]
    fn peak_alloc_sees_a_single_tensor() {
        let ((), peak) = measure_peak_alloc(|| {
            let t = Tensor::zeros(&[1, 64, 128, 128]).unwrap();
            drop(t);
        });
        assert!(peak >= 64 * 128 * 128 * 4);
    }

    #[test]
    fn report_roundtrip_and_line_counts() {
        let mut report = ComplexityReport::default();
        for i in 1..=4u64 {
            report.push(ReportRow {
                module: "hsi".into(),
                h: (8 * i) as usize,
                w: (8 * i) as usize,
                c: 16,
                macs: 1000 * i * i,
                peak_bytes: 4096 * i,
                seconds: 0.125 * i as f64,
            });
        }
        let dir = std::env::temp_dir().join(format!("hsi-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("report.csv");
        emit_report(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        let parsed = parse_report(&text).unwrap();
        assert_eq!(parsed, report);

        let empty = ComplexityReport::default();
        emit_report(&empty, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "module,h,w,c,macs,peak_bytes,seconds\n");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn memory_cap_mirrors_the_oom_pattern() {
        let cap = 2u64 * 1024 * 1024 * 1024;
        let sizes = [32, 64, 128, 256];
        let attention = simulate_memory_cap(Module::Attention, &sizes, 64, cap);
        assert!(attention
            .iter()
            .any(|&(s, status)| s <= 256 && status == CapStatus::ExceedsCap));
        let hsi = simulate_memory_cap(Module::Hsi, &[2048], 64, cap);
        assert_eq!(hsi[0].1, CapStatus::Ok);

        let all_ok = simulate_memory_cap(Module::Attention, &sizes, 64, u64::MAX);
        assert!(all_ok.iter().all(|&(_, s)| s == CapStatus::Ok));
        let none_ok = simulate_memory_cap(Module::Hsi, &sizes, 64, 1);
        assert!(none_ok.iter().all(|&(_, s)| s == CapStatus::ExceedsCap));
    }
}
