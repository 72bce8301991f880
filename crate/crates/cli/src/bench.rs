//! `metrack bench`: quick host measurements written as CSV.

use std::io::Write;
use std::time::Instant;

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metrack_core::linalg::{MetricMatrix, RegressionCache, Vector};
use metrack_core::metric::{pa_update, PaConfig, Triplet};
use metrack_core::reservoir::{Label, SampleBuffer, SamplerConfig};
use metrack_core::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchTarget {
    /// Inclusion frequency per stream position for several q.
    Sampling,
    /// Incremental column edit against dense recompute.
    Inverse,
    /// PA update throughput.
    Metric,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub seed: u64,
    /// Base(s) of the time weight for `sampling`.
    pub q: Vec<f64>,
    pub stream_len: usize,
    pub capacity: usize,
    pub trials: usize,
    /// Basis sizes for `inverse`.
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            q: vec![1.0, 1.2, 1.6],
            stream_len: 200,
            capacity: 20,
            trials: 2000,
            sizes: vec![50, 100, 200, 300],
            dim: 405,
            repeats: 20,
        }
    }
}

fn random_vector(rng: &mut impl Rng, d: usize) -> Vector {
    Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
}

/// Fraction of trials in which each stream item survives to the end.
pub fn inclusion_frequencies(q: f64, opts: &BenchOptions, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let cfg = SamplerConfig {
        capacity: opts.capacity,
        q_factor: q,
    };
    let mut counts = vec![0usize; opts.stream_len];
    for _ in 0..opts.trials {
        let mut buf = SampleBuffer::new(Label::Foreground, opts.capacity)?;
        for t in 0..opts.stream_len {
            buf.insert(Vector::from_element(1, t as f64), t as u64 + 1, &cfg, rng)?;
        }
        for e in buf.entries() {
            counts[e.frame_index as usize - 1] += 1;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / opts.trials as f64).collect())
}

fn bench_sampling(opts: &BenchOptions, rng: &mut impl Rng, out: &mut impl Write) -> Result<()> {
    writeln!(out, "q,frame,frequency,expected_uniform").map_err(io)?;
    let uniform = opts.capacity as f64 / opts.stream_len as f64;
    for &q in &opts.q {
        for (t, f) in inclusion_frequencies(q, opts, rng)?.iter().enumerate() {
            writeln!(out, "{q},{},{f:.6},{uniform:.6}", t + 1).map_err(io)?;
        }
    }
    Ok(())
}

/// Nanoseconds per replace-column edit, online and by dense rebuild.
pub fn inverse_timings(n: usize, opts: &BenchOptions, rng: &mut impl Rng) -> Result<(f64, f64)> {
    let metric = MetricMatrix::identity(opts.dim);
    let cols: Vec<Vector> = (0..n).map(|_| random_vector(rng, opts.dim)).collect();
    let mut cache = RegressionCache::build(&metric, cols, n)?;
    let fresh: Vec<Vector> = (0..opts.repeats).map(|_| random_vector(rng, opts.dim)).collect();

    let start = Instant::now();
    for (k, c) in fresh.iter().enumerate() {
        cache.replace_column(&metric, k % n, c.clone())?;
    }
    let online = start.elapsed().as_nanos() as f64 / opts.repeats as f64;

    let start = Instant::now();
    for (k, c) in fresh.iter().enumerate() {
        let mut cols = cache.columns().to_vec();
        cols.remove(k % n);
        cols.push(c.clone());
        cache = RegressionCache::build(&metric, cols, n)?;
    }
    let dense = start.elapsed().as_nanos() as f64 / opts.repeats as f64;
    Ok((online, dense))
}

fn bench_inverse(opts: &BenchOptions, rng: &mut impl Rng, out: &mut impl Write) -> Result<()> {
    writeln!(out, "n,dim,incremental_ns,dense_ns,ratio").map_err(io)?;
    for &n in &opts.sizes {
        let (online, dense) = inverse_timings(n, opts, rng)?;
        writeln!(out, "{n},{},{online:.0},{dense:.0},{:.2}", opts.dim, dense / online).map_err(io)?;
    }
    Ok(())
}

fn bench_metric(opts: &BenchOptions, rng: &mut impl Rng, out: &mut impl Write) -> Result<()> {
    let mut metric = MetricMatrix::identity(opts.dim);
    let cfg = PaConfig::default();
    let updates = opts.repeats.max(1) * 10;
    let triplets: Vec<Triplet> = (0..updates)
        .map(|_| {
            let p = random_vector(rng, opts.dim);
            let near = &p + random_vector(rng, opts.dim) * 0.5;
            let far = &p + random_vector(rng, opts.dim) * 0.1;
            Triplet::new(p, near, far)
        })
        .collect::<Result<_>>()?;
    let start = Instant::now();
    let mut active = 0;
    for t in &triplets {
        active += pa_update(&mut metric, t, &cfg).is_active() as usize;
    }
    let ns = start.elapsed().as_nanos() as f64 / updates as f64;
    writeln!(out, "dim,updates,active,ns_per_update,updates_per_sec").map_err(io)?;
    writeln!(out, "{},{updates},{active},{ns:.0},{:.1}", opts.dim, 1e9 / ns).map_err(io)?;
    Ok(())
}

fn io(e: std::io::Error) -> metrack_core::Error {
    metrack_core::Error::Io {
        path: "<output>".into(),
        source: e,
    }
}

pub fn run_bench(target: BenchTarget, opts: &BenchOptions, out: &mut impl Write) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    match target {
        BenchTarget::Sampling => bench_sampling(opts, &mut rng, out),
        BenchTarget::Inverse => bench_inverse(opts, &mut rng, out),
        BenchTarget::Metric => bench_metric(opts, &mut rng, out),
    }
}
