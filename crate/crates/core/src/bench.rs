//! Persons-per-second throughput and dense-connectivity analysis.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub batch_size: usize,
    pub threads: usize,
    /// Untimed batches each worker runs first.
    pub warmup: usize,
    /// Persons to process; rounded up to whole batches.
    pub persons: usize,
    /// Give each worker its own copy of the model instead of sharing one.
    pub replicate: bool,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { batch_size: 1, threads: 1, warmup: 2, persons: 1000, replicate: false, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub threads: usize,
    pub batch_size: usize,
    pub warmup: usize,
    /// Persons in timed batches.
    pub persons: usize,
    /// Seconds from the common start of the timed batches to the last one
    /// finishing.
    pub wall_time: f64,
    /// `persons / wall_time`.
    pub pps: f64,
    /// Seconds per timed batch, ascending.
    pub latencies: Vec<f64>,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl BenchReport {
    /// Assembles a report from timed measurements.
    pub fn from_measurements(opts: &BenchOptions, persons: usize, wall: Duration, mut latencies: Vec<f64>) -> Self {
        latencies.sort_by(f64::total_cmp);
        let wall_time = wall.as_secs_f64();
        BenchReport {
            threads: opts.threads,
            batch_size: opts.batch_size,
            warmup: opts.warmup,
            persons,
            wall_time,
            pps: persons as f64 / wall_time,
            p50: percentile(&latencies, 50.0),
            p90: percentile(&latencies, 90.0),
            p99: percentile(&latencies, 99.0),
            latencies,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "threads,batch_size,warmup,persons,wall_time_s,pps,p50_s,p90_s,p99_s\n{},{},{},{},{},{},{},{},{}\n",
            self.threads,
            self.batch_size,
            self.warmup,
            self.persons,
            self.wall_time,
            self.pps,
            self.p50,
            self.p90,
            self.p99
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} persons in {:.3} s on {} thread(s), batch {}: {:.2} persons/s\nbatch latency p50 {:.2} ms, p90 {:.2} ms, p99 {:.2} ms\n",
            self.persons,
            self.wall_time,
            self.threads,
            self.batch_size,
            self.pps,
            self.p50 * 1e3,
            self.p90 * 1e3,
            self.p99 * 1e3
        )
    }
}

/// Runs forward passes on random crops of the model's input size from
/// `threads` workers until `persons` (rounded up to whole batches) have been
/// processed. Warmup batches run before the clock starts and are not
/// counted.
pub fn bench_pps<T: Scalar>(model: &Model<T>, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.batch_size == 0 || opts.threads == 0 {
        return Err(Error::invalid("bench", "batch size and thread count must be at least 1"));
    }
    if opts.persons < opts.batch_size {
        return Err(Error::invalid("bench", format!("{} persons is less than one batch of {}", opts.persons, opts.batch_size)));
    }
    let cfg = model.config();
    let images: Tensor<T> = Tensor::uniform(
        &[opts.batch_size, 3, cfg.input_height, cfg.input_width],
        -1.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(opts.seed),
    );
    let batches = opts.persons.div_ceil(opts.batch_size);
    let next = AtomicUsize::new(0);
    let gate = StartGate::default();
    let latencies = Mutex::new(Vec::with_capacity(batches));
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let fail = |e: Error| {
        failure.lock().expect("unpoisoned").get_or_insert(e);
    };

    let wall = std::thread::scope(|scope| -> Result<Duration> {
        for w in 0..opts.threads {
            let worker = || {
                let own;
                let m = if opts.replicate {
                    own = model.clone();
                    &own
                } else {
                    model
                };
                let warm = (0..opts.warmup).try_for_each(|_| m.predict(&images).map(drop));
                if !gate.arrive_and_wait() {
                    return;
                }
                let mut mine = Vec::new();
                match warm {
                    Err(e) => fail(e),
                    Ok(()) => {
                        while next.fetch_add(1, Ordering::Relaxed) < batches {
                            let t = Instant::now();
                            if let Err(e) = m.predict(&images) {
                                fail(e);
                                break;
                            }
                            mine.push(t.elapsed().as_secs_f64());
                        }
                    }
                }
                latencies.lock().expect("unpoisoned").extend(mine);
                gate.finish();
            };
            let spawned = std::thread::Builder::new().name(format!("bench-{w}")).spawn_scoped(scope, worker);
            if let Err(e) = spawned {
                gate.abort();
                return Err(Error::ThreadSpawn(e.to_string()));
            }
        }
        gate.open_when(opts.threads);
        let t0 = Instant::now();
        gate.wait_done(opts.threads);
        Ok(t0.elapsed())
    })?;
    if let Some(e) = failure.into_inner().expect("unpoisoned") {
        return Err(e);
    }
    let latencies = latencies.into_inner().expect("unpoisoned");
    Ok(BenchReport::from_measurements(opts, latencies.len() * opts.batch_size, wall, latencies))
}

#[derive(Default)]
struct GateState {
    ready: usize,
    done: usize,
    open: bool,
    aborted: bool,
}

/// Holds workers after warmup until all have arrived, and counts them out.
#[derive(Default)]
struct StartGate {
    state: Mutex<GateState>,
    cv: Condvar,
}

impl StartGate {
    /// Blocks until the gate opens (true) or is aborted (false).
    fn arrive_and_wait(&self) -> bool {
        let mut st = self.state.lock().expect("unpoisoned");
        st.ready += 1;
        self.cv.notify_all();
        while !st.open && !st.aborted {
            st = self.cv.wait(st).expect("unpoisoned");
        }
        let go = st.open;
        drop(st);
        go
    }

    fn open_when(&self, workers: usize) {
        let mut st = self.state.lock().expect("unpoisoned");
        while st.ready < workers {
            st = self.cv.wait(st).expect("unpoisoned");
        }
        st.open = true;
        self.cv.notify_all();
    }

    fn finish(&self) {
        self.state.lock().expect("unpoisoned").done += 1;
        self.cv.notify_all();
    }

    fn wait_done(&self, workers: usize) {
        let mut st = self.state.lock().expect("unpoisoned");
        while st.done < workers {
            st = self.cv.wait(st).expect("unpoisoned");
        }
    }

    fn abort(&self) {
        self.state.lock().expect("unpoisoned").aborted = true;
        self.cv.notify_all();
    }
}

/// Average absolute bottleneck weight per (source, layer) of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMap {
    pub stage: usize,
    /// `values[s][l]` for sources `s` (0 = stage input, `s ≥ 1` = output of
    /// layer `s − 1`) and layers `l`; `None` above the diagonal.
    pub values: Vec<Vec<Option<f64>>>,
}

impl ConnectivityMap {
    pub fn layers(&self) -> usize {
        self.values.first().map_or(0, |r| r.len())
    }

    pub fn get(&self, source: usize, layer: usize) -> Option<f64> {
        self.values.get(source).and_then(|r| r.get(layer)).copied().flatten()
    }

    /// `source,layer,value` for every defined entry, values in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,layer,value\n");
        for (src, row) in self.values.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    let _ = writeln!(s, "{src},{l},{v}");
                }
            }
        }
        s
    }

    /// Grid of cells, sources down and layers across, shaded by value over
    /// the map's maximum; undefined cells are left empty.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 24;
        const MARGIN: usize = 40;
        let (rows, cols) = (self.values.len(), self.layers());
        let max = self.values.iter().flatten().flatten().fold(0.0f64, |a, &b| a.max(b));
        let (w, h) = (MARGIN + cols * CELL + 8, MARGIN + rows * CELL + 8);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<text x="4" y="14" font-size="11" font-family="sans-serif">stage {} (source × layer)</text>"#, self.stage + 1);
        for (src, row) in self.values.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                let (x, y) = (MARGIN + l * CELL, MARGIN + src * CELL);
                match v {
                    Some(v) => {
                        let t = if max > 0.0 { v / max } else { 0.0 };
                        let shade = (255.0 * (1.0 - t)).round() as u8;
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)"><title>{src},{l}: {v}</title></rect>"#
                        );
                    }
                    None => {
                        let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#eeeeee"/>"##);
                    }
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<stem>.svg` and the `<stem>.csv` sidecar.
    pub fn write(&self, stem: &Path) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("connectivity", "empty map"));
        }
        write_atomic(&stem.with_extension("svg"), self.to_svg().as_bytes())?;
        write_atomic(&stem.with_extension("csv"), self.to_csv().as_bytes())
    }
}

/// Connectivity of stage `stage` (0-based): the bottleneck weight of layer
/// `l` reads `[stage input, out_0, …, out_{l−1}]` along its input axis.
pub fn weight_connectivity<T: Scalar>(model: &Model<T>, stage: usize) -> Result<ConnectivityMap> {
    let cfg = model.config();
    let st = cfg.stages.get(stage).ok_or_else(|| {
        Error::invalid("connectivity", format!("stage {} out of range 1..={}", stage + 1, cfg.stages.len()))
    })?;
    let ws: Vec<_> = model.bottleneck_weights().into_iter().filter(|w| w.0 == stage).collect();
    if ws.is_empty() {
        return Err(Error::invalid("connectivity", format!("stage {} has no layers", stage + 1)));
    }
    let d = ws.len();
    let g = st.growth;
    let c0 = model.params().get(ws[0].2).shape()[1];
    let mut values = vec![vec![None; d]; d + 1];
    for &(_, l, id) in &ws {
        let w = model.params().get(id);
        let (cout, cin) = (w.shape()[0], w.shape()[1]);
        if cin != c0 + l * g {
            return Err(Error::shape("connectivity", format!("layer {l} reads {cin} channels, expected {}", c0 + l * g)));
        }
        for src in 0..=l {
            let (lo, hi) = if src == 0 { (0, c0) } else { (c0 + (src - 1) * g, c0 + src * g) };
            let mut sum = 0.0;
            for o in 0..cout {
                for i in lo..hi {
                    sum += w.data()[o * cin + i].to_f64_lossy().abs();
                }
            }
            values[src][l] = Some(sum / (cout * (hi - lo)) as f64);
        }
    }
    Ok(ConnectivityMap { stage, values })
}
