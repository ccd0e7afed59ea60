//! Synthetic clustered multi-task data.
//!
//! Cluster centers are drawn with spread `inter_spread`, each client's true
//! parameter matrix deviates from its center with spread `intra_spread`, and
//! clients are assigned to clusters round-robin. The regression family emits
//! `y = Θ_k x + ε`; the classification family samples a label from
//! `softmax(Θ_k x)` and stores it one-hot.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{squared_distance, TaskGraph};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaskFamily {
    #[default]
    Regression,
    Classification,
}

impl TaskFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Regression => "regression",
            TaskFamily::Classification => "classification",
        }
    }
}

impl FromStr for TaskFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskFamily::Regression),
            "classification" => Ok(TaskFamily::Classification),
            other => Err(Error::Parse(format!("unknown task family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniverseConfig {
    pub clients: usize,
    pub clusters: usize,
    pub dim: usize,
    /// Regression targets per example, or classes for classification.
    pub out_dim: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Log-normal sigma for per-client train sizes; 0 keeps sizes uniform.
    pub size_skew: f64,
    pub family: TaskFamily,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            clusters: 4,
            dim: 16,
            out_dim: 4,
            intra_spread: 0.05,
            inter_spread: 0.5,
            noise_std: 0.5,
            n_train: 20,
            n_test: 200,
            size_skew: 0.0,
            family: TaskFamily::Regression,
            seed: 0,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.clusters < 1 || self.clients < self.clusters {
            return bad(format!(
                "need clients >= clusters >= 1, got clients={} clusters={}",
                self.clients, self.clusters
            ));
        }
        if self.dim == 0 || self.out_dim == 0 {
            return bad("dim and out_dim must be positive".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be at least 1".into());
        }
        for (name, v) in [
            ("intra_spread", self.intra_spread),
            ("inter_spread", self.inter_spread),
            ("noise_std", self.noise_std),
            ("size_skew", self.size_skew),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.clusters > 1 && self.inter_spread <= self.intra_spread {
            return bad(format!(
                "inter_spread ({}) must exceed intra_spread ({}) when clusters > 1",
                self.inter_spread, self.intra_spread
            ));
        }
        if self.family == TaskFamily::Classification && self.out_dim < 2 {
            return bad("classification needs out_dim >= 2 classes".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskUniverse {
    pub clusters: usize,
    /// Cluster of each client.
    pub assignment: Vec<usize>,
    /// Flattened row-major `out_dim × dim` truth per client.
    pub truths: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
    pub config: UniverseConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub x_train: Array2<f64>,
    pub y_train: Array2<f64>,
    pub x_test: Array2<f64>,
    pub y_test: Array2<f64>,
}

impl ClientDataset {
    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }
}

const TAG_TRUTHS: u64 = 0x7472_7574;
const TAG_CLIENT: u64 = 0x636c_6e74;

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate_universe(cfg: &UniverseConfig) -> Result<(TaskUniverse, Vec<ClientDataset>)> {
    cfg.validate()?;
    let p = cfg.out_dim * cfg.dim;
    let mut rng = seed::rng_for(cfg.seed, TAG_TRUTHS);
    let centers: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| gaussian_vec(&mut rng, p, cfg.inter_spread))
        .collect();
    let assignment: Vec<usize> = (0..cfg.clients).map(|k| k % cfg.clusters).collect();
    let truths: Vec<Vec<f64>> = assignment
        .iter()
        .map(|&c| {
            let noise = gaussian_vec(&mut rng, p, cfg.intra_spread);
            centers[c].iter().zip(noise).map(|(m, e)| m + e).collect()
        })
        .collect();

    let datasets = truths
        .iter()
        .enumerate()
        .map(|(k, truth)| {
            let mut rng = seed::rng_for(cfg.seed, TAG_CLIENT ^ ((k as u64) << 32));
            let n_train = if cfg.size_skew > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                let s = cfg.size_skew;
                ((cfg.n_train as f64) * (s * z - 0.5 * s * s).exp())
                    .round()
                    .max(1.0) as usize
            } else {
                cfg.n_train
            };
            let theta = Array2::from_shape_vec((cfg.out_dim, cfg.dim), truth.clone())
                .expect("truth length is out_dim * dim");
            let (x_train, y_train) = sample_split(&mut rng, cfg, &theta, n_train)?;
            let (x_test, y_test) = sample_split(&mut rng, cfg, &theta, cfg.n_test)?;
            Ok(ClientDataset {
                x_train,
                y_train,
                x_test,
                y_test,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let universe = TaskUniverse {
        clusters: cfg.clusters,
        assignment,
        truths,
        centers,
        config: cfg.clone(),
    };
    Ok((universe, datasets))
}

fn sample_split(
    rng: &mut ChaCha8Rng,
    cfg: &UniverseConfig,
    theta: &Array2<f64>,
    n: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let x = Array2::from_shape_simple_fn((n, cfg.dim), || rng.sample::<f64, _>(StandardNormal));
    let signal = x.dot(&theta.t());
    let y = match cfg.family {
        TaskFamily::Regression => {
            signal.mapv(|s| s + cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
        }
        TaskFamily::Classification => {
            let mut y = Array2::zeros((n, cfg.out_dim));
            for (i, logits) in signal.rows().into_iter().enumerate() {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let probs: Array1<f64> = logits.mapv(|z| (z - max).exp());
                let dist = WeightedIndex::new(probs.iter())
                    .map_err(|e| Error::InvalidConfig(format!("class weights: {e}")))?;
                y[[i, dist.sample(rng)]] = 1.0;
            }
            y
        }
    };
    Ok((x, y))
}

/// `a_kℓ = exp(−‖θ_k − θ_ℓ‖² / scale)` with a zero diagonal.
pub fn similarity_from_truth(universe: &TaskUniverse, scale: f64) -> Result<TaskGraph> {
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "similarity scale must be positive, got {scale}"
        )));
    }
    let k = universe.truths.len();
    let mut rows = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let w = (-squared_distance(&universe.truths[i], &universe.truths[j]) / scale).exp();
            rows[i][j] = w;
            rows[j][i] = w;
        }
    }
    TaskGraph::new(&rows)
}

/// Write `client_<k>_train.csv` and `client_<k>_test.csv` into `dir`.
pub fn export_client_csv(dir: &Path, client: usize, data: &ClientDataset) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_split(
        &dir.join(format!("client_{client}_train.csv")),
        &data.x_train,
        &data.y_train,
    )?;
    write_split(
        &dir.join(format!("client_{client}_test.csv")),
        &data.x_test,
        &data.y_test,
    )
}

fn write_split(path: &Path, x: &Array2<f64>, y: &Array2<f64>) -> io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..x.ncols())
        .map(|i| format!("x{i}"))
        .chain((0..y.ncols()).map(|j| format!("y{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (xr, yr) in x.rows().into_iter().zip(y.rows()) {
        let cells: Vec<String> = xr
            .iter()
            .chain(yr.iter())
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()
}
