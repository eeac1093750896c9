//! Attack-sweep runner: Cartesian grids of (method × rank × variance-scale ×
//! poisoning-rate × seed) cells, each running the pretrain-then-finetune
//! protocol and reporting classification metrics, attack success rate, and
//! the robustness metrics. Output is a raw CSV (one row per cell, seed, and
//! snapshot) plus a per-cell mean ± std summary, both byte-deterministic for
//! a fixed configuration.

use rayon::prelude::*;
use std::collections::HashMap;

use crate::attacks::{
    self, asr, bpa_inject, evaluate, gen_blobs, trigger_testset, upa_flip, AttackKind, AttackSpec,
    BlobSpec, LabeledDataset, Metrics,
};
use crate::config::{ExperimentConfig, Method};
use crate::infogeo::fmt_g17;
use crate::linalg::{derive_seed, InitSpec};
use crate::network::{LoraConfig, Network, NetworkSpec};
use crate::trainer::{sgd_train, ttr_m, ttr_m_prime, TrainConfig, Trajectory};
use crate::{Error, Result};

/// One grid cell (seed excluded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub method: Method,
    pub rank: usize,
    pub scale: f64,
    pub rho: f64,
}

/// One raw CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub method: Method,
    pub rank: Option<usize>,
    pub var_scale: Option<f64>,
    pub init: &'static str,
    pub attack: AttackKind,
    pub rho: f64,
    pub step: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub asr: Option<f64>,
    pub ttr_m: Option<f64>,
    pub ttr_m_prime: Option<f64>,
}

pub const RAW_HEADER: &str =
    "seed,method,rank,var_scale,init,attack,rho,step,accuracy,precision,recall,f1,asr,ttr_m,ttr_m_prime";

impl ResultRow {
    fn csv_line(&self) -> String {
        let opt_u = |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let opt_f = |v: &Option<f64>| v.map(fmt_g17).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.method.name(),
            opt_u(&self.rank),
            self.var_scale.map(fmt_g17).unwrap_or_default(),
            self.init,
            self.attack.name(),
            fmt_g17(self.rho),
            self.step,
            opt_f(&self.accuracy),
            opt_f(&self.precision),
            opt_f(&self.recall),
            opt_f(&self.f1),
            opt_f(&self.asr),
            opt_f(&self.ttr_m),
            opt_f(&self.ttr_m_prime),
        )
    }
}

/// Cell outcome at the final step (plus all emitted rows).
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub asr: Option<f64>,
    pub ttr_m: Option<f64>,
    pub ttr_m_prime: Option<f64>,
    /// Step index at which training diverged, when it did.
    pub diverged: Option<usize>,
    pub rows: Vec<ResultRow>,
}

/// Per-seed environment shared by every cell of that seed: the task, the
/// held-out test set, and the pretrained base network.
pub struct SeedEnv {
    pub seed: u64,
    pub task: LabeledDataset,
    pub test: LabeledDataset,
    pub base: Network,
}

/// Derived-seed streams hanging off one experiment seed.
mod streams {
    pub const PRETRAIN_DATA: u64 = 1;
    pub const TASK_DATA: u64 = 2;
    pub const TEST_DATA: u64 = 3;
    pub const NET: u64 = 4;
    pub const PRETRAIN_SGD: u64 = 5;
    pub const FINETUNE_SGD: u64 = 6;
    pub const ATTACK: u64 = 7;
    pub const ADAPTER: u64 = 8;
}

pub fn prepare_seed_env(cfg: &ExperimentConfig, seed: u64) -> Result<SeedEnv> {
    let blob = |n, s| {
        gen_blobs(&BlobSpec {
            n_per_class: n,
            dims: cfg.data.dims,
            separation: cfg.data.separation,
            spread: cfg.data.spread,
            seed: s,
        })
    };
    let pretrain = blob(cfg.data.n_pretrain_per_class, derive_seed(seed, streams::PRETRAIN_DATA))?;
    let task = blob(cfg.data.n_train_per_class, derive_seed(seed, streams::TASK_DATA))?;
    let test = blob(cfg.data.n_test_per_class, derive_seed(seed, streams::TEST_DATA))?;

    let spec = NetworkSpec {
        layer_dims: cfg.net.dims.clone(),
        activation: cfg.net.activation,
        use_bias: false,
        weight_init: InitSpec::new(
            cfg.net.init_distribution,
            cfg.net.init_scale,
            derive_seed(seed, streams::NET),
        ),
        parameterization: cfg.net.parameterization,
    };
    let fresh = Network::build_base(&spec)?;
    let base = if cfg.train.pretrain_steps > 0 {
        let pre_cfg = TrainConfig {
            learning_rate: cfg.train.pretrain_lr,
            steps: cfg.train.pretrain_steps,
            batch_size: cfg.train.batch,
            loss: cfg.train.loss,
            snapshot_every: 0,
            seed: derive_seed(seed, streams::PRETRAIN_SGD),
        };
        sgd_train(&fresh, &pretrain, &pre_cfg)?.final_network
    } else {
        fresh
    };
    Ok(SeedEnv { seed, task, test, base })
}

fn poisoned_task(cfg: &ExperimentConfig, env: &SeedEnv, rho: f64) -> Result<LabeledDataset> {
    if rho == 0.0 {
        return Ok(env.task.clone());
    }
    match cfg.attack.kind {
        AttackKind::None => Ok(env.task.clone()),
        AttackKind::Upa => upa_flip(&env.task, rho, derive_seed(env.seed, streams::ATTACK)),
        AttackKind::Bpa => {
            let (coord, tau) = cfg.attack.trigger(&cfg.data);
            bpa_inject(
                &env.task,
                &AttackSpec {
                    kind: AttackKind::Bpa,
                    rho,
                    trigger: Some((coord, tau)),
                    target_label: cfg.attack.target_label,
                    seed: derive_seed(env.seed, streams::ATTACK),
                },
            )
        }
    }
}

fn start_network(cfg: &ExperimentConfig, env: &SeedEnv, cell: &CellSpec) -> Result<Network> {
    match cell.method {
        Method::Ff => Ok(env.base.clone()),
        Method::Lora => {
            let fan_in_min = cfg
                .lora
                .layers
                .iter()
                .map(|&l| cfg.net.dims[l].min(cfg.net.dims[l + 1]))
                .min()
                .unwrap_or(usize::MAX);
            let lora_cfg = LoraConfig {
                adapted_layers: cfg.lora.layers.clone(),
                rank: cell.rank,
                a_init: InitSpec::kaiming(cell.scale, derive_seed(env.seed, streams::ADAPTER)),
                b_init: InitSpec::zero(),
                alpha: cfg.lora.alpha.unwrap_or(cell.rank as f64),
                freeze_a: cfg.lora.freeze_a,
                freeze_base: true,
                allow_full_rank: cell.rank >= fan_in_min,
            };
            env.base.attach_lora(&lora_cfg)
        }
    }
}

fn train_cfg_for(cfg: &ExperimentConfig, method: Method) -> TrainConfig {
    TrainConfig {
        learning_rate: match method {
            Method::Ff => cfg.train.lr_ff,
            Method::Lora => cfg.train.lr_lora,
        },
        steps: cfg.train.steps,
        batch_size: cfg.train.batch,
        loss: cfg.train.loss,
        snapshot_every: cfg.train.snapshot_every,
        seed: 0, // filled per seed
    }
}

/// Run one seed's cells, sharing the pretrained base and reusing each
/// (method, rank, scale) group's clean trajectory for the robustness metric.
pub fn run_seed_cells(cfg: &ExperimentConfig, seed: u64, cells: &[CellSpec]) -> Result<Vec<CellOutcome>> {
    let env = prepare_seed_env(cfg, seed)?;
    let mut clean_cache: HashMap<(Method, usize, u64), Trajectory> = HashMap::new();
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        out.push(run_one_cell(cfg, &env, cell, &mut clean_cache)?);
    }
    Ok(out)
}

fn group_key(cell: &CellSpec) -> (Method, usize, u64) {
    (cell.method, cell.rank, cell.scale.to_bits())
}

fn run_one_cell(
    cfg: &ExperimentConfig,
    env: &SeedEnv,
    cell: &CellSpec,
    clean_cache: &mut HashMap<(Method, usize, u64), Trajectory>,
) -> Result<CellOutcome> {
    let mut tc = train_cfg_for(cfg, cell.method);
    tc.seed = derive_seed(env.seed, streams::FINETUNE_SGD);
    let start = start_network(cfg, env, cell)?;

    // clean trajectory for this (method, rank, scale) group
    let key = group_key(cell);
    if !clean_cache.contains_key(&key) {
        let clean_traj = sgd_train(&start, &env.task, &tc)?;
        clean_cache.insert(key, clean_traj);
    }

    let poisoned = poisoned_task(cfg, env, cell.rho)?;
    let rank = (cell.method == Method::Lora).then_some(cell.rank);
    let var_scale = (cell.method == Method::Lora).then_some(cell.scale);
    let init = cfg.net.init_distribution.name();
    let row_base = |step: usize| ResultRow {
        seed: env.seed,
        method: cell.method,
        rank,
        var_scale,
        init,
        attack: if cell.rho == 0.0 { AttackKind::None } else { cfg.attack.kind },
        rho: cell.rho,
        step,
        accuracy: None,
        precision: None,
        recall: None,
        f1: None,
        asr: None,
        ttr_m: None,
        ttr_m_prime: None,
    };

    // kernel robustness proxy at the finetune starting point, over the
    // modified samples (capped)
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = env
        .task
        .inputs
        .iter()
        .zip(&poisoned.inputs)
        .zip(&poisoned.flags)
        .filter(|&(_, &flag)| flag != attacks::Flag::Clean)
        .map(|((a, b), _)| (a.clone(), b.clone()))
        .take(32)
        .collect();
    let m_prime = if pairs.is_empty() { None } else { Some(ttr_m_prime(&start, &pairs)?) };

    let trained = if cell.rho == 0.0 {
        // the clean run is this cell's run
        Ok(clean_cache[&key].clone())
    } else {
        sgd_train(&start, &poisoned, &tc)
    };
    let traj = match trained {
        Ok(t) => t,
        Err(Error::TrainingDiverged { step }) => {
            let mut row = row_base(step);
            row.ttr_m_prime = m_prime;
            return Ok(CellOutcome {
                spec: *cell,
                seed: env.seed,
                metrics: None,
                asr: None,
                ttr_m: None,
                ttr_m_prime: m_prime,
                diverged: Some(step),
                rows: vec![row],
            });
        }
        Err(e) => return Err(e),
    };

    let clean_traj = &clean_cache[&key];
    let m_value = if cell.rho == 0.0 { Some(0.0) } else { Some(ttr_m(clean_traj, &traj)?) };

    let triggered_test = match cfg.attack.kind {
        AttackKind::Bpa => {
            let (coord, tau) = cfg.attack.trigger(&cfg.data);
            Some(trigger_testset(
                &env.test,
                &AttackSpec {
                    kind: AttackKind::Bpa,
                    rho: cell.rho,
                    trigger: Some((coord, tau)),
                    target_label: cfg.attack.target_label,
                    seed: 0,
                },
            )?)
        }
        _ => None,
    };

    let mut rows = Vec::new();
    let mut final_metrics = None;
    let mut final_asr = None;
    let last_idx = traj.snapshots.len() - 1;
    for (i, (step, params)) in traj.snapshots.iter().enumerate() {
        let net_at = traj.final_network.unflatten_trainable(params)?;
        let metrics = evaluate(&net_at, &env.test)?;
        let asr_at = match &triggered_test {
            Some(tt) => Some(asr(&net_at, tt, cfg.attack.target_label)?),
            None => None,
        };
        let mut row = row_base(*step);
        row.accuracy = Some(metrics.accuracy);
        row.precision = Some(metrics.precision);
        row.recall = Some(metrics.recall);
        row.f1 = Some(metrics.f1);
        row.asr = asr_at;
        if i == last_idx {
            row.ttr_m = m_value;
            row.ttr_m_prime = m_prime;
            final_metrics = Some(metrics);
            final_asr = asr_at;
        }
        rows.push(row);
    }

    Ok(CellOutcome {
        spec: *cell,
        seed: env.seed,
        metrics: final_metrics,
        asr: final_asr,
        ttr_m: m_value,
        ttr_m_prime: m_prime,
        diverged: None,
        rows,
    })
}

/// Full sweep output.
pub struct SweepOutput {
    pub raw_csv: String,
    pub summary_csv: String,
    pub outcomes: Vec<CellOutcome>,
}

/// Run the configured grid. Work fans out per seed; output order is fixed by
/// (cell order, seed), independent of scheduling.
pub fn run_attack_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &method in &cfg.sweep.methods {
        match method {
            Method::Ff => {
                for &rho in &cfg.attack.rhos {
                    cells.push(CellSpec { method, rank: cfg.lora.rank, scale: cfg.lora.scale_k, rho });
                }
            }
            Method::Lora => {
                for &rank in &cfg.sweep.ranks {
                    for &scale in &cfg.sweep.scales {
                        for &rho in &cfg.attack.rhos {
                            cells.push(CellSpec { method, rank, scale, rho });
                        }
                    }
                }
            }
        }
    }

    let run = || -> Result<Vec<Vec<CellOutcome>>> {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_seed_cells(cfg, seed, &cells))
            .collect()
    };
    let per_seed: Vec<Vec<CellOutcome>> = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };

    // assemble in deterministic (cell, seed) order
    let mut outcomes = Vec::with_capacity(cells.len() * cfg.seeds.len());
    for ci in 0..cells.len() {
        for outcome_list in &per_seed {
            outcomes.push(outcome_list[ci].clone());
        }
    }

    let header = format!(
        "# ttrlab attack-sweep v{} config_hash={} seeds={}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.hash_hex(),
        cfg.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
    );
    let mut raw_csv = header.clone();
    raw_csv.push_str(RAW_HEADER);
    raw_csv.push('\n');
    for o in &outcomes {
        for row in &o.rows {
            raw_csv.push_str(&row.csv_line());
            raw_csv.push('\n');
        }
    }

    let summary_csv = summarize(&header, &cells, &outcomes);
    Ok(SweepOutput { raw_csv, summary_csv, outcomes })
}

fn summarize(header: &str, cells: &[CellSpec], outcomes: &[CellOutcome]) -> String {
    let mut s = header.to_string();
    s.push_str(
        "method,rank,var_scale,attack,rho,n_seeds,acc_mean,acc_std,prec_mean,prec_std,rec_mean,rec_std,f1_mean,f1_std,asr_mean,asr_std,ttr_m_mean,ttr_m_std,m_prime_mean,m_prime_std\n",
    );
    for cell in cells {
        let group: Vec<&CellOutcome> = outcomes
            .iter()
            .filter(|o| o.spec == *cell)
            .collect();
        if group.is_empty() {
            continue;
        }
        let stat = |f: &dyn Fn(&CellOutcome) -> Option<f64>| -> (String, String) {
            let vals: Vec<f64> = group.iter().filter_map(|o| f(o)).collect();
            if vals.is_empty() {
                return (String::new(), String::new());
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (fmt_g4(mean), fmt_g4(std))
        };
        let (am, asd) = stat(&|o| o.metrics.map(|m| m.accuracy));
        let (pm, psd) = stat(&|o| o.metrics.map(|m| m.precision));
        let (rm, rsd) = stat(&|o| o.metrics.map(|m| m.recall));
        let (fm, fsd) = stat(&|o| o.metrics.map(|m| m.f1));
        let (sm, ssd) = stat(&|o| o.asr);
        let (tm, tsd) = stat(&|o| o.ttr_m);
        let (mm, msd) = stat(&|o| o.ttr_m_prime);
        let attack = if cell.rho == 0.0 { "none" } else { group[0].rows[0].attack.name() };
        s.push_str(&format!(
            "{},{},{},{},{},{},{am},{asd},{pm},{psd},{rm},{rsd},{fm},{fsd},{sm},{ssd},{tm},{tsd},{mm},{msd}\n",
            cell.method.name(),
            if cell.method == Method::Lora { cell.rank.to_string() } else { String::new() },
            if cell.method == Method::Lora { fmt_g4(cell.scale) } else { String::new() },
            attack,
            fmt_g4(cell.rho),
            group.len(),
        ));
    }
    s
}

/// 4 significant digits for summary tables.
fn fmt_g4(v: f64) -> String {
    format!("{v:.3e}")
}
