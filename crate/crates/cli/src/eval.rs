//! Results table in the Method / Type / Length / Gap layout.
//!
//! The gap reference is, in order of preference, a method from an external
//! references file or `exact_small` when every instance is small enough.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use qroute_core::io::{read_instances, References};
use qroute_core::{
    exact_small, nearest_neighbor, optimality_gap, random_policy, route_length, Instance, EXACT_MAX_CUSTOMERS,
};
use qroute_model::checkpoint::{restore, Checkpoint};
use qroute_model::train::RESOLVED_CONFIG_FILE;
use qroute_model::{Config, Model};

use crate::error::{CliError, Result};
use crate::{load_config, EvalArgs, EvalStrategy};

pub const RESULTS_FILE: &str = "results.csv";
pub const LENGTHS_FILE: &str = "lengths.csv";
pub const METADATA_FILE: &str = "results.json";

pub const EXACT_METHOD: &str = "Exact DP";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    #[serde(rename = "Method")]
    pub method: String,
    #[serde(rename = "Type")]
    pub kind: String,
    #[serde(rename = "Length")]
    pub length: f64,
    /// Percent; absent without a reference.
    #[serde(rename = "Gap")]
    pub gap: Option<f64>,
}

/// Per-instance lengths of one method.
#[derive(Debug, Clone)]
pub struct MethodLengths {
    pub method: String,
    pub kind: String,
    pub lengths: Vec<f64>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Rows in input order with gaps against `reference` (an index into `methods`).
pub fn table(methods: &[MethodLengths], reference: Option<usize>) -> Result<Vec<ResultRow>> {
    let ref_mean = reference.map(|r| mean(&methods[r].lengths));
    methods
        .iter()
        .map(|m| {
            let length = mean(&m.lengths);
            let gap = ref_mean.map(|r| optimality_gap(length, r)).transpose()?;
            Ok(ResultRow { method: m.method.clone(), kind: m.kind.clone(), length, gap })
        })
        .collect()
}

pub fn format_table(rows: &[ResultRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:<8} {:>10} {:>9}\n", "Method", "Type", "Length", "Gap");
    for r in rows {
        let gap = r.gap.map_or("-".to_owned(), |g| format!("{g:.2}%"));
        out.push_str(&format!("{:<width$}  {:<8} {:>10.4} {:>9}\n", r.method, r.kind, r.length, gap));
    }
    out
}

fn config_for(args: &EvalArgs) -> Result<Config> {
    let path: PathBuf = match &args.config {
        Some(p) => p.clone(),
        None => args.checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG_FILE),
    };
    if args.config.is_none() && !path.exists() {
        return Err(CliError::usage(format!(
            "no --config given and no {RESOLVED_CONFIG_FILE} beside {}",
            args.checkpoint.display()
        )));
    }
    load_config(&path)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

struct InstanceLengths {
    greedy: Option<f64>,
    sampled: Option<f64>,
    nearest: f64,
    random: f64,
    exact: Option<f64>,
}

fn evaluate_one(
    model: &Model,
    inst: &Instance,
    i: usize,
    args: &EvalArgs,
    width: usize,
    exact: bool,
) -> Result<InstanceLengths> {
    let greedy = match args.strategy {
        EvalStrategy::Sample => None,
        _ => Some(route_length(inst, &model.greedy(inst)?.route)?),
    };
    let sampled = match args.strategy {
        EvalStrategy::Greedy => None,
        _ => {
            let t = model.config.decoder.temperature;
            Some(model.sample_best(inst, width, t, &mut rng(args.seed, 2 * i as u64 + 1))?.1)
        }
    };
    let nearest = route_length(inst, &nearest_neighbor(inst))?;
    let random = route_length(inst, &random_policy(inst, &mut rng(args.seed, 2 * i as u64)))?;
    let exact = if exact { Some(exact_small(inst)?.1) } else { None };
    Ok(InstanceLengths { greedy, sampled, nearest, random, exact })
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let config = config_for(args)?;
    let ckpt = Checkpoint::read(&args.checkpoint)
        .map_err(|e| CliError::usage(format!("cannot read checkpoint {}: {e}", args.checkpoint.display())))?;
    let mut model = Model::new(&config, 0)?;
    let epoch = restore(&ckpt, &mut model, None)?;
    let instances = read_instances(&args.instances)?;
    if instances.is_empty() {
        return Err(CliError::usage(format!("{} holds no instances", args.instances.display())));
    }
    let width = args.width.unwrap_or(config.decoder.sample_width);
    if width == 0 {
        return Err(CliError::usage("--width must be at least 1"));
    }

    let references = args.references.as_ref().map(References::read).transpose()?;
    let mut external = Vec::new();
    if let Some(refs) = &references {
        for (method, _) in &refs.methods {
            let lengths = refs.lengths_for(method, instances.len())?;
            external.push(MethodLengths { method: method.clone(), kind: "External".into(), lengths });
        }
        if external.is_empty() {
            return Err(CliError::usage("references file holds no rows"));
        }
    }
    let exact = instances.iter().all(|i| i.num_customers() <= EXACT_MAX_CUSTOMERS);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parallel.threads as usize)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let per: Vec<InstanceLengths> = pool.install(|| {
        instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| evaluate_one(&model, inst, i, args, width, exact))
            .collect::<Result<_>>()
    })?;

    let name = if config.uses_circuits() { "Q-GAT" } else { "GAT" };
    let mut methods = external;
    if exact {
        methods.push(MethodLengths {
            method: EXACT_METHOD.into(),
            kind: "Solver".into(),
            lengths: per.iter().map(|p| p.exact.expect("computed for small instances")).collect(),
        });
    }
    if args.strategy != EvalStrategy::Sample {
        methods.push(MethodLengths {
            method: format!("{name} (Greedy)"),
            kind: "RL, G".into(),
            lengths: per.iter().map(|p| p.greedy.expect("greedy requested")).collect(),
        });
    }
    if args.strategy != EvalStrategy::Greedy {
        methods.push(MethodLengths {
            method: format!("{name} (Sampling)"),
            kind: "RL, S".into(),
            lengths: per.iter().map(|p| p.sampled.expect("sampling requested")).collect(),
        });
    }
    methods.push(MethodLengths {
        method: "Nearest neighbor".into(),
        kind: "H, G".into(),
        lengths: per.iter().map(|p| p.nearest).collect(),
    });
    methods.push(MethodLengths {
        method: "Random policy".into(),
        kind: "H, S".into(),
        lengths: per.iter().map(|p| p.random).collect(),
    });

    let reference = match (&references, &args.reference_method) {
        (Some(_), Some(want)) => Some(
            methods
                .iter()
                .position(|m| m.kind == "External" && &m.method == want)
                .ok_or_else(|| CliError::usage(format!("references file has no method {want}")))?,
        ),
        (Some(_), None) => Some(0),
        (None, _) if exact => methods.iter().position(|m| m.method == EXACT_METHOD),
        (None, _) => None,
    };
    let rows = table(&methods, reference)?;
    print!("{}", format_table(&rows));

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(RESULTS_FILE)).map_err(|e| CliError::Runtime(e.to_string()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush()?;

        let mut lengths = References::default();
        for m in &methods {
            lengths.methods.push((m.method.clone(), m.lengths.iter().copied().enumerate().collect::<BTreeMap<_, _>>()));
        }
        lengths.write(dir.join(LENGTHS_FILE))?;

        let meta = serde_json::json!({
            "checkpoint": args.checkpoint,
            "checkpoint_epoch": epoch,
            "instances": args.instances,
            "instance_count": instances.len(),
            "architecture_hash": format!("{:016x}", config.architecture_hash()),
            "strategy": format!("{:?}", args.strategy).to_lowercase(),
            "sample_width": width,
            "temperature": config.decoder.temperature,
            "seed": args.seed,
            "reference": reference.map(|r| methods[r].method.clone()),
            "rows": rows,
        });
        std::fs::write(dir.join(METADATA_FILE), serde_json::to_string_pretty(&meta).expect("metadata serializes"))?;
    }
    Ok(())
}
