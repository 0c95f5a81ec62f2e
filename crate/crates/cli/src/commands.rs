//! The five subcommands. Each one is deterministic given (config, seed):
//! outputs carry no timestamps, hostnames, or iteration-order artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gsa_core::bench::{bench_row, speedup_vs_dense, BenchRow, BENCH_COLUMNS};
use gsa_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use gsa_core::diagnostics::probe_model;
use gsa_core::metrics::{StepRecord, METRICS_COLUMNS, METRICS_VERSION};
use gsa_core::model::{model_gradcheck, GroupCheck};
use gsa_core::model::{bind_model, model_forward, ModelKl, ModelPolicy};
use gsa_core::real::Real;
use gsa_core::rng::Rng;
use gsa_core::tape::{Corruption, Tape};
use gsa_core::task::TaskStream;
use gsa_core::training::Trainer;

use crate::config::ExperimentConfig;

/// Create the output directory and drop the resolved config into it.
fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    cfg.write_resolved(&dir)?;
    Ok(dir)
}

pub fn cmd_train(cfg: &ExperimentConfig, precision: u32) -> Result<()> {
    match precision {
        32 => train_impl::<f32>(cfg),
        64 => train_impl::<f64>(cfg),
        other => bail!("unsupported precision {other}; use 32 or 64"),
    }
}

fn train_impl<F: Real>(cfg: &ExperimentConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let mut trainer =
        Trainer::<F>::new(cfg.model.clone(), cfg.train.clone(), &cfg.task)?;
    let metrics_path = dir.join("metrics.csv");
    let mut out = BufWriter::new(
        File::create(&metrics_path)
            .with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    writeln!(out, "{METRICS_VERSION}")?;
    writeln!(out, "{METRICS_COLUMNS}")?;
    let mut rows: Vec<StepRecord> = Vec::new();
    let result = trainer.run(|rec| {
        // Rows go out as they are produced so an abort still leaves the
        // trace on disk.
        let _ = writeln!(out, "{}", rec.to_csv());
        let _ = out.flush();
        rows.push(rec.clone());
    });
    match result {
        Ok(summary) => {
            drop(out);
            save_checkpoint(&cfg.checkpoint_path(), &cfg.model, &trainer.params, &trainer.states)?;
            println!(
                "finished {} steps (mode {}): lm loss {:.6}, kl loss {:.6}, {} spike(s)",
                summary.steps_done,
                cfg.model.attention.mode.as_str(),
                summary.final_lm,
                summary.final_kl,
                summary.spike_count,
            );
            println!("outputs in {}", dir.display());
            Ok(())
        }
        Err(err) => {
            drop(out);
            let dump_path = dir.join("diagnostic_dump.txt");
            let mut dump = String::new();
            dump.push_str(&format!("training aborted: {err}\n"));
            dump.push_str(&format!("steps completed: {}\n", rows.len()));
            dump.push_str("last rows:\n");
            for rec in rows.iter().rev().take(20).rev() {
                dump.push_str(&rec.to_csv());
                dump.push('\n');
            }
            std::fs::write(&dump_path, dump)
                .with_context(|| format!("writing {}", dump_path.display()))?;
            bail!("training aborted: {err} (diagnostics in {})", dump_path.display());
        }
    }
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    n_seqs: usize,
    precision: u32,
) -> Result<()> {
    match precision {
        32 => eval_impl::<f32>(cfg, checkpoint, n_seqs),
        64 => eval_impl::<f64>(cfg, checkpoint, n_seqs),
        other => bail!("unsupported precision {other}; use 32 or 64"),
    }
}

fn load_matching_checkpoint<F: Real>(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<Checkpoint<F>> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path());
    let ck = load_checkpoint::<F>(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.model_cfg != cfg.model {
        bail!(
            "checkpoint {} was trained with a different model section than the config",
            path.display()
        );
    }
    Ok(ck)
}

fn eval_impl<F: Real>(cfg: &ExperimentConfig, checkpoint: Option<&Path>, n_seqs: usize) -> Result<()> {
    if n_seqs == 0 {
        bail!("eval needs at least one sequence");
    }
    let ck = load_matching_checkpoint::<F>(cfg, checkpoint)?;
    let mut rng = Rng::new(cfg.seed);
    let mut stream = TaskStream::new(
        &cfg.task,
        cfg.train.seq_len,
        cfg.model.vocab_size,
        rng.fork("eval"),
    )?;
    let batch = stream.next_batch(n_seqs);
    let mut sum = 0.0f64;
    for (tokens, targets) in batch.tokens.iter().zip(&batch.targets) {
        let mut tape = Tape::<F>::no_grad();
        let vars = bind_model(&mut tape, &ck.params);
        let policy = if cfg.model.attention.mode.uses_indexer() {
            ModelPolicy::TopK(&ck.states)
        } else {
            ModelPolicy::Dense
        };
        let run = model_forward(
            &mut tape,
            &vars,
            &cfg.model,
            tokens,
            Some(targets),
            &policy,
            &ModelKl::None,
            false,
        )?;
        sum += tape.value(run.ce.expect("targets were supplied")).as_slice()[0].to_f64();
    }
    let ce = sum / n_seqs as f64;
    println!(
        "eval over {n_seqs} held-out sequences (mode {}): lm loss {:.6}, perplexity {:.4}",
        cfg.model.attention.mode.as_str(),
        ce,
        ce.exp()
    );
    Ok(())
}

pub fn cmd_bench(
    cfg: &ExperimentConfig,
    l_list: &[usize],
    k_list: &[usize],
    formula_only: bool,
    precision: u32,
) -> Result<()> {
    if l_list.is_empty() || k_list.is_empty() {
        bail!("bench needs nonempty length and budget lists");
    }
    let attn = &cfg.model.attention;
    if formula_only {
        for &l in l_list {
            for &k in k_list {
                let s = speedup_vs_dense(attn, l, k)?;
                println!("L={l} k={k} speedup_vs_dense={s:.2}x");
            }
        }
        return Ok(());
    }
    let dir = prepare_out_dir(cfg)?;
    let mut rows: Vec<BenchRow> = Vec::new();
    for &l in l_list {
        for &k in k_list {
            let row = match precision {
                32 => bench_row::<f32>(attn, l, k, cfg.seed)?,
                64 => bench_row::<f64>(attn, l, k, cfg.seed)?,
                other => bail!("unsupported precision {other}; use 32 or 64"),
            };
            rows.push(row);
        }
    }
    let path = dir.join("bench.csv");
    let mut out = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(out, "{BENCH_COLUMNS}")?;
    for row in &rows {
        writeln!(out, "{}", row.to_csv())?;
        println!("{}", row.to_csv());
    }
    out.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_sink_report(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    n_seqs: usize,
    precision: u32,
) -> Result<()> {
    match precision {
        32 => sink_report_impl::<f32>(cfg, checkpoint, n_seqs),
        64 => sink_report_impl::<f64>(cfg, checkpoint, n_seqs),
        other => bail!("unsupported precision {other}; use 32 or 64"),
    }
}

fn sink_report_impl<F: Real>(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    n_seqs: usize,
) -> Result<()> {
    let ck = load_matching_checkpoint::<F>(cfg, checkpoint)?;
    let rec = probe_model(
        &ck.params,
        &cfg.model,
        &ck.states,
        &cfg.task,
        cfg.train.seq_len,
        n_seqs,
        cfg.seed,
    )?;
    rec.validate()?;
    let gate = |g: Option<f64>| match g {
        Some(v) => format!("{v:.6}"),
        None => "n/a".to_string(),
    };
    let mut report = String::new();
    report.push_str(&format!(
        "sink report: mode {}, {} layers, {} probe sequences of length {}\n",
        cfg.model.attention.mode.as_str(),
        cfg.model.n_layers,
        n_seqs,
        cfg.train.seq_len
    ));
    report.push_str(&format!(
        "overall: first_token_attn={:.6} mean_gate={} max_activation={:.6} mean_k={:.3}\n",
        rec.first_token_attn,
        gate(rec.mean_gate),
        rec.max_activation,
        rec.mean_k
    ));
    for (i, layer) in rec.per_layer.iter().enumerate() {
        report.push_str(&format!(
            "layer {i}: first_token_attn={:.6} mean_gate={} max_activation={:.6} mean_k={:.3}\n",
            layer.first_token_attn,
            gate(layer.mean_gate),
            layer.max_activation,
            layer.mean_k
        ));
    }
    print!("{report}");
    let dir = prepare_out_dir(cfg)?;
    let path = dir.join("report.txt");
    std::fs::write(&path, report).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_gradcheck(
    cfg: &ExperimentConfig,
    precision: u32,
    corrupt_op: Option<&str>,
) -> Result<()> {
    if precision != 64 {
        bail!("gradient checking runs on the 64-bit path only (finite differences drown in 32-bit rounding)");
    }
    let corruption = corrupt_op.map(|op| Corruption { op: op.to_string(), factor: 1.5 });
    let seq_len = cfg.train.seq_len.min(16);
    let modes = ["standard", "sparse_only", "gated_only", "gsa"];
    let mut failures: Vec<String> = Vec::new();
    for mode in modes {
        let mut model = cfg.model.clone();
        model.attention.mode = mode.parse()?;
        let checks: Vec<GroupCheck> =
            model_gradcheck(&model, seq_len, cfg.seed, corruption.clone())?;
        for c in &checks {
            let ok = c.max_rel_err < 1e-4;
            println!(
                "mode={mode} group={} max_rel_err={:.3e} worst={} [{}]",
                c.group.as_str(),
                c.max_rel_err,
                c.worst_param,
                if ok { "ok" } else { "FAIL" }
            );
            if !ok {
                failures.push(format!("{mode}/{}: {} at {}", c.group.as_str(), c.max_rel_err, c.worst_param));
            }
        }
    }
    if !failures.is_empty() {
        if let Some(op) = corrupt_op {
            bail!(
                "gradient check failed with corrupted backward rule {op:?}: {}",
                failures.join("; ")
            );
        }
        bail!("gradient check failed: {}", failures.join("; "));
    }
    println!("all parameter groups in all four modes < 1e-4");
    Ok(())
}
