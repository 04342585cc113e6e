use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context};

use crate::{Failure, ReportArgs};

/// The columns of a run trace that the report uses.
struct Trace {
    name: String,
    buses: Vec<String>,
    t: Vec<usize>,
    v: Vec<Vec<f64>>,
    model_error: Vec<f64>,
    eta_hat: Vec<f64>,
    xi: Vec<f64>,
    mistake: Vec<bool>,
    reset: Vec<bool>,
}

fn trace_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) if stem == "trace" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn read_trace(path: &Path) -> anyhow::Result<Trace> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = rdr.headers().with_context(|| format!("reading {}", path.display()))?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| anyhow!("{}: missing column {name}", path.display()))
    };
    let (ct, ce, ch, cx, cm, cr) =
        (col("t")?, col("model_error")?, col("eta_hat")?, col("xi")?, col("mistake")?, col("reset")?);
    let vcols: Vec<(usize, String)> =
        header.iter().enumerate().filter_map(|(k, h)| h.strip_prefix("v_").map(|b| (k, b.to_string()))).collect();
    if vcols.is_empty() {
        bail!("{}: no voltage columns", path.display());
    }
    let mut tr = Trace {
        name: trace_name(path),
        buses: vcols.iter().map(|(_, b)| b.clone()).collect(),
        t: Vec::new(),
        v: Vec::new(),
        model_error: Vec::new(),
        eta_hat: Vec::new(),
        xi: Vec::new(),
        mistake: Vec::new(),
        reset: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| {
            rec[k].parse::<f64>().map_err(|_| anyhow!("{} line {line}: '{}' is not a number", path.display(), &rec[k]))
        };
        let bit = |k: usize| match &rec[k] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(anyhow!("{} line {line}: '{other}' is not 0 or 1", path.display())),
        };
        tr.t.push(rec[ct].parse().map_err(|_| anyhow!("{} line {line}: bad step", path.display()))?);
        tr.v.push(vcols.iter().map(|&(k, _)| num(k)).collect::<anyhow::Result<_>>()?);
        tr.model_error.push(num(ce)?);
        tr.eta_hat.push(num(ch)?);
        tr.xi.push(num(cx)?);
        tr.mistake.push(bit(cm)?);
        tr.reset.push(bit(cr)?);
    }
    if tr.t.is_empty() {
        bail!("{}: trace has no rows", path.display());
    }
    Ok(tr)
}

fn write_reports(traces: &[Trace], out: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(out.join("voltages.csv"))?;
    w.write_record(["trace", "bus", "t", "v", "reset"])?;
    for tr in traces {
        for (b, bus) in tr.buses.iter().enumerate() {
            for k in 0..tr.t.len() {
                w.write_record([
                    tr.name.as_str(),
                    bus,
                    &tr.t[k].to_string(),
                    &tr.v[k][b].to_string(),
                    if tr.reset[k] { "1" } else { "0" },
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("errors.csv"))?;
    w.write_record(["trace", "t", "model_error", "eta_hat", "xi", "mistake", "reset"])?;
    for tr in traces {
        for k in 0..tr.t.len() {
            w.write_record([
                tr.name.clone(),
                tr.t[k].to_string(),
                tr.model_error[k].to_string(),
                tr.eta_hat[k].to_string(),
                tr.xi[k].to_string(),
                (tr.mistake[k] as u8).to_string(),
                (tr.reset[k] as u8).to_string(),
            ])?;
        }
    }
    w.flush()?;

    if traces.len() > 1 {
        // Outer join on the step; cells stay empty where a trace has no row.
        let mut rows: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        let width = 4 * traces.len();
        for (j, tr) in traces.iter().enumerate() {
            for k in 0..tr.t.len() {
                let row = rows.entry(tr.t[k]).or_insert_with(|| vec![String::new(); width]);
                let v = &tr.v[k];
                row[4 * j] = tr.model_error[k].to_string();
                row[4 * j + 1] = tr.eta_hat[k].to_string();
                row[4 * j + 2] = v.iter().copied().fold(f64::INFINITY, f64::min).to_string();
                row[4 * j + 3] = v.iter().copied().fold(f64::NEG_INFINITY, f64::max).to_string();
            }
        }
        let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
        let mut header = vec!["t".to_string()];
        for tr in traces {
            for f in ["model_error", "eta_hat", "v_min", "v_max"] {
                header.push(format!("{}_{f}", tr.name));
            }
        }
        w.write_record(&header)?;
        for (t, row) in rows {
            w.write_record(std::iter::once(t.to_string()).chain(row))?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let mut traces = Vec::with_capacity(args.traces.len());
    let mut seen = HashSet::new();
    for path in &args.traces {
        let mut tr = read_trace(path).map_err(Failure::input)?;
        if !seen.insert(tr.name.clone()) {
            tr.name = format!("{}_{}", tr.name, traces.len() + 1);
            seen.insert(tr.name.clone());
        }
        traces.push(tr);
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::input)?;
    write_reports(&traces, &args.out).map_err(Failure::input)
}
