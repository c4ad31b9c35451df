//! Run telemetry: a crash-safe batch log and the summary table built from it.
//!
//! The batch log is a CSV appended one flushed line at a time, so any prefix
//! of it is a valid file — a run that dies mid-stream still leaves usable
//! telemetry. Provenance (config hash, seed, code version) rides in `#`
//! comment lines ahead of the header. The summary table aggregates detection
//! quality per round and condition, with averages that recompute exactly
//! from the cells they summarize.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Error;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl RunMeta {
    pub fn new(config_hash: String, seed: u64) -> RunMeta {
        RunMeta { config_hash, seed, code_version: env!("CARGO_PKG_VERSION").to_string() }
    }
}

/// One adaptation (or evaluation) batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub round: usize,
    pub condition: String,
    pub batch: usize,
    pub images: usize,
    pub rois: usize,
    /// Confident foreground instances that entered instance alignment.
    pub picked: usize,
    /// Pruned-channel fraction of the mask this batch ran under.
    pub ratio: Real,
    pub penalty_active: bool,
    pub image_loss: Real,
    pub instance_loss: Real,
    pub sparsity_loss: Real,
    pub total_loss: Real,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub reactivated: usize,
    pub skipped: bool,
}

const HEADER: &str = "round,condition,batch,images,rois,picked,ratio,penalty_active,\
                      image_loss,instance_loss,sparsity_loss,total_loss,fwd_flops,bwd_flops,\
                      reactivated,skipped";

impl BatchRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.10},{},{:.10},{:.10},{:.10},{:.10},{},{},{},{}",
            self.round,
            self.condition,
            self.batch,
            self.images,
            self.rois,
            self.picked,
            self.ratio,
            self.penalty_active,
            self.image_loss,
            self.instance_loss,
            self.sparsity_loss,
            self.total_loss,
            self.fwd_flops,
            self.bwd_flops,
            self.reactivated,
            self.skipped
        )
    }

    fn parse_line(line: &str) -> Result<BatchRow, Error> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 16 {
            return Err(Error::Config(format!("malformed metrics row: {line:?}")));
        }
        let bad = |what: &str| Error::Config(format!("bad {what} in metrics row: {line:?}"));
        Ok(BatchRow {
            round: f[0].parse().map_err(|_| bad("round"))?,
            condition: f[1].to_string(),
            batch: f[2].parse().map_err(|_| bad("batch"))?,
            images: f[3].parse().map_err(|_| bad("images"))?,
            rois: f[4].parse().map_err(|_| bad("rois"))?,
            picked: f[5].parse().map_err(|_| bad("picked"))?,
            ratio: f[6].parse().map_err(|_| bad("ratio"))?,
            penalty_active: f[7].parse().map_err(|_| bad("penalty_active"))?,
            image_loss: f[8].parse().map_err(|_| bad("image_loss"))?,
            instance_loss: f[9].parse().map_err(|_| bad("instance_loss"))?,
            sparsity_loss: f[10].parse().map_err(|_| bad("sparsity_loss"))?,
            total_loss: f[11].parse().map_err(|_| bad("total_loss"))?,
            fwd_flops: f[12].parse().map_err(|_| bad("fwd_flops"))?,
            bwd_flops: f[13].parse().map_err(|_| bad("bwd_flops"))?,
            reactivated: f[14].parse().map_err(|_| bad("reactivated"))?,
            skipped: f[15].parse().map_err(|_| bad("skipped"))?,
        })
    }
}

/// Append-only writer; every row is flushed before the call returns.
#[derive(Debug)]
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, meta: &RunMeta) -> Result<MetricsWriter, Error> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# config_hash={}", meta.config_hash)?;
        writeln!(out, "# seed={}", meta.seed)?;
        writeln!(out, "# code_version={}", meta.code_version)?;
        writeln!(out, "{HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, row: &BatchRow) -> Result<(), Error> {
        writeln!(self.out, "{}", row.csv_line())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Read a batch log back; tolerates a truncated final line.
pub fn read_metrics(path: &Path) -> Result<(Vec<(String, String)>, Vec<BatchRow>), Error> {
    let text = std::fs::read_to_string(path)?;
    let mut meta = Vec::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some((k, v)) = rest.split_once('=') {
                meta.push((k.to_string(), v.to_string()));
            }
        } else if line == HEADER || line.is_empty() {
            continue;
        } else if let Ok(row) = BatchRow::parse_line(line) {
            rows.push(row);
        }
        // an interrupted append leaves a torn last line; drop it silently
    }
    Ok((meta, rows))
}

/// Detection quality and cost of one (round, condition) pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub round: usize,
    pub condition: String,
    pub map_percent: Real,
    pub batches: usize,
    /// Pruned fraction after the last batch of the pass.
    pub end_ratio: Real,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    /// Stream order: every condition of round 0, then round 1, ...
    pub cells: Vec<SummaryCell>,
    /// Mean detection quality per condition across rounds.
    pub condition_avg: Vec<(String, Real)>,
    /// Mean over all cells.
    pub overall_map: Real,
}

impl SummaryTable {
    pub fn compute(cells: Vec<SummaryCell>) -> SummaryTable {
        let mut order: Vec<String> = Vec::new();
        for c in &cells {
            if !order.contains(&c.condition) {
                order.push(c.condition.clone());
            }
        }
        let condition_avg = order
            .iter()
            .map(|name| {
                let vals: Vec<Real> = cells
                    .iter()
                    .filter(|c| &c.condition == name)
                    .map(|c| c.map_percent)
                    .collect();
                (name.clone(), vals.iter().sum::<Real>() / vals.len().max(1) as Real)
            })
            .collect();
        let overall_map = if cells.is_empty() {
            0.0
        } else {
            cells.iter().map(|c| c.map_percent).sum::<Real>() / cells.len() as Real
        };
        SummaryTable { cells, condition_avg, overall_map }
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "row,round,condition,map50_percent,batches,end_ratio,fwd_flops,bwd_flops\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "cell,{},{},{:.10},{},{:.10},{},{}\n",
                c.round, c.condition, c.map_percent, c.batches, c.end_ratio, c.fwd_flops, c.bwd_flops
            ));
        }
        for (name, avg) in &self.condition_avg {
            out.push_str(&format!("condition_avg,,{name},{avg:.10},,,,\n"));
        }
        out.push_str(&format!("overall,,,{:.10},,,,\n", self.overall_map));
        out
    }

    /// Aligned text: conditions across, rounds down, averages at the edges.
    pub fn text(&self) -> String {
        let mut conditions: Vec<String> = Vec::new();
        let mut rounds: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !conditions.contains(&c.condition) {
                conditions.push(c.condition.clone());
            }
            if !rounds.contains(&c.round) {
                rounds.push(c.round);
            }
        }
        let cell = |round: usize, name: &str| {
            self.cells
                .iter()
                .find(|c| c.round == round && c.condition == name)
                .map(|c| c.map_percent)
        };
        let mut out = String::from("mAP@50 (%)\n");
        out.push_str(&format!("{:>6}", "round"));
        for name in &conditions {
            out.push_str(&format!(" {name:>10}"));
        }
        out.push_str(&format!(" {:>10}\n", "avg"));
        for &round in &rounds {
            out.push_str(&format!("{round:>6}"));
            let mut vals = Vec::new();
            for name in &conditions {
                match cell(round, name) {
                    Some(v) => {
                        vals.push(v);
                        out.push_str(&format!(" {v:>10.2}"));
                    }
                    None => out.push_str(&format!(" {:>10}", "-")),
                }
            }
            let avg = vals.iter().sum::<Real>() / vals.len().max(1) as Real;
            out.push_str(&format!(" {avg:>10.2}\n"));
        }
        out.push_str(&format!("{:>6}", "avg"));
        for name in &conditions {
            let v = self.condition_avg.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
            match v {
                Some(v) => out.push_str(&format!(" {v:>10.2}")),
                None => out.push_str(&format!(" {:>10}", "-")),
            }
        }
        out.push_str(&format!(" {:>10.2}\n", self.overall_map));
        out
    }
}
