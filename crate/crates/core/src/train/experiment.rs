use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::baseline::hi_evaluate;
use super::config::TrainConfig;
use super::trainer::{EpochLog, TrainReport, Trainer};
use crate::data::{build_adjacency, read_edges_csv, Dataset, GraphPair, Split, TrafficSeries};
use crate::error::Result;
use crate::metrics::{write_metrics_csv, MetricReport};

pub const METRICS_FILE: &str = "metrics.csv";

/// Loads a series and a distance list and builds the windows and graphs
/// the config asks for.
pub fn load_inputs(data: &Path, distances: &Path, config: &TrainConfig) -> Result<(Dataset, GraphPair)> {
    let series = TrafficSeries::load(data)?;
    let edges = read_edges_csv(BufReader::new(File::open(distances)?))?;
    let adj = build_adjacency(&edges, series.nodes(), None, config.theta)?;
    let dataset = Dataset::new(series, config.dataset_config())?;
    Ok((dataset, GraphPair::from_adjacency(&adj)?))
}

/// Metrics of a finished run, all in original units.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: TrainReport,
    pub val: MetricReport,
    pub test: MetricReport,
    /// Persistence baseline on the test split.
    pub baseline: MetricReport,
}

impl RunSummary {
    /// `val`, `test` and `hi_test` rows in the metrics CSV layout.
    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let rows = [("val", &self.val), ("test", &self.test), ("hi_test", &self.baseline)];
        write_metrics_csv(File::create(path)?, &rows, true)
    }
}

/// Trains to completion, restores the best-validation parameters and
/// scores them. With `out_dir`, also writes `metrics.csv` next to the
/// checkpoint and log.
pub fn train_and_evaluate(
    config: TrainConfig,
    dataset: &Dataset,
    graphs: GraphPair,
    out_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Trainer, RunSummary)> {
    dataset.windows.require(Split::Test)?;
    let mut trainer = Trainer::new(config, dataset, graphs)?;
    let report = trainer.fit_with(dataset, out_dir, on_epoch)?;
    let summary = RunSummary {
        report,
        val: trainer.evaluate(dataset, Split::Val)?,
        test: trainer.evaluate(dataset, Split::Test)?,
        baseline: hi_evaluate(dataset, Split::Test)?,
    };
    if let Some(dir) = out_dir {
        summary.write_metrics(&dir.join(METRICS_FILE))?;
    }
    Ok((trainer, summary))
}
