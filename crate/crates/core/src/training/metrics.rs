use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::Result;

/// One `epoch,split,metric,value` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch metrics of one run, in the order they were recorded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<MetricRecord>,
}

/// What the training loops report after each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid_loss: Option<f64>,
    pub valid_accuracy: Option<f64>,
    pub improved: bool,
}

impl History {
    pub fn push(&mut self, epoch: usize, split: Split, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            epoch,
            split,
            metric: metric.to_string(),
            value,
        });
    }

    /// `(epoch, value)` pairs for one split and metric.
    pub fn series(&self, split: Split, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn last(&self, split: Split, metric: &str) -> Option<f64> {
        self.series(split, metric).last().map(|(_, v)| *v)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "split", "metric", "value"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.split.as_str().to_string(),
                r.metric.clone(),
                format!("{:?}", r.value),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Appends the rows to `path`, writing the header only for a new file.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(["epoch", "split", "metric", "value"])?;
        }
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.split.as_str().to_string(),
                r.metric.clone(),
                format!("{:?}", r.value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut out = History::default();
        for row in rdr.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or_default();
            let epoch = field(0)
                .parse()
                .map_err(|_| crate::Error::Format(format!("bad epoch `{}` in {}", field(0), path.display())))?;
            let value = field(3)
                .parse()
                .map_err(|_| crate::Error::Format(format!("bad value `{}` in {}", field(3), path.display())))?;
            out.push(epoch, Split::parse(field(1))?, field(2), value);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_append() {
        let mut h = History::default();
        h.push(0, Split::Valid, "info_nce", 1.6094379124341003);
        h.push(1, Split::Train, "info_nce", 1.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        h.append_csv(&path).unwrap();
        assert_eq!(History::read_csv(&path).unwrap(), h);
        h.append_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 1);
        assert_eq!(text.lines().count(), 5);
        assert_eq!(h.series(Split::Valid, "info_nce"), vec![(0, 1.6094379124341003)]);
    }
}
