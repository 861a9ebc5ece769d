use std::io::Write;

use crate::error::Result;
use crate::optimizer::MetricsRecord;

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "epoch",
    "train_loss",
    "grad_norm",
    "test_acc",
    "eta_est",
    "eps_est",
    "payload_bytes",
    "wall_ms",
];

/// CSV writer with the fixed metrics schema. Missing values are empty cells.
pub struct MetricsSink<W: Write> {
    out: csv::Writer<W>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl<W: Write> MetricsSink<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(METRICS_HEADER)?;
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &MetricsRecord) -> Result<()> {
        self.out.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.grad_norm.to_string(),
            opt(r.test_acc),
            opt(r.eta_est),
            opt(r.eps_est),
            r.payload_bytes.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.out
            .into_inner()
            .map_err(|e| crate::SengError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_empty_cells() {
        let mut sink = MetricsSink::new(Vec::new()).unwrap();
        let rec = MetricsRecord {
            step: 3,
            epoch: 0.5,
            train_loss: 0.25,
            grad_norm: 1.0,
            test_acc: None,
            eta_est: Some(0.125),
            eps_est: None,
            payload_bytes: 800,
            num_syncs: 2,
            wall_ms: 1.23456,
            step_norm: 0.0,
            step_bound: 0.0,
        };
        sink.record(&rec).unwrap();
        let text = String::from_utf8(sink.into_inner().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,train_loss,grad_norm,test_acc,eta_est,eps_est,payload_bytes,wall_ms"
        );
        assert_eq!(lines.next().unwrap(), "3,0.5,0.25,1,,0.125,,800,1.235");
    }
}
