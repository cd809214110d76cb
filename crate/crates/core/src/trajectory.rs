//! Per-run time series shared by the discrete optimizers and the SDE
//! integrator.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Continuous time: `kη` for discrete runs, `t` for SDE runs.
    pub time: f64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    /// `η·η_k`.
    pub lr_eff: f64,
    pub g_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

impl RunStatus {
    pub fn diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }

    pub fn label(&self) -> String {
        match self {
            RunStatus::Completed => "completed".into(),
            RunStatus::Diverged { step } => format!("diverged@{step}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub run_id: u64,
    pub points: Vec<TrajectoryPoint>,
    pub status: RunStatus,
    pub final_x: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn first(&self) -> Option<&TrajectoryPoint> {
        self.points.first()
    }

    pub fn last(&self) -> Option<&TrajectoryPoint> {
        self.points.last()
    }

    /// Recorded point at exactly `step`, if any.
    pub fn at_step(&self, step: usize) -> Option<&TrajectoryPoint> {
        self.points
            .binary_search_by_key(&step, |p| p.step)
            .ok()
            .map(|i| &self.points[i])
    }

    /// CSV rows `run_id,step,time,loss,grad_norm_sq,lr_eff,g_hat,status`.
    pub fn write_csv_rows<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let n = self.points.len();
        for (i, p) in self.points.iter().enumerate() {
            let status = if i + 1 == n { self.status.label() } else { "running".into() };
            writeln!(
                w,
                "{},{},{},{:e},{:e},{:e},{:e},{}",
                self.run_id, p.step, p.time, p.loss, p.grad_norm_sq, p.lr_eff, p.g_hat, status
            )?;
        }
        Ok(())
    }
}

pub const CSV_HEADER: &str = "run_id,step,time,loss,grad_norm_sq,lr_eff,g_hat,status";

/// `true` when `x` or `loss` leaves the finite region bounded by `threshold`.
pub fn is_diverged(x: &[f64], loss: f64, threshold: f64) -> bool {
    if !loss.is_finite() || loss > threshold {
        return true;
    }
    let mut sq = 0.0;
    for v in x {
        if !v.is_finite() {
            return true;
        }
        sq += v * v;
    }
    sq.sqrt() > threshold
}
