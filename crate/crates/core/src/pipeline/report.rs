//! Report files: summary text, CSV tables, raw tensors and PGM images.
//! Nothing time-dependent is written, so identical runs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use super::{AttackReport, ComparisonReport, EnsembleReport};
use crate::error::Result;
use crate::io::{fmt_f64, write_image, write_normalized, write_tensor, write_text};

fn opt(x: Option<f64>) -> String {
    x.map_or("nan".into(), fmt_f64)
}

impl AttackReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# attack report");
        let _ = writeln!(s, "scene: {}", self.scene);
        let _ = writeln!(s, "victim: {}", self.victim);
        let _ = writeln!(s, "score model: {}", self.score_model);
        let mode = if self.config.mode == crate::guidance::GuidanceMode::Mpgd {
            "mpgd-style".to_string()
        } else {
            self.config.mode.to_string()
        };
        let _ = writeln!(s, "guidance: {mode}, sampler gamma {}", self.config.sampler_gamma());
        let _ = writeln!(s, "generation: {}", if self.config.sequential { "sequential" } else { "joint" });
        if let Some(r) = self.planted_rank {
            let _ = writeln!(s, "planted patch rank: {}", r + 1);
        }
        for (j, (x, c)) in self.xi.iter().zip(&self.xi_control).enumerate() {
            let _ = writeln!(s, "regions {}: mrsr {} control {}", j + 1, fmt_f64(*x), fmt_f64(*c));
        }
        let _ = writeln!(s, "background error: {}", opt(self.background_error));
        let _ = writeln!(s, "data log-density: {}", opt(self.log_density));
        if let Some(e) = &self.error {
            let _ = writeln!(s, "\n[error]\n{e}");
        }
        let _ = writeln!(s, "\n[config]\n{}", self.config.to_text());
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("summary.txt"), &self.summary())?;
        write_text(&dir.join("config.txt"), &self.config.to_text())?;
        let mut mr = String::from("regions,mrsr,mrsr_control\n");
        for (j, (x, c)) in self.xi.iter().zip(&self.xi_control).enumerate() {
            let _ = writeln!(mr, "{},{},{}", j + 1, fmt_f64(*x), fmt_f64(*c));
        }
        write_text(&dir.join("mrsr.csv"), &mr)?;
        if let Some(sal) = &self.saliency {
            let mut csv = String::from("rank,index,y,x,score,objective\n");
            for (rank, &i) in sal.ranking.iter().enumerate() {
                let (y, x) = sal.grid.patches[i].origin;
                let _ = writeln!(csv, "{},{i},{y},{x},{},{}", rank + 1, fmt_f64(sal.scores[i]), fmt_f64(sal.objectives[i]));
            }
            write_text(&dir.join("regions.csv"), &csv)?;
            write_normalized(&dir.join("saliency.pgm"), &sal.heatmap())?;
        }
        let mut steps = String::from("t,energy,state_norm,guidance_norm,delta_norm,jdelta_norm,gamma\n");
        for r in &self.records {
            let _ = writeln!(
                steps,
                "{},{},{},{},{},{},{}",
                r.t,
                opt(r.energy),
                fmt_f64(r.state_norm),
                fmt_f64(r.guidance_norm),
                opt(r.delta_norm),
                opt(r.jdelta_norm),
                fmt_f64(r.gamma)
            );
        }
        write_text(&dir.join("steps.csv"), &steps)?;
        write_tensor(&dir.join("scene.f64"), &self.scene_image)?;
        write_image(&dir.join("scene.pgm"), &self.scene_image)?;
        write_image(&dir.join("target_mask.pgm"), self.target.tensor())?;
        if let Some(m) = &self.region {
            write_image(&dir.join("adversarial_mask.pgm"), m.tensor())?;
        }
        for (name, t) in [
            ("attacked", &self.attacked),
            ("control", &self.control),
        ] {
            if let Some(t) = t {
                write_tensor(&dir.join(format!("{name}.f64")), t)?;
                write_image(&dir.join(format!("{name}.pgm")), t)?;
            }
        }
        for (name, t) in [("depth_before", &self.depth_before), ("depth_after", &self.depth_after)] {
            if let Some(t) = t {
                write_tensor(&dir.join(format!("{name}.f64")), t)?;
                write_normalized(&dir.join(format!("{name}.pgm")), t)?;
            }
        }
        Ok(())
    }
}

impl EnsembleReport {
    pub fn summary(&self) -> String {
        let mut s = String::from("# ensemble report\n");
        let _ = writeln!(s, "scenes: {} ({} failed)", self.reports.len(), self.failures());
        let _ = writeln!(s, "planted top-1 rate: {}", fmt_f64(self.planted_top1_rate()));
        for (j, ((x, c), a)) in self
            .mean_xi()
            .iter()
            .zip(self.mean_control_xi())
            .zip(self.mean_abs_control_xi())
            .enumerate()
        {
            let _ = writeln!(
                s,
                "regions {}: mean mrsr {} control {} control |mrsr| {}",
                j + 1,
                fmt_f64(*x),
                fmt_f64(c),
                fmt_f64(a)
            );
        }
        let _ = writeln!(s, "max background error: {}", fmt_f64(self.max_background_error()));
        let _ = writeln!(s, "\n[config]\n{}", self.config.to_text());
        s
    }
}

/// Summary plus one CSV row per scene.
pub fn write_ensemble(rep: &EnsembleReport, dir: &Path) -> Result<()> {
    write_text(&dir.join("summary.txt"), &rep.summary())?;
    write_text(&dir.join("config.txt"), &rep.config.to_text())?;
    let k = rep.config.srs.k;
    let mut csv = String::from("scene,planted_rank");
    for j in 1..=k {
        let _ = write!(csv, ",mrsr_{j}");
    }
    for j in 1..=k {
        let _ = write!(csv, ",control_{j}");
    }
    csv.push_str(",error\n");
    for r in &rep.reports {
        let _ = write!(csv, "{},{}", r.scene, r.planted_rank.map_or("".into(), |x| (x + 1).to_string()));
        for j in 0..k {
            let _ = write!(csv, ",{}", opt(r.xi.get(j).copied()));
        }
        for j in 0..k {
            let _ = write!(csv, ",{}", opt(r.xi_control.get(j).copied()));
        }
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(csv, ",{err}");
    }
    write_text(&dir.join("scenes.csv"), &csv)
}

/// Two tables, one row per mode and one column per seed.
pub fn write_comparison(rep: &ComparisonReport, dir: &Path) -> Result<()> {
    for (name, table) in [("mrsr.csv", &rep.xi), ("log_density.csv", &rep.log_density)] {
        let mut csv = String::from("mode");
        for s in &rep.seeds {
            let _ = write!(csv, ",seed_{s}");
        }
        csv.push('\n');
        for (m, row) in rep.modes.iter().zip(table) {
            csv.push_str(&m.to_string());
            for v in row {
                let _ = write!(csv, ",{}", fmt_f64(*v));
            }
            csv.push('\n');
        }
        write_text(&dir.join(name), &csv)?;
    }
    let mut s = String::from("mode,mean_mrsr,mean_log_density\n");
    for (i, m) in rep.modes.iter().enumerate() {
        let _ = writeln!(s, "{m},{},{}", fmt_f64(rep.mean_xi(i)), fmt_f64(rep.mean_log_density(i)));
    }
    write_text(&dir.join("summary.csv"), &s)
}
