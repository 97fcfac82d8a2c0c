//! Plain-text summary of an output directory.

use std::fmt::Write as _;
use std::path::Path;

use izmpc::analysis::StabilityReport;

use crate::error::Result;
use crate::output::{read_json, run_dir, Manifest};

pub fn render(manifest: &Manifest, reports: &[StabilityReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario   {}", manifest.scenario);
    let _ = writeln!(s, "pairs      {}", manifest.target_pairs);
    let _ = writeln!(s, "C_phi      {:.6}", manifest.c_phi);
    let _ = writeln!(s, "sets       {:.2} s", manifest.sets_seconds);
    let _ = writeln!(s, "wall       {:.2} s", manifest.wall_seconds);
    for (run, rep) in manifest.runs.iter().zip(reports) {
        let _ = writeln!(s);
        let _ = writeln!(s, "[{}] x0 = {:?}", run.dir, run.x0);
        let _ = writeln!(s, "  impulses          {}", run.impulses);
        let statuses: Vec<String> = run.status_counts.iter().map(|(k, v)| format!("{k} {v}")).collect();
        let _ = writeln!(s, "  solves            {}", statuses.join(", "));
        let _ = writeln!(s, "  violations        {}", run.violations);
        if let Some(d) = run.final_dist_to_set {
            let _ = writeln!(s, "  final d(x, X_S*)  {d:.4e}");
        }
        let tail = rep
            .beam_sup_per_period
            .iter()
            .rev()
            .take(((rep.beam_sup_per_period.len() as f64) * rep.settle_fraction).ceil() as usize)
            .fold(0.0f64, |a, &b| a.max(b));
        let _ = writeln!(s, "  tail sup d(x, O)  {tail:.4e} (eps {})", rep.eps);
        let _ = writeln!(s, "  margin failures   {}", rep.certificate_failures.len());
        for (k, v) in &rep.verdicts {
            let _ = writeln!(s, "  {k:<28}{}", if *v { "yes" } else { "no" });
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "overall    {}", if manifest.succeeded { "ok" } else { "not converged" });
    s
}

pub fn report_dir(out: &Path) -> Result<String> {
    let manifest: Manifest = read_json(&out.join("manifest.json"))?;
    let reports = (0..manifest.runs.len())
        .map(|i| read_json(&run_dir(out, i).join("report.json")))
        .collect::<Result<Vec<StabilityReport>>>()?;
    Ok(render(&manifest, &reports))
}
