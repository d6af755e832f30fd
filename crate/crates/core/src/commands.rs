//! The `generate`, `unmix`, `detect` and `evaluate` commands.
//!
//! Every command writes `manifest.toml` (the resolved config plus its hash and
//! seed, loadable as a config) and `timing.txt` into its output directory.
//! All other outputs depend only on the config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{Mode, RunConfig};
use crate::error::{check_dim, Error, Result};
use crate::estimators::{detect, DetectionResult, PosteriorAccumulator, PosteriorSummary};
use crate::evaluation::{detection_rates, reconstruction_error_per_class, rnmse, rnmse_per_class, MetricReport};
use crate::io;
use crate::model::{AbundanceField, Grid, InteractionBasis, PixelField};
use crate::sampler::run_chain_with;
use crate::synth::{generate_scene, ClassMap, Scene};

pub const CUBE: &str = "cube.bin";
pub const ENDMEMBERS: &str = "endmembers.csv";
pub const CLASS_MAP: &str = "class_map.txt";
pub const NONLIN_MASK: &str = "nonlin_mask.txt";
pub const TRUE_ABUNDANCES: &str = "abundances_true.csv";
pub const TRUE_ENERGY: &str = "phi_energy_true.csv";
pub const NOISE: &str = "sigma2.txt";
pub const MANIFEST: &str = "manifest.toml";
pub const TIMING: &str = "timing.txt";
pub const ALPHA3_TRACE: &str = "alpha3_trace.txt";
pub const ENERGY_MAP: &str = "nonlin_energy.csv";
pub const SCALE_MAP: &str = "scale.csv";
pub const RECONSTRUCTION: &str = "reconstruction.bin";
pub const DECISION: &str = "decision.pgm";
pub const REPORT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

/// `abundance_1.csv`, `abundance_2.csv`, ...
pub fn abundance_file(r: usize) -> String {
    format!("abundance_{}.csv", r + 1)
}

pub fn probability_file(eta: f64) -> String {
    format!("probability_eta{eta}.csv")
}

pub fn probability_image(eta: f64) -> String {
    format!("probability_eta{eta}.pgm")
}

pub fn decision_file(eta: f64) -> String {
    format!("decision_eta{eta}.pgm")
}

fn write_run_files(dir: &Path, cfg: &RunConfig, started: Instant) -> Result<()> {
    io::write_file(&dir.join(MANIFEST), cfg.with_manifest().to_toml().as_bytes())?;
    io::write_file(&dir.join(TIMING), format!("wall_seconds = {:.3}\n", started.elapsed().as_secs_f64()).as_bytes())
}

fn mask_grid(rows: usize, cols: usize, mask: &[bool]) -> ClassMap {
    ClassMap {
        rows,
        cols,
        labels: mask.iter().map(|m| usize::from(*m)).collect(),
    }
}

/// Synthesise a scene and write the cube with its ground truth into `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Scene> {
    let started = Instant::now();
    cfg.scene.validate()?;
    let scene = generate_scene(&cfg.scene)?;
    let (rows, cols) = (cfg.scene.n_row, cfg.scene.n_col);
    io::write_cube(&out.join(CUBE), &scene.cube)?;
    io::write_endmembers(&out.join(ENDMEMBERS), &scene.endmembers)?;
    io::write_class_map(&out.join(CLASS_MAP), &scene.truth.class_map)?;
    io::write_class_map(&out.join(NONLIN_MASK), &mask_grid(rows, cols, &scene.truth.nonlin_mask))?;
    let header: Vec<String> = (1..=scene.endmembers.count()).map(|r| format!("a{r}")).collect();
    io::write_pixel_table(&out.join(TRUE_ABUNDANCES), &header, scene.truth.abundances.as_slice())?;
    io::write_grid(&out.join(TRUE_ENERGY), &Grid::from_vec(rows, cols, scene.truth.phi_energy()))?;
    io::write_lines(&out.join(NOISE), &[scene.sigma2])?;
    write_run_files(out, cfg, started)?;
    log::info!("wrote {}x{}x{} scene to {}", rows, cols, cfg.scene.bands, out.display());
    Ok(scene)
}

/// What `unmix` produced: the posterior summary for the sampler, or the
/// abundance map for a least-squares method.
#[derive(Debug)]
pub enum UnmixResult {
    Posterior(Box<PosteriorSummary>),
    Abundances(AbundanceField),
}

impl UnmixResult {
    pub fn abundances(&self) -> &AbundanceField {
        match self {
            UnmixResult::Posterior(s) => &s.abundances,
            UnmixResult::Abundances(a) => a,
        }
    }
}

/// Unmix the cube in `paths.scene_dir` and write the estimates into `out`.
pub fn cmd_unmix(cfg: &RunConfig, out: &Path) -> Result<UnmixResult> {
    let started = Instant::now();
    cfg.validate()?;
    let scene_dir = &cfg.paths.scene_dir;
    let y = io::read_cube(&scene_dir.join(CUBE))?;
    let m = io::read_endmembers(&scene_dir.join(ENDMEMBERS))?;
    check_dim("endmember bands vs cube bands", y.bands(), m.bands())?;
    let (rows, cols) = (y.rows(), y.cols());
    let write_abundances = |a: &AbundanceField| -> Result<()> {
        for r in 0..a.depth() {
            io::write_grid(&out.join(abundance_file(r)), &a.component(r))?;
        }
        Ok(())
    };

    let result = if let Some(baseline) = cfg.unmix.method.baseline() {
        let (a, _) = crate::baselines::unmix_image(&y, &m, baseline)?;
        write_abundances(&a)?;
        UnmixResult::Abundances(a)
    } else {
        let basis = InteractionBasis::new(&m);
        let mut acc = PosteriorAccumulator::new(&y, &basis, &cfg.unmix.etas)?;
        let trace = run_chain_with(&y, &m, &cfg.chain, &mut acc)?;
        let summary = acc.finish()?;
        write_abundances(&summary.abundances)?;
        io::write_grid(&out.join(ENERGY_MAP), &summary.nonlin_energy)?;
        io::write_grid(&out.join(SCALE_MAP), &summary.s)?;
        io::write_cube(&out.join(RECONSTRUCTION), &summary.reconstruction(&basis)?)?;
        io::write_lines(&out.join(ALPHA3_TRACE), &trace.alpha3_trace)?;
        for (eta, p) in &summary.prob_maps {
            io::write_grid(&out.join(probability_file(*eta)), p)?;
            io::write_pgm(&out.join(probability_image(*eta)), rows, cols, p.as_slice())?;
        }
        let d = detect(&summary.prob_maps[0].1, cfg.unmix.etas[0], cfg.unmix.a0, cfg.unmix.a1)?;
        write_decision(&out.join(DECISION), &d)?;
        UnmixResult::Posterior(Box::new(summary))
    };
    write_run_files(out, cfg, started)?;
    Ok(result)
}

fn write_decision(path: &Path, d: &DetectionResult) -> Result<()> {
    let values: Vec<f64> = d.decision_map.iter().map(|b| f64::from(u8::from(*b))).collect();
    io::write_pgm(path, d.prob_map.rows(), d.prob_map.cols(), &values)
}

fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let map = io::read_class_map(path)?;
    Ok(map.labels.iter().map(|l| *l != 0).collect())
}

/// Threshold the probability maps in `paths.estimate_dir` for every
/// configured `eta` and write one decision map per `eta` into `out`.
pub fn cmd_detect(cfg: &RunConfig, out: &Path) -> Result<Vec<DetectionResult>> {
    let started = Instant::now();
    cfg.validate()?;
    let mask_path = cfg.paths.scene_dir.join(NONLIN_MASK);
    let mask = if mask_path.exists() { Some(read_mask(&mask_path)?) } else { None };
    let mut summary = String::from("eta,threshold,n_detected,p_fa,p_d\n");
    let mut results = Vec::new();
    for &eta in &cfg.unmix.etas {
        let p = io::read_grid(&cfg.paths.estimate_dir.join(probability_file(eta)))?;
        let d = detect(&p, eta, cfg.unmix.a0, cfg.unmix.a1)?;
        write_decision(&out.join(decision_file(eta)), &d)?;
        let (fa, pd) = match &mask {
            Some(m) => detection_rates(&d.decision_map, m)?,
            None => (None, None),
        };
        let f = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        summary.push_str(&format!("{eta},{},{},{},{}\n", d.threshold(), d.n_detected(), f(fa), f(pd)));
        results.push(d);
    }
    io::write_file(&out.join("detection.csv"), summary.as_bytes())?;
    write_run_files(out, cfg, started)?;
    Ok(results)
}

/// Outcome of `evaluate`: the metrics and the list of violated thresholds.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub violations: Vec<String>,
}

impl Evaluation {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn read_estimated_abundances(dir: &Path, depth: usize, rows: usize, cols: usize) -> Result<AbundanceField> {
    let mut values = vec![0.0; depth * rows * cols];
    for r in 0..depth {
        let path = dir.join(abundance_file(r));
        let g = io::read_grid(&path)?;
        if g.rows() != rows || g.cols() != cols {
            return Err(Error::format(
                &path,
                format!("expected a {rows}x{cols} grid, found {}x{}", g.rows(), g.cols()),
            ));
        }
        for (p, v) in g.as_slice().iter().enumerate() {
            values[p * depth + r] = *v;
        }
    }
    PixelField::new(depth, rows, cols, values)
}

/// Compare the estimates in `paths.estimate_dir` with the ground truth in
/// `paths.scene_dir`, write the report into `out` and check the thresholds.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<Evaluation> {
    let started = Instant::now();
    let (scene_dir, est_dir) = (&cfg.paths.scene_dir, &cfg.paths.estimate_dir);
    let class_map = io::read_class_map(&scene_dir.join(CLASS_MAP))?;
    let (rows, cols) = (class_map.rows, class_map.cols);
    let (depth, truth) = io::read_pixel_table(&scene_dir.join(TRUE_ABUNDANCES))?;
    let truth = PixelField::new(depth, rows, cols, truth)?;
    let est = read_estimated_abundances(est_dir, depth, rows, cols)?;

    let name = |k: usize| {
        cfg.scene
            .class_models
            .get(k)
            .map_or_else(|| format!("class{k}"), |c| c.name().to_string())
    };
    let named = |m: BTreeMap<usize, f64>| m.into_iter().map(|(k, v)| (name(k), v)).collect::<BTreeMap<_, _>>();
    let mut report = MetricReport {
        rnmse_global: rnmse(&truth, &est)?,
        rnmse_per_class: named(rnmse_per_class(&truth, &est, &class_map)?),
        ..MetricReport::default()
    };
    let recon = est_dir.join(RECONSTRUCTION);
    if recon.exists() {
        let y = io::read_cube(&scene_dir.join(CUBE))?;
        let y_hat = io::read_cube(&recon)?;
        report.re_per_class = named(reconstruction_error_per_class(&y, &y_hat, &class_map)?);
    }
    let decision = est_dir.join(DECISION);
    if decision.exists() {
        let (r, c, d) = io::read_pgm(&decision)?;
        check_dim("decision map pixels", rows * cols, r * c)?;
        let d: Vec<bool> = d.iter().map(|v| *v > 0.5).collect();
        (report.p_fa, report.p_d) = detection_rates(&d, &read_mask(&scene_dir.join(NONLIN_MASK))?)?;
    }

    let mut violations = Vec::new();
    let t = &cfg.thresholds;
    if let Some(max) = t.max_rnmse {
        if !(report.rnmse_global <= max) {
            violations.push(format!("rnmse_global {:e} > {max:e}", report.rnmse_global));
        }
    }
    if let Some(max) = t.max_rnmse_per_class {
        for (k, v) in &report.rnmse_per_class {
            if !(*v <= max) {
                violations.push(format!("rnmse.{k} {v:e} > {max:e}"));
            }
        }
    }
    if let Some([lo, hi]) = t.re_over_sigma {
        let sigma = io::read_lines(&scene_dir.join(NOISE))?
            .first()
            .copied()
            .ok_or_else(|| Error::format(scene_dir.join(NOISE), "empty"))?
            .sqrt();
        if report.re_per_class.is_empty() {
            violations.push("reconstruction errors unavailable".into());
        }
        for (k, v) in &report.re_per_class {
            let ratio = v / sigma;
            if !(lo..=hi).contains(&ratio) {
                violations.push(format!("re.{k} / sigma = {ratio:.4} outside [{lo}, {hi}]"));
            }
        }
    }
    let mut rate_check = |label: &str, value: Option<f64>, limit: Option<f64>, upper: bool| {
        if let Some(limit) = limit {
            match value {
                Some(v) if (upper && v <= limit) || (!upper && v >= limit) => {}
                Some(v) => violations.push(format!("{label} {v:e} violates limit {limit:e}")),
                None => violations.push(format!("{label} unavailable")),
            }
        }
    };
    rate_check("p_fa", report.p_fa, t.max_p_fa, true);
    rate_check("p_d", report.p_d, t.min_p_d, false);

    io::write_file(&out.join(REPORT), report.to_key_value().as_bytes())?;
    io::write_file(&out.join(REPORT_CSV), report.to_csv().as_bytes())?;
    write_run_files(out, cfg, started)?;
    for v in &violations {
        log::warn!("threshold violated: {v}");
    }
    Ok(Evaluation { report, violations })
}

/// Default output directory of a command when `--out` is not given.
pub fn default_out(cfg: &RunConfig, mode: Mode) -> PathBuf {
    match mode {
        Mode::Generate => cfg.paths.scene_dir.clone(),
        Mode::Unmix | Mode::Detect => cfg.paths.estimate_dir.clone(),
        Mode::Evaluate => cfg.paths.report_dir.clone(),
    }
}


/// Run `mode` with `cfg`, writing into `out` or the mode's default directory.
/// Returns `false` when `evaluate` finds violated thresholds.
pub fn run(mode: Mode, cfg: &RunConfig, out: Option<&Path>) -> Result<bool> {
    let out = out.map_or_else(|| default_out(cfg, mode), Path::to_path_buf);
    match mode {
        Mode::Generate => cmd_generate(cfg, &out).map(|_| true),
        Mode::Unmix => cmd_unmix(cfg, &out).map(|_| true),
        Mode::Detect => cmd_detect(cfg, &out).map(|_| true),
        Mode::Evaluate => cmd_evaluate(cfg, &out).map(|e| e.passed()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::synth::{MixingClass, NoiseLevel, SceneSpec};

    fn small_config(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scene = SceneSpec {
            n_row: 4,
            n_col: 5,
            bands: 12,
            class_models: vec![MixingClass::LmmWsto, MixingClass::RcaGen],
            noise: NoiseLevel::Sigma2(1e-4),
            potts_sweeps: 5,
            ..SceneSpec::default()
        };
        cfg.chain.n_mc = 30;
        cfg.chain.n_bi = 20;
        cfg.paths.scene_dir = root.join("scene");
        cfg.paths.estimate_dir = root.join("est");
        cfg.paths.report_dir = root.join("report");
        cfg
    }

    fn listing(dir: &Path) -> Vec<String> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    }

    #[test]
    fn generate_writes_truth_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let scene = cmd_generate(&cfg, &cfg.paths.scene_dir).unwrap();
        let d = &cfg.paths.scene_dir;
        assert_eq!(io::read_cube(&d.join(CUBE)).unwrap().bands(), 12);
        assert_eq!(io::read_class_map(&d.join(CLASS_MAP)).unwrap(), scene.truth.class_map);
        assert_eq!(io::read_endmembers(&d.join(ENDMEMBERS)).unwrap(), scene.endmembers);
        let (depth, a) = io::read_pixel_table(&d.join(TRUE_ABUNDANCES)).unwrap();
        assert_eq!((depth, a.as_slice()), (3, scene.truth.abundances.as_slice()));
        let manifest = RunConfig::from_toml(&std::fs::read_to_string(d.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest.manifest.unwrap().config_hash, cfg.hash());
    }

    #[test]
    fn least_squares_methods_write_abundances_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cmd_generate(&cfg, &cfg.paths.scene_dir).unwrap();
        cfg.unmix.method = Method::Ncls;
        let res = cmd_unmix(&cfg, &cfg.paths.estimate_dir).unwrap();
        assert!(matches!(res, UnmixResult::Abundances(_)));
        assert_eq!(
            listing(&cfg.paths.estimate_dir),
            ["abundance_1.csv", "abundance_2.csv", "abundance_3.csv", MANIFEST, TIMING]
        );
    }

    #[test]
    fn sampler_run_writes_maps_and_evaluates() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.unmix.etas = vec![1.0, 2.0];
        cmd_generate(&cfg, &cfg.paths.scene_dir).unwrap();
        let res = cmd_unmix(&cfg, &cfg.paths.estimate_dir).unwrap();
        let names = listing(&cfg.paths.estimate_dir);
        for f in [ALPHA3_TRACE, ENERGY_MAP, SCALE_MAP, RECONSTRUCTION, DECISION, "probability_eta1.csv", "probability_eta2.pgm"] {
            assert!(names.iter().any(|n| n == f), "missing {f}");
        }
        assert_eq!(io::read_lines(&cfg.paths.estimate_dir.join(ALPHA3_TRACE)).unwrap().len(), 30);
        let ev = cmd_evaluate(&cfg, &cfg.paths.report_dir).unwrap();
        assert!(ev.passed());
        assert!((ev.report.rnmse_global - rnmse(&io_truth(&cfg), res.abundances()).unwrap()).abs() < 1e-12);
        assert!(ev.report.p_d.is_some() || ev.report.p_fa.is_some());
        assert_eq!(ev.report.re_per_class.len(), ev.report.rnmse_per_class.len());

        let det = cmd_detect(&cfg, &dir.path().join("det")).unwrap();
        assert_eq!(det.len(), 2);
        assert!(det[1].n_detected() <= det[0].n_detected());
    }

    fn io_truth(cfg: &RunConfig) -> AbundanceField {
        let (depth, v) = io::read_pixel_table(&cfg.paths.scene_dir.join(TRUE_ABUNDANCES)).unwrap();
        PixelField::new(depth, cfg.scene.n_row, cfg.scene.n_col, v).unwrap()
    }

    #[test]
    fn evaluate_truth_is_exact_and_thresholds_gate() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        let scene = cmd_generate(&cfg, &cfg.paths.scene_dir).unwrap();
        for r in 0..3 {
            io::write_grid(&cfg.paths.estimate_dir.join(abundance_file(r)), &scene.truth.abundances.component(r)).unwrap();
        }
        cfg.thresholds.max_rnmse = Some(0.0);
        cfg.thresholds.max_rnmse_per_class = Some(0.0);
        let ev = cmd_evaluate(&cfg, &cfg.paths.report_dir).unwrap();
        assert_eq!(ev.report.rnmse_global, 0.0);
        assert!(ev.passed(), "{:?}", ev.violations);

        let mut bad = scene.truth.abundances.component(0);
        bad.as_mut_slice()[0] += 0.5;
        io::write_grid(&cfg.paths.estimate_dir.join(abundance_file(0)), &bad).unwrap();
        let ev = cmd_evaluate(&cfg, &cfg.paths.report_dir).unwrap();
        assert_eq!(ev.violations.len(), 2);
        assert!(!run(Mode::Evaluate, &cfg, None).unwrap());

        std::fs::remove_file(cfg.paths.scene_dir.join(CLASS_MAP)).unwrap();
        assert!(matches!(cmd_evaluate(&cfg, &cfg.paths.report_dir), Err(Error::Io { .. })));
    }

    #[test]
    fn mismatched_endmembers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        cmd_generate(&cfg, &cfg.paths.scene_dir).unwrap();
        std::fs::write(cfg.paths.scene_dir.join(ENDMEMBERS), "0.1,0.2\n0.3,0.4\n").unwrap();
        assert!(matches!(cmd_unmix(&cfg, &cfg.paths.estimate_dir), Err(Error::Dimension { .. })));
    }
}
