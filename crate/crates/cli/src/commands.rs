//! The pipeline commands behind the `frl` binary.
//!
//! Every command reads one config, writes its artifacts plus a run manifest
//! into the output directory, and embeds the config hash in each artifact so
//! stage files cannot be mixed across configs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use frl_core::alphabet::{
    lambda_p_constant, make_sequence_plan, search_lambda_p_set, Alphabet, IterationBudget,
    LambdaPCertificate, SearchBudget, SequencePlan,
};
use frl_core::cantor::{build_stage, build_stage_zero_translation, CantorStage, StageDocument};
use frl_core::estimates::{restriction_report, Cube, GKind, RestrictionOpts};
use frl_core::quad::linear_fit;
use frl_core::spectral::{decay_profile, lp_growth_of_muhat, mu_hat, self_similar_product_form};
use frl_core::Error as CoreError;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub const RESTRICT_CSV_HEADER: &str = "k,p,strategy,measured_ratio,paper_bound,ratio_over_bound";
pub const SHARPNESS_CSV_HEADER: &str = "p,R,lp_norm";
pub const COMPARE_CSV_HEADER: &str = "branch,p,R,lp_norm";

#[derive(Debug, Serialize, Deserialize)]
struct AlphabetFile {
    config_hash: String,
    #[serde(flatten)]
    alphabet: Alphabet,
}

#[derive(Debug, Serialize, Deserialize)]
struct CertificateFile {
    config_hash: String,
    #[serde(flatten)]
    certificate: LambdaPCertificate,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StageFile {
    pub config_hash: String,
    pub code_version: String,
    pub stage: StageDocument,
}

/// Fixed two-line CSV preamble: config hash plus a versioned schema tag.
/// The header row below it is stable per command.
fn csv_preamble(config_hash: &str, schema: &str) -> String {
    format!("# config_hash={config_hash}\n# schema={schema}\n")
}
fn ensure_out_dir(config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    Ok(())
}

/// Sequence plan implied by the config (depth at least 1 so that depth-0
/// control stages still have a valid plan to hang off).
pub fn plan_from_config(config: &ExperimentConfig) -> Result<SequencePlan> {
    Ok(make_sequence_plan(
        config.alpha,
        config.d,
        config.n1,
        config.depth.max(1),
        config.c0,
    )?)
}

pub fn alphabet_path(config: &ExperimentConfig, level: usize) -> PathBuf {
    config.out_dir.join(format!("alphabet_L{level}.json"))
}

pub fn certificate_path(config: &ExperimentConfig, level: usize) -> PathBuf {
    config.out_dir.join(format!("certificate_L{level}.json"))
}

pub fn stage_path(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join("stage.json")
}

/// Search one Λ(p) alphabet per plan level (or a single level), certify it,
/// and persist both documents. On a failed search the best set found is still
/// written before the failure is reported — callers decide what to keep.
pub fn cmd_search_alphabet(
    config: &ExperimentConfig,
    level: Option<usize>,
) -> Result<Vec<PathBuf>> {
    ensure_out_dir(config)?;
    let start = Instant::now();
    let plan = plan_from_config(config)?;
    let hash = config.hash();
    let levels: Vec<usize> = match level {
        Some(j) => {
            if j == 0 || j > plan.depth() {
                return Err(CliError::Validation(format!(
                    "level {j} outside 1..={}",
                    plan.depth()
                )));
            }
            vec![j]
        }
        None => (1..=plan.depth()).collect(),
    };
    let budget = SearchBudget {
        swap_rounds: config.search.swap_rounds,
        certify: IterationBudget {
            starts: config.search.starts,
            iters_per_start: config.search.iters_per_start,
        },
        ..SearchBudget::default()
    };
    let mut manifest = RunManifest::new("search-alphabet", &hash, config.seed);
    let mut written = Vec::new();
    let mut failure: Option<CliError> = None;
    for j in levels {
        let n = plan.n_seq[j - 1];
        let t = plan.t_seq[j - 1] as usize;
        let seed = config.seed.wrapping_add(j as u64);
        let outcome = search_lambda_p_set(
            n,
            config.d,
            config.plan_p(),
            t,
            config.search.constant_cap,
            seed,
            budget,
        );
        let (alphabet, certificate) = match outcome {
            Ok(pair) => pair,
            Err(CoreError::SearchFailure {
                best,
                certificate,
                constant,
                cap,
            }) => {
                failure = Some(CliError::Search(format!(
                    "level {j}: best constant {constant} exceeds cap {cap}"
                )));
                (*best, *certificate)
            }
            Err(e) => return Err(e.into()),
        };
        let a_path = alphabet_path(config, j);
        let c_path = certificate_path(config, j);
        std::fs::write(
            &a_path,
            serde_json::to_string_pretty(&AlphabetFile {
                config_hash: hash.clone(),
                alphabet,
            })?,
        )?;
        std::fs::write(
            &c_path,
            serde_json::to_string_pretty(&CertificateFile {
                config_hash: hash.clone(),
                certificate,
            })?,
        )?;
        manifest.record_output(&a_path)?;
        manifest.record_output(&c_path)?;
        written.push(a_path);
        written.push(c_path);
    }
    manifest.wall_ms = start.elapsed().as_millis();
    manifest.write(&config.out_dir)?;
    match failure {
        Some(err) => Err(err),
        None => Ok(written),
    }
}

fn load_alphabet(config: &ExperimentConfig, path: &Path) -> Result<Alphabet> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let file: AlphabetFile = serde_json::from_str(&text)?;
    if file.config_hash != config.hash() {
        return Err(CliError::Validation(format!(
            "{} was produced under a different config (hash mismatch)",
            path.display()
        )));
    }
    Ok(file.alphabet)
}

pub fn load_stage(config: &ExperimentConfig, path: &Path) -> Result<CantorStage> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let file: StageFile = serde_json::from_str(&text)?;
    if file.config_hash != config.hash() {
        return Err(CliError::Validation(format!(
            "{} was produced under a different config (hash mismatch)",
            path.display()
        )));
    }
    Ok(file.stage.into_stage(config.node_budget)?)
}

/// Build the stage from previously searched alphabets, persist it, and print
/// the N_k/T_k summary plus the per-level sandwich check
/// `c0^j N_j^α ≤ T_j ≤ c1^j N_j^α`.
pub fn cmd_build(config: &ExperimentConfig, alphabet_paths: &[PathBuf]) -> Result<PathBuf> {
    ensure_out_dir(config)?;
    let start = Instant::now();
    let plan = plan_from_config(config)?;
    let hash = config.hash();
    let mut manifest = RunManifest::new("build", &hash, config.seed);

    let paths: Vec<PathBuf> = if alphabet_paths.is_empty() {
        (1..=config.depth.max(1))
            .map(|j| alphabet_path(config, j))
            .collect()
    } else {
        alphabet_paths.to_vec()
    };
    let mut alphabets = Vec::new();
    for p in &paths {
        manifest.record_input(p)?;
        alphabets.push(load_alphabet(config, p)?);
    }

    let stage = build_stage(
        &plan,
        &alphabets,
        config.depth,
        config.seed,
        config.node_budget,
    )?;
    let out = stage_path(config);
    std::fs::write(
        &out,
        serde_json::to_string_pretty(&StageFile {
            config_hash: hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            stage: stage.to_document(),
        })?,
    )?;
    manifest.record_output(&out)?;
    manifest.wall_ms = start.elapsed().as_millis();
    manifest.write(&config.out_dir)?;

    println!(
        "N_k = {}, T_k = {} (depth {})",
        stage.n_k(),
        stage.t_k(),
        stage.depth()
    );
    println!("sandwich check: c0^j N_j^a <= T_j <= c1^j N_j^a");
    for j in 1..=stage.depth() {
        let nj = stage.n_cum()[j] as f64;
        let tj = stage.t_cum()[j] as f64;
        let lo = plan.c0.powi(j as i32) * nj.powf(plan.alpha);
        let hi = plan.c1.powi(j as i32) * nj.powf(plan.alpha);
        let ok = lo * (1.0 - 1e-9) <= tj && tj <= hi * (1.0 + 1e-9);
        println!(
            "  j={j}: {lo:.4} <= {tj} <= {hi:.4}  [{}]",
            if ok { "ok" } else { "VIOLATED" }
        );
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct DecayOutput {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub fitted_beta: f64,
}

/// Decay profile of the stage: CSV of per-annulus suprema plus a JSON header
/// with the fitted exponent. Exits nonzero (experiment failure) if the fit is
/// nonpositive where a clearly positive decay is expected (α ≥ 0.2, k ≥ 2).
pub fn cmd_decay(config: &ExperimentConfig, stage_file: &Path) -> Result<DecayOutput> {
    ensure_out_dir(config)?;
    let start = Instant::now();
    let hash = config.hash();
    let mut manifest = RunManifest::new("decay", &hash, config.seed);
    manifest.record_input(stage_file)?;
    let stage = load_stage(config, stage_file)?;
    let r_max = config
        .decay
        .r_max
        .unwrap_or_else(|| (stage.n_k() as f64).max(256.0));
    let profile = decay_profile(&stage, r_max, config.decay.per_annulus, config.seed)?;

    let csv_path = config.out_dir.join("decay.csv");
    std::fs::write(
        &csv_path,
        csv_preamble(&hash, "decay-v1") + &profile.to_csv(),
    )?;
    let json_path = config.out_dir.join("decay.json");
    let mut header = profile.json_header(config.seed);
    header["config_hash"] = serde_json::Value::String(hash.clone());
    std::fs::write(&json_path, serde_json::to_string_pretty(&header)?)?;
    manifest.record_output(&csv_path)?;
    manifest.record_output(&json_path)?;
    manifest.wall_ms = start.elapsed().as_millis();
    manifest.write(&config.out_dir)?;

    println!(
        "fitted_beta = {:.4} over [{}, {}] (residual {:.3})",
        profile.fitted_beta, profile.fit_range.0, profile.fit_range.1, profile.residual
    );
    if profile.fitted_beta <= 0.0 && config.alpha >= 0.2 && stage.depth() >= 2 {
        return Err(CliError::Experiment(format!(
            "fitted_beta = {} is nonpositive at alpha = {}, k = {}",
            profile.fitted_beta,
            config.alpha,
            stage.depth()
        )));
    }
    Ok(DecayOutput {
        csv: csv_path,
        json: json_path,
        fitted_beta: profile.fitted_beta,
    })
}

/// Default C₀ for the predicted restriction bound: the largest per-level
/// certified Λ(p) constant at the experiment exponent, times the 2^d cost of
/// the mod-N translation model.
pub fn default_restriction_c0(
    config: &ExperimentConfig,
    stage: &CantorStage,
    p: f64,
) -> Result<f64> {
    let mut worst: f64 = 1.0;
    for (j, alphabet) in stage.alphabets().iter().enumerate() {
        let cert = lambda_p_constant(
            alphabet,
            p,
            IterationBudget::default(),
            config.seed.wrapping_add(j as u64),
            f64::INFINITY,
        )?;
        worst = worst.max(cert.constant_lower);
    }
    Ok(worst * (2f64).powi(config.d as i32))
}

#[derive(Debug, Serialize)]
pub struct RestrictOutput {
    pub csv: PathBuf,
    pub c0: f64,
    /// rows of (k, strategy, normalized ratio measured/(N^{d/p}·T^{-1/2})).
    pub normalized: Vec<(usize, String, f64)>,
    /// Set when p is not above the theorem range 2d/α.
    pub warning: Option<String>,
}

/// Restriction growth table over the nested sub-stages k' = 0..k with all
/// density strategies. Warns when p is at or below the theorem range 2d/α.
pub fn cmd_restrict(config: &ExperimentConfig, stage_file: &Path) -> Result<RestrictOutput> {
    ensure_out_dir(config)?;
    let start = Instant::now();
    let hash = config.hash();
    let mut manifest = RunManifest::new("restrict", &hash, config.seed);
    manifest.record_tolerance("spacing", config.tolerances.spacing);
    manifest.record_tolerance("quadrature_rel", config.tolerances.quadrature_rel);
    manifest.record_input(stage_file)?;
    let stage = load_stage(config, stage_file)?;
    let p = config.restrict.p.unwrap_or_else(|| config.effective_p());
    let warning = if p <= config.plan_p() {
        let text = format!(
            "p = {p} is not above 2d/alpha = {}; the restriction bound is outside its theorem range",
            config.plan_p()
        );
        eprintln!("warning: {text}");
        Some(text)
    } else {
        None
    };
    let c0 = match config.restrict.c0_override {
        Some(v) => v,
        None => default_restriction_c0(config, &stage, p)?,
    };
    let opts = RestrictionOpts {
        spacing: config.tolerances.spacing,
        power_starts: config.restrict.power_starts,
        power_iters: config.restrict.power_iters,
    };

    let mut csv = csv_preamble(&hash, "restrict-v1");
    csv.push_str(RESTRICT_CSV_HEADER);
    csv.push('\n');
    let mut normalized = Vec::new();
    for k in 0..=stage.depth() {
        let sub = stage.truncate(k);
        let side = sub.n_k() as f64;
        let j = Cube::new(vec![0.0; config.d], side)?;
        let reports = restriction_report(&sub, p, &j, &GKind::ALL, config.seed, c0, &opts)?;
        for r in &reports {
            let scale = side.powf(config.d as f64 / p) / (sub.t_k() as f64).sqrt();
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.k,
                r.p,
                r.g_kind.name(),
                r.measured_ratio,
                r.paper_bound,
                r.measured_ratio / r.paper_bound
            ));
            normalized.push((r.k, r.g_kind.name().to_string(), r.measured_ratio / scale));
        }
    }
    let csv_path = config.out_dir.join("restrict.csv");
    std::fs::write(&csv_path, &csv)?;
    manifest.record_output(&csv_path)?;
    manifest.wall_ms = start.elapsed().as_millis();
    manifest.write(&config.out_dir)?;

    println!("restriction growth table (C0 = {c0:.4}):");
    for (k, strategy, q) in &normalized {
        println!("  k={k} {strategy:>18}: measured/(N^(d/p) T^(-1/2)) = {q:.4}");
    }
    Ok(RestrictOutput {
        csv: csv_path,
        c0,
        normalized,
        warning,
    })
}

#[derive(Debug, Serialize)]
pub struct SharpnessOutput {
    pub csv: PathBuf,
    pub json: PathBuf,
    /// p → log-log slope of ‖μ̂‖_{L^p([-R,R]^d)} against R.
    pub slopes: Vec<(f64, f64)>,
}

fn growth_slope(r_list: &[f64], norms: &[f64]) -> f64 {
    let xs: Vec<f64> = r_list.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|n| n.max(1e-300).ln()).collect();
    linear_fit(&xs, &ys).1
}

/// L^p growth of μ̂ over expanding boxes for exponents below and above the
/// critical 2d/α, with fitted log-log slopes.
pub fn cmd_sharpness(config: &ExperimentConfig, stage_file: &Path) -> Result<SharpnessOutput> {
    ensure_out_dir(config)?;
    let start = Instant::now();
    let hash = config.hash();
    let mut manifest = RunManifest::new("sharpness", &hash, config.seed);
    manifest.record_tolerance("quadrature_rel", config.tolerances.quadrature_rel);
    manifest.record_input(stage_file)?;
    let stage = load_stage(config, stage_file)?;
    let p_list = config
        .sharpness
        .p_list
        .clone()
        .unwrap_or_else(|| vec![config.plan_p() - 1.0, config.plan_p() + 1.0]);
    let r_list = &config.sharpness.r_list;

    let mut csv = csv_preamble(&hash, "sharpness-v1");
    csv.push_str(SHARPNESS_CSV_HEADER);
    csv.push('\n');
    let mut slopes = Vec::new();
    for &p in &p_list {
        let norms = lp_growth_of_muhat(&stage, p, r_list)?;
        for (r, n) in r_list.iter().zip(&norms) {
            csv.push_str(&format!("{p},{r},{n}\n"));
        }
        slopes.push((p, growth_slope(r_list, &norms)));
    }
    let csv_path = config.out_dir.join("sharpness.csv");
    std::fs::write(&csv_path, &csv)?;
    let json_path = config.out_dir.join("sharpness_slopes.json");
    let json = serde_json::json!({
        "config_hash": hash,
        "critical_p": config.plan_p(),
        "slopes": slopes.iter().map(|(p, s)| serde_json::json!({"p": p, "slope": s})).collect::<Vec<_>>(),
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&json)?)?;
    manifest.record_output(&csv_path)?;
    manifest.record_output(&json_path)?;
    manifest.wall_ms = start.elapsed().as_millis();
    manifest.write(&config.out_dir)?;

    for (p, s) in &slopes {
        println!("p = {p}: log-log growth slope = {s:.4}");
    }
    Ok(SharpnessOutput {
        csv: csv_path,
        json: json_path,
        slopes,
    })
}

#[derive(Debug, Serialize)]
pub struct CompareTernaryOutput {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub alpha: f64,
    pub slope_ternary: f64,
    pub slope_random: f64,
    pub product_form_max_err: f64,
}

/// Contrast the deterministic zero-translation ternary-style stage (n = 3,
/// B = {0, 2} at every level) with a random-translate stage of the same plan:
/// the ternary transform keeps mass along 3-adic frequencies and its L^p
/// norms keep growing, while the random stage flattens for p above 2d/α.
pub fn cmd_compare_ternary(config: &ExperimentConfig) -> Result<CompareTernaryOutput> {
    if config.d != 1 {
        return Err(CliError::Validation(
            "compare-ternary is a one-dimensional experiment (set d = 1)".into(),
        ));
    }
    ensure_out_dir(config)?;
    let start = Instant::now();
    let hash = config.hash();
    let mut manifest = RunManifest::new("compare-ternary", &hash, config.seed);

    let depth = config.depth.max(1);
    let plan = SequencePlan::constant(1, 3, 2, depth)?;
    let b = Alphabet::new(1, 3, vec![vec![0], vec![2]])?;
    let alphabets = vec![b; depth];
    let ternary = build_stage_zero_translation(&plan, &alphabets, depth, config.node_budget)?;
    let random = build_stage(&plan, &alphabets, depth, config.seed, config.node_budget)?;

    // closed-form factorization check at 3-adic frequencies
    let mut product_form_max_err = 0.0f64;
    let nk = ternary.n_k() as f64;
    for m in 1..=5 {
        let xi = [nk * m as f64];
        let tree = mu_hat(&ternary, &xi);
        let product = self_similar_product_form(&ternary, &xi)?;
        product_form_max_err = product_form_max_err.max((tree - product).norm());
    }

    let p = 6.0;
    let r_list = &config.sharpness.r_list;
    let ternary_norms = lp_growth_of_muhat(&ternary, p, r_list)?;
    let random_norms = lp_growth_of_muhat(&random, p, r_list)?;
    let slope_ternary = growth_slope(r_list, &ternary_norms);
    let slope_random = growth_slope(r_list, &random_norms);

    let mut csv = csv_preamble(&hash, "compare-ternary-v1");
    csv.push_str(COMPARE_CSV_HEADER);
    csv.push('\n');
    for (r, n) in r_list.iter().zip(&ternary_norms) {
        csv.push_str(&format!("ternary,{p},{r},{n}\n"));
    }
    for (r, n) in r_list.iter().zip(&random_norms) {
        csv.push_str(&format!("random,{p},{r},{n}\n"));
    }
    let csv_path = config.out_dir.join("compare_ternary.csv");
    std::fs::write(&csv_path, &csv)?;
    let json_path = config.out_dir.join("compare_ternary.json");
    let json = serde_json::json!({
        "config_hash": hash,
        "alpha": plan.alpha,
        "p": p,
        "slope_ternary": slope_ternary,
        "slope_random": slope_random,
        "separation": slope_ternary - slope_random,
        "product_form_max_err": product_form_max_err,
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&json)?)?;
    manifest.record_output(&csv_path)?;
    manifest.record_output(&json_path)?;
    manifest.wall_ms = start.elapsed().as_millis();
    manifest.write(&config.out_dir)?;

    println!(
        "alpha = {:.4}; slope(ternary, p=6) = {slope_ternary:.4}, slope(random, p=6) = {slope_random:.4}",
        plan.alpha
    );
    Ok(CompareTernaryOutput {
        csv: csv_path,
        json: json_path,
        alpha: plan.alpha,
        slope_ternary,
        slope_random,
        product_form_max_err,
    })
}

/// Run the full pipeline: alphabet search, build, then every experiment named
/// in the config (`decay`, `restrict`, `sharpness`, `compare-ternary`).
pub fn cmd_run(config: &ExperimentConfig) -> Result<()> {
    cmd_search_alphabet(config, None)?;
    let stage = cmd_build(config, &[])?;
    for experiment in &config.experiments {
        match experiment.as_str() {
            "decay" => {
                cmd_decay(config, &stage)?;
            }
            "restrict" => {
                cmd_restrict(config, &stage)?;
            }
            "sharpness" => {
                cmd_sharpness(config, &stage)?;
            }
            "compare-ternary" => {
                cmd_compare_ternary(config)?;
            }
            other => {
                return Err(CliError::Validation(format!(
                    "unknown experiment {other:?} (expected decay, restrict, sharpness, compare-ternary)"
                )))
            }
        }
    }
    Ok(())
}
