//! Evaluation runs over held-out identities: λ sweeps, mechanism
//! comparison, query-count and α ablations, attention probes.

use std::collections::HashSet;

use crate::attention::NestedRecord;
use crate::baselines::MechanismKind;
use crate::config::{AlphaSetting, Stage};
use crate::denoiser::{CaptureLog, PromptEmbedding};
use crate::encoder::qformer_attention_maps;
use crate::error::{invalid, Error, Result};
use crate::image_io::{GrayImage, RgbImage};
use crate::metrics::{identity_score, mean, prompt_score, MetricRecord, TradeoffCurve};
use crate::model::{Model, SubjectRequest};
use crate::rng::{streams, RandomSource};
use crate::scalar::Scalar;
use crate::synth::{
    eval_prompts, in_box, make_identity, render_input, IdentityParams, Position, PromptAttributes,
};

/// Held-out prompts, each paired with an identity absent from training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub items: Vec<(PromptAttributes, IdentityParams)>,
}

impl EvalSet {
    pub fn new(training: &[IdentityParams], seed: u64) -> Self {
        let seen: HashSet<IdentityParams> = training.iter().copied().collect();
        let mut rng = RandomSource::new(seed, streams::EVAL_IDENTITIES);
        let items = eval_prompts()
            .into_iter()
            .map(|a| loop {
                let id = make_identity(&mut rng);
                if !seen.contains(&id) {
                    break (a, id);
                }
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Runs `f(0..n)` on up to `jobs` threads; results come back in index order.
pub fn parallel_map<R: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| s.spawn(move || (j..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index computed")).collect()
}

/// One generated image of the evaluation protocol.
#[derive(Clone, Debug)]
pub struct Generation {
    pub item: usize,
    pub seed: u64,
    pub image: RgbImage,
    pub identity_score: f64,
    pub prompt_score: f64,
}

fn prompt_for<T: Scalar>(model: &Model<T>, a: &PromptAttributes, word: &str) -> Result<PromptEmbedding> {
    PromptEmbedding::from_words(&model.vocab, &a.prompt_words(word))
}

fn require_personalized<T: Scalar>(model: &Model<T>) -> Result<()> {
    if model.trained != Some(Stage::B) {
        return invalid("evaluation needs a stage-B (personalized) checkpoint");
    }
    Ok(())
}

/// Generates every (item, seed) pair at attention factor `lambda`.
pub fn generate_eval<T: Scalar>(
    model: &Model<T>,
    lambda: f64,
    eval: &EvalSet,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<Generation>> {
    let n = eval.len() * seeds.len();
    let out = parallel_map(jobs, n, |k| -> Result<Generation> {
        let (item, seed) = (k / seeds.len(), seeds[k % seeds.len()]);
        let (attrs, identity) = &eval.items[item];
        let prompt = prompt_for(model, attrs, "subj")?;
        let req = SubjectRequest {
            token_index: prompt.subject_word_index(),
            images: vec![render_input(identity)],
        };
        let image = model.generate(&prompt, &[req], lambda, seed, None)?;
        Ok(Generation {
            item,
            seed,
            identity_score: identity_score(&image, identity),
            prompt_score: prompt_score(&image, attrs),
            image,
        })
    });
    out.into_iter().collect()
}

/// Flat mean over all prompts and seeds.
pub fn evaluate<T: Scalar>(model: &Model<T>, lambda: f64, eval: &EvalSet, seeds: &[u64], jobs: usize) -> Result<MetricRecord> {
    require_personalized(model)?;
    let gens = generate_eval(model, lambda, eval, seeds, jobs)?;
    Ok(record_from(model.mechanism(), lambda, seeds.len(), &gens))
}

pub fn record_from(mechanism: MechanismKind, lambda: f64, seeds: usize, gens: &[Generation]) -> MetricRecord {
    let ids: Vec<f64> = gens.iter().map(|g| g.identity_score).collect();
    let ps: Vec<f64> = gens.iter().map(|g| g.prompt_score).collect();
    MetricRecord {
        mechanism,
        lambda,
        seed: seeds as u64,
        identity_score: mean(&ids),
        prompt_score: mean(&ps),
        sample_count: gens.len(),
    }
}

pub fn sweep_lambda<T: Scalar>(
    model: &Model<T>,
    grid: &[f64],
    eval: &EvalSet,
    seeds: &[u64],
    jobs: usize,
) -> Result<TradeoffCurve> {
    require_personalized(model)?;
    if grid.is_empty() {
        return invalid("empty λ grid");
    }
    let records = grid
        .iter()
        .map(|&l| evaluate(model, l, eval, seeds, jobs))
        .collect::<Result<Vec<_>>>()?;
    TradeoffCurve::new(model.mechanism(), records)
}

/// Rejects models whose training budgets differ (config echo mismatch).
pub fn check_equal_budget<T: Scalar>(models: &[&Model<T>]) -> Result<()> {
    let Some(first) = models.first() else {
        return Ok(());
    };
    let echo = first.config.budget_echo();
    for m in &models[1..] {
        if m.config.budget_echo() != echo {
            return Err(Error::Config(format!(
                "training budget of {} differs from {}",
                m.mechanism(),
                first.mechanism()
            )));
        }
    }
    Ok(())
}

/// One curve per model, each over `grid_for(mechanism)`.
pub fn compare_mechanisms<T: Scalar>(
    models: &[&Model<T>],
    grid_for: impl Fn(MechanismKind) -> Vec<f64>,
    eval: &EvalSet,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<TradeoffCurve>> {
    check_equal_budget(models)?;
    models
        .iter()
        .map(|m| sweep_lambda(m, &grid_for(m.mechanism()), eval, seeds, jobs))
        .collect()
}

/// Identity score of the curve interpolated at a prompt score, if the curve
/// spans it (with `tolerance` of slack at the ends).
pub fn identity_at_prompt(curve: &TradeoffCurve, prompt: f64, tolerance: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve.records.iter().map(|r| (r.prompt_score, r.identity_score)).collect();
    let mut best: Option<(f64, f64)> = None;
    for &(p, i) in &pts {
        let d = (p - prompt).abs();
        if d <= tolerance && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    for w in pts.windows(2) {
        let ((p0, i0), (p1, i1)) = (w[0], w[1]);
        let (lo, hi) = if p0 < p1 { (p0, p1) } else { (p1, p0) };
        if prompt >= lo && prompt <= hi && hi > lo {
            let f = (prompt - p0) / (p1 - p0);
            return Some(i0 + f * (i1 - i0));
        }
    }
    best.map(|(_, i)| i)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryAblationRow {
    pub queries: usize,
    pub identity_score: f64,
    pub prompt_score: f64,
    pub sample_count: usize,
}

pub fn ablate_queries<T: Scalar>(
    models: &[&Model<T>],
    lambda: f64,
    eval: &EvalSet,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<QueryAblationRow>> {
    models
        .iter()
        .map(|m| {
            let r = evaluate(m, lambda, eval, seeds, jobs)?;
            Ok(QueryAblationRow {
                queries: m.encoder.qformer.num_queries(),
                identity_score: r.identity_score,
                prompt_score: r.prompt_score,
                sample_count: r.sample_count,
            })
        })
        .collect()
}

pub fn query_ablation_csv(rows: &[QueryAblationRow]) -> String {
    let mut s = String::from("queries,identity_score,prompt_score,sample_count\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.queries, r.identity_score, r.prompt_score, r.sample_count));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaAblationRow {
    pub alpha: AlphaSetting,
    pub identity_score: f64,
    pub prompt_score: f64,
    /// Mean `‖V_q[s*]‖ / ‖V[s*]‖` over layers, steps, queries and generations.
    pub norm_ratio: f64,
    pub sample_count: usize,
}

/// Mean ratio of used nested-value norms to the token's text-value norm.
pub fn norm_ratio<T: Scalar>(log: &CaptureLog<T>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (_, rec) in &log.records {
        for NestedRecord {
            values, text_value_norm, ..
        } in &rec.nested
        {
            for i in 0..values.rows() {
                let norm = values.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                sum += norm / text_value_norm;
                n += 1;
            }
        }
    }
    (sum, n)
}

pub fn ablate_alpha<T: Scalar>(
    models: &[&Model<T>],
    lambda: f64,
    eval: &EvalSet,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<AlphaAblationRow>> {
    models
        .iter()
        .map(|m| {
            require_personalized(m)?;
            let n = eval.len() * seeds.len();
            let per = parallel_map(jobs, n, |k| -> Result<(f64, f64, f64, usize)> {
                let (item, seed) = (k / seeds.len(), seeds[k % seeds.len()]);
                let (attrs, identity) = &eval.items[item];
                let prompt = prompt_for(m, attrs, "subj")?;
                let req = SubjectRequest {
                    token_index: prompt.subject_word_index(),
                    images: vec![render_input(identity)],
                };
                let mut log = CaptureLog::default();
                let img = m.generate(&prompt, &[req], lambda, seed, Some(&mut log))?;
                let (s, c) = norm_ratio(&log);
                Ok((identity_score(&img, identity), prompt_score(&img, attrs), s, c))
            });
            let per = per.into_iter().collect::<Result<Vec<_>>>()?;
            let ids: Vec<f64> = per.iter().map(|p| p.0).collect();
            let ps: Vec<f64> = per.iter().map(|p| p.1).collect();
            let (s, c) = per.iter().fold((0.0, 0usize), |acc, p| (acc.0 + p.2, acc.1 + p.3));
            Ok(AlphaAblationRow {
                alpha: m.config.train.alpha,
                identity_score: mean(&ids),
                prompt_score: mean(&ps),
                norm_ratio: if c == 0 { 0.0 } else { s / c as f64 },
                sample_count: per.len(),
            })
        })
        .collect()
}

pub fn alpha_ablation_csv(rows: &[AlphaAblationRow]) -> String {
    let mut s = String::from("alpha,identity_score,prompt_score,norm_ratio,sample_count\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.alpha.label(),
            r.identity_score,
            r.prompt_score,
            r.norm_ratio,
            r.sample_count
        ));
    }
    s
}

/// Two subjects in one prompt: `subj and pet on <background> <style> <position>`.
pub fn dual_prompt_words(a: &PromptAttributes) -> Vec<String> {
    let mut w = vec!["subj".to_string(), "and".to_string()];
    w.extend(a.prompt_words("pet"));
    w
}

/// Generates a person+pet image with one encoder run per subject.
pub fn dual_generation<T: Scalar>(
    model: &Model<T>,
    a: &PromptAttributes,
    first: &IdentityParams,
    second: &IdentityParams,
    lambda: f64,
    seed: u64,
) -> Result<RgbImage> {
    let words = dual_prompt_words(a);
    let prompt = PromptEmbedding::from_words(&model.vocab, &words)?;
    let pet = words.iter().position(|w| w == "pet").expect("pet in dual prompt");
    let subjects = [
        SubjectRequest {
            token_index: prompt.subject_word_index(),
            images: vec![render_input(first)],
        },
        SubjectRequest {
            token_index: pet,
            images: vec![render_input(second)],
        },
    ];
    model.generate(&prompt, &subjects, lambda, seed, None)
}

/// Flattened attention capture: one row of weights per (step, layer, kind,
/// token, query row). Round-trips through CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureRow {
    pub step: usize,
    pub layer: usize,
    /// `None` for external weights, the bound token index for nested ones.
    pub nested_token: Option<usize>,
    pub row: usize,
    pub weights: Vec<f64>,
}

pub const CAPTURE_HEADER: &str = "step,layer,kind,token,row,weights";

pub fn capture_rows<T: Scalar>(log: &CaptureLog<T>) -> Vec<CaptureRow> {
    let mut out = Vec::new();
    for (step, rec) in &log.records {
        for i in 0..rec.external.rows() {
            out.push(CaptureRow {
                step: *step,
                layer: rec.layer_id,
                nested_token: None,
                row: i,
                weights: rec.external.row(i).iter().map(|v| v.as_f64()).collect(),
            });
        }
        for nr in &rec.nested {
            for i in 0..nr.weights.rows() {
                out.push(CaptureRow {
                    step: *step,
                    layer: rec.layer_id,
                    nested_token: Some(nr.token_index),
                    row: i,
                    weights: nr.weights.row(i).iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
    }
    out
}

pub fn capture_csv(rows: &[CaptureRow]) -> String {
    let mut s = String::from(CAPTURE_HEADER);
    s.push('\n');
    for r in rows {
        let (kind, token) = match r.nested_token {
            None => ("external", String::new()),
            Some(t) => ("nested", t.to_string()),
        };
        let w: Vec<String> = r.weights.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{},{},{kind},{token},{},{}\n", r.step, r.layer, r.row, w.join(" ")));
    }
    s
}

pub fn parse_capture_csv(text: &str) -> Result<Vec<CaptureRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CAPTURE_HEADER) {
        return Err(Error::Format("capture CSV header missing".into()));
    }
    let bad = |l: &str| Error::Format(format!("bad capture row {l:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let nested_token = match f[2] {
                "external" => None,
                "nested" => Some(f[3].parse().map_err(|_| bad(l))?),
                _ => return Err(bad(l)),
            };
            Ok(CaptureRow {
                step: f[0].parse().map_err(|_| bad(l))?,
                layer: f[1].parse().map_err(|_| bad(l))?,
                nested_token,
                row: f[4].parse().map_err(|_| bad(l))?,
                weights: f[5]
                    .split(' ')
                    .filter(|w| !w.is_empty())
                    .map(|w| w.parse().map_err(|_| bad(l)))
                    .collect::<Result<Vec<f64>>>()?,
            })
        })
        .collect()
}

/// Heatmaps over the `grid × grid` query layout: per (step, layer) the
/// external attention column of every prompt token, and per bound token
/// the nested map of each `probe` query (as a square when M is a square).
pub fn capture_heatmaps(rows: &[CaptureRow], grid: usize, probes: &[usize]) -> Result<Vec<(String, GrayImage)>> {
    use std::collections::BTreeMap;
    let mut external: BTreeMap<(usize, usize), Vec<&CaptureRow>> = BTreeMap::new();
    let mut out = Vec::new();
    for r in rows {
        match r.nested_token {
            None => external.entry((r.step, r.layer)).or_default().push(r),
            Some(tok) if probes.contains(&r.row) => {
                let m = r.weights.len();
                let side = (m as f64).sqrt().round() as usize;
                let (w, h) = if side * side == m { (side, side) } else { (m, 1) };
                out.push((
                    format!("step{:03}_layer{}_nested{tok}_query{}.pgm", r.step, r.layer, r.row),
                    GrayImage::from_heatmap(w, h, &r.weights),
                ));
            }
            Some(_) => {}
        }
    }
    for ((step, layer), rs) in external {
        if rs.len() != grid * grid {
            return invalid(format!("{} query rows do not fill a {grid}×{grid} grid", rs.len()));
        }
        let tokens = rs[0].weights.len();
        for tok in 0..tokens {
            let col: Vec<f64> = rs.iter().map(|r| r.weights[tok]).collect();
            out.push((
                format!("step{step:03}_layer{layer}_token{tok}.pgm"),
                GrayImage::from_heatmap(grid, grid, &col),
            ));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Result of tracing dominant nested tokens back to input patches.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub probes: usize,
    pub inside: usize,
}

impl ProbeReport {
    pub fn fraction(&self) -> f64 {
        if self.probes == 0 {
            0.0
        } else {
            self.inside as f64 / self.probes as f64
        }
    }

    pub fn merge(&mut self, other: &ProbeReport) {
        self.probes += other.probes;
        self.inside += other.inside;
    }
}

fn patch_inside_subject(patch: usize, grid: usize, patch_px: usize, position: Position) -> bool {
    let (py, px) = (patch / grid, patch % grid);
    let c = patch_px / 2;
    in_box(position, px * patch_px + c, py * patch_px + c, 0)
}

/// Peak input patch of each learned query's Q-Former map.
pub fn qformer_peaks<T: Scalar>(model: &Model<T>, reference: &RgbImage) -> Result<Vec<usize>> {
    let ext = &model.encoder.extractor;
    let g = ext.grid();
    let maps = qformer_attention_maps(&ext.extract_features(reference)?, &model.encoder.qformer, (g, g))?;
    Ok(maps
        .iter()
        .map(|m| argmax(&m.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect())
}

/// For each nested row whose query patch lies inside the generated subject
/// box, checks that the Q-Former peak of its dominant token lies inside
/// the (centered) reference subject.
pub fn trace_probes<T: Scalar>(model: &Model<T>, rows: &[CaptureRow], peaks: &[usize], position: Position) -> ProbeReport {
    let out_patch = model.config.model.patch;
    let out_grid = model.config.model.image_size / out_patch;
    let ext = &model.encoder.extractor;
    let mut report = ProbeReport { probes: 0, inside: 0 };
    for r in rows.iter().filter(|r| r.nested_token.is_some()) {
        if !patch_inside_subject(r.row, out_grid, out_patch, position) {
            continue;
        }
        report.probes += 1;
        let token = argmax(&r.weights);
        if peaks
            .get(token)
            .is_some_and(|&p| patch_inside_subject(p, ext.grid(), ext.patch_size, Position::Center))
        {
            report.inside += 1;
        }
    }
    report
}

/// Dominant-token tracing over an evaluation set.
pub fn probe_dominant_tokens<T: Scalar>(
    model: &Model<T>,
    eval: &EvalSet,
    seeds: &[u64],
    lambda: f64,
) -> Result<ProbeReport> {
    require_personalized(model)?;
    if model.mechanism() != MechanismKind::Nested {
        return invalid("probing needs the nested mechanism");
    }
    let mut report = ProbeReport { probes: 0, inside: 0 };
    for (attrs, identity) in &eval.items {
        let input = render_input(identity);
        let peaks = qformer_peaks(model, &input)?;
        let prompt = prompt_for(model, attrs, "subj")?;
        let req = SubjectRequest {
            token_index: prompt.subject_word_index(),
            images: vec![input],
        };
        for &seed in seeds {
            let mut log = CaptureLog::default();
            model.generate(&prompt, std::slice::from_ref(&req), lambda, seed, Some(&mut log))?;
            report.merge(&trace_probes(model, &capture_rows(&log), &peaks, attrs.position));
        }
    }
    Ok(report)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One heatmap per learned query over the extractor patch grid.
pub fn qformer_heatmaps<T: Scalar>(model: &Model<T>, image: &RgbImage) -> Result<Vec<GrayImage>> {
    let ext = &model.encoder.extractor;
    let g = ext.grid();
    let maps = qformer_attention_maps(&ext.extract_features(image)?, &model.encoder.qformer, (g, g))?;
    Ok(maps
        .iter()
        .map(|m| GrayImage::from_heatmap(g, g, &m.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect())
}
