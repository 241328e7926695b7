//! Feature datasets: in-memory samples, the `.jsonl` file format, the
//! synthetic cross-modal task, seeded splits and batching.
//!
//! File format: line 1 is the [`DatasetMeta`] object; every further line is
//! one sample `{"id", "visual": [[..], ..], "text": [..], "answer"}` with
//! floats written in scientific notation with 17 significant digits.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::rng::Rng;

/// One multimodal example: `regions × d_visual` region features, a `d_text`
/// question vector and the index of the correct answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<f64>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub d_visual: usize,
    pub d_text: usize,
    pub regions: usize,
    pub n_answers: usize,
    /// Generator spec or a free-form description of where the features came from.
    #[serde(default)]
    pub source: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl DatasetMeta {
    fn check(&self, s: &Sample) -> std::result::Result<(), String> {
        if s.visual.len() != self.regions {
            return Err(format!("sample {}: {} regions, expected {}", s.id, s.visual.len(), self.regions));
        }
        if let Some(r) = s.visual.iter().find(|r| r.len() != self.d_visual) {
            return Err(format!("sample {}: region width {}, expected {}", s.id, r.len(), self.d_visual));
        }
        if s.text.len() != self.d_text {
            return Err(format!("sample {}: text width {}, expected {}", s.id, s.text.len(), self.d_text));
        }
        if s.answer >= self.n_answers {
            return Err(format!("sample {}: answer {} out of range for {} answers", s.id, s.answer, self.n_answers));
        }
        let finite = s.visual.iter().flatten().chain(&s.text).all(|v| v.is_finite());
        if !finite {
            return Err(format!("sample {}: non-finite feature value", s.id));
        }
        Ok(())
    }
}

impl Dataset {
    pub fn new(meta: DatasetMeta, samples: Vec<Sample>) -> Result<Self> {
        if meta.d_visual == 0 || meta.d_text == 0 || meta.regions == 0 || meta.n_answers == 0 {
            return contract_err("dataset widths, regions and answer count must be positive");
        }
        for s in &samples {
            meta.check(s).map_err(Error::Contract)?;
        }
        Ok(Self { meta, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Order-sensitive hash of the sample ids.
    pub fn id_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.samples {
            s.id.hash(&mut h);
        }
        h.finish()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(self.to_jsonl()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        Self::read_jsonl(reader)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.meta)?;
        out.push('\n');
        for s in &self.samples {
            write_sample(&mut out, s)?;
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let meta: DatasetMeta = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad meta line: {e}"),
            })?,
            None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
        };
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            meta.check(&s).map_err(|msg| Error::Parse { line: lineno, msg })?;
            if !seen.insert(s.id.clone()) {
                return Err(Error::Parse { line: lineno, msg: format!("duplicate id {}", s.id) });
            }
            samples.push(s);
        }
        Ok(Self { meta, samples })
    }
}

fn write_floats(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x:.16e}");
    }
    out.push(']');
}

fn write_sample(out: &mut String, s: &Sample) -> Result<()> {
    out.push_str("{\"id\":");
    out.push_str(&serde_json::to_string(&s.id)?);
    out.push_str(",\"visual\":[");
    for (i, region) in s.visual.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_floats(out, region);
    }
    out.push_str("],\"text\":");
    write_floats(out, &s.text);
    let _ = write!(out, ",\"answer\":{}}}", s.answer);
    Ok(())
}

/// Parameters of the synthetic task.
///
/// Each sample draws a concept `c` and a question type `t` uniformly. One
/// randomly placed region holds `prototype(c) + N(0, σ²)`, the other regions
/// are `N(0, 1)` distractors; the text vector is `type_prototype(t) + N(0, σ²)`.
/// The answer is `lookup[c][t]`, a seeded surjection onto `0..n_answers` with
/// no constant row or column, so neither modality alone determines it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_concepts: usize,
    pub n_question_types: usize,
    pub n_answers: usize,
    pub noise_sigma: f64,
    pub regions: usize,
    pub d_visual: usize,
    pub d_text: usize,
    pub n_samples: usize,
    /// Per-coordinate standard deviation of the concept prototypes.
    pub prototype_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_concepts: 4,
            n_question_types: 4,
            n_answers: 8,
            noise_sigma: 0.25,
            regions: 3,
            d_visual: 32,
            d_text: 16,
            n_samples: 4000,
            prototype_scale: 0.6,
            seed: 0,
        }
    }
}

/// The hidden structure behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub concept_prototypes: Vec<Vec<f64>>,
    pub type_prototypes: Vec<Vec<f64>>,
    /// `lookup[concept][question_type] = answer`.
    pub lookup: Vec<Vec<usize>>,
}

const MAX_RETRIES: usize = 1000;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn separated_prototypes(
    rng: &mut Rng,
    count: usize,
    width: usize,
    scale: f64,
    min_dist: f64,
    what: &str,
) -> Result<Vec<Vec<f64>>> {
    for _ in 0..MAX_RETRIES {
        let protos: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..width).map(|_| scale * rng.normal()).collect())
            .collect();
        let ok = (0..count).all(|i| (i + 1..count).all(|j| dist(&protos[i], &protos[j]) >= min_dist));
        if ok {
            return Ok(protos);
        }
    }
    Err(Error::Generation(format!(
        "could not draw {count} {what} prototypes at pairwise distance >= {min_dist} in {MAX_RETRIES} tries"
    )))
}

fn cross_modal_lookup(rng: &mut Rng, c: usize, t: usize, a: usize) -> Result<Vec<Vec<usize>>> {
    for _ in 0..MAX_RETRIES {
        let mut cells: Vec<usize> = (0..a).chain((a..c * t).map(|_| 0)).collect();
        for cell in cells.iter_mut().skip(a) {
            *cell = rng.below(a);
        }
        rng.shuffle(&mut cells);
        let table: Vec<Vec<usize>> = cells.chunks(t).map(|r| r.to_vec()).collect();
        let row_varies = table.iter().all(|r| r.iter().any(|&v| v != r[0]));
        let col_varies = (0..t).all(|j| table.iter().any(|r| r[j] != table[0][j]));
        if row_varies && col_varies {
            return Ok(table);
        }
    }
    Err(Error::Generation(format!(
        "no {c}x{t} lookup onto {a} answers without constant rows/columns after {MAX_RETRIES} tries"
    )))
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let (c, t, a) = (self.n_concepts, self.n_question_types, self.n_answers);
        if a < 2 || c * t < a {
            return contract_err(format!("need n_concepts·n_question_types >= n_answers >= 2, got {c}·{t} and {a}"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return contract_err(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.prototype_scale > 0.0) {
            return contract_err("prototype_scale must be positive");
        }
        if self.regions == 0 || self.d_visual == 0 || self.d_text == 0 {
            return contract_err("regions, d_visual and d_text must be positive");
        }
        Ok(())
    }

    /// Draws lookup table and prototypes. Consumes the head of the seeded stream
    /// that [`generate_synthetic`] continues from.
    fn draw_task(&self, rng: &mut Rng) -> Result<SyntheticTask> {
        self.validate()?;
        let lookup = cross_modal_lookup(rng, self.n_concepts, self.n_question_types, self.n_answers)?;
        let min_dist = 4.0 * self.noise_sigma;
        let concept_prototypes = separated_prototypes(
            rng,
            self.n_concepts,
            self.d_visual,
            self.prototype_scale,
            min_dist,
            "concept",
        )?;
        let type_prototypes =
            separated_prototypes(rng, self.n_question_types, self.d_text, 1.0, min_dist, "question-type")?;
        Ok(SyntheticTask { concept_prototypes, type_prototypes, lookup })
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        self.draw_task(&mut Rng::new(self.seed))
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let mut rng = Rng::new(spec.seed);
    let task = spec.draw_task(&mut rng)?;
    let sigma = spec.noise_sigma;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let c = rng.below(spec.n_concepts);
            let t = rng.below(spec.n_question_types);
            let signal = rng.below(spec.regions);
            let visual = (0..spec.regions)
                .map(|r| {
                    (0..spec.d_visual)
                        .map(|d| {
                            if r == signal {
                                task.concept_prototypes[c][d] + sigma * rng.normal()
                            } else {
                                rng.normal()
                            }
                        })
                        .collect()
                })
                .collect();
            let text = task.type_prototypes[t].iter().map(|p| p + sigma * rng.normal()).collect();
            Sample {
                id: format!("syn-{i:06}"),
                visual,
                text,
                answer: task.lookup[c][t],
            }
        })
        .collect();
    let meta = DatasetMeta {
        d_visual: spec.d_visual,
        d_text: spec.d_text,
        regions: spec.regions,
        n_answers: spec.n_answers,
        source: serde_json::json!({ "synthetic": spec }),
    };
    Dataset::new(meta, samples)
}

/// Seeded shuffle, then contiguous train/val/test partition. Validation and
/// test sizes are floored; the remainder goes to train.
pub fn split(d: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return contract_err(format!("split fractions {fractions:?} must be positive and sum to 1"));
    }
    let n = d.len();
    let n_val = (n as f64 * fractions[1] + 1e-9).floor() as usize;
    let n_test = (n as f64 * fractions[2] + 1e-9).floor() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return contract_err(format!(
            "split of {n} samples at {fractions:?} leaves an empty part ({n_train}/{n_val}/{n_test})"
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    Ok((
        d.subset(&order[..n_train]),
        d.subset(&order[n_train..n_train + n_val]),
        d.subset(&order[n_train + n_val..]),
    ))
}

/// Iterator over batches of sample references; the final partial batch is kept.
pub struct Batches<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| &self.samples[i]).collect();
        self.pos = end;
        Some(batch)
    }
}

/// Batches in dataset order, or in an order drawn from `shuffle` when given.
pub fn batches<'a>(d: &'a Dataset, batch_size: usize, shuffle: Option<&mut Rng>) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return contract_err("batch_size must be at least 1");
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    if let Some(rng) = shuffle {
        rng.shuffle(&mut order);
    }
    Ok(Batches { samples: &d.samples, order, batch_size, pos: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize) -> SyntheticSpec {
        SyntheticSpec { n_samples: n, seed: 3, ..SyntheticSpec::default() }
    }

    #[test]
    fn lookup_is_surjective_and_cross_modal() {
        let task = small_spec(1).task().unwrap();
        let mut hit = vec![false; 8];
        for row in &task.lookup {
            assert!(row.iter().any(|&v| v != row[0]));
            row.iter().for_each(|&a| hit[a] = true);
        }
        for j in 0..4 {
            assert!(task.lookup.iter().any(|r| r[j] != task.lookup[0][j]));
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn infeasible_specs() {
        let s = SyntheticSpec { n_concepts: 2, n_question_types: 2, n_answers: 5, ..small_spec(1) };
        assert!(generate_synthetic(&s).is_err());
        // One question type means every row is constant.
        let s = SyntheticSpec { n_question_types: 1, n_answers: 2, ..small_spec(1) };
        assert!(matches!(generate_synthetic(&s), Err(Error::Generation(_))));
        // Separation impossible: huge sigma, tiny prototypes.
        let s = SyntheticSpec { noise_sigma: 100.0, ..small_spec(1) };
        assert!(matches!(generate_synthetic(&s), Err(Error::Generation(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec(50)).unwrap();
        let b = generate_synthetic(&small_spec(50)).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let c = generate_synthetic(&SyntheticSpec { seed: 4, ..small_spec(50) }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn split_sizes_and_membership() {
        let d = generate_synthetic(&small_spec(10)).unwrap();
        let (tr, va, te) = split(&d, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let mut ids: Vec<&str> = tr.samples.iter().chain(&va.samples).chain(&te.samples).map(|s| s.id.as_str()).collect();
        ids.sort();
        let mut orig: Vec<&str> = d.samples.iter().map(|s| s.id.as_str()).collect();
        orig.sort();
        assert_eq!(ids, orig);
        let again = split(&d, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(again.0.id_checksum(), tr.id_checksum());
        assert_eq!(again.2.id_checksum(), te.id_checksum());
    }

    #[test]
    fn split_errors() {
        let d = generate_synthetic(&small_spec(5)).unwrap();
        assert!(split(&d, [0.8, 0.1, 0.1], 0).is_err()); // val/test floor to 0
        assert!(split(&d, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split(&d, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn batch_sizes_and_order() {
        let d = generate_synthetic(&small_spec(10)).unwrap();
        let sizes: Vec<usize> = batches(&d, 4, None).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let ids: Vec<&str> = batches(&d, 3, None).unwrap().flatten().map(|s| s.id.as_str()).collect();
        let orig: Vec<&str> = d.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, orig);
        let mut rng = Rng::new(8);
        let mut shuffled: Vec<&str> = batches(&d, 3, Some(&mut rng)).unwrap().flatten().map(|s| s.id.as_str()).collect();
        shuffled.sort();
        assert_eq!(shuffled, orig);
        assert!(batches(&d, 0, None).is_err());
    }

    #[test]
    fn truncated_file_reports_line() {
        let d = generate_synthetic(&small_spec(4)).unwrap();
        let text = d.to_jsonl().unwrap();
        let cut = &text[..text.len() - 40];
        match Dataset::read_jsonl(cut.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn width_and_answer_violations_are_parse_errors() {
        let meta = r#"{"d_visual":2,"d_text":1,"regions":1,"n_answers":2}"#;
        let good = r#"{"id":"a","visual":[[1.0,2.0]],"text":[0.5],"answer":1}"#;
        let wide = r#"{"id":"b","visual":[[1.0,2.0,3.0]],"text":[0.5],"answer":1}"#;
        let oob = r#"{"id":"c","visual":[[1.0,2.0]],"text":[0.5],"answer":2}"#;
        for (bad, line) in [(wide, 3), (oob, 3)] {
            let text = format!("{meta}\n{good}\n{bad}\n");
            match Dataset::read_jsonl(text.as_bytes()) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }
}
