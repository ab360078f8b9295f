//! Corpus ingestion (JSONL), summary statistics, and the seeded
//! synthetic paired-formula generator used in place of the proprietary
//! data sets.

use crate::tokenizer::{tokenize_latex, tokenize_mathematica};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One aligned (presentation, content) formula pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaPair {
    #[serde(default)]
    pub id: String,
    pub source: String,
    pub target: String,
}

/// Reads a JSONL corpus: one object per line with `source`, `target`,
/// and optional `id` fields.
pub fn load_corpus(path: &Path) -> Result<Vec<FormulaPair>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        for field in ["source", "target"] {
            if value.get(field).and_then(|v| v.as_str()).is_none() {
                return Err(Error::Schema {
                    line: lineno + 1,
                    field: if field == "source" { "source" } else { "target" },
                });
            }
        }
        let mut pair: FormulaPair = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if pair.id.is_empty() {
            pair.id = format!("line-{}", lineno + 1);
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn save_corpus(path: &Path, pairs: &[FormulaPair]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for pair in pairs {
        serde_json::to_writer(&mut file, pair).map_err(|e| Error::Other(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Mean / population standard deviation / median of per-formula
/// character counts, for each corpus side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub source: SideStats,
    pub target: SideStats,
}

fn side_stats(lengths: &mut Vec<f64>) -> SideStats {
    if lengths.is_empty() {
        return SideStats {
            mean: 0.0,
            std: 0.0,
            median: 0.0,
        };
    }
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<f64>() / n;
    let var = lengths.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    lengths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if lengths.len() % 2 == 1 {
        lengths[lengths.len() / 2]
    } else {
        (lengths[lengths.len() / 2 - 1] + lengths[lengths.len() / 2]) / 2.0
    };
    SideStats {
        mean,
        std: var.sqrt(),
        median,
    }
}

pub fn corpus_stats(pairs: &[FormulaPair]) -> CorpusStats {
    let mut src: Vec<f64> = pairs.iter().map(|p| p.source.chars().count() as f64).collect();
    let mut tgt: Vec<f64> = pairs.iter().map(|p| p.target.chars().count() as f64).collect();
    CorpusStats {
        count: pairs.len(),
        source: side_stats(&mut src),
        target: side_stats(&mut tgt),
    }
}

/// Hole types a production template can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoleKind {
    /// Recursively expanded subexpression.
    Expression,
    /// Single-letter variable.
    Variable,
    /// Multi-digit number literal.
    Number,
}

/// One aligned production: a LaTeX pattern and a content-language
/// pattern sharing the same `#1`, `#2`, ... holes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub latex: String,
    pub content: String,
    pub holes: Vec<HoleKind>,
}

impl Template {
    fn validate(&self) -> Result<()> {
        for (i, _) in self.holes.iter().enumerate() {
            let marker = format!("#{}", i + 1);
            let l = self.latex.matches(&marker).count();
            let c = self.content.matches(&marker).count();
            if l != 1 || c != 1 {
                return Err(Error::Config(format!(
                    "template `{}`: hole {marker} must appear exactly once on each side",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Applies pattern holes; `fills[i]` replaces `#i+1`.
pub fn apply_pattern(pattern: &str, fills: &[String]) -> String {
    let mut out = pattern.to_owned();
    // replace from the highest index down so #12 is not clobbered by #1
    for i in (0..fills.len()).rev() {
        out = out.replace(&format!("#{}", i + 1), &fills[i]);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub seed: u64,
    pub count: usize,
    pub max_depth: usize,
    pub templates: Vec<Template>,
}

impl GrammarConfig {
    pub fn with_default_templates(seed: u64, count: usize, max_depth: usize) -> GrammarConfig {
        GrammarConfig {
            seed,
            count,
            max_depth,
            templates: default_templates(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("template set must be non-empty".into()));
        }
        if self.max_depth < 1 {
            return Err(Error::Config("max_depth must be >= 1".into()));
        }
        for t in &self.templates {
            t.validate()?;
        }
        Ok(())
    }
}

/// The shipped template set: Pochhammer, fractions, powers, integrals,
/// named-function ambiguities, operators, and number literals.
pub fn default_templates() -> Vec<Template> {
    use HoleKind::*;
    let t = |name: &str, latex: &str, content: &str, holes: &[HoleKind]| Template {
        name: name.into(),
        latex: latex.into(),
        content: content.into(),
        holes: holes.to_vec(),
    };
    vec![
        t("pochhammer", "(#1)_#2", "Pochhammer[#1, #2]", &[Expression, Variable]),
        t("fraction", "\\frac{#1}{#2}", "Divide[#1, #2]", &[Expression, Expression]),
        t("power", "{#1}^{#2}", "Power[#1, #2]", &[Variable, Expression]),
        t("integral", "\\int #1 \\, d#2", "Integrate[#1, #2]", &[Expression, Variable]),
        t("dirac-delta", "\\delta(#1)", "DiracDelta[#1]", &[Expression]),
        t("gamma", "\\Gamma(#1)", "Gamma[#1]", &[Expression]),
        t("sqrt", "\\sqrt{#1}", "Sqrt[#1]", &[Expression]),
        t("sin", "\\sin(#1)", "Sin[#1]", &[Expression]),
        t("sum", "#1+#2", "#1+#2", &[Expression, Expression]),
        t("equality", "#1=#2", "#1 == #2", &[Expression, Expression]),
        t("number", "#1", "#1", &[Number]),
    ]
}

const VARIABLES: [&str; 10] = ["x", "y", "z", "a", "b", "c", "n", "k", "m", "t"];

struct Generator<'a> {
    templates: &'a [Template],
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn variable(&mut self) -> String {
        VARIABLES[self.rng.gen_range(0..VARIABLES.len())].to_owned()
    }

    fn number(&mut self) -> String {
        self.rng.gen_range(10u32..10_000).to_string()
    }

    fn leaf(&mut self) -> (String, String) {
        if self.rng.gen_bool(0.2) {
            let n = self.number();
            (n.clone(), n)
        } else {
            let v = self.variable();
            (v.clone(), v)
        }
    }

    /// Expands one random template to depth `depth`, returning aligned
    /// (latex, content) renderings.
    fn expression(&mut self, depth: usize) -> (String, String) {
        if depth == 0 {
            return self.leaf();
        }
        let template = &self.templates[self.rng.gen_range(0..self.templates.len())];
        let mut latex_fills = Vec::with_capacity(template.holes.len());
        let mut content_fills = Vec::with_capacity(template.holes.len());
        for hole in &template.holes {
            let (l, c) = match hole {
                HoleKind::Expression => self.expression(depth - 1),
                HoleKind::Variable => {
                    let v = self.variable();
                    (v.clone(), v)
                }
                HoleKind::Number => {
                    let n = self.number();
                    (n.clone(), n)
                }
            };
            latex_fills.push(l);
            content_fills.push(c);
        }
        (
            apply_pattern(&template.latex, &latex_fills),
            apply_pattern(&template.content, &content_fills),
        )
    }
}

/// Generates `count` aligned pairs by recursive template expansion.
/// Deterministic in the seed; every pair tokenizes on both sides.
pub fn generate_synthetic(config: &GrammarConfig) -> Result<Vec<FormulaPair>> {
    config.validate()?;
    let mut gen = Generator {
        templates: &config.templates,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut pairs = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let depth = gen.rng.gen_range(1..=config.max_depth);
        let (source, target) = gen.expression(depth);
        debug_assert!(tokenize_latex(&source).is_ok());
        debug_assert!(tokenize_mathematica(&target).is_ok());
        pairs.push(FormulaPair {
            id: format!("synth-{i}"),
            source,
            target,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stats_symmetric_set() {
        let pairs: Vec<FormulaPair> = [10, 20, 30]
            .iter()
            .map(|&n| FormulaPair {
                id: String::new(),
                source: "s".repeat(n),
                target: "t".repeat(n),
            })
            .collect();
        let stats = corpus_stats(&pairs);
        assert_relative_eq!(stats.source.mean, 20.0);
        assert_relative_eq!(stats.source.median, 20.0);
        // population std of {10,20,30} = sqrt(200/3)
        assert_relative_eq!(stats.source.std, (200.0f64 / 3.0).sqrt(), epsilon = 1e-4);
        assert_relative_eq!(stats.source.std, 8.1650, epsilon = 1e-4);
    }

    #[test]
    fn stats_single_pair_and_empty() {
        let single = vec![FormulaPair {
            id: String::new(),
            source: "abc".into(),
            target: "de".into(),
        }];
        let stats = corpus_stats(&single);
        assert_eq!(stats.source.std, 0.0);
        assert_eq!(stats.count, 1);
        let empty = corpus_stats(&[]);
        assert_eq!(empty.count, 0);
        assert_eq!(empty.source.mean, 0.0);
    }

    #[test]
    fn load_corpus_cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");

        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());

        std::fs::write(&path, r#"{"source":"(x)_n","target":"Pochhammer[x, n]"}"#).unwrap();
        let pairs = load_corpus(&path).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].source, "(x)_n");
        assert_eq!(pairs[0].target, "Pochhammer[x, n]");

        std::fs::write(&path, r#"{"source":"(x)_n"}"#).unwrap();
        match load_corpus(&path) {
            Err(Error::Schema { line: 1, field: "target" }) => {}
            other => panic!("expected schema error, got {other:?}"),
        }

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn generator_deterministic() {
        let config = GrammarConfig::with_default_templates(11, 50, 3);
        let a = generate_synthetic(&config).unwrap();
        let b = generate_synthetic(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        let empty = GrammarConfig::with_default_templates(11, 0, 3);
        assert!(generate_synthetic(&empty).unwrap().is_empty());
    }

    #[test]
    fn pochhammer_only_grammar_structure() {
        let config = GrammarConfig {
            seed: 3,
            count: 1,
            max_depth: 1,
            templates: default_templates()
                .into_iter()
                .filter(|t| t.name == "pochhammer")
                .collect(),
        };
        let pairs = generate_synthetic(&config).unwrap();
        let stream = tokenize_mathematica(&pairs[0].target).unwrap();
        let texts = stream.texts();
        assert_eq!(texts[0], "Pochhammer");
        assert_eq!(texts[1], "[");
        assert_eq!(texts[3], ",");
        assert_eq!(texts[5], "]");
        assert_eq!(texts.len(), 6);
    }

    #[test]
    fn generated_pairs_tokenize_and_fit_token_cap() {
        let config = GrammarConfig::with_default_templates(7, 500, 6);
        for pair in generate_synthetic(&config).unwrap() {
            let src = tokenize_latex(&pair.source).unwrap();
            let tgt = tokenize_mathematica(&pair.target).unwrap();
            assert!(src.len() <= 1024, "source too long: {}", pair.source);
            assert!(tgt.len() <= 1024);
            assert!(!src.is_empty() && !tgt.is_empty());
        }
    }
}
