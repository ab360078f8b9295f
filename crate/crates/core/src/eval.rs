//! Experiment harnesses: back-translation evaluation, round-trip
//! evaluation against a pluggable external converter, lightweight
//! syntax-validity checking, and out-of-vocabulary reporting.

use crate::corpus::FormulaPair;
use crate::decode::{translate, ModelBundle};
use crate::metrics::{self, MetricReport};
use crate::preprocess::{self, Vocabulary};
use crate::tokenizer::{tokenize, Language, TokenKind, TokenStream};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

/// Conversion direction of an external converter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ContentToPresentation,
    PresentationToContent,
}

impl Direction {
    /// Wire name used in the line protocol.
    pub fn wire_name(self) -> &'static str {
        match self {
            Direction::ContentToPresentation => "content-to-presentation",
            Direction::PresentationToContent => "presentation-to-content",
        }
    }
}

/// Outcome of converting a single formula. Rejections are per-formula
/// data, never harness failures.
#[derive(Debug, Clone, PartialEq)]
pub enum Converted {
    Ok(String),
    Rejected(String),
}

/// An external formula converter (a CAS kernel, LaTeXML, or a stub).
pub trait ExternalConverter {
    fn name(&self) -> &str;
    fn supports(&self, direction: Direction) -> bool;
    /// Errors only on harness-level failures (process died, protocol
    /// broken); formula-level rejections come back as `Rejected`.
    fn convert(&mut self, direction: Direction, formula: &str) -> Result<Converted>;
}

/// Echoes every formula unchanged; supports both directions.
pub struct IdentityConverter;

impl ExternalConverter for IdentityConverter {
    fn name(&self) -> &str {
        "identity"
    }
    fn supports(&self, _direction: Direction) -> bool {
        true
    }
    fn convert(&mut self, _direction: Direction, formula: &str) -> Result<Converted> {
        Ok(Converted::Ok(formula.to_string()))
    }
}

/// Rejects every formula; useful for exercising failure paths.
pub struct RejectAllConverter;

impl ExternalConverter for RejectAllConverter {
    fn name(&self) -> &str {
        "reject-all"
    }
    fn supports(&self, _direction: Direction) -> bool {
        true
    }
    fn convert(&mut self, _direction: Direction, _formula: &str) -> Result<Converted> {
        Ok(Converted::Rejected("rejected by configuration".into()))
    }
}

/// Line-protocol adapter over a child process: one request
/// `TRANSLATE<TAB>direction<TAB>formula` per line on stdin, one
/// response `OK<TAB>formula` or `ERR<TAB>message` per line on stdout.
pub struct SubprocessConverter {
    name: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessConverter {
    pub fn spawn(program: &str, args: &[String]) -> Result<SubprocessConverter> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::ConverterUnavailable(format!("{program}: {e}")))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::ConverterUnavailable("no stdin pipe".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::ConverterUnavailable("no stdout pipe".into()))?;
        Ok(SubprocessConverter {
            name: program.to_string(),
            child,
            stdin,
            stdout: BufReader::new(stdout),
        })
    }
}

impl Drop for SubprocessConverter {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl ExternalConverter for SubprocessConverter {
    fn name(&self) -> &str {
        &self.name
    }
    fn supports(&self, _direction: Direction) -> bool {
        true
    }
    fn convert(&mut self, direction: Direction, formula: &str) -> Result<Converted> {
        if formula.contains('\n') || formula.contains('\t') {
            return Ok(Converted::Rejected(
                "formula contains protocol delimiters".into(),
            ));
        }
        writeln!(self.stdin, "TRANSLATE\t{}\t{}", direction.wire_name(), formula)
            .map_err(|e| Error::ConverterUnavailable(format!("write failed: {e}")))?;
        self.stdin
            .flush()
            .map_err(|e| Error::ConverterUnavailable(format!("flush failed: {e}")))?;
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| Error::ConverterUnavailable(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::ConverterUnavailable(
                "converter closed its output stream".into(),
            ));
        }
        let line = line.trim_end_matches('\n');
        match line.split_once('\t') {
            Some(("OK", rest)) => Ok(Converted::Ok(rest.to_string())),
            Some(("ERR", rest)) => Ok(Converted::Rejected(rest.to_string())),
            _ => Err(Error::ConverterUnavailable(format!(
                "malformed converter response: {line:?}"
            ))),
        }
    }
}

/// Per-formula evaluation record, written as a JSONL sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaRecord {
    pub id: String,
    pub ld: usize,
    pub em: bool,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregate evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub validity_fraction: f64,
    pub oov_fraction: f64,
    pub records: Vec<FormulaRecord>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn save_records(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(
                &serde_json::to_string(record).map_err(|e| Error::Other(e.to_string()))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Shallow validity check for content-language streams: balanced and
/// properly nested brackets, no dangling operator at either end, and
/// multi-letter capitalized function heads followed by `[`. A proxy
/// for full parser acceptance, not a grammar.
pub fn syntax_validity(stream: &TokenStream) -> bool {
    const HEAD_WHITELIST: [&str; 6] = ["Pi", "E", "I", "Infinity", "True", "False"];
    const BINARY: [&str; 11] = ["&&", "==", "<=", ">=", "!=", "/;", "*", "/", "^", ",", "="];
    let texts = stream.texts();
    if texts.is_empty() {
        return true;
    }
    let mut depth: Vec<char> = Vec::new();
    for &t in &texts {
        match t {
            "(" => depth.push(')'),
            "[" => depth.push(']'),
            "{" => depth.push('}'),
            ")" | "]" | "}" => {
                if depth.pop() != Some(t.chars().next().unwrap()) {
                    return false;
                }
            }
            _ => {}
        }
    }
    if !depth.is_empty() {
        return false;
    }
    let first = texts[0];
    let last = texts[texts.len() - 1];
    if BINARY.contains(&first) || BINARY.contains(&last) || last == "+" || last == "-" {
        return false;
    }
    for (i, token) in stream.tokens.iter().enumerate() {
        let is_head = token.kind == TokenKind::Letter
            && token.text.len() >= 2
            && token.text.chars().next().is_some_and(|c| c.is_ascii_uppercase())
            && !HEAD_WHITELIST.contains(&token.text.as_str());
        if is_head && texts.get(i + 1) != Some(&"[") {
            return false;
        }
    }
    true
}

/// Fraction of formulae containing at least one token missing from the
/// vocabulary.
pub fn oov_report(corpus: &[TokenStream], vocab: &Vocabulary) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let with_oov = corpus
        .iter()
        .filter(|stream| {
            stream
                .tokens
                .iter()
                .any(|t| vocab.id_of(&t.text).is_none())
        })
        .count();
    Ok(with_oov as f64 / corpus.len() as f64)
}

fn empty_stream(language: Language) -> TokenStream {
    TokenStream::new(Vec::new(), language)
}

/// Translates every source formula and scores predictions against the
/// aligned content targets. Per-formula failures are recorded as
/// non-matches with error tags; the run never aborts on one formula.
pub fn back_translation_eval(
    bundle: &ModelBundle,
    pairs: &[FormulaPair],
    beam_size: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let tgt_lang = bundle.target_language;
    let mut records = Vec::with_capacity(pairs.len());
    let mut predictions = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    let mut source_streams = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let reference = tokenize(&pair.target, tgt_lang)?;
        if let Ok(stream) = tokenize(&pair.source, bundle.source_language) {
            if let Ok((tagged, _)) = preprocess::substitute_numbers(&stream, i as u64) {
                source_streams.push(tagged);
            } else {
                source_streams.push(stream);
            }
        } else {
            source_streams.push(empty_stream(bundle.source_language));
        }
        let (prediction, error) = match translate(&pair.source, bundle, beam_size, i as u64) {
            Ok((text, _, _)) => (text, None),
            Err(e) => (String::new(), Some(e.to_string())),
        };
        let pred_stream =
            tokenize(&prediction, tgt_lang).unwrap_or_else(|_| empty_stream(tgt_lang));
        let em = error.is_none() && metrics::exact_match(&pred_stream, &reference);
        let ld = metrics::levenshtein(&pred_stream, &reference);
        let valid = error.is_none() && syntax_validity(&pred_stream);
        records.push(FormulaRecord {
            id: pair.id.clone(),
            ld,
            em,
            valid,
            error,
        });
        predictions.push(pred_stream);
        references.push(reference);
    }
    finish_report(bundle, records, predictions, references, source_streams)
}

/// Translates presentation formulae to the content language, maps them
/// back through the external converter, and scores the round trip
/// against the original presentation streams. Converter rejections
/// count as import failures.
pub fn round_trip_eval(
    bundle: &ModelBundle,
    converter: &mut dyn ExternalConverter,
    corpus: &[FormulaPair],
    beam_size: usize,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    if !converter.supports(Direction::ContentToPresentation) {
        return Err(Error::ConverterUnavailable(format!(
            "{} does not support content-to-presentation",
            converter.name()
        )));
    }
    let src_lang = bundle.source_language;
    let mut records = Vec::with_capacity(corpus.len());
    let mut predictions = Vec::with_capacity(corpus.len());
    let mut references = Vec::with_capacity(corpus.len());
    let mut source_streams = Vec::with_capacity(corpus.len());
    for (i, pair) in corpus.iter().enumerate() {
        let original = tokenize(&pair.source, src_lang)?;
        source_streams.push(original.clone());
        let mut error = None;
        let mut valid = false;
        let round_tripped = match translate(&pair.source, bundle, beam_size, i as u64) {
            Err(e) => {
                error = Some(e.to_string());
                empty_stream(src_lang)
            }
            Ok((content, _, _)) => {
                match converter.convert(Direction::ContentToPresentation, &content)? {
                    Converted::Ok(text) => {
                        valid = true;
                        tokenize(&text, src_lang).unwrap_or_else(|_| empty_stream(src_lang))
                    }
                    Converted::Rejected(msg) => {
                        error = Some(format!("import failed: {msg}"));
                        empty_stream(src_lang)
                    }
                }
            }
        };
        let em = valid && metrics::exact_match(&round_tripped, &original);
        let ld = metrics::levenshtein(&round_tripped, &original);
        records.push(FormulaRecord {
            id: pair.id.clone(),
            ld,
            em,
            valid,
            error,
        });
        predictions.push(round_tripped);
        references.push(original);
    }
    finish_report(bundle, records, predictions, references, source_streams)
}

fn finish_report(
    bundle: &ModelBundle,
    records: Vec<FormulaRecord>,
    predictions: Vec<TokenStream>,
    references: Vec<TokenStream>,
    source_streams: Vec<TokenStream>,
) -> Result<EvalReport> {
    let count = records.len();
    let em = records.iter().filter(|r| r.em).count() as f64 / count as f64;
    let ld_avg = records.iter().map(|r| r.ld).sum::<usize>() as f64 / count as f64;
    let ld_leq5 = records.iter().filter(|r| r.ld <= 5).count() as f64 / count as f64;
    let bleu = metrics::bleu(&predictions, &references)?;
    let validity_fraction = records.iter().filter(|r| r.valid).count() as f64 / count as f64;
    let oov_fraction = oov_report(&source_streams, &bundle.source_vocab)?;
    Ok(EvalReport {
        metrics: MetricReport {
            em,
            ld_avg,
            ld_leq5,
            bleu,
            count,
        },
        validity_fraction,
        oov_fraction,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::preprocess::build_vocabulary;
    use crate::tokenizer::tokenize_mathematica;

    fn mm(text: &str) -> TokenStream {
        tokenize_mathematica(text).unwrap()
    }

    #[test]
    fn syntax_validity_cases() {
        assert!(syntax_validity(&mm("Pochhammer[x, n]")));
        assert!(syntax_validity(&mm("")));
        assert!(syntax_validity(&mm("x + y")));
        assert!(syntax_validity(&mm("Pi")));
        assert!(syntax_validity(&mm("Sin[Cos[x]]")));
        assert!(!syntax_validity(&mm("(x")));
        assert!(!syntax_validity(&mm("x)")));
        assert!(!syntax_validity(&mm("Sin[x)")));
        assert!(!syntax_validity(&mm("&& x")));
        assert!(!syntax_validity(&mm("x +")));
        assert!(!syntax_validity(&mm("Pochhammer x")));
        // unary minus at the start is fine
        assert!(syntax_validity(&mm("-x")));
    }

    #[test]
    fn oov_report_cases() {
        let corpus = vec![mm("Sin[x]"), mm("Cos[x]")];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(oov_report(&corpus, &vocab).unwrap(), 0.0);
        let with_novel = vec![mm("Sin[x]"), mm("Tan[x]")];
        assert_eq!(oov_report(&with_novel, &vocab).unwrap(), 0.5);
        assert!(matches!(
            oov_report(&[], &vocab),
            Err(Error::UndefinedMetric)
        ));
    }

    #[test]
    fn identity_and_reject_converters() {
        let mut id = IdentityConverter;
        assert_eq!(
            id.convert(Direction::ContentToPresentation, "Sin[x]").unwrap(),
            Converted::Ok("Sin[x]".into())
        );
        let mut rej = RejectAllConverter;
        assert!(matches!(
            rej.convert(Direction::ContentToPresentation, "Sin[x]").unwrap(),
            Converted::Rejected(_)
        ));
    }

    #[test]
    fn subprocess_converter_protocol() {
        // a stub converter that accepts formulae containing "ok" and
        // rejects everything else
        let script = r#"while IFS="	" read -r cmd dir formula; do
            case "$formula" in
                *ok*) printf 'OK\t%s\n' "$formula";;
                *) printf 'ERR\tno\n';;
            esac
        done"#;
        let mut conv =
            SubprocessConverter::spawn("sh", &["-c".to_string(), script.to_string()]).unwrap();
        assert_eq!(
            conv.convert(Direction::ContentToPresentation, "ok1").unwrap(),
            Converted::Ok("ok1".into())
        );
        assert_eq!(
            conv.convert(Direction::ContentToPresentation, "bad").unwrap(),
            Converted::Rejected("no".into())
        );
        assert!(matches!(
            SubprocessConverter::spawn("/nonexistent/converter", &[]),
            Err(Error::ConverterUnavailable(_))
        ));
    }

    fn tiny_bundle(pairs: &[FormulaPair]) -> ModelBundle {
        let src_streams: Vec<TokenStream> = pairs
            .iter()
            .map(|p| tokenize(&p.source, Language::LatexPresentation).unwrap())
            .collect();
        let tgt_streams: Vec<TokenStream> = pairs
            .iter()
            .map(|p| tokenize(&p.target, Language::MathematicaInput).unwrap())
            .collect();
        let source_vocab = build_vocabulary(&src_streams, 1).unwrap();
        let target_vocab = build_vocabulary(&tgt_streams, 1).unwrap();
        let config = ModelConfig {
            state_size: 8,
            num_layers: 1,
            kernel_size: 3,
            dropout_rate: 0.0,
            label_smoothing: 0.1,
            max_positions: 32,
            source_vocab_size: source_vocab.size(),
            target_vocab_size: target_vocab.size(),
            seed: 1,
        };
        ModelBundle {
            model: init_model(&config).unwrap(),
            source_vocab,
            target_vocab,
            source_language: Language::LatexPresentation,
            target_language: Language::MathematicaInput,
        }
    }

    fn sample_pairs() -> Vec<FormulaPair> {
        vec![
            FormulaPair {
                id: "a".into(),
                source: "(x)_n".into(),
                target: "Pochhammer[x, n]".into(),
            },
            FormulaPair {
                id: "b".into(),
                source: "\\sin(x)".into(),
                target: "Sin[x]".into(),
            },
        ]
    }

    #[test]
    fn back_translation_never_aborts_and_counts_records() {
        let pairs = sample_pairs();
        let bundle = tiny_bundle(&pairs);
        let report = back_translation_eval(&bundle, &pairs, 1).unwrap();
        assert_eq!(report.records.len(), pairs.len());
        assert_eq!(report.metrics.count, pairs.len());
        assert!(report.metrics.em >= 0.0 && report.metrics.em <= 1.0);
        assert!(report.metrics.em <= report.metrics.ld_leq5 + 1e-12);
        assert!(matches!(
            back_translation_eval(&bundle, &[], 1),
            Err(Error::UndefinedMetric)
        ));
    }

    #[test]
    fn round_trip_with_rejecting_converter_scores_zero() {
        let pairs = sample_pairs();
        let bundle = tiny_bundle(&pairs);
        let mut conv = RejectAllConverter;
        let report = round_trip_eval(&bundle, &mut conv, &pairs, 1).unwrap();
        assert_eq!(report.validity_fraction, 0.0);
        assert_eq!(report.metrics.em, 0.0);
        assert_eq!(report.records.len(), pairs.len());
        assert!(report.records.iter().all(|r| r.error.is_some()));
    }

    #[test]
    fn report_serialization_round_trip() {
        let pairs = sample_pairs();
        let bundle = tiny_bundle(&pairs);
        let report = back_translation_eval(&bundle, &pairs, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json_path = dir.path().join("report.json");
        let jsonl_path = dir.path().join("records.jsonl");
        report.save(&json_path).unwrap();
        report.save_records(&jsonl_path).unwrap();
        let loaded: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(loaded, report);
        let text = std::fs::read_to_string(&json_path).unwrap();
        // MetricReport fields are flattened into the top level
        assert!(text.contains("\"em\"") && text.contains("\"validity_fraction\""));
        let lines = std::fs::read_to_string(&jsonl_path).unwrap();
        assert_eq!(lines.lines().count(), pairs.len());
    }
}
