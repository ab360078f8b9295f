//! Rule-based tokenizers for presentation LaTeX (covering semantic
//! LaTeX macros) and Mathematica InputForm, plus the detokenizer that
//! makes tokenization a fixed point.
//!
//! LaTeX side: commands are one token, letters are split into single
//! letters, digit runs of length >= 2 collapse into one Number token,
//! brackets and special characters stand alone.
//!
//! Mathematica side: maximal letter strings stay whole (function and
//! symbol names), escaped symbols like `\[Zeta]` are one token, and the
//! operators `&&`, `==`, `<=`, `>=`, `!=`, `/;` never split.

use crate::{Error, Result};
use std::fmt;
use std::path::Path;

/// Languages a token stream can be expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Language {
    LatexPresentation,
    SemanticLatex,
    MathematicaInput,
}

impl Language {
    pub fn is_latex(self) -> bool {
        matches!(self, Language::LatexPresentation | Language::SemanticLatex)
    }
}

impl std::str::FromStr for Language {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latex" => Ok(Language::LatexPresentation),
            "semantic" | "semantic-latex" => Ok(Language::SemanticLatex),
            "mathematica" | "inputform" => Ok(Language::MathematicaInput),
            other => Err(Error::Config(format!("unknown language `{other}`"))),
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Language::LatexPresentation => "latex",
            Language::SemanticLatex => "semantic",
            Language::MathematicaInput => "mathematica",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Command,
    Letter,
    Digit,
    Number,
    NumberTag,
    Bracket,
    SpecialChar,
    MultiCharOperator,
    MacroSymbol,
}

/// One token: non-empty text without whitespace, plus its kind.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn new(text: impl Into<String>, kind: TokenKind) -> Self {
        let text = text.into();
        debug_assert!(!text.is_empty());
        debug_assert!(!text.chars().any(char::is_whitespace));
        Token { text, kind }
    }
}

/// Ordered token sequence for one formula in one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub language: Language,
}

impl TokenStream {
    pub fn new(tokens: Vec<Token>, language: Language) -> Self {
        TokenStream { tokens, language }
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Multi-character InputForm operators that must never split.
pub const EXCEPTIONAL_OPERATORS: [&str; 6] = ["&&", "==", "<=", ">=", "!=", "/;"];

const NUMBER_TAG_COUNT: u8 = 32;

/// Formats the fixed number-tag text `<number_NN>` for tag index 1..=32.
pub fn number_tag_text(index: u8) -> String {
    debug_assert!((1..=NUMBER_TAG_COUNT).contains(&index));
    format!("<number_{index:02}>")
}

/// Parses `<number_NN>` at the start of `s`, returning (index, byte length).
fn match_number_tag(s: &str) -> Option<(u8, usize)> {
    let rest = s.strip_prefix("<number_")?;
    let bytes = rest.as_bytes();
    if bytes.len() < 3 || bytes[2] != b'>' {
        return None;
    }
    if !bytes[0].is_ascii_digit() || !bytes[1].is_ascii_digit() {
        return None;
    }
    let idx = (bytes[0] - b'0') * 10 + (bytes[1] - b'0');
    if (1..=NUMBER_TAG_COUNT).contains(&idx) {
        Some((idx, "<number_".len() + 3))
    } else {
        None
    }
}

fn is_bracket(c: char) -> bool {
    matches!(c, '(' | ')' | '{' | '}' | '[' | ']')
}

fn digit_run(chars: &[char], start: usize) -> usize {
    let mut end = start;
    while end < chars.len() && chars[end].is_ascii_digit() {
        end += 1;
    }
    end
}

fn push_digits(tokens: &mut Vec<Token>, digits: &str) {
    let kind = if digits.len() >= 2 {
        TokenKind::Number
    } else {
        TokenKind::Digit
    };
    tokens.push(Token::new(digits, kind));
}

/// Strips `%` line comments (LaTeX). A `\%` escape is kept.
fn strip_latex_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut escaped = false;
    let mut in_comment = false;
    for c in text.chars() {
        if in_comment {
            if c == '\n' {
                in_comment = false;
                out.push(c);
            }
            continue;
        }
        if c == '%' && !escaped {
            in_comment = true;
            continue;
        }
        escaped = c == '\\' && !escaped;
        out.push(c);
    }
    out
}

/// Tokenizes presentation or semantic LaTeX.
pub fn tokenize_latex(text: &str) -> Result<TokenStream> {
    tokenize_latex_as(text, Language::LatexPresentation)
}

pub fn tokenize_latex_as(text: &str, language: Language) -> Result<TokenStream> {
    debug_assert!(language.is_latex());
    let text = strip_latex_comments(text);
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '\\' {
            if i + 1 >= chars.len() {
                return Err(Error::MalformedCommand(i));
            }
            let mut j = i + 1;
            if chars[j].is_ascii_alphabetic() {
                while j < chars.len() && chars[j].is_ascii_alphabetic() {
                    j += 1;
                }
            } else {
                // single-character control sequence such as \{ or \,
                j += 1;
            }
            let text: String = chars[i..j].iter().collect();
            tokens.push(Token::new(text, TokenKind::Command));
            i = j;
        } else if c == '<' {
            let rest: String = chars[i..].iter().collect();
            if let Some((idx, char_len)) = match_number_tag(&rest) {
                tokens.push(Token::new(number_tag_text(idx), TokenKind::NumberTag));
                i += char_len;
            } else {
                tokens.push(Token::new(c.to_string(), TokenKind::SpecialChar));
                i += 1;
            }
        } else if c.is_ascii_alphabetic() {
            tokens.push(Token::new(c.to_string(), TokenKind::Letter));
            i += 1;
        } else if c.is_ascii_digit() {
            let end = digit_run(&chars, i);
            let digits: String = chars[i..end].iter().collect();
            push_digits(&mut tokens, &digits);
            i = end;
        } else if is_bracket(c) {
            tokens.push(Token::new(c.to_string(), TokenKind::Bracket));
            i += 1;
        } else {
            tokens.push(Token::new(c.to_string(), TokenKind::SpecialChar));
            i += 1;
        }
    }
    Ok(TokenStream::new(tokens, language))
}

/// Tokenizes Mathematica InputForm.
pub fn tokenize_mathematica(text: &str) -> Result<TokenStream> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '\\' && i + 1 < chars.len() && chars[i + 1] == '[' {
            // escaped symbol \[Name]
            let mut j = i + 2;
            while j < chars.len() && chars[j] != ']' {
                if !chars[j].is_ascii_alphanumeric() {
                    return Err(Error::MalformedSymbol(i));
                }
                j += 1;
            }
            if j >= chars.len() {
                return Err(Error::MalformedSymbol(i));
            }
            let text: String = chars[i..=j].iter().collect();
            tokens.push(Token::new(text, TokenKind::MacroSymbol));
            i = j + 1;
            continue;
        }
        if i + 1 < chars.len() {
            let two: String = chars[i..i + 2].iter().collect();
            if EXCEPTIONAL_OPERATORS.contains(&two.as_str()) {
                tokens.push(Token::new(two, TokenKind::MultiCharOperator));
                i += 2;
                continue;
            }
        }
        if c == '<' {
            let rest: String = chars[i..].iter().collect();
            if let Some((idx, char_len)) = match_number_tag(&rest) {
                tokens.push(Token::new(number_tag_text(idx), TokenKind::NumberTag));
                i += char_len;
                continue;
            }
        }
        if c.is_ascii_alphabetic() {
            let mut j = i;
            while j < chars.len() && chars[j].is_ascii_alphabetic() {
                j += 1;
            }
            let text: String = chars[i..j].iter().collect();
            tokens.push(Token::new(text, TokenKind::Letter));
            i = j;
        } else if c.is_ascii_digit() {
            let end = digit_run(&chars, i);
            let digits: String = chars[i..end].iter().collect();
            push_digits(&mut tokens, &digits);
            i = end;
        } else if is_bracket(c) {
            tokens.push(Token::new(c.to_string(), TokenKind::Bracket));
            i += 1;
        } else {
            tokens.push(Token::new(c.to_string(), TokenKind::SpecialChar));
            i += 1;
        }
    }
    Ok(TokenStream::new(tokens, Language::MathematicaInput))
}

/// Tokenizes `text` in the given language.
pub fn tokenize(text: &str, language: Language) -> Result<TokenStream> {
    match language {
        Language::MathematicaInput => tokenize_mathematica(text),
        lang => tokenize_latex_as(text, lang),
    }
}

fn starts_exceptional(last: char, next: char) -> bool {
    EXCEPTIONAL_OPERATORS.iter().any(|op| {
        let mut it = op.chars();
        it.next() == Some(last) && it.next() == Some(next)
    })
}

fn is_digitish(kind: TokenKind) -> bool {
    matches!(kind, TokenKind::Digit | TokenKind::Number)
}

/// Renders a token stream back to text such that re-tokenizing yields
/// the identical token list.
pub fn detokenize(stream: &TokenStream) -> String {
    let mut out = String::new();
    let mut prev: Option<&Token> = None;
    for tok in &stream.tokens {
        if let Some(p) = prev {
            // a literal `<` followed by letters could fuse into a
            // <number_NN> tag on re-tokenization
            let tag_fusion = p.text == "<" && tok.text.starts_with('n');
            let sep = tag_fusion
                || if stream.language.is_latex() {
                    p.kind == TokenKind::Command
                        || (is_digitish(p.kind) && is_digitish(tok.kind))
                } else {
                    (p.kind == TokenKind::Letter && tok.kind == TokenKind::Letter)
                        || (is_digitish(p.kind) && is_digitish(tok.kind))
                        || starts_exceptional(
                            p.text.chars().last().unwrap(),
                            tok.text.chars().next().unwrap(),
                        )
                };
            if sep {
                out.push(' ');
            }
        }
        out.push_str(&tok.text);
        prev = Some(tok);
    }
    out
}

/// Reads a golden fixture file: `input<TAB>expected tokens` per line,
/// expected tokens joined by single spaces.
pub fn read_golden_fixtures(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let content = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (input, expected) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "expected `input<TAB>tokens`".into(),
        })?;
        let tokens = expected.split(' ').map(str::to_owned).collect();
        out.push((input.to_owned(), tokens));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latex_texts(s: &str) -> Vec<String> {
        tokenize_latex(s)
            .unwrap()
            .tokens
            .into_iter()
            .map(|t| t.text)
            .collect()
    }

    fn mma_texts(s: &str) -> Vec<String> {
        tokenize_mathematica(s)
            .unwrap()
            .tokens
            .into_iter()
            .map(|t| t.text)
            .collect()
    }

    #[test]
    fn latex_pochhammer_presentation() {
        assert_eq!(latex_texts("(x)_n"), ["(", "x", ")", "_", "n"]);
    }

    #[test]
    fn latex_empty() {
        assert_eq!(latex_texts(""), Vec::<String>::new());
    }

    #[test]
    fn latex_semantic_macro() {
        assert_eq!(
            latex_texts("\\Pochhammersym{x}{n}"),
            ["\\Pochhammersym", "{", "x", "}", "{", "n", "}"]
        );
    }

    #[test]
    fn latex_digit_runs() {
        assert_eq!(latex_texts("x_{12}+3"), ["x", "_", "{", "12", "}", "+", "3"]);
        let stream = tokenize_latex("12 3").unwrap();
        assert_eq!(stream.tokens[0].kind, TokenKind::Number);
        assert_eq!(stream.tokens[1].kind, TokenKind::Digit);
    }

    #[test]
    fn latex_lone_backslash_is_error() {
        assert!(matches!(
            tokenize_latex("x\\"),
            Err(Error::MalformedCommand(_))
        ));
    }

    #[test]
    fn latex_single_char_command() {
        assert_eq!(latex_texts("\\{x\\}"), ["\\{", "x", "\\}"]);
        assert_eq!(latex_texts("a\\,b"), ["a", "\\,", "b"]);
    }

    #[test]
    fn latex_left_right_are_command_plus_bracket() {
        assert_eq!(
            latex_texts("\\left(x\\right)"),
            ["\\left", "(", "x", "\\right", ")"]
        );
    }

    #[test]
    fn latex_comments_stripped() {
        assert_eq!(latex_texts("x % trailing comment"), ["x"]);
        assert_eq!(latex_texts("a\\%b"), ["a", "\\%", "b"]);
    }

    #[test]
    fn latex_number_tag() {
        let stream = tokenize_latex("x^{<number_07>}").unwrap();
        let texts: Vec<_> = stream.texts();
        assert_eq!(texts, ["x", "^", "{", "<number_07>", "}"]);
        assert_eq!(stream.tokens[3].kind, TokenKind::NumberTag);
        // out-of-range tag index is not a tag
        let t = latex_texts("<number_33>");
        assert_eq!(t[0], "<");
    }

    #[test]
    fn latex_unicode_is_special_char() {
        assert_eq!(latex_texts("αx"), ["α", "x"]);
        let stream = tokenize_latex("α").unwrap();
        assert_eq!(stream.tokens[0].kind, TokenKind::SpecialChar);
    }

    #[test]
    fn mathematica_pochhammer() {
        assert_eq!(mma_texts("Pochhammer[x, n]"), ["Pochhammer", "[", "x", ",", "n", "]"]);
    }

    #[test]
    fn mathematica_exceptional_operators() {
        assert_eq!(mma_texts("a && b == 3"), ["a", "&&", "b", "==", "3"]);
        for op in EXCEPTIONAL_OPERATORS {
            let text = format!("x{op}y");
            let toks = mma_texts(&text);
            assert!(toks.contains(&op.to_string()), "{op} split in {toks:?}");
        }
    }

    #[test]
    fn mathematica_escaped_symbol() {
        assert_eq!(mma_texts("\\[Zeta]"), ["\\[Zeta]"]);
        let stream = tokenize_mathematica("\\[Zeta]").unwrap();
        assert_eq!(stream.tokens[0].kind, TokenKind::MacroSymbol);
    }

    #[test]
    fn mathematica_unterminated_symbol_is_error() {
        assert!(matches!(
            tokenize_mathematica("\\[Zeta"),
            Err(Error::MalformedSymbol(_))
        ));
    }

    #[test]
    fn mathematica_mixed_alphanumerics_split_at_boundaries() {
        assert_eq!(mma_texts("BesselJ2[x]"), ["BesselJ", "2", "[", "x", "]"]);
        assert_eq!(mma_texts("x12y"), ["x", "12", "y"]);
    }

    #[test]
    fn detokenize_empty() {
        let stream = TokenStream::new(vec![], Language::LatexPresentation);
        assert_eq!(detokenize(&stream), "");
    }

    #[test]
    fn detokenize_pochhammer_fixtures() {
        let latex = tokenize_latex("(x)_n").unwrap();
        assert_eq!(detokenize(&latex), "(x)_n");
        let mma = tokenize_mathematica("Pochhammer[x, n]").unwrap();
        assert_eq!(detokenize(&mma), "Pochhammer[x,n]");
    }

    fn assert_fixed_point(text: &str, language: Language) {
        let first = tokenize(text, language).unwrap();
        let rendered = detokenize(&first);
        let second = tokenize(&rendered, language).unwrap();
        assert_eq!(first, second, "fixed point failed for {text:?} -> {rendered:?}");
    }

    #[test]
    fn fixed_point_assorted() {
        for text in [
            "(x)_n",
            "\\Pochhammersym{x}{n}",
            "\\frac{1}{2} + \\alpha_3^{42}",
            "\\int x \\, dx",
            "E=mc^2",
            "E=mc^{2}",
        ] {
            assert_fixed_point(text, Language::LatexPresentation);
        }
        for text in [
            "Pochhammer[x, n]",
            "a && b == 3",
            "\\[Zeta][s]",
            "Integrate[Sin[x], x] /; x >= 0",
            "D[f[x], {x, 2}] != 0",
        ] {
            assert_fixed_point(text, Language::MathematicaInput);
        }
    }

    #[test]
    fn adjacent_operator_halves_do_not_fuse() {
        // two SpecialChar `=` tokens must not re-tokenize as `==`
        let stream = TokenStream::new(
            vec![
                Token::new("=", TokenKind::SpecialChar),
                Token::new("=", TokenKind::SpecialChar),
            ],
            Language::MathematicaInput,
        );
        let rendered = detokenize(&stream);
        let again = tokenize_mathematica(&rendered).unwrap();
        assert_eq!(again.len(), 2);
    }

    #[test]
    fn no_token_contains_whitespace() {
        for text in ["a b\tc\nd", "  Sin[ x ]  "] {
            for tok in tokenize_mathematica(text).unwrap().tokens {
                assert!(!tok.text.chars().any(char::is_whitespace));
            }
        }
    }
}
