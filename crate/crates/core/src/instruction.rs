//! Template grammar for recoloring instructions.
//!
//! Two orders are accepted: `<verb> R <connector> C` and `use C to <verb> R`,
//! where R lists photo regions and C names a design element.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::color::{ColorTerm, Rgb8, bin_index};
use crate::design::{DesignBundle, ElementClass};

const DEFAULT_ELEMENTS: &str = include_str!("../lexicon/elements.txt");
const DEFAULT_VERBS: &str = include_str!("../lexicon/verbs.txt");
const DEFAULT_CONNECTORS: &str = include_str!("../lexicon/connectors.txt");
const DEFAULT_COLORS: &str = include_str!("../lexicon/colors.txt");

const ARTICLES: [&str; 3] = ["the", "a", "an"];
const LEADING_FILLERS: [&str; 2] = ["please", "kindly"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantifier {
    One,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub class: ElementClass,
    pub attr: ColorTerm,
    pub quantifier: Quantifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub phrase: String,
    pub color_adj: ColorTerm,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionAst {
    pub source: SourceDescriptor,
    pub regions: Vec<RegionDescriptor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Fine,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Coarse => "coarse",
            Granularity::Fine => "fine",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("instruction is empty")]
    Empty,
    #[error("no recoloring verb found; start with e.g. `recolor` or `use ... to recolor`")]
    MissingVerb,
    #[error("no source part naming a design element")]
    NoSourcePart,
    #[error("no region part naming something in the photo")]
    NoRegionPart,
    #[error("unknown element term `{term}`{}", suggestion.as_ref().map(|s| format!("; did you mean `{s}`?")).unwrap_or_default())]
    UnknownElementTerm {
        term: String,
        suggestion: Option<String>,
    },
    #[error("region `{0}` has no object phrase besides its color")]
    EmptyRegionPhrase(String),
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::Empty => "empty-instruction",
            ParseError::MissingVerb => "missing-verb",
            ParseError::NoSourcePart => "no-source-part",
            ParseError::NoRegionPart => "no-region-part",
            ParseError::UnknownElementTerm { .. } => "unknown-element-term",
            ParseError::EmptyRegionPhrase(_) => "empty-region-phrase",
        }
    }

    /// The closest known element term, when the failure is an unknown one.
    pub fn nearest_term(&self) -> Option<&str> {
        match self {
            ParseError::UnknownElementTerm { suggestion, .. } => suggestion.as_deref(),
            _ => None,
        }
    }

    /// A corrective hint for the user; every parse failure has one.
    pub fn suggestion(&self) -> String {
        const TEMPLATE: &str = "try `recolor the <object> with the <element> color` or `use the <element> color to recolor the <object>`";
        match self {
            ParseError::UnknownElementTerm {
                suggestion: Some(s), ..
            } => format!("did you mean `{s}`?"),
            ParseError::UnknownElementTerm { .. } => {
                "name a design element such as the title, subtitle, text, background, or shape".to_string()
            }
            ParseError::EmptyRegionPhrase(_) => "name an object after the color, e.g. `the red ball`".to_string(),
            ParseError::Empty | ParseError::MissingVerb | ParseError::NoSourcePart | ParseError::NoRegionPart => {
                TEMPLATE.to_string()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GranularityError {
    #[error("no element matches {class}{}", if attr.is_none() { String::new() } else { format!(" with color {attr}") })]
    NoMatchingElement { class: ElementClass, attr: ColorTerm },
}

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("cannot read lexicon file {0}: {1}")]
    Io(String, std::io::Error),
    #[error("lexicon line {line} in {file}: {reason}")]
    Syntax {
        file: String,
        line: usize,
        reason: String,
    },
}

#[derive(Clone, Debug)]
pub struct ElementForm {
    pub words: Vec<String>,
    pub class: ElementClass,
    pub plural: bool,
}

/// Word lists driving the parser and the instruction generator.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub elements: Vec<ElementForm>,
    pub verbs: Vec<Vec<String>>,
    pub connectors: Vec<String>,
    pub colors: Vec<(String, ColorTerm)>,
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

impl Lexicon {
    pub fn parse(elements: &str, verbs: &str, connectors: &str, colors: &str) -> Result<Self, LexiconError> {
        let syntax = |file: &str, line: usize, reason: String| LexiconError::Syntax {
            file: file.to_string(),
            line,
            reason,
        };
        let mut element_forms = Vec::new();
        for (n, line) in content_lines(elements) {
            let (class, forms) = line
                .split_once(':')
                .ok_or_else(|| syntax("elements.txt", n, "expected `class: forms`".into()))?;
            let class: ElementClass = class.trim().parse().map_err(|e| syntax("elements.txt", n, e))?;
            if class == ElementClass::Photo {
                return Err(syntax("elements.txt", n, "photo cannot be a color source".into()));
            }
            for form in forms.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                let (form, plural) = match form.strip_suffix('*') {
                    Some(f) => (f, true),
                    None => (form, false),
                };
                element_forms.push(ElementForm {
                    words: words(form),
                    class,
                    plural,
                });
            }
        }
        // Longest forms first so `background shape` wins over `background`.
        element_forms.sort_by(|a, b| b.words.len().cmp(&a.words.len()));
        let mut verb_list: Vec<Vec<String>> = content_lines(verbs).map(|(_, l)| words(l)).collect();
        verb_list.sort_by(|a, b| b.len().cmp(&a.len()));
        let connector_list: Vec<String> = content_lines(connectors).map(|(_, l)| l.to_lowercase()).collect();
        let mut color_list = Vec::new();
        for (n, line) in content_lines(colors) {
            let (term, forms) = line
                .split_once(':')
                .ok_or_else(|| syntax("colors.txt", n, "expected `term: words`".into()))?;
            let term: ColorTerm = term.trim().parse().map_err(|e| syntax("colors.txt", n, e))?;
            for w in forms.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                color_list.push((w.to_lowercase(), term));
            }
        }
        if verb_list.is_empty() || connector_list.is_empty() || element_forms.is_empty() {
            return Err(syntax("lexicon", 0, "verbs, connectors and elements must be nonempty".into()));
        }
        Ok(Lexicon {
            elements: element_forms,
            verbs: verb_list,
            connectors: connector_list,
            colors: color_list,
        })
    }

    /// Loads `elements.txt`, `verbs.txt`, `connectors.txt` and `colors.txt` from `dir`,
    /// falling back to the built-in list for any file that is absent.
    pub fn from_dir(dir: &Path) -> Result<Self, LexiconError> {
        let read = |name: &str, default: &str| -> Result<String, LexiconError> {
            let p = dir.join(name);
            if p.exists() {
                fs::read_to_string(&p).map_err(|e| LexiconError::Io(p.display().to_string(), e))
            } else {
                Ok(default.to_string())
            }
        };
        Lexicon::parse(
            &read("elements.txt", DEFAULT_ELEMENTS)?,
            &read("verbs.txt", DEFAULT_VERBS)?,
            &read("connectors.txt", DEFAULT_CONNECTORS)?,
            &read("colors.txt", DEFAULT_COLORS)?,
        )
    }

    pub fn builtin() -> &'static Lexicon {
        &BUILTIN
    }

    fn color_of(&self, word: &str) -> Option<ColorTerm> {
        self.colors.iter().find(|(w, _)| w == word).map(|&(_, t)| t)
    }

    fn verb_at(&self, toks: &[String]) -> Option<usize> {
        self.verbs
            .iter()
            .find(|v| toks.len() >= v.len() && toks[..v.len()] == v[..])
            .map(Vec::len)
    }

    fn element_exact(&self, toks: &[String]) -> Option<&ElementForm> {
        self.elements.iter().find(|f| f.words == toks)
    }

    fn nearest_element(&self, term: &str) -> Option<String> {
        self.elements
            .iter()
            .map(|f| {
                let s = f.words.join(" ");
                (strsim::normalized_damerau_levenshtein(term, &s), !f.plural, s)
            })
            .filter(|(score, _, _)| *score > 0.3)
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then_with(|| b.2.cmp(&a.2)))
            .map(|(_, _, s)| s)
    }

    /// Canonical singular form for a class, as the generator writes it.
    pub fn singular_form(&self, class: ElementClass) -> Option<String> {
        let mut forms: Vec<&ElementForm> = self.elements.iter().filter(|f| f.class == class && !f.plural).collect();
        forms.sort_by_key(|f| (f.words.join(" ") != class.as_str().replace('-', " "), f.words.len()));
        forms.first().map(|f| f.words.join(" "))
    }

    pub fn plural_form(&self, class: ElementClass) -> Option<String> {
        self.elements
            .iter()
            .find(|f| f.class == class && f.plural)
            .map(|f| f.words.join(" "))
    }
}

static BUILTIN: LazyLock<Lexicon> = LazyLock::new(|| {
    Lexicon::parse(DEFAULT_ELEMENTS, DEFAULT_VERBS, DEFAULT_CONNECTORS, DEFAULT_COLORS)
        .expect("built-in lexicon is well-formed")
});

fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        let ch = match ch {
            '\u{2019}' | '\u{2018}' => '\'',
            c => c,
        };
        if ch == ',' {
            spaced.push_str(" , ");
        } else if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            spaced.extend(ch.to_lowercase());
        } else {
            spaced.push(' ');
        }
    }
    let mut out = Vec::new();
    for tok in spaced.split_whitespace() {
        if let Some(stem) = tok.strip_suffix("'s") {
            if !stem.is_empty() {
                out.push(stem.to_string());
            }
            out.push("'s".to_string());
        } else {
            let t = tok.trim_matches('\'');
            if !t.is_empty() {
                out.push(t.to_string());
            }
        }
    }
    out
}

fn is_color_noun(w: &str) -> bool {
    matches!(w, "color" | "colour" | "colors" | "colours")
}

/// Parses with the built-in lexicon.
pub fn parse_instruction(text: &str) -> Result<InstructionAst, ParseError> {
    parse_with(Lexicon::builtin(), text)
}

pub fn parse_with(lex: &Lexicon, text: &str) -> Result<InstructionAst, ParseError> {
    let mut toks = tokenize(text);
    if toks.is_empty() {
        return Err(ParseError::Empty);
    }
    while toks.first().is_some_and(|t| LEADING_FILLERS.contains(&t.as_str())) {
        toks.remove(0);
    }
    if toks.first().map(String::as_str) == Some("use") {
        parse_use_order(lex, &toks[1..])
    } else if let Some(vlen) = lex.verb_at(&toks) {
        parse_verb_order(lex, &toks[vlen..])
    } else {
        Err(ParseError::MissingVerb)
    }
}

/// `use C to <verb> R`
fn parse_use_order(lex: &Lexicon, toks: &[String]) -> Result<InstructionAst, ParseError> {
    let split = (0..toks.len()).find_map(|i| {
        if toks[i] == "to" {
            lex.verb_at(&toks[i + 1..]).map(|vlen| (i, i + 1 + vlen))
        } else {
            None
        }
    });
    let Some((to_at, region_at)) = split else {
        return Err(ParseError::MissingVerb);
    };
    let source = parse_source(lex, &toks[..to_at])?;
    let regions = parse_regions(lex, &toks[region_at..])?;
    Ok(InstructionAst { source, regions })
}

/// `<verb> R <connector> C`; the rightmost connector whose right side is a valid source wins.
fn parse_verb_order(lex: &Lexicon, toks: &[String]) -> Result<InstructionAst, ParseError> {
    let mut first_err = None;
    for i in (0..toks.len()).rev() {
        if !lex.connectors.contains(&toks[i]) {
            continue;
        }
        match parse_source(lex, &toks[i + 1..]) {
            Ok(source) => {
                let regions = parse_regions(lex, &toks[..i])?;
                return Ok(InstructionAst { source, regions });
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(ParseError::NoSourcePart))
}

fn parse_source(lex: &Lexicon, toks: &[String]) -> Result<SourceDescriptor, ParseError> {
    let mut explicit_all = false;
    let mut rest: Vec<&str> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let t = toks[i].as_str();
        match t {
            "all" | "every" => explicit_all = true,
            "'s" => {}
            _ if ARTICLES.contains(&t) => {}
            _ if is_color_noun(t) && toks.get(i + 1).map(String::as_str) == Some("of") => i += 1,
            _ if is_color_noun(t) && i + 1 == toks.len() && !rest.is_empty() => {}
            "of" if rest.is_empty() => {}
            _ => rest.push(t),
        }
        i += 1;
    }
    if rest.is_empty() {
        return Err(ParseError::NoSourcePart);
    }
    let mut attr = ColorTerm::None;
    if let Some(t) = lex.color_of(rest[0]) {
        attr = t;
        rest.remove(0);
    }
    if rest.is_empty() {
        return Err(ParseError::NoSourcePart);
    }
    let owned: Vec<String> = rest.iter().map(|s| s.to_string()).collect();
    let form = lex.element_exact(&owned).ok_or_else(|| {
        let term = rest.join(" ");
        ParseError::UnknownElementTerm {
            suggestion: lex.nearest_element(&term),
            term,
        }
    })?;
    let type_level = matches!(
        form.class,
        ElementClass::Background | ElementClass::Text | ElementClass::Shape
    );
    let quantifier = if attr.is_none() && (explicit_all || form.plural || type_level) {
        Quantifier::All
    } else {
        Quantifier::One
    };
    Ok(SourceDescriptor {
        class: form.class,
        attr,
        quantifier,
    })
}

fn parse_regions(lex: &Lexicon, toks: &[String]) -> Result<Vec<RegionDescriptor>, ParseError> {
    let mut regions = Vec::new();
    for group in toks.split(|t| t == "and" || t == ",") {
        let mut kept: Vec<&str> = Vec::new();
        let mut i = 0;
        while i < group.len() {
            let t = group[i].as_str();
            if ARTICLES.contains(&t) {
                i += 1;
                continue;
            }
            if is_color_noun(t) && group.get(i + 1).map(String::as_str) == Some("of") {
                i += 2;
                continue;
            }
            kept.push(t);
            i += 1;
        }
        if kept.is_empty() {
            continue;
        }
        let mut color_adj = ColorTerm::None;
        if let Some(pos) = kept.iter().position(|w| lex.color_of(w).is_some()) {
            color_adj = lex.color_of(kept[pos]).unwrap();
            let original = kept.join(" ");
            kept.remove(pos);
            if kept.is_empty() {
                return Err(ParseError::EmptyRegionPhrase(original));
            }
        }
        regions.push(RegionDescriptor {
            phrase: kept.join(" "),
            color_adj,
        });
    }
    if regions.is_empty() {
        return Err(ParseError::NoRegionPart);
    }
    Ok(regions)
}

/// One single-region instruction per region, in order.
pub fn split_multi_region(ast: &InstructionAst) -> Vec<InstructionAst> {
    ast.regions
        .iter()
        .map(|r| InstructionAst {
            source: ast.source,
            regions: vec![r.clone()],
        })
        .collect()
}

/// Colors an element contributes when deciding granularity: its annotation, or its voted colors.
fn element_colors(b: &DesignBundle, e: &crate::design::DesignElement) -> Vec<Rgb8> {
    match e.color {
        Some(c) => vec![c],
        None => crate::predict::dominant_color(b, e).into_iter().collect(),
    }
}

pub fn recognize_granularity(ast: &InstructionAst, b: &DesignBundle) -> Result<Granularity, GranularityError> {
    recognize_source_granularity(&ast.source, b)
}

/// Fine when the descriptor resolves to a single color: an attribute is given,
/// or every matching element shares one color bin.
pub fn recognize_source_granularity(
    src: &SourceDescriptor,
    b: &DesignBundle,
) -> Result<Granularity, GranularityError> {
    let elems = b.elements_of(src.class, src.attr);
    if elems.is_empty() {
        return Err(GranularityError::NoMatchingElement {
            class: src.class,
            attr: src.attr,
        });
    }
    if !src.attr.is_none() {
        return Ok(Granularity::Fine);
    }
    let bins: HashSet<_> = elems
        .iter()
        .flat_map(|e| element_colors(b, e))
        .map(bin_index)
        .collect();
    Ok(if bins.len() == 1 { Granularity::Fine } else { Granularity::Coarse })
}
