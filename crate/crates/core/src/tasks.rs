//! Aspect-based sentiment task plumbing: instructions, the
//! `term: polarity; term: polarity` response protocol, JSON-lines datasets
//! and a synthetic multi-domain corpus with cross-domain polarity conflicts.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Task definition sentence of the joint instruction.
pub const JOINT_TASK_SENTENCE: &str =
    "Given a Sentence, you should extract all aspect terms and give a corresponding polarity";
/// Output format sentence of the joint instruction.
pub const JOINT_FORMAT_SENTENCE: &str = "The format is \"terms1: polarity1; terms2: polarity2\"";

const AE_TASK_SENTENCE: &str = "Given a Sentence, you should extract all aspect terms";
const AE_FORMAT_SENTENCE: &str = "The format is \"terms1; terms2\"";
const ABSC_TASK_SENTENCE: &str =
    "Given a Sentence and an aspect term, you should give the polarity of the aspect term";

/// Sentinel response for a sentence without aspects.
pub const NONE: &str = "none";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }

    /// Case-insensitive, whitespace-trimmed label lookup.
    pub fn parse(s: &str) -> Option<Polarity> {
        let s = s.trim().to_lowercase();
        Polarity::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    /// Polarity of one given aspect term.
    Absc,
    /// Aspect term extraction.
    Ae,
    /// Terms together with their polarities.
    Joint,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Absc, Task::Ae, Task::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Absc => "ABSC",
            Task::Ae => "AE",
            Task::Joint => "JOINT",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ABSC" => Ok(Task::Absc),
            "AE" => Ok(Task::Ae),
            "JOINT" => Ok(Task::Joint),
            _ => Err(Error::usage(format!("unknown task `{s}` (expected ABSC, AE or JOINT)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Aspect {
    pub term: String,
    pub polarity: Polarity,
}

impl Aspect {
    pub fn new(term: impl Into<String>, polarity: Polarity) -> Self {
        Self {
            term: term.into(),
            polarity,
        }
    }
}

/// One example. ABSC instances carry exactly the queried aspect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub text: String,
    pub aspects: Vec<Aspect>,
    #[serde(default)]
    pub domain: Option<String>,
    pub task: Task,
}

impl Instance {
    pub fn joint(text: impl Into<String>, aspects: Vec<Aspect>, domain: Option<String>) -> Self {
        Self {
            text: text.into(),
            aspects,
            domain,
            task: Task::Joint,
        }
    }

    /// Copy without the domain label.
    pub fn without_domain(&self) -> Instance {
        Instance {
            domain: None,
            ..self.clone()
        }
    }
}

/// Re-targets sentence-level annotations at a task. ABSC yields one instance
/// per annotated aspect; AE and JOINT keep one instance per sentence.
pub fn expand_for_task(sentences: &[Instance], task: Task) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for s in sentences {
        match task {
            Task::Absc => {
                for a in &s.aspects {
                    if !s.text.contains(&a.term) {
                        return Err(Error::format(format!(
                            "aspect term `{}` does not occur in `{}`",
                            a.term, s.text
                        )));
                    }
                    out.push(Instance {
                        text: s.text.clone(),
                        aspects: vec![a.clone()],
                        domain: s.domain.clone(),
                        task,
                    });
                }
            }
            Task::Ae | Task::Joint => out.push(Instance { task, ..s.clone() }),
        }
    }
    Ok(out)
}

/// Prompt text for `instance` under `task`. Deterministic.
pub fn build_instruction(task: Task, instance: &Instance) -> Result<String> {
    if instance.task != task {
        return Err(Error::usage(format!(
            "instance is a {} example, not {task}",
            instance.task
        )));
    }
    Ok(match task {
        Task::Joint => format!(
            "<instruction> {JOINT_TASK_SENTENCE}. {JOINT_FORMAT_SENTENCE} <input> {} <response>",
            instance.text
        ),
        Task::Ae => format!(
            "<instruction> {AE_TASK_SENTENCE}. {AE_FORMAT_SENTENCE} <input> {} <response>",
            instance.text
        ),
        Task::Absc => {
            let [aspect] = instance.aspects.as_slice() else {
                return Err(Error::usage(format!(
                    "ABSC instance needs exactly one aspect, found {}",
                    instance.aspects.len()
                )));
            };
            format!(
                "<instruction> {ABSC_TASK_SENTENCE}. <input> {} <aspect> {} <response>",
                instance.text, aspect.term
            )
        }
    })
}

/// `term1: polarity1; term2: polarity2` in input order, or `none`.
pub fn format_target(aspects: &[Aspect]) -> String {
    if aspects.is_empty() {
        return NONE.to_string();
    }
    aspects
        .iter()
        .map(|a| format!("{}: {}", a.term, a.polarity))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Expected response text of an instance.
pub fn target_text(instance: &Instance) -> Result<String> {
    Ok(match instance.task {
        Task::Joint => format_target(&instance.aspects),
        Task::Ae => {
            if instance.aspects.is_empty() {
                NONE.to_string()
            } else {
                instance
                    .aspects
                    .iter()
                    .map(|a| a.term.as_str())
                    .collect::<Vec<_>>()
                    .join("; ")
            }
        }
        Task::Absc => match instance.aspects.as_slice() {
            [a] => a.polarity.to_string(),
            _ => return Err(Error::usage("ABSC instance needs exactly one aspect")),
        },
    })
}

/// Result of parsing a generated response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedOutput {
    pub pairs: Vec<(String, Polarity)>,
    pub parseable: bool,
}

/// Splits on `;`, then on the last `:` of each segment. A segment without a
/// valid polarity marks the output unparseable; valid pairs are kept.
pub fn parse_output(generated: &str) -> ParsedOutput {
    let text = generated.trim();
    if text.is_empty() || text.eq_ignore_ascii_case(NONE) {
        return ParsedOutput {
            pairs: Vec::new(),
            parseable: true,
        };
    }
    let mut pairs = Vec::new();
    let mut parseable = true;
    for segment in text.split(';') {
        let segment = segment.trim();
        if segment.is_empty() {
            continue;
        }
        match segment.rsplit_once(':') {
            Some((term, pol)) => match Polarity::parse(pol) {
                Some(p) if !term.trim().is_empty() => pairs.push((term.trim().to_string(), p)),
                _ => parseable = false,
            },
            None => parseable = false,
        }
    }
    ParsedOutput { pairs, parseable }
}

/// Aspect terms of an extraction response.
pub fn parse_terms(generated: &str) -> Vec<String> {
    let text = generated.trim();
    if text.eq_ignore_ascii_case(NONE) {
        return Vec::new();
    }
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Serialize, Deserialize)]
struct RawAspect {
    term: String,
    polarity: String,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    text: String,
    aspects: Vec<RawAspect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
}

fn validate_term(term: &str) -> std::result::Result<(), String> {
    if term.trim().is_empty() {
        return Err("empty aspect term".into());
    }
    if term.contains(':') || term.contains(';') {
        return Err(format!("aspect term `{term}` contains `:` or `;`"));
    }
    Ok(())
}

/// Reads JSON lines of `{text, aspects: [{term, polarity}], domain}` as
/// sentence-level (JOINT) instances. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::format(format!("{}:{line_no}: {msg}", path.display()));
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let mut aspects = Vec::with_capacity(raw.aspects.len());
        for a in raw.aspects {
            validate_term(&a.term).map_err(fail)?;
            let polarity = Polarity::parse(&a.polarity)
                .ok_or_else(|| fail(format!("unknown polarity `{}`", a.polarity)))?;
            aspects.push(Aspect {
                term: a.term,
                polarity,
            });
        }
        out.push(Instance::joint(raw.text, aspects, raw.domain));
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut text = String::new();
    for inst in instances {
        let raw = RawRecord {
            text: inst.text.clone(),
            aspects: inst
                .aspects
                .iter()
                .map(|a| RawAspect {
                    term: a.term.clone(),
                    polarity: a.polarity.to_string(),
                })
                .collect(),
            domain: inst.domain.clone(),
        };
        text.push_str(&serde_json::to_string(&raw).map_err(|e| Error::format(e.to_string()))?);
        text.push('\n');
    }
    io::write_text(path, &text)
}

/// Parameters of the synthetic multi-domain corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: Vec<String>,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    /// Opinion words whose polarity never changes.
    pub invariant_lexicon: BTreeMap<String, Polarity>,
    /// Opinion words with one polarity per domain, in `domains` order.
    pub variant_lexicon: BTreeMap<String, Vec<Polarity>>,
    /// Aspect nouns of each domain.
    pub aspects: Vec<Vec<String>>,
    /// Context nouns of each domain, filling the optional `{c}` slot.
    #[serde(default)]
    pub contexts: Vec<Vec<String>>,
    /// Single-aspect templates with `{a}` and `{o}` slots.
    pub templates: Vec<String>,
    /// Two-aspect templates with `{a1} {o1} {a2} {o2}` slots.
    pub pair_templates: Vec<String>,
    /// Probability that a sentence carries two aspects.
    pub multi_aspect_rate: f64,
    /// Probability that an opinion word is drawn from the variant lexicon.
    pub variant_rate: f64,
    pub seed: u64,
    /// Aspect nouns of the domain-free pretraining split.
    #[serde(default)]
    pub general_aspects: Vec<String>,
    /// Size of the pretraining split; its opinions use only the invariant
    /// lexicon.
    #[serde(default)]
    pub general_sentences: usize,
    #[serde(default)]
    pub general_contexts: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthSpec {
    /// Four domains of 200 train / 50 test sentences, 10 invariant and 8
    /// variant opinion words, 12 domain-specific aspect nouns and a context noun
    /// each, plus 300 general sentences.
    fn default() -> Self {
        use Polarity::{Negative as N, Neutral as U, Positive as P};
        let invariant_lexicon = [
            ("good", P),
            ("great", P),
            ("excellent", P),
            ("wonderful", P),
            ("bad", N),
            ("terrible", N),
            ("awful", N),
            ("poor", N),
            ("okay", U),
            ("average", U),
        ]
        .into_iter()
        .map(|(w, p)| (w.to_string(), p))
        .collect();
        // Every pair of domains disagrees on at least six of the eight words.
        let variant_lexicon = [
            ("hot", [P, N, U, N]),
            ("long", [N, U, P, P]),
            ("fast", [N, U, U, P]),
            ("cold", [P, U, N, U]),
            ("small", [U, N, P, P]),
            ("loud", [U, P, N, U]),
            ("soft", [P, N, N, U]),
            ("heavy", [U, P, U, N]),
        ]
        .into_iter()
        .map(|(w, p)| (w.to_string(), p.to_vec()))
        .collect();
        Self {
            domains: words(&["restaurant", "laptop", "hotel", "camera"]),
            train_per_domain: 200,
            test_per_domain: 50,
            invariant_lexicon,
            variant_lexicon,
            aspects: vec![
                words(&[
                    "pizza", "pasta", "soup", "steak", "coffee", "dessert", "salad", "bread", "wine", "burger",
                    "sushi", "tea",
                ]),
                words(&[
                    "cpu", "battery", "screen", "keyboard", "fan", "charger", "trackpad", "speaker", "hinge",
                    "webcam", "drive", "case",
                ]),
                words(&[
                    "room", "bed", "pool", "lobby", "shower", "breakfast", "balcony", "elevator", "carpet", "towel",
                    "sauna", "gym",
                ]),
                words(&[
                    "lens", "flash", "sensor", "shutter", "zoom", "strap", "tripod", "viewfinder", "autofocus",
                    "grip", "mount", "bag",
                ]),
            ],
            contexts: vec![words(&["restaurant"]), words(&["laptop"]), words(&["hotel"]), words(&["camera"])],
            templates: words(&[
                "The {a} of this {c} is {o}",
                "The {a} of this {c} was {o}",
                "I think the {a} at the {c} is {o}",
                "Honestly the {c} {a} was really {o}",
                "Their {a} seemed {o} for a {c}",
            ]),
            pair_templates: words(&[
                "The {c} {a1} is {o1} but the {a2} is {o2}",
                "In this {c} the {a1} was {o1} and the {a2} was {o2}",
            ]),
            multi_aspect_rate: 0.0,
            variant_rate: 0.5,
            seed: 7,
            general_aspects: words(&[
                "price", "design", "quality", "staff", "delivery", "size", "color", "packaging", "warranty",
                "manual", "support", "material", "handle", "door", "window", "menu", "app", "website", "cable",
                "button", "box", "label", "finish", "sound", "light", "seat", "table", "wall", "floor", "noise",
                "smell", "parking", "location", "view", "paint", "clock",
            ]),
            general_sentences: 300,
            general_contexts: words(&["product", "store", "purchase", "item"]),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.domains.len();
        if n == 0 {
            return Err(Error::usage("synthetic spec needs at least one domain"));
        }
        if self.aspects.len() != n {
            return Err(Error::usage(format!(
                "{} aspect lists for {n} domains",
                self.aspects.len()
            )));
        }
        if self.templates.is_empty() || self.invariant_lexicon.is_empty() {
            return Err(Error::usage("synthetic spec needs templates and invariant opinion words"));
        }
        if self.multi_aspect_rate > 0.0 && self.pair_templates.is_empty() {
            return Err(Error::usage("multi-aspect sentences requested without pair templates"));
        }
        for w in self.variant_lexicon.keys() {
            if self.invariant_lexicon.contains_key(w) {
                return Err(Error::usage(format!("opinion word `{w}` is in both lexicons")));
            }
        }
        for (w, pols) in &self.variant_lexicon {
            if pols.len() != n {
                return Err(Error::usage(format!("variant word `{w}` has {} polarities for {n} domains", pols.len())));
            }
            if n >= 2 && pols.iter().collect::<BTreeSet<_>>().len() < 2 {
                return Err(Error::usage(format!("variant word `{w}` has the same polarity in every domain")));
            }
        }
        let slotted = self.templates.iter().chain(&self.pair_templates).any(|t| t.contains("{c}"));
        let mut context_lists: Vec<&[String]> = self.contexts.iter().map(Vec::as_slice).collect();
        if self.general_sentences > 0 {
            context_lists.push(&self.general_contexts);
        }
        if slotted {
            if self.contexts.len() != n {
                return Err(Error::usage(format!("{} context lists for {n} domains", self.contexts.len())));
            }
            if context_lists.iter().any(|l| l.is_empty()) {
                return Err(Error::usage("templates use {c} but a context list is empty"));
            }
        }
        let mut seen = HashSet::new();
        for w in context_lists.iter().flat_map(|l| l.iter()) {
            validate_term(w).map_err(Error::Usage)?;
            if self.invariant_lexicon.contains_key(w) || self.variant_lexicon.contains_key(w) {
                return Err(Error::usage(format!("context word `{w}` is also an opinion word")));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::usage(format!("context word `{w}` is listed twice")));
            }
        }
        for (d, list) in self.aspects.iter().enumerate() {
            if list.len() < 2 && self.multi_aspect_rate > 0.0 {
                return Err(Error::usage(format!("domain {d} needs at least two aspects")));
            }
            for a in list {
                validate_term(a).map_err(Error::Usage)?;
                if self.invariant_lexicon.contains_key(a) || self.variant_lexicon.contains_key(a) {
                    return Err(Error::usage(format!("aspect `{a}` is also an opinion word")));
                }
                if !seen.insert(a.as_str()) {
                    return Err(Error::usage(format!("aspect `{a}` appears twice or is also a context word")));
                }
            }
        }
        if self.general_sentences > 0 {
            if self.general_aspects.len() < 2 {
                return Err(Error::usage("the general split needs at least two aspects"));
            }
            for a in &self.general_aspects {
                validate_term(a).map_err(Error::Usage)?;
                if self.invariant_lexicon.contains_key(a) || self.variant_lexicon.contains_key(a) {
                    return Err(Error::usage(format!("aspect `{a}` is also an opinion word")));
                }
                if !seen.insert(a.as_str()) {
                    return Err(Error::usage(format!("general aspect `{a}` also belongs to a domain")));
                }
            }
        }
        Ok(())
    }

    pub fn polarity_of(&self, word: &str, domain: usize) -> Option<Polarity> {
        self.invariant_lexicon
            .get(word)
            .copied()
            .or_else(|| self.variant_lexicon.get(word).map(|p| p[domain]))
    }
}

/// Train and test sentences of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub name: String,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Sentence-level data of every domain, in a fixed domain order.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub domains: Vec<DomainData>,
    /// Domain-free sentences for base pretraining; may be empty.
    pub general: Vec<Instance>,
}

impl Corpus {
    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    /// Writes `<name>/train.jsonl` and `<name>/test.jsonl` per domain,
    /// `general.jsonl` when there is general data, and `spec.json` when a
    /// generator spec is given.
    pub fn save(&self, dir: &Path, spec: Option<&SynthSpec>) -> Result<()> {
        for d in &self.domains {
            let sub = dir.join(&d.name);
            io::create_dir_all(&sub)?;
            save_dataset(&sub.join("train.jsonl"), &d.train)?;
            save_dataset(&sub.join("test.jsonl"), &d.test)?;
        }
        if !self.general.is_empty() {
            save_dataset(&dir.join(GENERAL_FILE), &self.general)?;
        }
        let names = DomainList { domains: self.names() };
        io::write_json(&dir.join("domains.json"), &names)?;
        if let Some(spec) = spec {
            io::write_json(&dir.join("spec.json"), spec)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let list: DomainList = io::read_json(&dir.join("domains.json"))?;
        let mut domains = Vec::new();
        for name in list.domains {
            let sub = dir.join(&name);
            domains.push(DomainData {
                train: load_dataset(&sub.join("train.jsonl"))?,
                test: load_dataset(&sub.join("test.jsonl"))?,
                name,
            });
        }
        let general_path = dir.join(GENERAL_FILE);
        let general = if general_path.is_file() {
            load_dataset(&general_path)?
        } else {
            Vec::new()
        };
        Ok(Corpus { domains, general })
    }
}

const GENERAL_FILE: &str = "general.jsonl";

#[derive(Serialize, Deserialize)]
struct DomainList {
    domains: Vec<String>,
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(k, v);
    }
    s
}

/// Draws `needed` distinct sentences over `aspects`. `domain` selects the
/// variant polarities; `None` restricts opinions to the invariant lexicon.
fn sample_sentences(
    spec: &SynthSpec,
    aspects: &[String],
    contexts: &[String],
    domain: Option<(usize, &str)>,
    needed: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Instance>> {
    let invariant: Vec<&String> = spec.invariant_lexicon.keys().collect();
    let variant: Vec<&String> = match domain {
        Some(_) => spec.variant_lexicon.keys().collect(),
        None => Vec::new(),
    };
    let polarity = |w: &str| match domain {
        Some((d, _)) => spec.polarity_of(w, d).expect("lexicon word"),
        None => spec.invariant_lexicon[w],
    };
    let tag = domain.map(|(_, n)| n.to_string());
    let label = tag.as_deref().unwrap_or("general");
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(needed);
    let mut attempts = 0usize;
    while all.len() < needed {
        attempts += 1;
        if attempts > 200 * needed + 1000 {
            return Err(Error::usage(format!("`{label}` cannot produce {needed} distinct sentences")));
        }
        let opinion = |rng: &mut ChaCha8Rng| -> String {
            let pool = if !variant.is_empty() && rng.random_bool(spec.variant_rate) {
                &variant
            } else {
                &invariant
            };
            pool.choose(rng).expect("non-empty pool").to_string()
        };
        let inst = if rng.random_bool(spec.multi_aspect_rate) {
            let i = rng.random_range(0..aspects.len());
            let mut j = rng.random_range(0..aspects.len() - 1);
            if j >= i {
                j += 1;
            }
            let (o1, o2) = (opinion(rng), opinion(rng));
            let t = spec.pair_templates.choose(rng).expect("templates");
            let c = contexts.choose(rng).map(String::as_str).unwrap_or_default();
            let text = fill(t, &[("{a1}", &aspects[i]), ("{o1}", &o1), ("{a2}", &aspects[j]), ("{o2}", &o2), ("{c}", c)]);
            let pairs = vec![Aspect::new(&aspects[i], polarity(&o1)), Aspect::new(&aspects[j], polarity(&o2))];
            Instance::joint(text, pairs, tag.clone())
        } else {
            let a = aspects.choose(rng).expect("aspects");
            let o = opinion(rng);
            let t = spec.templates.choose(rng).expect("templates");
            let c = contexts.choose(rng).map(String::as_str).unwrap_or_default();
            let text = fill(t, &[("{a}", a), ("{o}", &o), ("{c}", c)]);
            Instance::joint(text, vec![Aspect::new(a, polarity(&o))], tag.clone())
        };
        if seen.insert(inst.text.clone()) {
            all.push(inst);
        }
    }
    Ok(all)
}

/// Generates every domain's train and test split plus the general split.
/// Sentences are unique within a domain, so the splits are disjoint. Same
/// spec, same bytes.
pub fn synth_generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let seed_for = |k: u64| spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    let mut domains = Vec::with_capacity(spec.domains.len());
    for (d, name) in spec.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(d as u64));
        let needed = spec.train_per_domain + spec.test_per_domain;
        let contexts = spec.contexts.get(d).map(Vec::as_slice).unwrap_or_default();
        let mut all = sample_sentences(spec, &spec.aspects[d], contexts, Some((d, name)), needed, &mut rng)?;
        let test = all.split_off(spec.train_per_domain);
        domains.push(DomainData {
            name: name.clone(),
            train: all,
            test,
        });
    }
    let general = if spec.general_sentences > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(0x6e_6572_616c));
        sample_sentences(spec, &spec.general_aspects, &spec.general_contexts, None, spec.general_sentences, &mut rng)?
    } else {
        Vec::new()
    };
    Ok(Corpus { domains, general })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint(text: &str, aspects: &[(&str, Polarity)]) -> Instance {
        Instance::joint(text, aspects.iter().map(|(t, p)| Aspect::new(*t, *p)).collect(), None)
    }

    #[test]
    fn joint_prompt_contains_both_sentences() {
        let inst = joint("The food is great", &[("food", Polarity::Positive)]);
        let p = build_instruction(Task::Joint, &inst).unwrap();
        assert!(p.contains(JOINT_TASK_SENTENCE));
        assert!(p.contains(JOINT_FORMAT_SENTENCE));
        assert!(p.contains("The food is great"));
        assert_eq!(p, build_instruction(Task::Joint, &inst).unwrap());
    }

    #[test]
    fn absc_prompt_has_one_query_slot() {
        let inst = expand_for_task(&[joint("The food is great", &[("food", Polarity::Positive)])], Task::Absc)
            .unwrap()
            .remove(0);
        let p = build_instruction(Task::Absc, &inst).unwrap();
        let query = p.split("<aspect>").nth(1).unwrap();
        assert_eq!(query.matches("food").count(), 1);
        assert_eq!(p.matches("<aspect>").count(), 1);
    }

    #[test]
    fn absc_without_aspect_is_usage_error() {
        let mut inst = joint("nothing here", &[]);
        inst.task = Task::Absc;
        assert!(matches!(build_instruction(Task::Absc, &inst), Err(Error::Usage(_))));
    }

    #[test]
    fn task_mismatch_is_usage_error() {
        let inst = joint("x", &[]);
        assert!(build_instruction(Task::Ae, &inst).is_err());
    }

    #[test]
    fn format_examples() {
        assert_eq!(format_target(&[Aspect::new("food", Polarity::Positive)]), "food: positive");
        assert_eq!(
            format_target(&[
                Aspect::new("food", Polarity::Positive),
                Aspect::new("service", Polarity::Negative)
            ]),
            "food: positive; service: negative"
        );
        assert_eq!(format_target(&[]), "none");
    }

    #[test]
    fn parse_examples() {
        let p = parse_output("food: positive; service: negative");
        assert!(p.parseable);
        assert_eq!(
            p.pairs,
            vec![("food".into(), Polarity::Positive), ("service".into(), Polarity::Negative)]
        );
        assert_eq!(parse_output("none"), ParsedOutput { pairs: vec![], parseable: true });
        assert_eq!(parse_output(""), ParsedOutput { pairs: vec![], parseable: true });
        assert_eq!(parse_output("i like it"), ParsedOutput { pairs: vec![], parseable: false });
    }

    #[test]
    fn parse_keeps_valid_pairs_of_bad_output() {
        let p = parse_output("food: Positive ; cpu: happy");
        assert!(!p.parseable);
        assert_eq!(p.pairs, vec![("food".into(), Polarity::Positive)]);
        let p = parse_output("battery life: neutral");
        assert_eq!(p.pairs, vec![("battery life".into(), Polarity::Neutral)]);
    }

    #[test]
    fn parse_uses_last_colon() {
        let p = parse_output("a:b: negative");
        assert_eq!(p.pairs, vec![("a:b".into(), Polarity::Negative)]);
    }

    #[test]
    fn term_list_parsing() {
        assert_eq!(parse_terms("food; service"), vec!["food", "service"]);
        assert!(parse_terms("none").is_empty());
    }

    #[test]
    fn targets_per_task() {
        let s = joint("The food is great", &[("food", Polarity::Positive)]);
        assert_eq!(target_text(&s).unwrap(), "food: positive");
        let ae = expand_for_task(std::slice::from_ref(&s), Task::Ae).unwrap().remove(0);
        assert_eq!(target_text(&ae).unwrap(), "food");
        let ab = expand_for_task(std::slice::from_ref(&s), Task::Absc).unwrap().remove(0);
        assert_eq!(target_text(&ab).unwrap(), "positive");
    }

    #[test]
    fn dataset_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"text\":\"The food is good\",\"aspects\":[{\"term\":\"food\",\"polarity\":\"positive\"}],\"domain\":\"r\"}\n\
             {\"text\":\"The cpu is hot\",\"aspects\":[{\"term\":\"cpu\",\"polarity\":\"negative\"}],\"domain\":\"l\"}\n",
        )
        .unwrap();
        let v = load_dataset(&p).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1].aspects[0].term, "cpu");
        assert_eq!(v[0].domain.as_deref(), Some("r"));

        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p).unwrap().is_empty());

        std::fs::write(
            &p,
            "{\"text\":\"a\",\"aspects\":[]}\n{\"text\":\"b c\",\"aspects\":[{\"term\":\"c\",\"polarity\":\"happy\"}]}\n",
        )
        .unwrap();
        match load_dataset(&p) {
            Err(Error::Format(m)) => assert!(m.contains(":2:"), "{m}"),
            other => panic!("{other:?}"),
        }

        std::fs::write(&p, "{\"text\":\"a:b\",\"aspects\":[{\"term\":\"a:b\",\"polarity\":\"neutral\"}]}\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Format(_))));

        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Format(_))));
    }

    #[test]
    fn synthetic_conflict_examples() {
        let spec = SynthSpec::default();
        assert_eq!(spec.polarity_of("hot", 0), Some(Polarity::Positive));
        assert_eq!(spec.polarity_of("hot", 1), Some(Polarity::Negative));
        let corpus = synth_generate(&spec).unwrap();
        let find = |d: usize, a: &str| {
            corpus.domains[d]
                .train
                .iter()
                .chain(&corpus.domains[d].test)
                .find(|i| i.aspects.len() == 1 && i.aspects[0].term == a && i.text.ends_with("hot"))
                .cloned()
        };
        if let Some(i) = find(0, "pizza") {
            assert_eq!(i.aspects[0].polarity, Polarity::Positive);
        }
        if let Some(i) = find(1, "cpu") {
            assert_eq!(i.aspects[0].polarity, Polarity::Negative);
        }
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let spec = SynthSpec::default();
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.domains.len(), 4);
        for d in &a.domains {
            assert_eq!(d.train.len(), 200);
            assert_eq!(d.test.len(), 50);
            let train: HashSet<_> = d.train.iter().map(|i| &i.text).collect();
            assert!(d.test.iter().all(|i| !train.contains(&i.text)));
        }
    }

    #[test]
    fn general_split_is_domain_free() {
        let spec = SynthSpec::default();
        let c = synth_generate(&spec).unwrap();
        assert_eq!(c.general.len(), spec.general_sentences);
        let domain_words: HashSet<&str> = spec
            .aspects
            .iter()
            .chain(&spec.contexts)
            .flatten()
            .chain(spec.variant_lexicon.keys())
            .map(String::as_str)
            .collect();
        for i in &c.general {
            assert!(i.domain.is_none());
            assert!(i.text.split(' ').all(|w| !domain_words.contains(w)), "{}", i.text);
            for a in &i.aspects {
                assert!(spec.general_aspects.contains(&a.term));
            }
        }
        for (d, dom) in c.domains.iter().enumerate() {
            assert!(dom.train.iter().all(|i| i.text.contains(spec.contexts[d][0].as_str())));
        }
    }

    #[test]
    fn context_slot_needs_context_words() {
        let mut spec = SynthSpec::default();
        spec.contexts[2].clear();
        assert!(matches!(synth_generate(&spec), Err(Error::Usage(_))));
        let mut spec = SynthSpec::default();
        spec.general_contexts.push("pizza".into());
        assert!(matches!(synth_generate(&spec), Err(Error::Usage(_))));
    }

    #[test]
    fn lexicon_overlap_is_rejected() {
        let mut spec = SynthSpec::default();
        spec.invariant_lexicon.insert("hot".into(), Polarity::Positive);
        assert!(matches!(synth_generate(&spec), Err(Error::Usage(_))));
    }

    #[test]
    fn corpus_round_trip() {
        let mut spec = SynthSpec::default();
        spec.train_per_domain = 20;
        spec.test_per_domain = 5;
        let corpus = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path(), Some(&spec)).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), corpus);
        let spec_back: SynthSpec = io::read_json(&dir.path().join("spec.json")).unwrap();
        assert_eq!(spec_back, spec);
    }
}
