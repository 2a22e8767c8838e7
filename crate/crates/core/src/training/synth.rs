//! Deterministic templated corpus over small entity, product and sentiment
//! vocabularies.

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::example::{Example, GoldClassification, GoldEntity, GoldSpan, GoldStructure};
use crate::schema::{parse_field_dsl, ClassificationSpec, Schema, StructureSpec};

const PERSONS: &[&str] = &[
    "John",
    "Mary",
    "Steve Jobs",
    "Alice Smith",
    "Bob",
    "Maria Garcia",
    "David",
    "Emma Brown",
    "Tim Cook",
    "Sarah",
];
const LOCATIONS: &[&str] = &[
    "Paris",
    "London",
    "Berlin",
    "Tokyo",
    "New York",
    "Madrid",
    "Rome",
    "San Francisco",
];
const ORGS: &[&str] = &["Apple", "Google", "Microsoft", "Amazon", "Tesla", "Samsung"];
const PRODUCTS: &[(&str, &str)] = &[
    ("iPhone", "phone"),
    ("Galaxy", "phone"),
    ("Pixel", "phone"),
    ("MacBook", "laptop"),
    ("ThinkPad", "laptop"),
    ("iPad", "tablet"),
    ("Kindle", "tablet"),
    ("Surface", "tablet"),
];
const PRICES: &[&str] = &["$999", "$899", "$499", "$1299", "$199", "$349", "$79", "$649"];
const PRICE_VERBS: &[&str] = &["costs", "is", "sells for"];
const THINGS: &[&str] = &["movie", "book", "phone", "restaurant", "show", "game"];
const SENTIMENT: &[(&str, &[&str])] = &[
    ("positive", &["amazing", "great", "wonderful", "excellent", "fantastic"]),
    ("negative", &["terrible", "awful", "boring", "horrible", "bad"]),
    ("neutral", &["okay", "average", "ordinary", "acceptable"]),
];
const OPINION_VERBS: &[(&str, &str)] = &[("loved", "positive"), ("hated", "negative"), ("bought", "neutral")];
const TOPICS: &[(&str, &[&str])] = &[
    ("sports", &["football", "tennis"]),
    ("politics", &["elections", "parliament"]),
    ("technology", &["software", "robots"]),
    ("business", &["markets", "investors"]),
];

/// Accumulates text while recording character spans of inserted values.
#[derive(Default)]
struct TextBuilder {
    text: String,
    chars: usize,
}

impl TextBuilder {
    fn push(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self.chars += s.chars().count();
        self
    }

    fn span(&mut self, s: &str) -> GoldSpan {
        let start = self.chars;
        self.push(s);
        GoldSpan {
            start,
            end: self.chars,
            text: s.to_string(),
        }
    }
}

fn example(text: String, schema: Schema) -> Example {
    Example {
        text,
        schema,
        entities: Vec::new(),
        structures: Vec::new(),
        classifications: Vec::new(),
    }
}

fn entity(label: &str, span: GoldSpan) -> GoldEntity {
    GoldEntity {
        label: label.to_string(),
        span,
    }
}

fn product_schema() -> Schema {
    Schema::new().with_structure(StructureSpec::from_dsl("product", ["name::str", "price::str"]).expect("valid fields"))
}

fn sentiment_spec() -> ClassificationSpec {
    ClassificationSpec::single_label("sentiment", ["positive", "negative", "neutral"])
}

fn instance(fields: &[(&str, GoldSpan)]) -> IndexMap<String, Vec<GoldSpan>> {
    fields.iter().map(|(k, v)| (k.to_string(), vec![v.clone()])).collect()
}

/// `"X costs $P. Y is $Q. ..."` with one instance per product.
fn products(items: &[(&str, &str)]) -> Example {
    let mut b = TextBuilder::default();
    let mut instances = Vec::new();
    for (i, (name, price)) in items.iter().enumerate() {
        if i > 0 {
            b.push(" ");
        }
        let n = b.span(name);
        b.push(" ").push(PRICE_VERBS[i % PRICE_VERBS.len()]).push(" ");
        let p = b.span(price);
        b.push(".");
        instances.push(instance(&[("name", n), ("price", p)]));
    }
    let mut ex = example(b.text, product_schema());
    ex.structures.push(GoldStructure {
        name: "product".into(),
        instances,
    });
    ex
}

fn no_products(rng: &mut ChaCha8Rng) -> Example {
    let text = [
        "No prices were listed today.",
        "The shop was closed on Monday.",
        "Nothing was on sale.",
    ]
    .choose(rng)
    .expect("non-empty");
    let mut ex = example(text.to_string(), product_schema());
    ex.structures.push(GoldStructure {
        name: "product".into(),
        instances: Vec::new(),
    });
    ex
}

fn ner_person_location(person: &str, location: &str, template: usize) -> Example {
    let mut b = TextBuilder::default();
    let p = b.span(person);
    b.push([" works in ", " lives in "][template % 2]);
    let l = b.span(location);
    if template % 2 == 1 {
        b.push(".");
    }
    let mut ex = example(b.text, Schema::new().with_entities(["person", "location"]));
    ex.entities = vec![entity("person", p), entity("location", l)];
    ex
}

fn sentiment(thing: &str, adjective: &str, label: &str, template: usize) -> Example {
    let text = match template % 2 {
        0 => format!("This {thing} is {adjective}!"),
        _ => format!("The {thing} was {adjective}."),
    };
    let mut ex = example(text, Schema::new().with_classification(sentiment_spec()));
    ex.classifications.push(GoldClassification {
        task: "sentiment".into(),
        labels: vec![label.into()],
    });
    ex
}

fn opinion(person: &str, verb: &str, product: &str, label: &str) -> Example {
    let mut b = TextBuilder::default();
    let p = b.span(person);
    b.push(" ").push(verb).push(" the ");
    let q = b.span(product);
    let schema = Schema::new()
        .with_entities(["person", "product"])
        .with_classification(sentiment_spec());
    let mut ex = example(b.text, schema);
    ex.entities = vec![entity("person", p), entity("product", q)];
    ex.classifications.push(GoldClassification {
        task: "sentiment".into(),
        labels: vec![label.into()],
    });
    ex
}

/// The worked examples, always at the head of a generated corpus.
pub fn canonical_examples() -> Vec<Example> {
    vec![
        products(&[("iPhone", "$999"), ("Galaxy", "$899")]),
        ner_person_location("John", "Paris", 0),
        sentiment("movie", "amazing", "positive", 0),
        opinion("Steve Jobs", "loved", "iPhone", "positive"),
    ]
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty pool")
}

fn distinct<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T], k: usize) -> Vec<&'a T> {
    xs.choose_multiple(rng, k).collect()
}

fn gen_products(rng: &mut ChaCha8Rng) -> Example {
    let k = match rng.random_range(0..20) {
        0..2 => 0,
        2..7 => 1,
        7..13 => 2,
        _ => 3,
    };
    if k == 0 {
        return no_products(rng);
    }
    let names = distinct(rng, PRODUCTS, k);
    let prices = distinct(rng, PRICES, k);
    let items: Vec<(&str, &str)> = names.iter().zip(&prices).map(|(n, p)| (n.0, **p)).collect();
    products(&items)
}

fn gen_ner(rng: &mut ChaCha8Rng) -> Example {
    match rng.random_range(0..5) {
        0 => ner_person_location(pick(rng, PERSONS), pick(rng, LOCATIONS), rng.random_range(0..2)),
        1 | 2 => {
            let mut b = TextBuilder::default();
            let p = b.span(pick(rng, PERSONS));
            b.push(" joined ");
            let o = b.span(pick(rng, ORGS));
            b.push(" in ");
            let l = b.span(pick(rng, LOCATIONS));
            b.push(".");
            let mut ex = example(
                b.text,
                Schema::new().with_entities(["person", "organization", "location"]),
            );
            ex.entities = vec![entity("person", p), entity("organization", o), entity("location", l)];
            ex
        }
        3 => {
            let mut b = TextBuilder::default();
            let o = b.span(pick(rng, ORGS));
            b.push(" released the ");
            let q = b.span(pick(rng, PRODUCTS).0);
            b.push(".");
            let mut ex = example(b.text, Schema::new().with_entities(["organization", "product"]));
            ex.entities = vec![entity("organization", o), entity("product", q)];
            ex
        }
        _ => {
            let locs = distinct(rng, LOCATIONS, 2);
            let mut b = TextBuilder::default();
            let p = b.span(pick(rng, PERSONS));
            b.push(" visited ");
            let l1 = b.span(locs[0]);
            b.push(" and ");
            let l2 = b.span(locs[1]);
            b.push(".");
            let mut ex = example(b.text, Schema::new().with_entities(["person", "location"]));
            ex.entities = vec![entity("person", p), entity("location", l1), entity("location", l2)];
            ex
        }
    }
}

fn gen_sentiment(rng: &mut ChaCha8Rng) -> Example {
    let (label, adjectives) = *pick(rng, SENTIMENT);
    sentiment(pick(rng, THINGS), pick(rng, adjectives), label, rng.random_range(0..2))
}

fn gen_topics(rng: &mut ChaCha8Rng) -> Example {
    let n = rng.random_range(1..=2);
    let chosen = distinct(rng, TOPICS, n);
    let phrases: Vec<&str> = chosen.iter().map(|(_, ws)| *pick(rng, ws)).collect();
    let text = format!("The report covers {}.", phrases.join(" and "));
    let spec = ClassificationSpec::multi_label("topics", TOPICS.iter().map(|t| t.0));
    let mut ex = example(text, Schema::new().with_classification(spec));
    let mut labels: Vec<String> = chosen.iter().map(|t| t.0.to_string()).collect();
    labels.sort_by_key(|l| TOPICS.iter().position(|t| t.0 == l));
    ex.classifications.push(GoldClassification {
        task: "topics".into(),
        labels,
    });
    ex
}

fn gen_opinion(rng: &mut ChaCha8Rng) -> Example {
    let (verb, label) = *pick(rng, OPINION_VERBS);
    opinion(pick(rng, PERSONS), verb, pick(rng, PRODUCTS).0, label)
}

fn gen_device(rng: &mut ChaCha8Rng) -> Example {
    let (name, category) = *pick(rng, PRODUCTS);
    let mut b = TextBuilder::default();
    b.push("The ");
    let n = b.span(name);
    b.push(" is a ");
    let c = b.span(category);
    b.push(".");
    let fields = [
        parse_field_dsl("name::str::product name").expect("valid"),
        parse_field_dsl("category::[phone|laptop|tablet]::str").expect("valid"),
    ];
    let schema = Schema::new().with_structure(StructureSpec::new("device", fields.to_vec()));
    let mut ex = example(b.text, schema);
    ex.structures.push(GoldStructure {
        name: "device".into(),
        instances: vec![instance(&[("name", n), ("category", c)])],
    });
    ex
}

/// `n` examples: the worked examples first, then a seeded mix of product
/// records (0 to 3 instances), NER, single- and multi-label classification
/// and composed entity plus sentiment sentences.
pub fn generate_synthetic(seed: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = canonical_examples();
    out.truncate(n);
    while out.len() < n {
        let ex = match rng.random_range(0..100) {
            0..30 => gen_products(&mut rng),
            30..48 => gen_ner(&mut rng),
            48..60 => gen_sentiment(&mut rng),
            60..84 => gen_topics(&mut rng),
            84..94 => gen_opinion(&mut rng),
            _ => gen_device(&mut rng),
        };
        out.push(ex);
    }
    out
}
