//! Instruction grammar: parsing, ground-truth matching, text features and
//! phrase generation.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    object, ActionClass, Category, Color, EvalCategory, EvalInstructionSet, EvalItem, GroundTruth, Kind, ObjId,
    Receptacle, Scene, Skill, Slot, SyntheticEpisode, WorldConfig, WorldError, OBJECTS,
};
use crate::data::normalize_instruction;
use crate::embed::TextFeatures;

const KIND_WORDS: &[(&str, Kind)] = &[
    ("can", Kind::Can),
    ("tin", Kind::Can),
    ("bag", Kind::ChipBag),
    ("chips", Kind::ChipBag),
    ("chip", Kind::ChipBag),
    ("packet", Kind::ChipBag),
    ("crisps", Kind::ChipBag),
    ("bar", Kind::Bar),
    ("rxbar", Kind::Bar),
    ("granola", Kind::Bar),
    ("apple", Kind::Apple),
    ("banana", Kind::Banana),
    ("sponge", Kind::Sponge),
    ("bottle", Kind::Bottle),
];

const CATEGORY_WORDS: &[(&str, Category)] = &[
    ("soda", Category::Soda),
    ("pop", Category::Soda),
    ("beverage", Category::Soda),
    ("drink", Category::Soda),
    ("snack", Category::Snack),
    ("treat", Category::Snack),
    ("fruit", Category::Fruit),
    ("produce", Category::Fruit),
];

const EXTRA_COLOR_WORDS: &[(&str, Color)] = &[
    ("lime", Color::Green),
    ("grey", Color::Silver),
    ("gray", Color::Silver),
    ("transparent", Color::Clear),
];

const SLOT_WORDS: &[(&str, Slot)] = &[
    ("left", Slot::Left),
    ("leftmost", Slot::Left),
    ("middle", Slot::Middle),
    ("center", Slot::Middle),
    ("centre", Slot::Middle),
    ("right", Slot::Right),
    ("rightmost", Slot::Right),
];

const RECEPTACLE_WORDS: &[(&str, Receptacle)] = &[
    ("bowl", Receptacle::Bowl),
    ("dish", Receptacle::Bowl),
    ("box", Receptacle::Box),
    ("container", Receptacle::Box),
    ("plate", Receptacle::Plate),
    ("tray", Receptacle::Plate),
];

const STOPWORDS: &[&str] = &[
    "the", "a", "an", "up", "on", "of", "to", "it", "and", "that", "this", "one", "please", "for", "me", "now",
    "you", "could", "with", "at", "over", "robot",
];

const PICK_VERBS: &[&str] = &["pick", "lift", "raise", "grab", "take", "retrieve", "get", "fetch", "grasp", "hold"];
const KNOCK_WORDS: &[&str] = &["knock", "topple", "flick", "tip", "knockdown", "overturn"];
const OPEN_WORDS: &[&str] = &["open", "pull", "widen", "opened"];
const CLOSE_WORDS: &[&str] = &["close", "shut", "closed"];
const INTO_WORDS: &[&str] = &["into", "in", "inside", "onto", "on"];

fn lookup<T: Copy>(table: &[(&str, T)], word: &str) -> Option<T> {
    table.iter().find(|(w, _)| *w == word).map(|&(_, v)| v)
}

fn color_word(word: &str) -> Option<Color> {
    Color::ALL.iter().copied().find(|c| c.word() == word).or_else(|| lookup(EXTRA_COLOR_WORDS, word))
}

/// Brand phrases, longest first, as token lists.
fn brand_phrases() -> Vec<(Vec<&'static str>, ObjId)> {
    let mut out: Vec<(Vec<&'static str>, ObjId)> = OBJECTS
        .iter()
        .enumerate()
        .flat_map(|(i, o)| o.brand.iter().map(move |b| (b.split(' ').collect(), i)))
        .collect();
    out.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    out
}

/// Attributes a phrase says about one object. Every listed value must hold.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub objects: Vec<ObjId>,
    pub kinds: Vec<Kind>,
    pub colors: Vec<Color>,
    pub categories: Vec<Category>,
    pub slots: Vec<Slot>,
}

impl ObjectRef {
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty() && self.kinds.is_empty() && self.colors.is_empty() && self.categories.is_empty()
    }

    pub fn accepts(&self, obj: ObjId, slot: Slot) -> bool {
        let o = object(obj);
        self.objects.iter().all(|&x| x == obj)
            && self.kinds.iter().all(|&k| k == o.kind)
            && self.colors.iter().all(|&c| c == o.color)
            && self.categories.iter().all(|&c| Some(c) == o.category)
            && self.slots.iter().all(|&s| s == slot)
    }

    fn push<T: PartialEq>(v: &mut Vec<T>, x: T) {
        if !v.contains(&x) {
            v.push(x);
        }
    }

    fn parse(tokens: &[&str]) -> Self {
        let brands = brand_phrases();
        let mut r = ObjectRef::default();
        let mut i = 0;
        while i < tokens.len() {
            if let Some((len, obj)) = brands
                .iter()
                .find(|(p, _)| tokens[i..].starts_with(p))
                .map(|(p, o)| (p.len(), *o))
            {
                Self::push(&mut r.objects, obj);
                i += len;
                continue;
            }
            let w = tokens[i];
            if let Some(k) = lookup(KIND_WORDS, w) {
                Self::push(&mut r.kinds, k);
            } else if let Some(c) = color_word(w) {
                Self::push(&mut r.colors, c);
            } else if let Some(c) = lookup(CATEGORY_WORDS, w) {
                Self::push(&mut r.categories, c);
            } else if let Some(s) = lookup(SLOT_WORDS, w) {
                Self::push(&mut r.slots, s);
            }
            i += 1;
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedInstruction {
    pub skill: Skill,
    pub target: ObjectRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ObjectRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receptacle: Option<Receptacle>,
}

fn position(tokens: &[&str], words: &[&str]) -> Option<usize> {
    tokens.iter().position(|t| words.contains(t))
}

fn find_seq(tokens: &[&str], seq: &[&str]) -> Option<usize> {
    tokens.windows(seq.len()).position(|w| w == seq)
}

fn receptacle_in(tokens: &[&str]) -> Option<Receptacle> {
    tokens.iter().find_map(|t| lookup(RECEPTACLE_WORDS, t))
}

/// Parses a normalized instruction. `None` means the text is outside the
/// grammar.
pub fn parse_instruction(text: &str) -> Option<ParsedInstruction> {
    let normalized = normalize_instruction(text).ok()?;
    let raw: Vec<&str> = normalized.split(' ').collect();
    let mut tokens: Vec<&str> = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i..].starts_with(&["right", "side", "up"]) {
            tokens.push("upright");
            i += 3;
        } else {
            tokens.push(raw[i]);
            i += 1;
        }
    }
    let t = tokens.as_slice();
    let has = |words: &[&str]| position(t, words).is_some();
    let simple = |skill| Some(ParsedInstruction { skill, target: ObjectRef::parse(t), reference: None, receptacle: None });

    if has(&["drawer", "drawers"]) {
        let slots = ObjectRef::parse(t).slots;
        let target = ObjectRef { slots, ..Default::default() };
        let skill = if has(CLOSE_WORDS) {
            Skill::CloseDrawer
        } else if has(OPEN_WORDS) {
            Skill::OpenDrawer
        } else {
            return None;
        };
        return Some(ParsedInstruction { skill, target, reference: None, receptacle: None });
    }
    if has(&["upright", "stand"]) {
        return simple(Skill::PlaceUpright);
    }
    if has(KNOCK_WORDS) || (has(&["push", "fall"]) && has(&["over", "down"])) {
        return simple(Skill::KnockOver);
    }
    let relation = [&["next", "to"][..], &["close", "to"][..]]
        .iter()
        .filter_map(|seq| find_seq(t, seq).map(|p| (p, seq.len())))
        .chain(position(t, &["near", "nearby", "beside", "toward", "towards", "by"]).map(|p| (p, 1)))
        .min();
    if let Some((p, len)) = relation {
        return Some(ParsedInstruction {
            skill: Skill::MoveNear,
            target: ObjectRef::parse(&t[..p]),
            reference: Some(ObjectRef::parse(&t[p + len..])),
            receptacle: None,
        });
    }
    let from = position(t, &["from"]).map(|p| (p, 1)).or_else(|| find_seq(t, &["out", "of"]).map(|p| (p, 2)));
    if let Some((p, len)) = from {
        let rest = &t[p + len..];
        let end = position(rest, &["and"]).unwrap_or(rest.len());
        if let Some(r) = receptacle_in(&rest[..end]) {
            return Some(ParsedInstruction {
                skill: Skill::PickFrom,
                target: ObjectRef::parse(&t[..p]),
                reference: None,
                receptacle: Some(r),
            });
        }
    }
    let into = (0..t.len()).rev().find(|&p| INTO_WORDS.contains(&t[p]) && receptacle_in(&t[p + 1..]).is_some());
    if let Some(p) = into {
        return Some(ParsedInstruction {
            skill: Skill::PlaceInto,
            target: ObjectRef::parse(&t[..p]),
            reference: None,
            receptacle: receptacle_in(&t[p + 1..]),
        });
    }
    if has(PICK_VERBS) {
        return simple(Skill::Pick);
    }
    None
}

impl ParsedInstruction {
    /// True iff every stated attribute holds for this scene and outcome.
    pub fn consistent_with(&self, scene: &Scene, truth: &GroundTruth) -> bool {
        if self.skill != truth.skill {
            return false;
        }
        if truth.skill.uses_drawer() {
            return self.target.slots.iter().all(|&s| s == truth.slot);
        }
        if !self.target.accepts(scene.objects[truth.slot.index()], truth.slot) {
            return false;
        }
        if let (Some(r), Some(rs)) = (&self.reference, truth.reference_slot) {
            if !r.accepts(scene.objects[rs.index()], rs) {
                return false;
            }
        }
        self.receptacle.is_none_or(|r| truth.receptacle == Some(r))
    }

    /// The unique action this instruction demands in `scene`, if any.
    pub fn resolve(&self, scene: &Scene) -> Option<ActionClass> {
        let candidates: Vec<Slot> = if self.skill.uses_drawer() {
            let want_open = self.skill == Skill::CloseDrawer;
            if self.target.slots.is_empty() {
                Slot::ALL.iter().copied().filter(|s| scene.drawers_open[s.index()] == want_open).collect()
            } else {
                Slot::ALL.iter().copied().filter(|s| self.target.slots.iter().all(|x| x == s)).collect()
            }
        } else {
            if self.receptacle.is_some_and(|r| r != scene.receptacle) {
                return None;
            }
            Slot::ALL
                .iter()
                .copied()
                .filter(|&s| self.target.accepts(scene.objects[s.index()], s))
                .filter(|&s| match &self.reference {
                    Some(r) => Slot::ALL.iter().any(|&o| o != s && r.accepts(scene.objects[o.index()], o)),
                    None => true,
                })
                .collect()
        };
        match candidates.as_slice() {
            [slot] => Some(ActionClass { skill: self.skill, slot: *slot }),
            _ => None,
        }
    }
}

/// True iff `instruction` parses and every parsed attribute is consistent
/// with the episode's ground truth.
pub fn ground_truth_match(episode: &SyntheticEpisode, instruction: &str) -> bool {
    parse_instruction(instruction).is_some_and(|p| p.consistent_with(&episode.scene, &episode.truth))
}

/// Tallies matcher outcomes, flagging texts outside the grammar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounter {
    pub checked: usize,
    pub matched: usize,
    pub unparsed: usize,
}

impl MatchCounter {
    pub fn check(&mut self, episode: &SyntheticEpisode, instruction: &str) -> bool {
        self.checked += 1;
        match parse_instruction(instruction) {
            None => {
                self.unparsed += 1;
                false
            }
            Some(p) => {
                let ok = p.consistent_with(&episode.scene, &episode.truth);
                self.matched += usize::from(ok);
                ok
            }
        }
    }
}

fn object_ref_features(prefix: &str, r: &ObjectRef, out: &mut Vec<(String, f32)>) {
    for &o in &r.objects {
        out.push((format!("t:{prefix}obj:{}", OBJECTS[o].id), 1.0));
    }
    for k in &r.kinds {
        out.push((format!("t:{prefix}kind:{}", k.noun()), 0.5));
    }
    for c in &r.colors {
        out.push((format!("t:{prefix}color:{}", c.word()), 1.0));
    }
    for c in &r.categories {
        out.push((format!("t:{prefix}cat:{}", c.word()), 0.5));
    }
    for s in &r.slots {
        out.push((format!("t:{prefix}slot:{}", s.word()), 0.5));
    }
}

/// Weighted feature tokens of a text: one per parsed attribute plus
/// lighter lexical tokens.
pub fn text_features(text: &str) -> Vec<(String, f32)> {
    let Ok(normalized) = normalize_instruction(text) else {
        return vec![("t:empty".to_owned(), 1.0)];
    };
    let mut out = Vec::new();
    if let Some(p) = parse_instruction(&normalized) {
        out.push((format!("t:skill:{}", p.skill.name()), 1.0));
        object_ref_features("", &p.target, &mut out);
        if let Some(r) = &p.reference {
            object_ref_features("ref:", r, &mut out);
        }
        if let Some(r) = p.receptacle {
            out.push((format!("t:recept:{}", r.noun()), 1.0));
        }
    }
    for w in normalized.split(' ') {
        let weight = if STOPWORDS.contains(&w) {
            0.1
        } else if lookup(CATEGORY_WORDS, w).is_some() || lookup(KIND_WORDS, w).is_some() || lookup(SLOT_WORDS, w).is_some() {
            1.0
        } else {
            0.35
        };
        out.push((format!("t:w:{w}"), weight));
    }
    out
}

/// Text featurizer for the synthetic encoder.
#[derive(Clone, Copy, Debug, Default)]
pub struct WorldText;

impl TextFeatures for WorldText {
    fn text_features(&self, text: &str) -> Vec<(String, f32)> {
        text_features(text)
    }
}

/// Teleoperator command for an episode. Only drawers mention a slot.
pub fn structured_command(scene: &Scene, truth: &GroundTruth) -> String {
    let name = object(scene.objects[truth.slot.index()]).name;
    match truth.skill {
        Skill::Pick => format!("pick {name}"),
        Skill::MoveNear => {
            let r = truth.reference_slot.expect("move near has a reference");
            format!("move {name} near {}", object(scene.objects[r.index()]).name)
        }
        Skill::KnockOver => format!("knock {name} over"),
        Skill::PlaceUpright => format!("place {name} upright"),
        Skill::OpenDrawer => format!("open {} drawer", truth.slot.word()),
        Skill::CloseDrawer => format!("close {} drawer", truth.slot.word()),
        Skill::PlaceInto => format!("place {name} into {}", truth.receptacle.expect("receptacle").name()),
        Skill::PickFrom => {
            format!("pick {name} from {} and place on counter", truth.receptacle.expect("receptacle").name())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Form {
    Name,
    Brand,
    ColorKind,
    Kind,
    Category,
    ColorCategory,
}

/// Word choice. Annotators stick to common words; generated and evaluation
/// text also reaches for rarer ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Vocab {
    Plain,
    Rich,
}

fn kind_nouns(kind: Kind, vocab: Vocab) -> &'static [&'static str] {
    match (kind, vocab) {
        (Kind::Can, Vocab::Plain) => &["can"],
        (Kind::Can, Vocab::Rich) => &["can", "tin", "soda can"],
        (Kind::ChipBag, Vocab::Plain) => &["chip bag", "bag"],
        (Kind::ChipBag, Vocab::Rich) => &["chip bag", "bag of chips", "packet", "bag", "crisps"],
        (Kind::Bar, Vocab::Plain) => &["bar"],
        (Kind::Bar, Vocab::Rich) => &["bar", "granola bar", "rxbar"],
        (Kind::Apple, _) => &["apple"],
        (Kind::Banana, _) => &["banana"],
        (Kind::Sponge, _) => &["sponge"],
        (Kind::Bottle, _) => &["bottle"],
    }
}

fn category_nouns(category: Category, vocab: Vocab) -> &'static [&'static str] {
    match (category, vocab) {
        (Category::Soda, Vocab::Plain) => &["soda", "drink"],
        (Category::Soda, Vocab::Rich) => &["soda", "drink", "beverage", "pop"],
        (Category::Snack, Vocab::Plain) => &["snack"],
        (Category::Snack, Vocab::Rich) => &["snack", "treat"],
        (Category::Fruit, Vocab::Plain) => &["fruit"],
        (Category::Fruit, Vocab::Rich) => &["fruit", "produce"],
    }
}

fn receptacle_phrase(rng: &mut ChaCha8Rng, r: Receptacle) -> String {
    let alt = match r {
        Receptacle::Bowl => "dish",
        Receptacle::Box => "container",
        Receptacle::Plate => "tray",
    };
    [r.name(), r.noun(), alt].choose(rng).expect("non-empty").to_string()
}

fn render_form(rng: &mut ChaCha8Rng, obj: ObjId, form: Form, color: Color, vocab: Vocab) -> Option<String> {
    let o = object(obj);
    let kind = kind_nouns(o.kind, vocab);
    Some(match form {
        Form::Name => o.name.to_owned(),
        Form::Brand => o.brand.choose(rng)?.to_string(),
        Form::ColorKind => format!("{} {}", color.word(), kind.choose(rng).expect("non-empty")),
        Form::Kind => kind.choose(rng).expect("non-empty").to_string(),
        Form::Category => category_nouns(o.category?, vocab).choose(rng).expect("non-empty").to_string(),
        Form::ColorCategory => format!("{} {}", color.word(), category_nouns(o.category?, vocab).choose(rng).expect("non-empty")),
    })
}

/// Describes an object in one of the weighted forms.
fn describe(rng: &mut ChaCha8Rng, obj: ObjId, weights: &[(Form, f64)], color: Color, vocab: Vocab) -> String {
    loop {
        let form = weights.choose_weighted(rng, |w| w.1).expect("positive weights").0;
        if let Some(s) = render_form(rng, obj, form, color, vocab) {
            return s;
        }
    }
}

fn slot_word(rng: &mut ChaCha8Rng, slot: Slot, vocab: Vocab) -> &'static str {
    let words: &[&str] = match (slot, vocab) {
        (_, Vocab::Plain) => return slot.word(),
        (Slot::Left, Vocab::Rich) => &["left", "leftmost"],
        (Slot::Middle, Vocab::Rich) => &["middle", "center", "centre"],
        (Slot::Right, Vocab::Rich) => &["right", "rightmost"],
    };
    words.choose(rng).expect("non-empty")
}

fn with_slot(rng: &mut ChaCha8Rng, desc: &str, slot: Slot, vocab: Vocab) -> String {
    let w = slot_word(rng, slot, vocab);
    if rng.random_bool(0.5) {
        format!("{w} {desc}")
    } else {
        format!("{desc} on the {w}")
    }
}

fn skill_template(rng: &mut ChaCha8Rng, skill: Skill) -> &'static str {
    let list: &[&str] = match skill {
        Skill::Pick => &["pick up the {o}", "lift the {o}", "grab the {o}", "raise the {o}", "take the {o}", "pick the {o}"],
        Skill::MoveNear => &[
            "move the {o} near the {r}",
            "push the {o} next to the {r}",
            "bring the {o} close to the {r}",
            "slide the {o} toward the {r}",
            "put the {o} beside the {r}",
        ],
        Skill::KnockOver => &["knock over the {o}", "knock the {o} over", "topple the {o}", "tip over the {o}", "push over the {o}"],
        Skill::PlaceUpright => &["place the {o} upright", "stand the {o} up", "set the {o} right side up", "put the {o} upright"],
        Skill::OpenDrawer => &["open the {s} drawer", "pull the {s} drawer open", "open the drawer on the {s}"],
        Skill::CloseDrawer => &["close the {s} drawer", "shut the {s} drawer", "push the {s} drawer closed"],
        Skill::PlaceInto => &["put the {o} into the {R}", "place the {o} in the {R}", "drop the {o} inside the {R}"],
        Skill::PickFrom => &[
            "take the {o} out of the {R}",
            "pick the {o} from the {R}",
            "remove the {o} from the {R}",
            "lift the {o} out of the {R}",
        ],
    };
    list.choose(rng).expect("non-empty")
}

fn fill(template: &str, o: &str, r: &str, s: &str, recept: &str) -> String {
    template.replace("{o}", o).replace("{r}", r).replace("{s}", s).replace("{R}", recept)
}

const CROWD_FORMS: &[(Form, f64)] = &[
    (Form::Name, 0.25),
    (Form::Brand, 0.2),
    (Form::ColorKind, 0.3),
    (Form::Kind, 0.15),
    (Form::Category, 0.05),
    (Form::ColorCategory, 0.05),
];

const PROPOSAL_FORMS: &[(Form, f64)] = &[
    (Form::Name, 0.1),
    (Form::Brand, 0.15),
    (Form::ColorKind, 0.15),
    (Form::Kind, 0.1),
    (Form::Category, 0.25),
    (Form::ColorCategory, 0.25),
];

fn ambiguous(desc: &str, scene: &Scene, slot: Slot) -> bool {
    let r = ObjectRef::parse(&desc.split(' ').collect::<Vec<_>>());
    Slot::ALL.iter().any(|&s| s != slot && r.accepts(scene.objects[s.index()], s))
}

/// A truthful hindsight description of an episode.
pub(super) fn crowd_paraphrase(rng: &mut ChaCha8Rng, scene: &Scene, truth: &GroundTruth) -> String {
    let slot = truth.slot;
    let template = skill_template(rng, truth.skill);
    let describe_at = |rng: &mut ChaCha8Rng, s: Slot| {
        let obj = scene.objects[s.index()];
        let d = describe(rng, obj, CROWD_FORMS, object(obj).color, Vocab::Plain);
        let p = if ambiguous(&d, scene, s) { 0.85 } else { 0.25 };
        if rng.random_bool(p) { with_slot(rng, &d, s, Vocab::Plain) } else { d }
    };
    let o = if truth.skill.uses_drawer() { String::new() } else { describe_at(rng, slot) };
    let r = truth.reference_slot.map(|rs| describe_at(rng, rs)).unwrap_or_default();
    let recept = truth.receptacle.map(|x| receptacle_phrase(rng, x)).unwrap_or_default();
    let text = fill(template, &o, &r, slot_word(rng, slot, Vocab::Plain), &recept);
    normalize_instruction(&text).expect("non-empty template")
}

/// A generator-style rephrase of an episode's structured command. Knows
/// only what the command says, so added slot words are guesses.
pub(super) fn generated_proposal(rng: &mut ChaCha8Rng, scene: &Scene, truth: &GroundTruth, hallucination: f64) -> String {
    let template = skill_template(rng, truth.skill);
    let describe_obj = |rng: &mut ChaCha8Rng, obj: ObjId| {
        let mut color = object(obj).color;
        if rng.random_bool(hallucination / 4.0) {
            color = *Color::ALL.choose(rng).expect("non-empty");
        }
        let d = describe(rng, obj, PROPOSAL_FORMS, color, Vocab::Rich);
        if rng.random_bool(hallucination) {
            let s = *Slot::ALL.choose(rng).expect("non-empty");
            with_slot(rng, &d, s, Vocab::Rich)
        } else {
            d
        }
    };
    let o = if truth.skill.uses_drawer() { String::new() } else { describe_obj(rng, scene.objects[truth.slot.index()]) };
    let r = truth.reference_slot.map(|rs| describe_obj(rng, scene.objects[rs.index()])).unwrap_or_default();
    let recept = truth.receptacle.map(|x| receptacle_phrase(rng, x)).unwrap_or_default();
    let mut slot = truth.slot;
    if truth.skill.uses_drawer() && rng.random_bool(hallucination / 4.0) {
        slot = *Slot::ALL.choose(rng).expect("non-empty");
    }
    let text = fill(template, &o, &r, slot_word(rng, slot, Vocab::Rich), &recept);
    normalize_instruction(&text).expect("non-empty template")
}

/// Full description naming colour, object and slot.
fn full_description(obj: ObjId, slot: Slot) -> String {
    let o = object(obj);
    let desc = if o.name.split(' ').any(|w| w == o.color.word()) {
        o.name.to_owned()
    } else {
        format!("{} {}", o.color.word(), o.name)
    };
    format!("{desc} on the {}", slot.word())
}

/// One task of a planted world: a fixed outcome with a canonical
/// fully specified instruction.
#[derive(Clone, Debug, PartialEq)]
pub(super) struct PlantedTask {
    pub truth: GroundTruth,
    pub object: ObjId,
    pub reference: Option<ObjId>,
    pub text: String,
}

fn canonical_text(truth: &GroundTruth, obj: ObjId, reference: Option<ObjId>) -> String {
    let o = full_description(obj, truth.slot);
    let text = match truth.skill {
        Skill::Pick => format!("pick up the {o}"),
        Skill::MoveNear => format!(
            "move the {o} near the {}",
            full_description(reference.expect("reference"), truth.reference_slot.expect("reference slot"))
        ),
        Skill::KnockOver => format!("knock over the {o}"),
        Skill::PlaceUpright => format!("place the {o} upright"),
        Skill::OpenDrawer => format!("open the {} drawer", truth.slot.word()),
        Skill::CloseDrawer => format!("close the {} drawer", truth.slot.word()),
        Skill::PlaceInto => format!("put the {o} into the {}", truth.receptacle.expect("receptacle").name()),
        Skill::PickFrom => format!("take the {o} out of the {}", truth.receptacle.expect("receptacle").name()),
    };
    normalize_instruction(&text).expect("non-empty")
}

pub(super) fn planted_tasks(
    rng: &mut ChaCha8Rng,
    n: usize,
    skills: &[Skill],
    objects: &[ObjId],
) -> Result<Vec<PlantedTask>, WorldError> {
    let mut tasks: Vec<PlantedTask> = Vec::with_capacity(n);
    let mut attempts = 0;
    while tasks.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(WorldError::InsufficientDiversity(format!(
                "only {} distinct tasks fit the configured skills and objects",
                tasks.len()
            )));
        }
        let skill = *skills.choose(rng).expect("validated");
        let slot = *Slot::ALL.choose(rng).expect("non-empty");
        let obj = *objects.choose(rng).expect("validated");
        let mut truth = GroundTruth { skill, slot, reference_slot: None, receptacle: None };
        let mut reference = None;
        match skill {
            Skill::MoveNear => {
                let others: Vec<Slot> = Slot::ALL.iter().copied().filter(|&s| s != slot).collect();
                truth.reference_slot = Some(*others.choose(rng).expect("two others"));
                reference = Some(*objects.choose(rng).expect("validated"));
            }
            Skill::PlaceInto | Skill::PickFrom => truth.receptacle = Some(*Receptacle::ALL.choose(rng).expect("non-empty")),
            _ => {}
        }
        let text = canonical_text(&truth, obj, reference);
        if tasks.iter().all(|t| t.text != text) {
            tasks.push(PlantedTask { truth, object: obj, reference, text });
        }
    }
    Ok(tasks)
}

const EVAL_WRAPPERS: &[&str] = &["please {x}", "robot {x}", "{x} please", "now {x}", "{x} for me", "could you {x}"];

fn wrap(rng: &mut ChaCha8Rng, text: &str) -> String {
    EVAL_WRAPPERS.choose(rng).expect("non-empty").replace("{x}", text)
}

fn random_scene(rng: &mut ChaCha8Rng, objects: &[ObjId], distinct: bool) -> Option<Scene> {
    let mut picks: Vec<ObjId> = Vec::with_capacity(3);
    for _ in 0..64 {
        if picks.len() == 3 {
            break;
        }
        let o = *objects.choose(rng)?;
        if !distinct || !picks.contains(&o) {
            picks.push(o);
        }
    }
    (picks.len() == 3).then(|| Scene {
        objects: [picks[0], picks[1], picks[2]],
        receptacle: *Receptacle::ALL.choose(rng).expect("non-empty"),
        drawers_open: [false; 3],
    })
}

fn eval_text(
    rng: &mut ChaCha8Rng,
    skill: Skill,
    target: &str,
    reference: &str,
    receptacle: Option<Receptacle>,
) -> String {
    let template = skill_template(rng, skill);
    let recept = receptacle.map(|r| receptacle_phrase(rng, r)).unwrap_or_default();
    let text = fill(template, target, reference, "", &recept);
    normalize_instruction(&wrap(rng, &text)).expect("non-empty")
}

/// Candidate novel instructions in each category. Every candidate resolves
/// to exactly one action in its scene.
pub(super) fn eval_candidates(rng: &mut ChaCha8Rng, config: &WorldConfig, objects: &[ObjId]) -> EvalInstructionSet {
    let skills: Vec<Skill> = config.skills.iter().copied().filter(|s| !s.uses_drawer()).collect();
    let mut items = Vec::new();
    if skills.is_empty() {
        return EvalInstructionSet { items };
    }
    let per = config.eval_per_category * 6 + 20;
    for category in EvalCategory::ALL {
        let mut made = 0;
        for _ in 0..per * 20 {
            if made == per {
                break;
            }
            let skill = *skills.choose(rng).expect("non-empty");
            let Some(mut scene) = random_scene(rng, objects, category != EvalCategory::Spatial) else {
                break;
            };
            let slot = *Slot::ALL.choose(rng).expect("non-empty");
            let obj = if category == EvalCategory::Spatial {
                let dup = *Slot::ALL.iter().filter(|&&s| s != slot).collect::<Vec<_>>().choose(rng).expect("two");
                scene.objects[slot.index()] = scene.objects[dup.index()];
                scene.objects[slot.index()]
            } else {
                scene.objects[slot.index()]
            };
            let color = object(obj).color;
            let target = match category {
                EvalCategory::Spatial => {
                    let d = describe(rng, obj, &[(Form::Name, 1.0), (Form::Brand, 1.0), (Form::Kind, 1.0)], color, Vocab::Rich);
                    with_slot(rng, &d, slot, Vocab::Rich)
                }
                EvalCategory::Rephrased => {
                    describe(rng, obj, &[(Form::ColorKind, 2.0), (Form::Kind, 1.0), (Form::Brand, 1.0)], color, Vocab::Rich)
                }
                EvalCategory::Semantic => {
                    if object(obj).category.is_none() {
                        continue;
                    }
                    describe(rng, obj, &[(Form::Category, 2.0), (Form::ColorCategory, 1.0)], color, Vocab::Rich)
                }
            };
            let mut truth = GroundTruth { skill, slot, reference_slot: None, receptacle: None };
            let mut reference = String::new();
            if skill == Skill::MoveNear {
                let others: Vec<Slot> = Slot::ALL.iter().copied().filter(|&s| s != slot).collect();
                let rs = *others.choose(rng).expect("two others");
                truth.reference_slot = Some(rs);
                reference = object(scene.objects[rs.index()]).name.to_owned();
            }
            if matches!(skill, Skill::PlaceInto | Skill::PickFrom) {
                truth.receptacle = Some(scene.receptacle);
            }
            let instruction = eval_text(rng, skill, &target, &reference, truth.receptacle);
            let Some(parsed) = parse_instruction(&instruction) else { continue };
            let expected = ActionClass { skill, slot };
            if parsed.resolve(&scene) != Some(expected) || !parsed.consistent_with(&scene, &truth) {
                continue;
            }
            items.push(EvalItem { category, instruction, scene, expected, scene_seed: rng.random() });
            made += 1;
        }
    }
    EvalInstructionSet { items }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::object_by_name;

    fn id(name: &str) -> ObjId {
        object_by_name(name).unwrap()
    }

    #[test]
    fn parses_core_forms() {
        let p = parse_instruction("pick the left can").unwrap();
        assert_eq!(p.skill, Skill::Pick);
        assert_eq!(p.target.kinds, vec![Kind::Can]);
        assert_eq!(p.target.slots, vec![Slot::Left]);

        let p = parse_instruction("move the red bull near the apple on the right").unwrap();
        assert_eq!(p.skill, Skill::MoveNear);
        assert_eq!(p.target.objects, vec![id("redbull")]);
        assert!(p.target.colors.is_empty());
        let r = p.reference.unwrap();
        assert_eq!((r.kinds.clone(), r.slots.clone()), (vec![Kind::Apple], vec![Slot::Right]));

        let p = parse_instruction("set the coke on the right right side up").unwrap();
        assert_eq!(p.skill, Skill::PlaceUpright);
        assert_eq!(p.target.slots, vec![Slot::Right]);

        let p = parse_instruction("pick blue plastic chip bag from blue plate and place on counter").unwrap();
        assert_eq!(p.skill, Skill::PickFrom);
        assert_eq!(p.receptacle, Some(Receptacle::Plate));
        assert_eq!(p.target.colors, vec![Color::Blue]);

        let p = parse_instruction("put the coke on the left into the bowl").unwrap();
        assert_eq!(p.skill, Skill::PlaceInto);
        assert_eq!(p.target.slots, vec![Slot::Left]);

        let p = parse_instruction("push the middle drawer closed").unwrap();
        assert_eq!((p.skill, p.target.slots), (Skill::CloseDrawer, vec![Slot::Middle]));

        assert_eq!(parse_instruction("do a backflip"), None);
    }

    #[test]
    fn structured_commands_parse_to_their_skill() {
        let scene = Scene { objects: [id("coke"), id("blue_chips"), id("rxbar_chocolate")], receptacle: Receptacle::Box, drawers_open: [false; 3] };
        for skill in Skill::ALL {
            let truth = GroundTruth {
                skill,
                slot: Slot::Middle,
                reference_slot: (skill == Skill::MoveNear).then_some(Slot::Right),
                receptacle: matches!(skill, Skill::PlaceInto | Skill::PickFrom).then_some(Receptacle::Box),
            };
            let cmd = structured_command(&scene, &truth);
            let p = parse_instruction(&cmd).unwrap_or_else(|| panic!("{cmd}"));
            assert!(p.consistent_with(&scene, &truth), "{cmd}");
        }
    }

    #[test]
    fn text_features_share_concepts() {
        let a: Vec<String> = text_features("lift the tin").into_iter().map(|f| f.0).collect();
        let b: Vec<String> = text_features("pick coke can").into_iter().map(|f| f.0).collect();
        assert!(a.contains(&"t:kind:can".to_owned()) && b.contains(&"t:kind:can".to_owned()));
        assert!(a.contains(&"t:skill:pick".to_owned()) && b.contains(&"t:skill:pick".to_owned()));
        assert!(!a.iter().any(|t| t.starts_with("t:color")));
        assert_eq!(text_features("!!"), vec![("t:empty".to_owned(), 1.0)]);
    }
}
