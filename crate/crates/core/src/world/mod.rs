//! Synthetic tabletop world with a known attribute grammar.
//!
//! A scene has three slots (left, middle, right), each holding one object,
//! a row of three drawers and one receptacle. An episode applies one skill to
//! one slot. Frames are small PNG rasters encoding the scene state, so the
//! ground truth of every episode is recoverable both from its tuple and from
//! its pixels.

mod grammar;
mod render;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    normalize_instruction, DatasetManifest, Frame, InstructionRecord, InstructionSource, ManifestEntry, Trajectory,
};
use crate::embed::{MemoryAssets, SyntheticEncoder, SyntheticEncoderConfig};

pub use grammar::{
    ground_truth_match, parse_instruction, structured_command, text_features, MatchCounter, ObjectRef,
    ParsedInstruction, WorldText,
};
pub use render::{decode_frame, render_frame, FrameState, ObjState, WorldFrames};

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("attribute space too small for a disjoint eval set: {0}")]
    InsufficientDiversity(String),
    #[error("frame could not be decoded: {0}")]
    Decode(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    Pick,
    MoveNear,
    KnockOver,
    PlaceUpright,
    OpenDrawer,
    CloseDrawer,
    PlaceInto,
    PickFrom,
}

impl Skill {
    pub const ALL: [Skill; 8] = [
        Skill::Pick,
        Skill::MoveNear,
        Skill::KnockOver,
        Skill::PlaceUpright,
        Skill::OpenDrawer,
        Skill::CloseDrawer,
        Skill::PlaceInto,
        Skill::PickFrom,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Skill::Pick => "pick",
            Skill::MoveNear => "move_near",
            Skill::KnockOver => "knock_over",
            Skill::PlaceUpright => "place_upright",
            Skill::OpenDrawer => "open_drawer",
            Skill::CloseDrawer => "close_drawer",
            Skill::PlaceInto => "place_into",
            Skill::PickFrom => "pick_from",
        }
    }

    pub fn uses_drawer(self) -> bool {
        matches!(self, Skill::OpenDrawer | Skill::CloseDrawer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Left,
    Middle,
    Right,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Left, Slot::Middle, Slot::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Slot::Left => "left",
            Slot::Middle => "middle",
            Slot::Right => "right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Blue,
    White,
    Silver,
    Green,
    Brown,
    Purple,
    Yellow,
    Clear,
}

impl Color {
    pub const ALL: [Color; 9] = [
        Color::Red,
        Color::Blue,
        Color::White,
        Color::Silver,
        Color::Green,
        Color::Brown,
        Color::Purple,
        Color::Yellow,
        Color::Clear,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::White => "white",
            Color::Silver => "silver",
            Color::Green => "green",
            Color::Brown => "brown",
            Color::Purple => "purple",
            Color::Yellow => "yellow",
            Color::Clear => "clear",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [200, 30, 40],
            Color::Blue => [30, 60, 200],
            Color::White => [240, 240, 240],
            Color::Silver => [170, 175, 185],
            Color::Green => [40, 170, 60],
            Color::Brown => [120, 80, 40],
            Color::Purple => [120, 50, 150],
            Color::Yellow => [235, 210, 40],
            Color::Clear => [200, 230, 240],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Can,
    ChipBag,
    Bar,
    Apple,
    Banana,
    Sponge,
    Bottle,
}

impl Kind {
    pub const ALL: [Kind; 7] = [Kind::Can, Kind::ChipBag, Kind::Bar, Kind::Apple, Kind::Banana, Kind::Sponge, Kind::Bottle];

    /// Noun used when describing an object of this kind without its brand.
    pub fn noun(self) -> &'static str {
        match self {
            Kind::Can => "can",
            Kind::ChipBag => "chip bag",
            Kind::Bar => "bar",
            Kind::Apple => "apple",
            Kind::Banana => "banana",
            Kind::Sponge => "sponge",
            Kind::Bottle => "bottle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Soda,
    Snack,
    Fruit,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Soda, Category::Snack, Category::Fruit];

    pub fn word(self) -> &'static str {
        match self {
            Category::Soda => "soda",
            Category::Snack => "snack",
            Category::Fruit => "fruit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Receptacle {
    Bowl,
    Box,
    Plate,
}

impl Receptacle {
    pub const ALL: [Receptacle; 3] = [Receptacle::Bowl, Receptacle::Box, Receptacle::Plate];

    pub fn name(self) -> &'static str {
        match self {
            Receptacle::Bowl => "white bowl",
            Receptacle::Box => "paper box",
            Receptacle::Plate => "blue plate",
        }
    }

    pub fn noun(self) -> &'static str {
        match self {
            Receptacle::Bowl => "bowl",
            Receptacle::Box => "box",
            Receptacle::Plate => "plate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectType {
    pub id: &'static str,
    /// Name used in structured teleoperator commands.
    pub name: &'static str,
    /// Words or phrases naming this object specifically.
    pub brand: &'static [&'static str],
    pub kind: Kind,
    pub color: Color,
    pub category: Option<Category>,
}

pub const OBJECTS: [ObjectType; 13] = [
    ObjectType { id: "coke", name: "coke can", brand: &["coke", "coca cola"], kind: Kind::Can, color: Color::Red, category: Some(Category::Soda) },
    ObjectType { id: "pepsi", name: "pepsi can", brand: &["pepsi"], kind: Kind::Can, color: Color::Blue, category: Some(Category::Soda) },
    ObjectType { id: "7up", name: "7up can", brand: &["7up", "7 up"], kind: Kind::Can, color: Color::White, category: Some(Category::Soda) },
    ObjectType { id: "redbull", name: "redbull can", brand: &["redbull", "red bull"], kind: Kind::Can, color: Color::Silver, category: Some(Category::Soda) },
    ObjectType { id: "jalapeno_chips", name: "green jalapeno chip bag", brand: &["jalapeno"], kind: Kind::ChipBag, color: Color::Green, category: Some(Category::Snack) },
    ObjectType { id: "blue_chips", name: "blue plastic chip bag", brand: &[], kind: Kind::ChipBag, color: Color::Blue, category: Some(Category::Snack) },
    ObjectType { id: "brown_chips", name: "brown chip bag", brand: &[], kind: Kind::ChipBag, color: Color::Brown, category: Some(Category::Snack) },
    ObjectType { id: "rxbar_blueberry", name: "rxbar blueberry", brand: &["rxbar blueberry", "blueberry"], kind: Kind::Bar, color: Color::Purple, category: Some(Category::Snack) },
    ObjectType { id: "rxbar_chocolate", name: "rxbar chocolate", brand: &["rxbar chocolate", "chocolate"], kind: Kind::Bar, color: Color::Brown, category: Some(Category::Snack) },
    ObjectType { id: "apple", name: "apple", brand: &[], kind: Kind::Apple, color: Color::Red, category: Some(Category::Fruit) },
    ObjectType { id: "banana", name: "banana", brand: &[], kind: Kind::Banana, color: Color::Yellow, category: Some(Category::Fruit) },
    ObjectType { id: "sponge", name: "sponge", brand: &[], kind: Kind::Sponge, color: Color::Yellow, category: None },
    ObjectType { id: "water_bottle", name: "water bottle", brand: &["water"], kind: Kind::Bottle, color: Color::Clear, category: None },
];

pub type ObjId = usize;

pub fn object(id: ObjId) -> &'static ObjectType {
    &OBJECTS[id]
}

pub fn object_by_name(id: &str) -> Option<ObjId> {
    OBJECTS.iter().position(|o| o.id == id)
}

/// Static layout of a scene before anything is manipulated.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub objects: [ObjId; 3],
    pub receptacle: Receptacle,
    pub drawers_open: [bool; 3],
}

/// What happened in an episode.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruth {
    pub skill: Skill,
    /// Slot of the manipulated object, or of the drawer.
    pub slot: Slot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_slot: Option<Slot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receptacle: Option<Receptacle>,
}

/// A (skill, slot) pair: the decision the proxy policy has to make.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionClass {
    pub skill: Skill,
    pub slot: Slot,
}

impl ActionClass {
    pub const COUNT: usize = 24;

    pub fn index(self) -> usize {
        self.skill.index() * 3 + self.slot.index()
    }

    pub fn from_index(i: usize) -> Self {
        Self { skill: Skill::ALL[i / 3], slot: Slot::ALL[i % 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEpisode {
    pub episode_id: String,
    pub first: Frame,
    pub last: Frame,
    pub scene: Scene,
    pub truth: GroundTruth,
    pub structured: String,
    pub paraphrases: Vec<String>,
}

impl SyntheticEpisode {
    pub fn action_class(&self) -> ActionClass {
        ActionClass { skill: self.truth.skill, slot: self.truth.slot }
    }

    pub fn target_object(&self) -> Option<ObjId> {
        (!self.truth.skill.uses_drawer()).then(|| self.scene.objects[self.truth.slot.index()])
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory { episode_id: self.episode_id.clone(), first: self.first.clone(), last: self.last.clone(), actions: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCategory {
    Spatial,
    Rephrased,
    Semantic,
}

impl EvalCategory {
    pub const ALL: [EvalCategory; 3] = [EvalCategory::Spatial, EvalCategory::Rephrased, EvalCategory::Semantic];

    pub fn name(self) -> &'static str {
        match self {
            EvalCategory::Spatial => "spatial",
            EvalCategory::Rephrased => "rephrased",
            EvalCategory::Semantic => "semantic",
        }
    }
}

/// One novel instruction presented in one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub category: EvalCategory,
    pub instruction: String,
    pub scene: Scene,
    pub expected: ActionClass,
    /// Seeds the scene-feature noise shown to the policy.
    pub scene_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalInstructionSet {
    pub items: Vec<EvalItem>,
}

impl EvalInstructionSet {
    pub fn count(&self, category: EvalCategory) -> usize {
        self.items.iter().filter(|i| i.category == category).count()
    }

    /// Drops every item whose normalized text is in `texts`.
    pub fn filter_disjoint<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let seen: HashSet<String> = texts.into_iter().filter_map(|t| normalize_instruction(t).ok()).collect();
        Self {
            items: self
                .items
                .iter()
                .filter(|i| normalize_instruction(&i.instruction).map_or(false, |t| !seen.contains(&t)))
                .cloned()
                .collect(),
        }
    }

    pub fn is_disjoint_from<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> bool {
        self.filter_disjoint(texts).items.len() == self.items.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub episode_count: usize,
    pub seed: u64,
    pub skills: Vec<Skill>,
    /// Object ids from [`OBJECTS`]; empty means all.
    pub objects: Vec<String>,
    /// Probability that a scene holds two copies of one object.
    pub duplicate_rate: f64,
    pub paraphrases_per_episode: usize,
    /// Generator proposals per unique structured command.
    pub proposals_per_command: usize,
    /// Chance that a proposal adds a slot or colour word drawn at random.
    pub hallucination_rate: f64,
    pub eval_per_category: usize,
    /// With `Some(n)`, episodes repeat `n` distinct tasks, each described by
    /// one fully specified instruction.
    pub distinct_tasks: Option<usize>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            episode_count: 1000,
            seed: 0,
            skills: Skill::ALL.to_vec(),
            objects: Vec::new(),
            duplicate_rate: 0.5,
            paraphrases_per_episode: 2,
            proposals_per_command: 6,
            hallucination_rate: 0.5,
            eval_per_category: 40,
            distinct_tasks: None,
        }
    }
}

impl WorldConfig {
    fn object_ids(&self) -> Result<Vec<ObjId>, WorldError> {
        if self.objects.is_empty() {
            return Ok((0..OBJECTS.len()).collect());
        }
        self.objects
            .iter()
            .map(|name| object_by_name(name).ok_or_else(|| WorldError::InvalidConfig(format!("unknown object {name:?}"))))
            .collect()
    }

    fn validate(&self) -> Result<Vec<ObjId>, WorldError> {
        if self.skills.is_empty() {
            return Err(WorldError::InvalidConfig("no skills".into()));
        }
        let objects = self.object_ids()?;
        if objects.is_empty() {
            return Err(WorldError::InvalidConfig("no objects".into()));
        }
        if !(0.0..=1.0).contains(&self.duplicate_rate) || !(0.0..=1.0).contains(&self.hallucination_rate) {
            return Err(WorldError::InvalidConfig("rates must lie in [0, 1]".into()));
        }
        if self.distinct_tasks == Some(0) {
            return Err(WorldError::InvalidConfig("distinct_tasks must be positive".into()));
        }
        Ok(objects)
    }
}

/// Everything a generated world provides.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub episodes: Vec<SyntheticEpisode>,
    pub eval: EvalInstructionSet,
    /// Structured command → generator proposals.
    pub proposals: Vec<(String, Vec<String>)>,
    pub assets: Arc<MemoryAssets>,
}

impl World {
    pub fn episode(&self, id: &str) -> Option<&SyntheticEpisode> {
        self.episodes.iter().find(|e| e.episode_id == id)
    }

    pub fn index(&self) -> HashMap<&str, &SyntheticEpisode> {
        self.episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect()
    }

    /// Every episode with its paraphrases as crowd records.
    pub fn annotated_manifest(&self) -> DatasetManifest {
        let entries = self
            .episodes
            .iter()
            .map(|ep| {
                let recs = ep
                    .paraphrases
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let mut r = InstructionRecord::new(format!("{}-c{i}", ep.episode_id), t, InstructionSource::Crowd);
                        r.episode_id = Some(ep.episode_id.clone());
                        r.annotator_id = Some(format!("crowd-{}", i % 7));
                        r
                    })
                    .collect();
                ManifestEntry::new(ep.trajectory(), recs)
            })
            .collect();
        DatasetManifest { partition: None, entries }
    }

    /// Every episode with its structured command.
    pub fn structured_manifest(&self) -> DatasetManifest {
        let entries = self
            .episodes
            .iter()
            .map(|ep| {
                let mut r = InstructionRecord::new(format!("{}-s", ep.episode_id), &ep.structured, InstructionSource::Structured);
                r.episode_id = Some(ep.episode_id.clone());
                ManifestEntry::new(ep.trajectory(), vec![r])
            })
            .collect();
        DatasetManifest { partition: None, entries }
    }

    /// Generator proposals as pool records, in command order.
    pub fn proposal_records(&self) -> Vec<InstructionRecord> {
        self.proposals
            .iter()
            .enumerate()
            .flat_map(|(c, (_, vs))| {
                vs.iter()
                    .enumerate()
                    .map(move |(i, v)| InstructionRecord::new(format!("g{c:04}-{i}"), v, InstructionSource::Generated))
            })
            .collect()
    }

    /// Canned generator file contents: command → proposals.
    pub fn canned_generations(&self) -> indexmap::IndexMap<String, Vec<String>> {
        self.proposals.iter().cloned().collect()
    }

    /// Every text the world produced for training: commands, paraphrases, proposals.
    pub fn training_texts(&self) -> impl Iterator<Item = &str> {
        self.episodes
            .iter()
            .flat_map(|e| std::iter::once(e.structured.as_str()).chain(e.paraphrases.iter().map(String::as_str)))
            .chain(self.proposals.iter().flat_map(|(_, v)| v.iter().map(String::as_str)))
    }

    pub fn encoder(&self, config: SyntheticEncoderConfig) -> SyntheticEncoder {
        SyntheticEncoder::new(config, Arc::new(WorldText), Arc::new(WorldFrames), self.assets.clone())
    }
}

/// Number of distinct attribute values the grammar can mention.
pub fn attribute_value_count() -> usize {
    Skill::ALL.len() + Slot::ALL.len() + Color::ALL.len() + Kind::ALL.len() + Category::ALL.len() + Receptacle::ALL.len() + OBJECTS.len()
}

fn sample_scene(rng: &mut ChaCha8Rng, objects: &[ObjId], duplicate_rate: f64) -> Scene {
    let mut picks: Vec<ObjId> = (0..3).map(|_| *objects.choose(rng).expect("non-empty")).collect();
    if objects.len() > 1 {
        let dup = rng.random_bool(duplicate_rate);
        // Redraw until the duplicate structure matches the coin flip.
        for _ in 0..64 {
            let distinct: BTreeSet<ObjId> = picks.iter().copied().collect();
            let has_dup = distinct.len() < 3;
            if has_dup == dup && (dup || distinct.len() == 3 || objects.len() < 3) {
                break;
            }
            if dup {
                let (a, b) = (rng.random_range(0..3), rng.random_range(0..3));
                if a != b {
                    picks[b] = picks[a];
                }
            } else {
                picks = (0..3).map(|_| *objects.choose(rng).expect("non-empty")).collect();
            }
        }
    }
    Scene {
        objects: [picks[0], picks[1], picks[2]],
        receptacle: *Receptacle::ALL.choose(rng).expect("non-empty"),
        drawers_open: [false; 3],
    }
}

fn sample_truth(rng: &mut ChaCha8Rng, scene: &mut Scene, skill: Skill) -> GroundTruth {
    let slot = *Slot::ALL.choose(rng).expect("non-empty");
    let mut truth = GroundTruth { skill, slot, reference_slot: None, receptacle: None };
    match skill {
        Skill::MoveNear => {
            let others: Vec<Slot> = Slot::ALL.iter().copied().filter(|&s| s != slot).collect();
            truth.reference_slot = Some(*others.choose(rng).expect("two others"));
        }
        Skill::PlaceInto | Skill::PickFrom => truth.receptacle = Some(scene.receptacle),
        Skill::CloseDrawer => scene.drawers_open[slot.index()] = true,
        _ => {}
    }
    truth
}

/// Generates episodes, frames, paraphrases, proposals and the eval set.
pub fn generate_world(config: &WorldConfig) -> Result<World, WorldError> {
    let objects = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut assets = MemoryAssets::default();
    let mut episodes = Vec::with_capacity(config.episode_count);

    let tasks = match config.distinct_tasks {
        Some(n) => Some(grammar::planted_tasks(&mut rng, n, &config.skills, &objects)?),
        None => None,
    };

    for i in 0..config.episode_count {
        let (scene, truth, paraphrases) = match &tasks {
            Some(tasks) => {
                let task = &tasks[i % tasks.len()];
                let mut scene = sample_scene(&mut rng, &objects, config.duplicate_rate);
                scene.objects[task.truth.slot.index()] = task.object;
                if let Some(r) = task.truth.reference_slot {
                    scene.objects[r.index()] = task.reference.expect("reference object for move near");
                }
                if let Some(r) = task.truth.receptacle {
                    scene.receptacle = r;
                }
                scene.drawers_open = [false; 3];
                if task.truth.skill == Skill::CloseDrawer {
                    scene.drawers_open[task.truth.slot.index()] = true;
                }
                (scene, task.truth.clone(), vec![task.text.clone()])
            }
            None => {
                let skill = *config.skills.choose(&mut rng).expect("validated");
                let mut scene = sample_scene(&mut rng, &objects, config.duplicate_rate);
                let truth = sample_truth(&mut rng, &mut scene, skill);
                let paraphrases = (0..config.paraphrases_per_episode)
                    .map(|_| grammar::crowd_paraphrase(&mut rng, &scene, &truth))
                    .collect();
                (scene, truth, paraphrases)
            }
        };
        let texture: u64 = rng.random();
        let first_png = render_frame(&FrameState::initial(&scene, &truth), texture);
        let last_png = render_frame(&FrameState::final_state(&scene, &truth), texture ^ 0x5bd1_e995);
        let episode_id = format!("ep{i:05}");
        let first = Frame::from_bytes(format!("assets/{}.png", crate::hash::hex_digest(&first_png)), &first_png);
        let last = Frame::from_bytes(format!("assets/{}.png", crate::hash::hex_digest(&last_png)), &last_png);
        assets.insert(first_png);
        assets.insert(last_png);
        let structured = grammar::structured_command(&scene, &truth);
        episodes.push(SyntheticEpisode { episode_id, first, last, scene, truth, structured, paraphrases });
    }

    let mut commands: Vec<String> = episodes.iter().map(|e| e.structured.clone()).collect();
    commands.sort();
    commands.dedup();
    let proposals = commands
        .into_iter()
        .map(|cmd| {
            let ep = episodes.iter().find(|e| e.structured == cmd).expect("command from an episode");
            let mut seen = HashSet::new();
            let variants = (0..config.proposals_per_command * 4)
                .map(|_| grammar::generated_proposal(&mut rng, &ep.scene, &ep.truth, config.hallucination_rate))
                .filter(|v| *v != cmd && seen.insert(v.clone()))
                .take(config.proposals_per_command)
                .collect();
            (cmd, variants)
        })
        .collect();

    let mut world = World {
        config: config.clone(),
        episodes,
        eval: EvalInstructionSet::default(),
        proposals,
        assets: Arc::new(assets),
    };
    let candidates = grammar::eval_candidates(&mut rng, config, &objects);
    let filtered = candidates.filter_disjoint(world.training_texts());
    let mut items = Vec::new();
    for cat in EvalCategory::ALL {
        let mut of_cat: Vec<EvalItem> = filtered.items.iter().filter(|i| i.category == cat).cloned().collect();
        if of_cat.len() < config.eval_per_category {
            return Err(WorldError::InsufficientDiversity(format!(
                "{} {} instructions survive the disjointness filter, {} required",
                of_cat.len(),
                cat.name(),
                config.eval_per_category
            )));
        }
        of_cat.shuffle(&mut rng);
        of_cat.truncate(config.eval_per_category);
        items.extend(of_cat);
    }
    world.eval = EvalInstructionSet { items };
    Ok(world)
}
