//! PNG rasters of scene states and their decoding back to visual tokens.
//!
//! Layout: three 16 px slot columns over six 8 px bands (object, colour,
//! state, drawer, receptacle, texture). Every cell is a flat palette colour
//! except the texture band, which is per-frame noise.

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{object, GroundTruth, ObjId, Receptacle, Scene, Skill, Slot, OBJECTS};
use crate::embed::FrameFeatures;

const CELL_W: u32 = 16;
const BAND_H: u32 = 8;
const WIDTH: u32 = CELL_W * 3;
const HEIGHT: u32 = BAND_H * 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjState {
    Rest,
    Lifted,
    Near(Slot),
    Fallen,
    Lying,
    Uprighted,
    InReceptacle,
    OnCounter,
}

impl ObjState {
    const ALL: [ObjState; 10] = [
        ObjState::Rest,
        ObjState::Lifted,
        ObjState::Near(Slot::Left),
        ObjState::Near(Slot::Middle),
        ObjState::Near(Slot::Right),
        ObjState::Fallen,
        ObjState::Lying,
        ObjState::Uprighted,
        ObjState::InReceptacle,
        ObjState::OnCounter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjState::Rest => "rest",
            ObjState::Lifted => "lifted",
            ObjState::Near(_) => "near",
            ObjState::Fallen => "fallen",
            ObjState::Lying => "lying",
            ObjState::Uprighted => "uprighted",
            ObjState::InReceptacle => "in_receptacle",
            ObjState::OnCounter => "on_counter",
        }
    }
}

/// Everything a single frame shows.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FrameState {
    pub objects: [ObjId; 3],
    pub states: [ObjState; 3],
    pub drawers_open: [bool; 3],
    pub receptacle: Receptacle,
}

impl FrameState {
    fn resting(scene: &Scene) -> Self {
        Self {
            objects: scene.objects,
            states: [ObjState::Rest; 3],
            drawers_open: scene.drawers_open,
            receptacle: scene.receptacle,
        }
    }

    pub fn initial(scene: &Scene, truth: &GroundTruth) -> Self {
        let mut s = Self::resting(scene);
        let i = truth.slot.index();
        match truth.skill {
            Skill::PlaceUpright => s.states[i] = ObjState::Lying,
            Skill::PickFrom => s.states[i] = ObjState::InReceptacle,
            Skill::OpenDrawer => s.drawers_open[i] = false,
            Skill::CloseDrawer => s.drawers_open[i] = true,
            _ => {}
        }
        s
    }

    pub fn final_state(scene: &Scene, truth: &GroundTruth) -> Self {
        let mut s = Self::resting(scene);
        let i = truth.slot.index();
        match truth.skill {
            Skill::Pick => s.states[i] = ObjState::Lifted,
            Skill::MoveNear => s.states[i] = ObjState::Near(truth.reference_slot.expect("reference slot")),
            Skill::KnockOver => s.states[i] = ObjState::Fallen,
            Skill::PlaceUpright => s.states[i] = ObjState::Uprighted,
            Skill::OpenDrawer => s.drawers_open[i] = true,
            Skill::CloseDrawer => s.drawers_open[i] = false,
            Skill::PlaceInto => s.states[i] = ObjState::InReceptacle,
            Skill::PickFrom => s.states[i] = ObjState::OnCounter,
        }
        s
    }

    /// Weighted visual tokens.
    pub fn features(&self) -> Vec<(String, f32)> {
        let mut out = vec![(format!("v:recept:{}", self.receptacle.noun()), 0.5)];
        for slot in Slot::ALL {
            let i = slot.index();
            let o = object(self.objects[i]);
            let at = slot.word();
            out.push((format!("v:obj:{}@{at}", o.id), 0.5));
            out.push((format!("v:color:{}@{at}", o.color.word()), 0.3));
            let state = self.states[i];
            if state == ObjState::Rest {
                out.push((format!("v:state:rest@{at}"), 0.2));
            } else {
                out.push((format!("v:state:{}@{at}", state.name()), 1.0));
                out.push((format!("v:act:{}", state.name()), 1.0));
                out.push((format!("v:active:{}", o.id), 1.0));
                out.push((format!("v:active_kind:{}", o.kind.noun()), 0.7));
                out.push((format!("v:active_color:{}", o.color.word()), 0.7));
                if let Some(c) = o.category {
                    out.push((format!("v:active_cat:{}", c.word()), 0.7));
                }
                out.push((format!("v:active_slot:{at}"), 1.0));
                if let ObjState::Near(r) = state {
                    let ro = object(self.objects[r.index()]);
                    out.push((format!("v:ref:{}", ro.id), 1.0));
                    out.push((format!("v:ref_slot:{}", r.word()), 1.0));
                }
            }
            if self.drawers_open[i] {
                out.push((format!("v:drawer_open@{at}"), 1.0));
            }
        }
        out
    }
}

fn object_rgb(id: ObjId) -> [u8; 3] {
    let i = id as u8;
    [10 + 19 * i, 250 - 17 * i, 40 + 13 * i]
}

fn state_rgb(state: ObjState) -> [u8; 3] {
    let k = ObjState::ALL.iter().position(|&s| s == state).expect("listed") as u8;
    [5 + 25 * k, 245 - 24 * k, 128]
}

fn drawer_rgb(open: bool) -> [u8; 3] {
    if open { [250, 250, 250] } else { [60, 40, 20] }
}

fn receptacle_rgb(r: Receptacle) -> [u8; 3] {
    let i = Receptacle::ALL.iter().position(|&x| x == r).expect("listed") as u8;
    [90 + 50 * i, 30, 160]
}

fn fill(img: &mut RgbImage, col: u32, band: u32, width: u32, rgb: [u8; 3]) {
    for y in band * BAND_H..(band + 1) * BAND_H {
        for x in col * CELL_W..col * CELL_W + width {
            img.put_pixel(x, y, Rgb(rgb));
        }
    }
}

/// Encodes a frame as PNG bytes. `texture` seeds the noise band.
pub fn render_frame(state: &FrameState, texture: u64) -> Vec<u8> {
    let mut img = RgbImage::new(WIDTH, HEIGHT);
    for slot in Slot::ALL {
        let c = slot.index() as u32;
        let o = object(state.objects[slot.index()]);
        fill(&mut img, c, 0, CELL_W, object_rgb(state.objects[slot.index()]));
        fill(&mut img, c, 1, CELL_W, o.color.rgb());
        fill(&mut img, c, 2, CELL_W, state_rgb(state.states[slot.index()]));
        fill(&mut img, c, 3, CELL_W, drawer_rgb(state.drawers_open[slot.index()]));
    }
    fill(&mut img, 0, 4, WIDTH, receptacle_rgb(state.receptacle));
    let mut rng = ChaCha8Rng::seed_from_u64(texture);
    for y in 5 * BAND_H..HEIGHT {
        for x in 0..WIDTH {
            img.put_pixel(x, y, Rgb([rng.random(), rng.random(), rng.random()]));
        }
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    out.into_inner()
}

fn find<T: Copy>(candidates: impl IntoIterator<Item = T>, rgb: [u8; 3], to_rgb: impl Fn(T) -> [u8; 3], what: &str) -> Result<T, String> {
    candidates
        .into_iter()
        .find(|&c| to_rgb(c) == rgb)
        .ok_or_else(|| format!("unknown {what} colour {rgb:?}"))
}

/// Reads a frame back from PNG bytes.
pub fn decode_frame(bytes: &[u8]) -> Result<FrameState, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| e.to_string())?
        .to_rgb8();
    if img.dimensions() != (WIDTH, HEIGHT) {
        return Err(format!("unexpected frame size {:?}", img.dimensions()));
    }
    let cell = |col: u32, band: u32| img.get_pixel(col * CELL_W + CELL_W / 2, band * BAND_H + BAND_H / 2).0;
    let mut objects = [0; 3];
    let mut states = [ObjState::Rest; 3];
    let mut drawers_open = [false; 3];
    for c in 0..3u32 {
        let i = c as usize;
        objects[i] = find(0..OBJECTS.len(), cell(c, 0), object_rgb, "object")?;
        states[i] = find(ObjState::ALL, cell(c, 2), state_rgb, "state")?;
        drawers_open[i] = find([false, true], cell(c, 3), drawer_rgb, "drawer")?;
    }
    let receptacle = find(Receptacle::ALL, cell(1, 4), receptacle_rgb, "receptacle")?;
    Ok(FrameState { objects, states, drawers_open, receptacle })
}

/// Frame featurizer for the synthetic encoder.
#[derive(Clone, Copy, Debug, Default)]
pub struct WorldFrames;

impl FrameFeatures for WorldFrames {
    fn frame_features(&self, bytes: &[u8]) -> Result<Vec<(String, f32)>, String> {
        Ok(decode_frame(bytes)?.features())
    }
}
