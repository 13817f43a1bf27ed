//! Synthetic scene generator: a reduced triplet vocabulary rendered into
//! small RGB grids. The instrument is encoded by sprite appearance, the verb
//! by sprite texture, and the target by the region the sprite occupies, so
//! verbs follow the instrument's look while targets follow its position.

use crate::config::DataConfig;
use crate::error::{HarnessError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use triplet_core::vocab::TripletVocabulary;
use triplet_core::Tensor;

/// One rendered frame with its multi-hot triplet ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub video: usize,
    pub frame: u64,
    pub image: Tensor,
    pub labels: Vec<f64>,
}

impl Scene {
    pub fn video_id(&self) -> String {
        format!("v{:03}", self.video)
    }
}

/// A generated dataset with its vocabulary and video-level split.
#[derive(Debug)]
pub struct Dataset {
    pub vocab: TripletVocabulary,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Builds the reduced vocabulary implied by the data configuration:
/// instrument `i` pairs with verbs `(i + k) mod verbs`, `k <
/// verbs_per_instrument`, and with every target region.
pub fn synthetic_vocabulary(data: &DataConfig) -> Result<TripletVocabulary> {
    let mut rows = Vec::new();
    for i in 0..data.instruments {
        for k in 0..data.verbs_per_instrument {
            let v = (i + k) % data.verbs;
            for t in 0..data.targets {
                rows.push((
                    format!("i{}-v{}-t{}", i, v, t),
                    format!("i{}", i),
                    format!("v{}", v),
                    format!("t{}", t),
                    None,
                ));
            }
        }
    }
    TripletVocabulary::from_rows(rows).map_err(HarnessError::Core)
}

/// Per-triplet activation probability implied by the sampler (uniform over
/// regions and over the legal (instrument, verb) pairs within a region).
pub fn triplet_prior(data: &DataConfig) -> f64 {
    let mean_k = (data.min_concurrent + data.max_concurrent) as f64 / 2.0;
    (mean_k / data.targets as f64) / (data.instruments * data.verbs_per_instrument) as f64
}

/// Coarse banded texture for one verb: two-pixel bands with a per-texture
/// duty cycle (texture `k` lights `k+1` of `n + 1` bands) and alternating
/// orientation. Band width 2 survives the backbone's stride-2 stages.
fn texture_bit(texture: usize, n: usize, r: usize, c: usize) -> bool {
    let coord = if texture % 2 == 0 { r } else { c };
    (coord / 2) % (n + 1) <= texture
}

struct VideoSampler<'a> {
    data: &'a DataConfig,
    /// (instrument, verb-offset, target) -> triplet id, in vocabulary order.
    active: Vec<(usize, usize, usize)>,
}

impl<'a> VideoSampler<'a> {
    /// Draws a fresh active set: a triplet count, distinct target regions,
    /// and a legal (instrument, verb) pair per region.
    fn fresh(&mut self, rng: &mut ChaCha8Rng) {
        let d = self.data;
        let k = rng.gen_range(d.min_concurrent..=d.max_concurrent);
        let mut regions: Vec<usize> = (0..d.targets).collect();
        for pick in 0..k {
            let j = rng.gen_range(pick..regions.len());
            regions.swap(pick, j);
        }
        self.active.clear();
        for &t in &regions[..k] {
            let i = rng.gen_range(0..d.instruments);
            let off = rng.gen_range(0..d.verbs_per_instrument);
            self.active.push((i, off, t));
        }
        self.active.sort_unstable();
    }
}

fn render(data: &DataConfig, img_h: usize, img_w: usize, active: &[(usize, usize, usize)], rng: &mut ChaCha8Rng) -> Tensor {
    let mut img = Tensor::zeros(&[img_h, img_w, 3]);
    let strip_w = img_w / data.targets;

    // Background: a constant per-region tint marks where each target lies.
    for y in 0..img_h {
        for x in 0..img_w {
            let t = (x / strip_w).min(data.targets - 1);
            img.data_mut()[(y * img_w + x) * 3 + 2] = 0.3 * (t + 1) as f64 / (data.targets + 1) as f64;
        }
    }

    for &(i, off, t) in active {
        let v = (i + off) % data.verbs;
        let texture = if data.entangled_verbs { (v + i) % data.verbs } else { v };
        let sh = (3 * img_h / 4).max(2);
        let sw = (3 * strip_w / 4).max(2).min(strip_w);
        let y0 = rng.gen_range(0..=img_h - sh);
        let x0 = t * strip_w + rng.gen_range(0..=strip_w - sw);
        for r in 0..sh {
            for c in 0..sw {
                let idx = ((y0 + r) * img_w + (x0 + c)) * 3;
                img.data_mut()[idx] = (i + 1) as f64 / data.instruments as f64;
                img.data_mut()[idx + 1] =
                    if texture_bit(texture, data.verbs, r, c) { 1.0 } else { 0.0 };
            }
        }
    }

    // Distractors: sprite-free regions may show a verb-like texture with no
    // instrument mark, so the true verb is only readable at the instrument's
    // location. Skipped entirely at probability 0 to keep the stream layout.
    if data.distractors > 0.0 {
        for t in 0..data.targets {
            if active.iter().any(|&(_, _, at)| at == t) {
                continue;
            }
            if rng.gen::<f64>() >= data.distractors {
                continue;
            }
            let texture = rng.gen_range(0..data.verbs);
            let sh = (3 * img_h / 4).max(2);
            let sw = (3 * strip_w / 4).max(2).min(strip_w);
            let y0 = rng.gen_range(0..=img_h - sh);
            let x0 = t * strip_w + rng.gen_range(0..=strip_w - sw);
            for r in 0..sh {
                for c in 0..sw {
                    let idx = ((y0 + r) * img_w + (x0 + c)) * 3;
                    img.data_mut()[idx + 1] =
                        if texture_bit(texture, data.verbs, r, c) { 1.0 } else { 0.0 };
                }
            }
        }
    }

    if data.noise > 0.0 {
        let normal = Normal::new(0.0, data.noise).expect("noise std is finite");
        for v in img.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Generates every video deterministically from (config, seed); video `n`
/// uses stream `n` of a ChaCha generator seeded with `seed`.
pub fn generate_scenes(
    data: &DataConfig,
    img_h: usize,
    img_w: usize,
    seed: u64,
) -> Result<(TripletVocabulary, Vec<Scene>)> {
    let vocab = synthetic_vocabulary(data)?;
    let id_of = |i: usize, off: usize, t: usize| {
        (i * data.verbs_per_instrument + off) * data.targets + t
    };
    let mut scenes = Vec::with_capacity(data.videos * data.frames_per_video);
    for video in 0..data.videos {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(video as u64);
        let mut sampler = VideoSampler { data, active: Vec::new() };
        sampler.fresh(&mut rng);
        for frame in 0..data.frames_per_video {
            if frame > 0 && rng.gen::<f64>() >= data.persistence {
                sampler.fresh(&mut rng);
            }
            let image = render(data, img_h, img_w, &sampler.active, &mut rng);
            let mut labels = vec![0.0; vocab.num_triplets()];
            for &(i, off, t) in &sampler.active {
                labels[id_of(i, off, t)] = 1.0;
            }
            scenes.push(Scene { video, frame: frame as u64, image, labels });
        }
    }
    Ok((vocab, scenes))
}

/// Scales the split ratio to the video count; every split gets at least one
/// video, leftovers go to train.
pub fn split_videos(videos: usize, ratio: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let total = (ratio.0 + ratio.1 + ratio.2) as f64;
    let n_val = ((videos as f64 * ratio.1 as f64 / total).round() as usize).max(1);
    let n_test = ((videos as f64 * ratio.2 as f64 / total).round() as usize).max(1);
    if n_val + n_test >= videos {
        return Err(HarnessError::config(format!(
            "{} videos cannot be split {}:{}:{}",
            videos, ratio.0, ratio.1, ratio.2
        )));
    }
    Ok((videos - n_val - n_test, n_val, n_test))
}

/// Generates the full dataset and splits it by video.
pub fn generate_dataset(data: &DataConfig, img_h: usize, img_w: usize, seed: u64) -> Result<Dataset> {
    let (vocab, scenes) = generate_scenes(data, img_h, img_w, seed)?;
    let (n_train, n_val, _) = split_videos(data.videos, data.split)?;
    let mut ds = Dataset { vocab, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for s in scenes {
        if s.video < n_train {
            ds.train.push(s);
        } else if s.video < n_train + n_val {
            ds.val.push(s);
        } else {
            ds.test.push(s);
        }
    }
    Ok(ds)
}

/// Flat serialization of a scene for the `gen` subcommand.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneDump {
    pub video: usize,
    pub frame: u64,
    pub shape: Vec<usize>,
    pub pixels: Vec<f64>,
    pub labels: Vec<f64>,
}

impl SceneDump {
    pub fn from_scene(s: &Scene) -> Self {
        SceneDump {
            video: s.video,
            frame: s.frame,
            shape: s.image.shape().to_vec(),
            pixels: s.image.data().to_vec(),
            labels: s.labels.clone(),
        }
    }
}

/// Renders one split as deterministic JSON lines.
pub fn dump_split(scenes: &[Scene]) -> String {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(&SceneDump::from_scene(s)).expect("scene serializes"));
        out.push('\n');
    }
    out
}
