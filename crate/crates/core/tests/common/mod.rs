#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

use vvclip::image_io::{preprocess_rgb, RgbImage};
use vvclip::prompts::average_tokens;
use vvclip::rng::XorShift64Star;
use vvclip::tensor::Tensor;
use vvclip::vision::{encode_image, EncodeMode};
use vvclip::weights::make_synthetic_model;
use vvclip::{Model, ModelConfig, TextTokenPair};

pub fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

/// 64 px images on an 8 px patch grid: 64 patch tokens per image.
pub fn fixture_config() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        patch_size: 8,
        vision_width: 32,
        vision_heads: 4,
        embed_dim: 16,
        ..ModelConfig::tiny()
    }
}

pub fn fixture_model() -> Model {
    let cfg = fixture_config();
    Model::new(cfg.clone(), make_synthetic_model(&cfg, 2024).unwrap()).unwrap()
}

/// Planted defect: patch rectangle `(row, col, rows, cols)` on the grid.
pub type Defect = (usize, usize, usize, usize);

/// Noisy gray texture; defect patches are painted a saturated orange.
pub fn textured_image(size: usize, patch: usize, seed: u64, defect: Option<Defect>) -> RgbImage {
    let mut rng = XorShift64Star::new(seed);
    let mut img = RgbImage::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let base = 110.0 + 20.0 * ((x + 2 * y) as f64 * 0.3).sin();
            let v = (base + 25.0 * rng.next_f64()) as u8;
            img.put(x, y, [v, v, v]);
        }
    }
    if let Some((r, c, h, w)) = defect {
        for y in r * patch..(r + h) * patch {
            for x in c * patch..(c + w) * patch {
                let j = (30.0 * rng.next_f64()) as u8;
                img.put(x, y, [225 + j / 2, 120 + j, 20]);
            }
        }
    }
    img
}

pub fn defect_mask(size: usize, patch: usize, defect: Defect) -> Vec<bool> {
    let (r, c, h, w) = defect;
    let mut m = vec![false; size * size];
    for y in r * patch..(r + h) * patch {
        for x in c * patch..(c + w) * patch {
            m[y * size + x] = true;
        }
    }
    m
}

/// Prompt tokens read off the encoder itself: normal rows are mean patch
/// tokens of clean images, abnormal rows mean tokens of defect patches.
/// Each row is blended with a shared offset direction of weight `gap`,
/// which keeps text-to-patch cosines close together as in real CLIP.
pub fn planted_tokens(model: &Model, mode: EncodeMode, pairs: usize, gap: f32) -> TextTokenPair {
    let cfg = &model.config;
    let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid_side());
    let c = cfg.embed_dim;
    let mut normal = Vec::new();
    let mut abnormal = Vec::new();
    for k in 0..pairs {
        let defect = (k % 3, (2 * k) % 5, 3, 3);
        let img = textured_image(s, p, 100 + k as u64, Some(defect));
        let out = encode_image(&preprocess_rgb(&img, cfg).unwrap(), &model.store, cfg, mode).unwrap();
        let (mut n, mut a) = (vec![0.0f32; c], vec![0.0f32; c]);
        for i in 0..g * g {
            let (r, col) = (i / g, i % g);
            let inside = r >= defect.0 && r < defect.0 + 3 && col >= defect.1 && col < defect.1 + 3;
            let acc = if inside { &mut a } else { &mut n };
            for (x, v) in acc.iter_mut().zip(out.patches.row(i)) {
                *x += v;
            }
        }
        for v in [&mut n, &mut a] {
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        }
        normal.extend(n);
        abnormal.extend(a);
    }
    normal.extend(abnormal);
    let mut rng = XorShift64Star::new(77);
    let offset: Vec<f32> = (0..c).map(|_| rng.uniform_pm1()).collect();
    let on = offset.iter().map(|x| x * x).sum::<f32>().sqrt();
    for row in normal.chunks_mut(c) {
        for (x, o) in row.iter_mut().zip(&offset) {
            *x += gap * o / on;
        }
        let n = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    average_tokens(Tensor::matrix(2 * pairs, c, normal).unwrap()).unwrap()
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vvclip"))
}

/// Runs the binary, panicking with its stderr unless it exits with `code`.
pub fn run_expect(args: &[&str], code: i32) -> Output {
    let out = bin().args(args).output().expect("spawn vvclip");
    assert_eq!(
        out.status.code(),
        Some(code),
        "vvclip {args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn run_ok(args: &[&str]) -> Output {
    run_expect(args, 0)
}

/// 8-bit binary PGM; mask pixels are 255.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, bytes).unwrap();
}

/// Files written by [`cli_fixture`].
pub struct CliFixture {
    pub dir: TempDir,
    pub model: PathBuf,
    pub tokens: PathBuf,
    pub manifest: PathBuf,
    pub anomalous: PathBuf,
}

impl CliFixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic tiny model, base-tier prompt tokens and a four-image manifest
/// (two clean, two with a planted defect), all produced through the CLI.
pub fn cli_fixture() -> CliFixture {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.vvt");
    let tokens = dir.path().join("widget.vvt");
    run_ok(&["synth", "--preset", "tiny", "--seed", "7", "--out", s(&model)]);
    let vocab = assets().join("toy_vocab.txt");
    let merges = assets().join("toy_merges.txt");
    run_ok(&[
        "prompts", "--model", s(&model), "--class", "widget", "--tier", "base",
        "--vocab", s(&vocab), "--merges", s(&merges), "--out", s(&tokens),
    ]);
    let size = 48;
    let defect = (1, 1, 2, 3);
    let mut manifest = String::from("# image\tmask\tclass\tlabel\n");
    for i in 0..4u64 {
        let name = format!("img{i}.ppm");
        let bad = i % 2 == 1;
        textured_image(size, 8, 40 + i, bad.then_some(defect))
            .save_ppm(&dir.path().join(&name))
            .unwrap();
        if bad {
            let mask = format!("img{i}_mask.pgm");
            write_mask(&dir.path().join(&mask), size, size, &defect_mask(size, 8, defect));
            manifest.push_str(&format!("{name}\t{mask}\twidget\t1\n"));
        } else {
            manifest.push_str(&format!("{name}\t-\twidget\t0\n"));
        }
    }
    let manifest_path = dir.path().join("manifest.tsv");
    fs::write(&manifest_path, manifest).unwrap();
    let anomalous = dir.path().join("img1.ppm");
    CliFixture {
        dir,
        model,
        tokens,
        manifest: manifest_path,
        anomalous,
    }
}
