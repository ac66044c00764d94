use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dped::align::DSLR_DIR;
use dped::dataset::{IndexRow, PackWriter, PatchPack, PatchPair, Split};
use dped::imageio::{load_image, sample_bicubic, save_image, ImageRGB};
use dped::nets::{GeneratorWeights, VggConfig, VggWeights};
use dped::train::checkpoint::{CONFIG_FILE, GENERATOR_FILE};
use dped::train::{TrainConfig, LOG_FILE};
use tempfile::tempdir;

fn dped(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dped"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dped")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn splitmix(state: &mut u64) -> f64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
}

/// Colored Gaussian spots on a gradient; plenty of blob keypoints.
fn scene(h: usize, w: usize, seed: u64) -> ImageRGB {
    let mut st = seed;
    let spots: Vec<[f64; 6]> = (0..h * w / 250)
        .map(|_| {
            [
                splitmix(&mut st) * h as f64,
                splitmix(&mut st) * w as f64,
                2.0 + 4.0 * splitmix(&mut st),
                splitmix(&mut st) - 0.5,
                splitmix(&mut st) - 0.5,
                splitmix(&mut st) - 0.5,
            ]
        })
        .collect();
    let mut acc = vec![0f64; 3 * h * w];
    for sp in &spots {
        let r = (3.0 * sp[2]) as isize;
        let (y0, x0) = (sp[0] as isize, sp[1] as isize);
        for y in (y0 - r).max(0)..(y0 + r + 1).min(h as isize) {
            for x in (x0 - r).max(0)..(x0 + r + 1).min(w as isize) {
                let d2 = (y as f64 - sp[0]).powi(2) + (x as f64 - sp[1]).powi(2);
                let g = (-d2 / (2.0 * sp[2] * sp[2])).exp();
                for c in 0..3 {
                    acc[(c * h + y as usize) * w + x as usize] += sp[3 + c] * g;
                }
            }
        }
    }
    ImageRGB::from_fn(h, w, |c, y, x| {
        (0.35 + 0.2 * y as f64 / h as f64 + acc[(c * h + y) * w + x]).clamp(0.0, 1.0) as f32
    })
}

/// Phone view is a crop of the scene; the DSLR view is the same region
/// seen through a small rotation and offset.
fn write_raw(root: &Path, n: usize, side: usize) {
    fs::create_dir_all(root.join("phone")).unwrap();
    fs::create_dir_all(root.join(DSLR_DIR)).unwrap();
    for i in 0..n {
        let m = 40usize;
        let big = scene(side + 2 * m, side + 2 * m, 100 + i as u64);
        let phone = big.crop(m, m, side, side).unwrap();
        let (sn, cs) = (0.6f64 + 0.3 * i as f64).to_radians().sin_cos();
        let (tx, ty) = (3.0 + i as f64, -2.0);
        let c = side as f64 / 2.0;
        let dslr = ImageRGB::from_fn(side, side, |ch, y, x| {
            let (u, v) = (x as f64 - c, y as f64 - c);
            let (xs, ys) = (cs * u - sn * v + c + tx + m as f64, sn * u + cs * v + c + ty + m as f64);
            sample_bicubic(big.plane(ch), big.height(), big.width(), ys, xs).clamp(0.0, 1.0)
        });
        save_image(&phone, root.join("phone").join(format!("{i:03}.png"))).unwrap();
        save_image(&dslr, root.join(DSLR_DIR).join(format!("{i:03}.png"))).unwrap();
    }
}

/// Eight single-patch photographs: one test, one validation, six train.
fn toy_pack(root: &Path, side: usize) {
    let mut w = PackWriter::create(root).unwrap();
    for i in 0..8 {
        let target = scene(side, side, 500 + i);
        let source = target.map(|v| 0.2 + 0.6 * v);
        let id = format!("img{i:02}");
        let pair = PatchPair {
            meta: IndexRow {
                pair_id: format!("{id}_0_0"),
                origin_image: id,
                row: 0,
                col: 0,
                shift_x: 0,
                shift_y: 0,
                rotation_deg: 0.0,
                cc: 1.0,
            },
            source,
            target,
        };
        w.add(&pair).unwrap();
    }
    w.finish(0, &serde_json::json!({})).unwrap();
}

fn identity_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("identity.dpedw");
    GeneratorWeights::identity(8).save(&path).unwrap();
    path
}

const SMALL_NETS: [&str; 6] = ["--generator-channels", "8", "--discriminator-divisor", "8", "--pretrain-iters", "2"];

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_defaults() {
    let train = String::from_utf8(dped(&["train", "--help"]).stdout).unwrap();
    for needle in [
        "--batch-size <BATCH_SIZE>\n          [default: 50]",
        "--iterations <ITERATIONS>\n          [default: 20000]",
        "--lr <LR>\n          [default: 0.0005]",
        "[default: 0.4]",
        "[default: 0.1]",
        "[default: 400]",
        "--seed",
        "--deterministic",
    ] {
        assert!(train.contains(needle), "`{needle}` missing from:\n{train}");
    }
    let prepare = String::from_utf8(dped(&["prepare", "--help"]).stdout).unwrap();
    assert!(prepare.contains("[default: 0.9]") && prepare.contains("--patch-size <PATCH_SIZE>\n          [default: 100]"));
    let ablate = String::from_utf8(dped(&["ablate", "--help"]).stdout).unwrap();
    assert!(ablate.contains("[default: 200]"));
}

#[test]
fn usage_errors_exit_2() {
    assert_exit(&dped(&["train", "--no-such-flag", "a", "b"]), 2);
    assert_exit(&dped(&["frobnicate"]), 2);
    assert_exit(&dped(&["train", "a", "b", "--profile", "fancy"]), 2);
}

#[test]
fn empty_raw_dir_names_the_layout() {
    let raw = tempdir().unwrap();
    let out = tempdir().unwrap();
    let o = dped(&["prepare", s(raw.path()), s(&out.path().join("pack"))]);
    assert_exit(&o, 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(DSLR_DIR) && err.contains("NNN"), "{err}");
}

#[test]
fn prepare_processes_a_synthetic_set_and_the_cc_gate_is_monotone() {
    let raw = tempdir().unwrap();
    let out = tempdir().unwrap();
    write_raw(raw.path(), 3, 220);
    let loose = out.path().join("loose");
    assert_exit(&dped(&["prepare", s(raw.path()), s(&loose), "--seed", "1"]), 0);
    let sl = summary(&loose);
    assert_eq!(sl["processed"], 3);
    let n_loose = sl["patches"].as_u64().unwrap();
    assert!(n_loose > 0);
    assert_eq!(PatchPack::open(&loose).unwrap().rows().len() as u64, n_loose);

    let strict = out.path().join("strict");
    let o = dped(&["prepare", s(raw.path()), s(&strict), "--seed", "1", "--cc-threshold", "0.99"]);
    let n_strict = if o.status.code() == Some(3) { 0 } else {
        assert_exit(&o, 0);
        summary(&strict)["patches"].as_u64().unwrap()
    };
    assert!(n_strict <= n_loose, "{n_strict} > {n_loose}");
}

#[test]
fn prepare_with_nothing_registrable_exits_3() {
    let raw = tempdir().unwrap();
    let out = tempdir().unwrap();
    for d in ["phone", DSLR_DIR] {
        fs::create_dir_all(raw.path().join(d)).unwrap();
        save_image(&ImageRGB::filled(200, 200, [0.5; 3]), raw.path().join(d).join("000.png")).unwrap();
    }
    assert_exit(&dped(&["prepare", s(raw.path()), s(out.path())]), 3);
}

#[test]
fn train_smoke_without_vgg_on_the_mse_profile() {
    let dir = tempdir().unwrap();
    let pack = dir.path().join("pack");
    toy_pack(&pack, 32);
    let run = dir.path().join("run");
    let o = dped(&[
        "train", s(&pack), s(&run), "--iterations", "1", "--batch-size", "2", "--profile", "mse",
        "--generator-channels", "8",
    ]);
    assert_exit(&o, 0);
    let log = fs::read_to_string(run.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn content_profiles_without_vgg_exit_2() {
    let dir = tempdir().unwrap();
    let pack = dir.path().join("pack");
    toy_pack(&pack, 32);
    for profile in ["full", "content_texture"] {
        let o = dped(&["train", s(&pack), s(&dir.path().join(profile)), "--iterations", "1", "--batch-size", "2", "--profile", profile]);
        assert_exit(&o, 2);
        assert!(String::from_utf8_lossy(&o.stderr).contains("VGG"));
    }
}

#[test]
fn seeded_deterministic_runs_write_identical_checkpoints() {
    let dir = tempdir().unwrap();
    let pack = dir.path().join("pack");
    toy_pack(&pack, 32);
    let vgg = dir.path().join("vgg.dpedw");
    VggWeights::<f32>::random(VggConfig::reduced(16), 4).save(&vgg).unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            let mut args = vec![
                "train", s(&pack), s(&out), "--seed", "7", "--deterministic", "--iterations", "2", "--batch-size", "2",
                "--vgg", s(&vgg), "--vgg-divisor", "16", "--content-layer", "relu2_2",
            ];
            args.extend(SMALL_NETS);
            assert_exit(&dped(&args), 0);
            tree_bytes(&out)
        })
        .collect();
    assert!(runs[0].iter().any(|(p, _)| p.ends_with(GENERATOR_FILE)));
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempdir().unwrap();
    let pack = dir.path().join("pack");
    toy_pack(&pack, 32);
    let cfg = dir.path().join("dped.toml");
    fs::write(&cfg, "seed = 5\n[train]\nbatch_size = 3\niterations = 4\nloss_profile = \"mse\"\n[train.generator]\nchannels = 8\n").unwrap();
    let run = dir.path().join("run");
    assert_exit(&dped(&["train", s(&pack), s(&run), "--config", s(&cfg), "--iterations", "1", "--checkpoint-every", "0"]), 0);
    let ckpt = fs::read_dir(run.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    let used: TrainConfig = serde_json::from_str(&fs::read_to_string(ckpt.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!((used.iterations, used.batch_size, used.seed, used.generator.channels), (1, 3, 5, 8));
    assert_eq!(used.lr, TrainConfig::default().lr);

    fs::write(&cfg, "[train]\nbatch_sise = 3\n").unwrap();
    assert_exit(&dped(&["train", s(&pack), s(&run), "--config", s(&cfg)]), 2);
}

#[test]
fn enhance_keeps_the_shape_and_identity_passes_through() {
    let dir = tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let input = dir.path().join("in.png");
    let img = scene(480, 640, 9);
    save_image(&img, &input).unwrap();
    let output = dir.path().join("out.png");
    assert_exit(&dped(&["enhance", s(&ckpt), s(&input), s(&output)]), 0);
    let out = load_image(&output).unwrap();
    let back = load_image(&input).unwrap();
    assert_eq!((out.height(), out.width()), (480, 640));
    let worst = out.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(worst <= 1.0 / 255.0 + 1e-6, "{worst}");
}

#[test]
fn enhance_rejects_a_non_generator_file() {
    let dir = tempdir().unwrap();
    let vgg = dir.path().join("vgg.dpedw");
    VggWeights::<f32>::random(VggConfig::reduced(32), 1).save(&vgg).unwrap();
    let input = dir.path().join("in.png");
    save_image(&scene(40, 40, 1), &input).unwrap();
    assert_exit(&dped(&["enhance", s(&vgg), s(&input), s(&dir.path().join("o.png"))]), 2);
}

#[test]
fn evaluate_covers_the_test_split_and_reruns_identically() {
    let dir = tempdir().unwrap();
    let pack = dir.path().join("pack");
    toy_pack(&pack, 32);
    let ckpt = identity_checkpoint(dir.path());
    let csv = [dir.path().join("a.csv"), dir.path().join("b.csv")];
    for c in &csv {
        assert_exit(&dped(&["evaluate", s(&ckpt), s(&pack), s(c)]), 0);
    }
    let text = fs::read_to_string(&csv[0]).unwrap();
    let n_test = PatchPack::open(&pack).unwrap().load(Split::Test).unwrap().len();
    assert_eq!(text.lines().count(), n_test + 1);
    assert_eq!(fs::read(&csv[0]).unwrap(), fs::read(&csv[1]).unwrap());
    assert!(csv[0].with_extension("json").exists());
}

#[test]
fn evaluate_with_an_empty_test_split_exits_3() {
    let dir = tempdir().unwrap();
    let pack = dir.path().join("pack");
    let mut w = PackWriter::create(&pack).unwrap();
    let t = scene(32, 32, 1);
    w.add(&PatchPair {
        meta: IndexRow {
            pair_id: "only_0_0".into(),
            origin_image: "only".into(),
            row: 0,
            col: 0,
            shift_x: 0,
            shift_y: 0,
            rotation_deg: 0.0,
            cc: 1.0,
        },
        source: t.clone(),
        target: t,
    })
    .unwrap();
    w.finish(0, &serde_json::json!({})).unwrap();
    let ckpt = identity_checkpoint(dir.path());
    assert_exit(&dped(&["evaluate", s(&ckpt), s(&pack), s(&dir.path().join("m.csv"))]), 3);
}

#[test]
fn curve_starts_at_zero_and_draws_a_plot() {
    let dir = tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    for i in 0..2 {
        save_image(&scene(120, 120, 40 + i), corpus.join(format!("{i}.png"))).unwrap();
    }
    let csv = dir.path().join("curve.csv");
    let png = dir.path().join("curve.png");
    assert_exit(&dped(&["curve", s(&corpus), s(&csv), "--max-shift", "3", "--crop", "60", "--plot", s(&png)]), 0);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "shift,mse,color_loss,ratio");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,0,0,"), "{}", lines[1]);
    let plot = load_image(&png).unwrap();
    assert!(plot.width() > 100 && plot.height() > 100);

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_exit(&dped(&["curve", s(&empty), s(&csv)]), 3);
}

#[test]
fn ablate_writes_four_rows_in_table_order() {
    let dir = tempdir().unwrap();
    let pack = dir.path().join("pack");
    toy_pack(&pack, 32);
    let vgg = dir.path().join("vgg.dpedw");
    VggWeights::<f32>::random(VggConfig::reduced(16), 4).save(&vgg).unwrap();
    let out = dir.path().join("ablation");
    let mut args = vec![
        "ablate", s(&pack), s(&out), "--iterations", "2", "--batch-size", "2", "--vgg", s(&vgg), "--vgg-divisor", "16",
        "--content-layer", "relu2_2",
    ];
    args.extend(SMALL_NETS);
    assert_exit(&dped(&args), 0);
    let rows = dped::eval::read_ablation_csv(&out.join(dped::eval::ABLATION_CSV)).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["color+content+texture", "content+texture", "mse+texture", "mse"]);
    assert!(rows.iter().all(|r| r.test_hash == rows[0].test_hash && r.iterations == 2));
    assert!(out.join(dped::eval::ABLATION_MD).exists());
}
