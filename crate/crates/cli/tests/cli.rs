use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nvs_core::io::{format_poses, read_poses};
use nvs_core::scenes::{raycast, RenderSettings, SceneSpec};
use nvs_core::{CameraIntrinsics, Image, RigidTransform};

const TINY: &str = "n = 8\nimage_size = 16\nenc_channels = 4,4\ndec_channels = 4,4\npairs_per_epoch = 16\nepochs = 2\nval_pairs = 4\nbatch_size = 4\n";

fn nvs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvs"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = nvs(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(s.lines().count(), 1, "{s}");
    s.trim_end().to_string()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn trained(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    ok(dir, &["train", "--config", "tiny.cfg", "--out", "run", "--seed", "3"]);
    dir.join("run/final.nvsc")
}

#[test]
fn help_documents_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = String::from_utf8(ok(dir.path(), &["--help"]).stdout).unwrap();
    for sub in [
        "train",
        "eval",
        "sweep",
        "render",
        "orbit",
        "serve",
        "gradcheck",
        "interpolate",
        "gen-data",
    ] {
        assert!(help.contains(sub), "{sub}");
        let h = String::from_utf8(ok(dir.path(), &[sub, "--help"]).stdout).unwrap();
        assert!(
            h.contains("--seed") && h.contains("--config") && h.contains("--checkpoint"),
            "{sub}"
        );
    }
}

#[test]
fn failures_are_one_line_and_name_the_token() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = nvs(d, &["sweep", "--frobnicate", "--out", "x.csv"]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(
        line.starts_with("error: usage:") && line.contains("--frobnicate"),
        "{line}"
    );

    let line = stderr_line(&nvs(d, &["eval", "--checkpoint", "missing.nvsc"]));
    assert!(
        line.starts_with("error: io:") && line.contains("missing.nvsc"),
        "{line}"
    );

    std::fs::write(d.join("bad.cfg"), "epochs = 2\nwarp_speed = 9\n").unwrap();
    let out = nvs(d, &["train", "--config", "bad.cfg", "--out", "run"]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(
        line.starts_with("error: config:") && line.contains("bad.cfg:2") && line.contains("warp_speed"),
        "{line}"
    );

    std::fs::write(d.join("bad.cfg"), "epochs = many\n").unwrap();
    let line = stderr_line(&nvs(d, &["gen-data", "--config", "bad.cfg", "--out", "gd"]));
    assert!(line.contains("many"), "{line}");
    assert!(!d.join("run").exists() && !d.join("gd").exists());

    std::fs::write(d.join("p.txt"), "1 0 0\n").unwrap();
    let line = stderr_line(&nvs(d, &["render", "--poses", "p.txt", "--out", "r"]));
    assert!(line.starts_with("error: format:"), "{line}");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 20);
    assert!(text.lines().all(|l| l.ends_with(" ok")), "{text}");
}

#[test]
fn sweep_has_81_rows_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ckpt = trained(d);
    let ckpt = ckpt.to_str().unwrap();
    ok(
        d,
        &[
            "sweep",
            "--checkpoint",
            ckpt,
            "--range",
            "40",
            "--step",
            "1",
            "--out",
            "a.csv",
        ],
    );
    ok(
        d,
        &[
            "sweep",
            "--checkpoint",
            ckpt,
            "--range",
            "40",
            "--step",
            "1",
            "--out",
            "b.csv",
        ],
    );
    let a = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a.lines().next(), Some("angle,l1,ssim"));
    assert_eq!(a.lines().count(), 1 + 81);
    assert_eq!(a, std::fs::read_to_string(d.join("b.csv")).unwrap());
}

#[test]
fn every_subcommand_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    std::fs::write(
        d.join("poses.txt"),
        format_poses(&[RigidTransform::identity(), RigidTransform::rot_y(0.1)]),
    )
    .unwrap();
    let runs: [&[&str]; 6] = [
        &["train", "--config", "../tiny.cfg", "--out", "out", "--seed", "5"],
        &[
            "gen-data",
            "--config",
            "../tiny.cfg",
            "--out",
            "out",
            "--scenes",
            "1",
            "--seed",
            "2",
        ],
        &[
            "render",
            "--poses",
            "../poses.txt",
            "--out",
            "out",
            "--seed",
            "4",
            "--size",
            "24",
        ],
        &[
            "orbit",
            "--views",
            "6",
            "--step",
            "2",
            "--overlay",
            "out.png",
            "--frames",
            "out",
            "--size",
            "24",
        ],
        &["eval", "--checkpoint", "../run/final.nvsc", "--out", "out.csv"],
        &[
            "interpolate",
            "--checkpoint",
            "../run/final.nvsc",
            "--seed-b",
            "9",
            "--steps",
            "3",
            "--out",
            "out",
        ],
    ];
    trained(d);
    for (i, args) in runs.iter().enumerate() {
        let snaps: Vec<_> = ["a", "b"]
            .iter()
            .map(|rep| {
                let work = d.join(format!("{i}{rep}"));
                std::fs::create_dir(&work).unwrap();
                ok(&work, args);
                snapshot(&work)
            })
            .collect();
        assert!(!snaps[0].is_empty(), "{args:?}");
        assert_eq!(snaps[0], snaps[1], "{args:?}");
    }
}

#[test]
fn oracle_render_of_identity_pose_is_the_source_view() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let poses = [RigidTransform::identity(), RigidTransform::rot_y(0.05)];
    std::fs::write(d.join("poses.txt"), format_poses(&poses)).unwrap();
    assert_eq!(read_poses(&d.join("poses.txt")).unwrap().len(), 2);
    ok(
        d,
        &[
            "render",
            "--poses",
            "poses.txt",
            "--out",
            "frames",
            "--seed",
            "8",
            "--size",
            "32",
        ],
    );
    let k = CameraIntrinsics::square(32);
    let pose = RigidTransform::orbit(0.0, 10f64.to_radians(), 3.0);
    let source = raycast(&SceneSpec::random_objects(8), &pose, &k, &RenderSettings::default());
    let first = std::fs::read(d.join("frames/000000.png")).unwrap();
    assert_eq!(first, source.image.encode_png().unwrap());
    assert!(d.join("frames/000001.pfm").is_file());
}

#[test]
fn orbit_overlays_80_views() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "orbit",
            "--views",
            "80",
            "--step",
            "1",
            "--overlay",
            "out.png",
            "--size",
            "32",
        ],
    );
    let overlay = Image::load_png(&d.join("out.png")).unwrap();
    assert_eq!((overlay.width, overlay.height), (32, 32));
    let names: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("out.png")]);
}

#[test]
fn gen_data_matches_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(d, &["gen-data", "--config", "tiny.cfg", "--out", "gd", "--scenes", "2"]);
    let poses = read_poses(&d.join("gd/poses.txt")).unwrap();
    assert_eq!(poses.len(), 2 * 18 * 4);
    let img = Image::load_png(&d.join("gd/images/000143.png")).unwrap();
    assert_eq!(img.width, 16);
    let depth = nvs_core::io::read_depth_pfm(&d.join("gd/depths/000000.pfm")).unwrap();
    let truth = raycast(
        &SceneSpec::random_objects(0),
        &poses[0],
        &CameraIntrinsics::square(16),
        &RenderSettings::default(),
    );
    assert_eq!(depth.values, truth.depth.values);
}

#[test]
fn serve_binds_the_flag_address_and_answers_health() {
    use std::io::{BufRead, BufReader, Read, Write};
    let mut child = Command::new(env!("CARGO_BIN_EXE_nvs"))
        .args(["serve", "--bind", "127.0.0.1:0"])
        .env("NVS_BIND", "256.0.0.1:1")
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect(&line).to_string();
    let mut s = std::net::TcpStream::connect(&addr).unwrap();
    write!(s, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"ok\""), "{resp}");
}
