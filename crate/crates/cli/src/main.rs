use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use facereg::bench::{
    ct_image_landmarks, generate_phantom, report_emit, run_comparison, Method, ReportFormat, Scenario, PHANTOM_ISO,
};
use facereg::depth::{
    depth_to_cloud, lift_landmarks, segment_region, select_eyes_nose, DepthFrame, LandmarkSet, DEFAULT_LIFT_WINDOW,
};
use facereg::keypoints::{harris3d_keypoints, iss_keypoints, sift3d_keypoints, KeypointParams};
use facereg::ply::{read_ply, write_cloud, Encoding};
use facereg::registration::register_two_stage;
use facereg::surface::render::DEFAULT_RESOLUTION_MM_PER_PX;
use facereg::surface::{
    backproject_landmarks, estimate_normals, marching_cubes, render_normal_angle_image, NormalAngleImage, ScalarVolume,
    TriangleMesh, DEFAULT_NORMAL_NEIGHBORS,
};
use facereg::{Point3, PointCloud, Vec3};

#[derive(Parser, Debug)]
#[command(name = "facereg", version, about = "Depth-camera to CT face registration")]
struct Cli {
    /// Seed for every random draw; overrides the seed in a phantom spec.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Back-project a 16-bit depth PGM into a PLY cloud.
    Depth2cloud {
        depth: PathBuf,
        /// Intrinsics JSON; defaults to the `<name>.intrinsics.json` sidecar.
        intrinsics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the isosurface of a raw volume as a PLY mesh.
    Extract {
        /// `<name>.raw`, with its `<name>.volume.json` header alongside.
        volume: PathBuf,
        #[arg(long, default_value_t = PHANTOM_ISO)]
        iso: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a normal-angle image of a mesh (writes the PGM and a lookup sidecar).
    Render {
        mesh: PathBuf,
        /// Viewing direction as x,y,z.
        #[arg(long, default_value = "0,0,1")]
        axis: String,
        /// Pixel size in mm.
        #[arg(long, default_value_t = DEFAULT_RESOLUTION_MM_PER_PX)]
        res: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect baseline keypoints on a cloud.
    Keypoints {
        cloud: PathBuf,
        #[arg(long)]
        method: Method,
        #[command(flatten)]
        params: ParamFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage registration of a source cloud onto a target cloud.
    Register {
        source: PathBuf,
        target: PathBuf,
        #[arg(long, default_value = "ours")]
        method: Method,
        /// Source keypoints as PLY (method `ours`).
        #[arg(long, conflicts_with_all = ["src_landmarks", "src_frame"])]
        src_keypoints: Option<PathBuf>,
        /// Target keypoints as PLY (method `ours`).
        #[arg(long, conflicts_with_all = ["tgt_landmarks", "tgt_image"])]
        tgt_keypoints: Option<PathBuf>,
        /// Camera landmarks JSON, lifted with `--src-frame`.
        #[arg(long, requires = "src_frame")]
        src_landmarks: Option<PathBuf>,
        /// Depth PGM the source landmarks refer to.
        #[arg(long, requires = "src_landmarks")]
        src_frame: Option<PathBuf>,
        /// CT image landmarks JSON, back-projected through `--tgt-image`.
        #[arg(long, requires = "tgt_image")]
        tgt_landmarks: Option<PathBuf>,
        /// Normal-angle image (with lookup sidecar) the target landmarks refer to.
        #[arg(long, requires = "tgt_landmarks")]
        tgt_image: Option<PathBuf>,
        /// Crop the source to this distance (mm) from its keypoints.
        #[arg(long)]
        src_margin: Option<f64>,
        /// Crop the target to this distance (mm) from its keypoints.
        #[arg(long)]
        tgt_margin: Option<f64>,
        #[command(flatten)]
        params: ParamFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare registration methods on a phantom.
    Bench {
        /// Scenario JSON or a bare phantom spec; built-in phantom if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "ours,iss,harris,sift")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Report path; .csv, .json or .md. Markdown on stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the phantom's depth frame, CT volume, landmarks and rendered CT image.
    Phantom {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Overrides for the per-cloud keypoint defaults.
#[derive(Args, Debug, Default)]
struct ParamFlags {
    #[arg(long)]
    iss_salient_radius: Option<f64>,
    #[arg(long)]
    iss_nonmax_radius: Option<f64>,
    #[arg(long)]
    iss_gamma_21: Option<f64>,
    #[arg(long)]
    iss_gamma_32: Option<f64>,
    #[arg(long)]
    iss_min_neighbors: Option<usize>,
    #[arg(long)]
    harris_radius: Option<f64>,
    #[arg(long)]
    harris_response_threshold: Option<f64>,
    #[arg(long)]
    harris_k_constant: Option<f64>,
    #[arg(long)]
    sift_min_scale: Option<f64>,
    #[arg(long)]
    sift_octaves: Option<usize>,
    #[arg(long)]
    sift_scales_per_octave: Option<usize>,
    #[arg(long)]
    sift_contrast_threshold: Option<f64>,
}

impl ParamFlags {
    fn apply(&self, mut p: KeypointParams) -> facereg::Result<KeypointParams> {
        fn set<T: Copy>(dst: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut p.iss.salient_radius, self.iss_salient_radius);
        set(&mut p.iss.nonmax_radius, self.iss_nonmax_radius);
        set(&mut p.iss.gamma_21, self.iss_gamma_21);
        set(&mut p.iss.gamma_32, self.iss_gamma_32);
        set(&mut p.iss.min_neighbors, self.iss_min_neighbors);
        set(&mut p.harris.radius, self.harris_radius);
        set(&mut p.harris.response_threshold, self.harris_response_threshold);
        set(&mut p.harris.k_constant, self.harris_k_constant);
        set(&mut p.sift.min_scale, self.sift_min_scale);
        set(&mut p.sift.octaves, self.sift_octaves);
        set(&mut p.sift.scales_per_octave, self.sift_scales_per_octave);
        set(&mut p.sift.contrast_threshold, self.sift_contrast_threshold);
        p.validate()?;
        Ok(p)
    }
}

/// Exit status and message of a failed command.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<facereg::Error> for Failure {
    fn from(e: facereg::Error) -> Self {
        Self {
            code: if e.is_input_error() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("facereg: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input(e.to_string()))?;
    }
    let log = |msg: String| {
        if cli.verbose {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::Depth2cloud { depth, intrinsics, out } => {
            let frame = match intrinsics {
                Some(k) => DepthFrame::load_with_intrinsics(&depth, k)?,
                None => DepthFrame::load(&depth)?,
            };
            let cloud = depth_to_cloud(&frame)?;
            log(format!("{} points", cloud.len()));
            write_cloud(out, &cloud, Encoding::BinaryLittleEndian)?;
        }
        Command::Extract { volume, iso, out } => {
            let vol = ScalarVolume::load(volume)?;
            let mesh = marching_cubes(&vol, iso)?;
            log(format!("{} vertices, {} triangles", mesh.vertices().len(), mesh.triangles().len()));
            mesh.save_ply(out, Encoding::BinaryLittleEndian)?;
        }
        Command::Render { mesh, axis, res, out } => {
            let axis = parse_axis(&axis)?;
            let mesh = TriangleMesh::load_ply(mesh)?;
            let img = render_normal_angle_image(&mesh, &axis, res)?;
            log(format!("{}x{} image", img.width, img.height));
            img.save(out)?;
        }
        Command::Keypoints { cloud, method, params, out } => {
            let cloud = read_cloud(&cloud)?;
            let kp = detect(method, &cloud, &params)?;
            log(format!("{method}: {} keypoints", kp.len()));
            write_cloud(out, &kp, Encoding::BinaryLittleEndian)?;
        }
        Command::Register {
            source,
            target,
            method,
            src_keypoints,
            tgt_keypoints,
            src_landmarks,
            src_frame,
            tgt_landmarks,
            tgt_image,
            src_margin,
            tgt_margin,
            params,
            out,
        } => {
            let source = read_cloud(&source)?;
            let target = read_cloud(&target)?;
            let (src_kp, tgt_kp) = if method == Method::Ours {
                let src_kp = match (src_keypoints, src_landmarks, src_frame) {
                    (Some(k), _, _) => read_cloud(&k)?,
                    (None, Some(lm), Some(frame)) => {
                        let lm = select_eyes_nose(&LandmarkSet::load(lm)?);
                        lift_landmarks(&DepthFrame::load(frame)?, &lm, DEFAULT_LIFT_WINDOW)?.cloud
                    }
                    _ => return Err(Failure::input("method ours needs --src-keypoints or --src-landmarks with --src-frame")),
                };
                let tgt_kp = match (tgt_keypoints, tgt_landmarks, tgt_image) {
                    (Some(k), _, _) => read_cloud(&k)?,
                    (None, Some(lm), Some(image)) => {
                        let lm = select_eyes_nose(&LandmarkSet::load(lm)?);
                        backproject_landmarks(&NormalAngleImage::load(image)?, &lm)?.cloud
                    }
                    _ => return Err(Failure::input("method ours needs --tgt-keypoints or --tgt-landmarks with --tgt-image")),
                };
                (src_kp, tgt_kp)
            } else {
                if src_keypoints.is_some() || tgt_keypoints.is_some() || src_landmarks.is_some() || tgt_landmarks.is_some() {
                    return Err(Failure::input(format!("method {method} detects its own keypoints")));
                }
                (detect(method, &source, &params)?, detect(method, &target, &params)?)
            };
            let source = match src_margin {
                Some(m) => segment_region(&source, &src_kp, m)?,
                None => source,
            };
            let target = match tgt_margin {
                Some(m) => segment_region(&target, &tgt_kp, m)?,
                None => target,
            };
            log(format!(
                "{method}: {} vs {} keypoints, {} vs {} points",
                src_kp.len(),
                tgt_kp.len(),
                source.len(),
                target.len()
            ));
            let result = register_two_stage(&source, &target, &src_kp, &tgt_kp)?;
            log(format!("coarse rmse {:.4} mm, fine rmse {:.4} mm", result.coarse.rmse, result.rmse_mm));
            result.save(out)?;
        }
        Command::Bench { spec, methods, trials, out } => {
            let format = out.as_deref().map(ReportFormat::from_path);
            let mut scenario = match spec {
                Some(p) => Scenario::load(p)?,
                None => Scenario::default(),
            };
            if let Some(seed) = cli.seed {
                scenario.phantom.seed = seed;
            }
            let report = run_comparison(&scenario.phantom, &scenario.perturbation.transform()?, &methods, trials)?;
            for row in &report.rows {
                log(format!("{}: fine rmse {:?}", row.method, row.fine_rmse_mm));
            }
            match (out, format) {
                (Some(p), Some(f)) => fs::write(p, report_emit(&report, f)?).map_err(facereg::Error::from)?,
                _ => print!("{}", report_emit(&report, ReportFormat::Markdown)?),
            }
        }
        Command::Phantom { spec, out_dir } => {
            let mut spec = match spec {
                Some(p) => Scenario::load(p)?.phantom,
                None => Default::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            write_phantom(&spec, &out_dir, &log)?;
        }
    }
    Ok(())
}

fn parse_axis(s: &str) -> Result<Vec3, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| f64::from_str(c.trim()))
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::input(format!("bad axis '{s}', expected x,y,z")))?;
    let v = match v[..] {
        [x, y, z] => Vec3::new(x, y, z),
        _ => return Err(Failure::input(format!("bad axis '{s}', expected x,y,z"))),
    };
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Failure::input("axis must be a nonzero finite vector"));
    }
    Ok(v / n)
}

fn read_cloud(path: &Path) -> facereg::Result<PointCloud> {
    Ok(read_ply(path)?.cloud)
}

/// Baseline keypoints with per-cloud defaults and flag overrides. Clouds
/// without normals get them estimated, oriented toward the origin.
fn detect(method: Method, cloud: &PointCloud, flags: &ParamFlags) -> Result<PointCloud, Failure> {
    let params = flags.apply(KeypointParams::for_cloud(cloud)?)?;
    let with_normals = |c: &PointCloud| match c.normals() {
        Some(_) => Ok(c.clone()),
        None => estimate_normals(c, DEFAULT_NORMAL_NEIGHBORS, &Point3::origin()),
    };
    Ok(match method {
        Method::Iss => iss_keypoints(cloud, &params)?,
        Method::Harris => harris3d_keypoints(&with_normals(cloud)?, &params)?,
        Method::Sift => sift3d_keypoints(&with_normals(cloud)?, &params)?,
        Method::Ours => return Err(Failure::input("method ours takes landmark keypoints, not detected ones")),
    })
}

/// Files written: `depth.pgm` (+ intrinsics), `camera_landmarks.json`,
/// `ct.raw` (+ header, values rounded to integers), its isosurface
/// `ct.ply`, `ct_image.pgm` (+ lookup, rendered from `ct.ply` along the
/// camera's viewing direction reversed), `ct_landmarks.json` and `ground_truth.json` (CT to camera).
fn write_phantom(spec: &facereg::bench::PhantomSpec, dir: &Path, log: &dyn Fn(String)) -> CmdResult {
    let phantom = generate_phantom(spec)?;
    fs::create_dir_all(dir).map_err(facereg::Error::from)?;
    phantom.depth_frame.save(dir.join("depth.pgm"))?;
    phantom.camera_landmarks.save(dir.join("camera_landmarks.json"))?;

    let v = &phantom.volume;
    let rounded = ScalarVolume::new(v.dims(), v.spacing(), v.origin(), v.values().iter().map(|x| x.round()).collect())?;
    rounded.save(dir.join("ct.raw"))?;
    // Render from the mesh as stored, so `extract` then `render` reproduce the image.
    let mesh_path = dir.join("ct.ply");
    marching_cubes(&rounded, PHANTOM_ISO)?.save_ply(&mesh_path, Encoding::BinaryLittleEndian)?;
    let mesh = TriangleMesh::load_ply(&mesh_path)?;
    let view_axis = -spec.camera_pose().rotation.column(2).into_owned();
    let image = render_normal_angle_image(&mesh, &view_axis, spec.render_resolution)?;
    image.save(dir.join("ct_image.pgm"))?;
    ct_image_landmarks(spec, &phantom, &image)?.save(dir.join("ct_landmarks.json"))?;
    fs::write(
        dir.join("ground_truth.json"),
        serde_json::to_string_pretty(&phantom.ground_truth).map_err(facereg::Error::from)?,
    )
    .map_err(facereg::Error::from)?;
    log(format!(
        "phantom written to {}; render axis {:.6},{:.6},{:.6}",
        dir.display(),
        view_axis.x,
        view_axis.y,
        view_axis.z
    ));
    Ok(())
}
