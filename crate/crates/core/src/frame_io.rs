//! RGB-D dataset loading, the pinhole camera model, back-projection, and
//! valid-pixel sampling.
//!
//! Two on-disk layouts are supported:
//! - `directory`: `intrinsics.txt` (fx fy cx cy width height depth_scale),
//!   `color/%06d.png` (8-bit RGB), `depth/%06d.png` (16-bit), optional
//!   `groundtruth.txt` (TUM trajectory lines).
//! - `tum`: the TUM RGB-D benchmark layout (`rgb.txt`, `depth.txt`,
//!   `groundtruth.txt`), color/depth associated by nearest timestamp within
//!   0.02 s; unmatched entries are dropped with a warning.
//!
//! Depth 0 marks an invalid pixel everywhere.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::V3;
use crate::pose::{quat_normalize, Pose};
use crate::real::Real;

/// Pinhole intrinsics plus the raw-depth-to-meters divisor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0
            && self.width > 0
            && self.height > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Dataset(format!("invalid intrinsics: {self:?}")))
        }
    }

    /// Unnormalized camera-frame ray direction through pixel center (u, v):
    /// ((u - cx)/fx, (v - cy)/fy, 1).
    #[inline]
    pub fn pixel_dir(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// One RGB-D frame; color in [0,1], depth in meters (0 = invalid).
#[derive(Debug, Clone)]
pub struct Frame<T> {
    pub index: usize,
    pub timestamp: f64,
    pub width: u32,
    pub height: u32,
    pub color: Vec<[T; 3]>,
    pub depth: Vec<T>,
    /// Flat indices of valid-depth pixels, ascending.
    valid: Vec<u32>,
}

impl<T: Real> Frame<T> {
    pub fn new(
        index: usize,
        timestamp: f64,
        width: u32,
        height: u32,
        color: Vec<[T; 3]>,
        depth: Vec<T>,
    ) -> Result<Self> {
        let n = (width as usize) * (height as usize);
        if color.len() != n || depth.len() != n {
            return Err(Error::Dataset(format!(
                "frame {index}: buffer sizes {}x{} vs {}x{} pixels",
                color.len(),
                depth.len(),
                width,
                height
            )));
        }
        for d in &depth {
            if !d.is_finite() || *d < T::zero() {
                return Err(Error::Dataset(format!("frame {index}: bad depth value")));
            }
        }
        if color
            .iter()
            .flatten()
            .any(|c| !c.is_finite() || *c < T::zero() || *c > T::one())
        {
            return Err(Error::Dataset(format!("frame {index}: color out of [0,1]")));
        }
        let valid = depth
            .iter()
            .enumerate()
            .filter(|(_, d)| **d > T::zero())
            .map(|(i, _)| i as u32)
            .collect();
        Ok(Self {
            index,
            timestamp,
            width,
            height,
            color,
            depth,
            valid,
        })
    }

    #[inline]
    pub fn depth_at(&self, u: u32, v: u32) -> T {
        self.depth[(v * self.width + u) as usize]
    }

    #[inline]
    pub fn color_at(&self, u: u32, v: u32) -> [T; 3] {
        self.color[(v * self.width + u) as usize]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.len()
    }
}

/// One sampled observation: a pixel with valid depth.
#[derive(Debug, Clone, Copy)]
pub struct PixelSample<T> {
    pub frame_id: usize,
    pub u: u32,
    pub v: u32,
    pub color: [T; 3],
    pub depth: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Directory,
    Tum,
}

#[derive(Debug)]
pub struct Dataset<T> {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame<T>>,
    /// (timestamp, pose) pairs, ordered by timestamp.
    pub groundtruth: Option<Vec<(f64, Pose<T>)>>,
}

/// `Tum` if `rgb.txt` is present, `Directory` if `intrinsics.txt` is.
pub fn detect_format(path: &Path) -> Option<DatasetFormat> {
    if path.join("rgb.txt").is_file() {
        Some(DatasetFormat::Tum)
    } else if path.join("intrinsics.txt").is_file() {
        Some(DatasetFormat::Directory)
    } else {
        None
    }
}

pub fn load_dataset<T: Real>(path: &Path, format: DatasetFormat) -> Result<Dataset<T>> {
    load_dataset_with_scale(path, format, None)
}

/// `depth_scale` overrides the dataset's own divisor when given.
pub fn load_dataset_with_scale<T: Real>(
    path: &Path,
    format: DatasetFormat,
    depth_scale: Option<f64>,
) -> Result<Dataset<T>> {
    if !path.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset path {} does not exist",
            path.display()
        )));
    }
    match format {
        DatasetFormat::Directory => load_directory(path, depth_scale),
        DatasetFormat::Tum => load_tum(path, depth_scale),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(trimmed.to_string());
    }
    Ok(out)
}

/// Parse one TUM trajectory line: timestamp tx ty tz qx qy qz qw.
fn parse_trajectory_line<T: Real>(line: &str) -> Result<(f64, Pose<T>)> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset(format!("bad trajectory line {line:?}: {e}")))?;
    if v.len() != 8 {
        return Err(Error::Dataset(format!(
            "trajectory line has {} fields, want 8: {line:?}",
            v.len()
        )));
    }
    // file order is qx qy qz qw; internal order is (w, x, y, z)
    let q = quat_normalize([
        T::from_f64(v[7]),
        T::from_f64(v[4]),
        T::from_f64(v[5]),
        T::from_f64(v[6]),
    ]);
    let t = [T::from_f64(v[1]), T::from_f64(v[2]), T::from_f64(v[3])];
    Ok((v[0], Pose::new(q, t)))
}

pub fn load_trajectory_file<T: Real>(path: &Path) -> Result<Vec<(f64, Pose<T>)>> {
    let mut out: Vec<(f64, Pose<T>)> = read_lines(path)?
        .iter()
        .map(|l| parse_trajectory_line(l))
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// TUM trajectory lines (timestamp tx ty tz qx qy qz qw), quaternion
/// canonicalized to the w >= 0 representative. Fixed-width formatting keeps
/// repeated runs byte-identical.
pub fn format_trajectory<T: Real>(traj: &[(f64, Pose<T>)]) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    for (ts, pose) in traj {
        let p = pose.canonicalized();
        writeln!(
            s,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            ts,
            p.t[0].to_f64(),
            p.t[1].to_f64(),
            p.t[2].to_f64(),
            p.q[1].to_f64(),
            p.q[2].to_f64(),
            p.q[3].to_f64(),
            p.q[0].to_f64()
        )
        .expect("string write");
    }
    s
}

pub fn save_trajectory_file<T: Real>(path: &Path, traj: &[(f64, Pose<T>)]) -> Result<()> {
    std::fs::write(path, format_trajectory(traj))?;
    Ok(())
}

fn load_color_png<T: Real>(path: &Path) -> Result<(u32, u32, Vec<[T; 3]>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let inv = T::from_f64(1.0 / 255.0);
    let px = img
        .pixels()
        .map(|p| {
            [
                T::from_usize(p.0[0] as usize) * inv,
                T::from_usize(p.0[1] as usize) * inv,
                T::from_usize(p.0[2] as usize) * inv,
            ]
        })
        .collect();
    Ok((w, h, px))
}

fn load_depth_png<T: Real>(path: &Path, scale: f64) -> Result<(u32, u32, Vec<T>)> {
    let img = image::open(path)?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::Dataset(format!(
                "{}: depth must be 16-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    let inv = 1.0 / scale;
    let px = img
        .pixels()
        .map(|p| T::from_f64(p.0[0] as f64 * inv))
        .collect();
    Ok((w, h, px))
}

fn load_directory<T: Real>(path: &Path, depth_scale: Option<f64>) -> Result<Dataset<T>> {
    let intr_path = path.join("intrinsics.txt");
    let lines = read_lines(&intr_path)?;
    let fields: Vec<f64> = lines
        .join(" ")
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset(format!("{}: {e}", intr_path.display())))?;
    if fields.len() != 7 {
        return Err(Error::Dataset(format!(
            "{}: want 7 fields (fx fy cx cy width height depth_scale), got {}",
            intr_path.display(),
            fields.len()
        )));
    }
    let mut intrinsics = Intrinsics {
        fx: fields[0],
        fy: fields[1],
        cx: fields[2],
        cy: fields[3],
        width: fields[4] as u32,
        height: fields[5] as u32,
        depth_scale: fields[6],
    };
    if let Some(s) = depth_scale {
        intrinsics.depth_scale = s;
    }
    intrinsics.validate()?;

    let groundtruth = {
        let gt_path = path.join("groundtruth.txt");
        if gt_path.is_file() {
            Some(load_trajectory_file::<T>(&gt_path)?)
        } else {
            None
        }
    };

    let mut frames = Vec::new();
    loop {
        let i = frames.len();
        let cpath = path.join(format!("color/{i:06}.png"));
        if !cpath.is_file() {
            break;
        }
        let dpath = path.join(format!("depth/{i:06}.png"));
        let (cw, ch, color) = load_color_png::<T>(&cpath)?;
        let (dw, dh, depth) = load_depth_png::<T>(&dpath, intrinsics.depth_scale)?;
        if (cw, ch) != (intrinsics.width, intrinsics.height) || (dw, dh) != (cw, ch) {
            return Err(Error::Dataset(format!(
                "frame {i}: image sizes {cw}x{ch}/{dw}x{dh} vs intrinsics {}x{}",
                intrinsics.width, intrinsics.height
            )));
        }
        let timestamp = match &groundtruth {
            Some(gt) if gt.len() > i => gt[i].0,
            _ => i as f64,
        };
        frames.push(Frame::new(i, timestamp, cw, ch, color, depth)?);
    }
    if frames.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no frames (expected color/000000.png)",
            path.display()
        )));
    }
    Ok(Dataset {
        intrinsics,
        frames,
        groundtruth,
    })
}

/// Parse a TUM list file (`rgb.txt` / `depth.txt`): "timestamp path" lines.
fn read_tum_list(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut out = Vec::new();
    for line in read_lines(path)? {
        let mut it = line.split_whitespace();
        let (Some(ts), Some(rel)) = (it.next(), it.next()) else {
            return Err(Error::Dataset(format!(
                "{}: bad line {line:?}",
                path.display()
            )));
        };
        let ts: f64 = ts
            .parse()
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        out.push((ts, PathBuf::from(rel)));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

const TUM_ASSOC_WINDOW: f64 = 0.02;
const TUM_DEFAULT_DEPTH_SCALE: f64 = 5000.0;
/// TUM sequences use the Kinect's VGA pinhole; the benchmark's published
/// defaults are used since the layout carries no intrinsics file.
const TUM_INTRINSICS: Intrinsics = Intrinsics {
    fx: 525.0,
    fy: 525.0,
    cx: 319.5,
    cy: 239.5,
    width: 640,
    height: 480,
    depth_scale: TUM_DEFAULT_DEPTH_SCALE,
};

fn load_tum<T: Real>(path: &Path, depth_scale: Option<f64>) -> Result<Dataset<T>> {
    let rgb = read_tum_list(&path.join("rgb.txt"))?;
    let depth = read_tum_list(&path.join("depth.txt"))?;
    let mut intrinsics = TUM_INTRINSICS;
    if let Some(s) = depth_scale {
        intrinsics.depth_scale = s;
    }

    // Unique greedy association: walk both timestamp-sorted lists, pair each
    // color with the nearest remaining depth, keep pairs within the window.
    let mut pairs = Vec::new();
    let mut dropped = 0usize;
    let mut j = 0usize;
    for (ts, cpath) in &rgb {
        while j + 1 < depth.len() && (depth[j + 1].0 - ts).abs() <= (depth[j].0 - ts).abs() {
            j += 1;
        }
        if j < depth.len() && (depth[j].0 - ts).abs() <= TUM_ASSOC_WINDOW {
            pairs.push((*ts, cpath.clone(), depth[j].1.clone()));
            j += 1;
        } else {
            dropped += 1;
        }
        if j >= depth.len() {
            break;
        }
    }
    if dropped > 0 {
        log::warn!("tum association: dropped {dropped} color frames without a depth match within {TUM_ASSOC_WINDOW} s");
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no color/depth pairs associable within {TUM_ASSOC_WINDOW} s",
            path.display()
        )));
    }

    let mut frames = Vec::new();
    for (i, (ts, cpath, dpath)) in pairs.iter().enumerate() {
        let (cw, ch, color) = load_color_png::<T>(&path.join(cpath))?;
        let (dw, dh, depthv) = load_depth_png::<T>(&path.join(dpath), intrinsics.depth_scale)?;
        if (dw, dh) != (cw, ch) {
            return Err(Error::Dataset(format!(
                "frame {i}: color {cw}x{ch} vs depth {dw}x{dh}"
            )));
        }
        if i == 0 {
            intrinsics.width = cw;
            intrinsics.height = ch;
            // Scale the VGA model if the sequence ships downsampled images.
            let sx = cw as f64 / 640.0;
            let sy = ch as f64 / 480.0;
            intrinsics.fx *= sx;
            intrinsics.fy *= sy;
            intrinsics.cx *= sx;
            intrinsics.cy *= sy;
        }
        frames.push(Frame::new(i, *ts, cw, ch, color, depthv)?);
    }

    let gt_path = path.join("groundtruth.txt");
    let groundtruth = if gt_path.is_file() {
        Some(load_trajectory_file::<T>(&gt_path)?)
    } else {
        None
    };
    Ok(Dataset {
        intrinsics,
        frames,
        groundtruth,
    })
}

/// Back-project one pixel with depth `d` through `K` and rigid `pose`.
#[inline]
pub fn backproject_pixel<T: Real>(u: f64, v: f64, d: T, k: &Intrinsics, pose: &Pose<T>) -> V3<T> {
    let dir = k.pixel_dir(u, v);
    let cam = [T::from_f64(dir[0]) * d, T::from_f64(dir[1]) * d, d];
    pose.transform(cam)
}

/// World points for every valid-depth pixel of `frame`.
pub fn backproject<T: Real>(frame: &Frame<T>, k: &Intrinsics, pose: &Pose<T>) -> Vec<V3<T>> {
    let w = frame.width;
    frame
        .valid
        .iter()
        .map(|&i| {
            let (u, v) = (i % w, i / w);
            backproject_pixel(u as f64, v as f64, frame.depth[i as usize], k, pose)
        })
        .collect()
}

/// Project a world point into the frame of `pose`; returns continuous pixel
/// coordinates and camera-frame depth, or None behind the camera.
#[inline]
pub fn project<T: Real>(p: V3<T>, k: &Intrinsics, pose: &Pose<T>) -> Option<(f64, f64, T)> {
    let c = pose.inverse_transform(p);
    if c[2] <= T::zero() {
        return None;
    }
    let z = c[2].to_f64();
    let u = k.fx * c[0].to_f64() / z + k.cx;
    let v = k.fy * c[1].to_f64() / z + k.cy;
    Some((u, v, c[2]))
}

/// Uniform sample without replacement over valid-depth pixels; clamps to the
/// valid count. Partial Fisher-Yates over a copy of the valid-index list.
pub fn sample_pixels<T: Real>(
    frame: &Frame<T>,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<PixelSample<T>> {
    assert!(
        !frame.valid.is_empty(),
        "frame {} has no valid-depth pixels",
        frame.index
    );
    let mut idx = frame.valid.clone();
    let n = count.min(idx.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
        let flat = idx[i];
        let (u, v) = (flat % frame.width, flat / frame.width);
        out.push(PixelSample {
            frame_id: frame.index,
            u,
            v,
            color: frame.color[flat as usize],
            depth: frame.depth[flat as usize],
        });
    }
    out
}
