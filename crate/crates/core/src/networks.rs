//! Depth, pose and photometric-uncertainty networks, their parameter
//! store and the checkpoint format.
//!
//! Depth and uncertainty networks share one encoder-decoder layout: four
//! 3x3 conv levels, then a decoder that upsamples by nearest neighbour and
//! concatenates the matching encoder features. All activations are ELU.
//! The depth encoder starts at stride 1, so its decoder reaches full
//! resolution; the uncertainty encoder starts at stride 2 and its
//! half-resolution output is resized bilinearly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::diff::{Array, Gradients, Graph, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Pose6DoF;

pub const NUM_SCALES: usize = 4;
pub const DEPTH_ENCODER: [usize; 4] = [16, 32, 64, 128];
pub const DEPTH_DECODER: [usize; 4] = [8, 16, 32, 64];
pub const UNCERT_ENCODER: [usize; 4] = [8, 16, 32, 64];
pub const UNCERT_DECODER: [usize; 4] = [8, 8, 16, 32];
pub const POSE_ENCODER: [usize; 4] = [16, 32, 64, 64];
pub const POSE_SCALE: f64 = 0.01;

pub const ARCHITECTURE: &str = "encdec4-d16.32.64.128/8.16.32.64-u8.16.32.64/8.8.16.32s2-p16.32.64.64";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SUBDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const IMAGE_MEAN: f64 = 0.45;
const IMAGE_STD: f64 = 0.225;

/// Which network a parameter belongs to, by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    Depth,
    Pose,
    Uncert,
}

impl Net {
    pub const ALL: [Net; 3] = [Net::Depth, Net::Pose, Net::Uncert];

    pub fn prefix(self) -> &'static str {
        match self {
            Net::Depth => "depth.",
            Net::Pose => "pose.",
            Net::Uncert => "uncert.",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Net::Depth => 1,
            Net::Pose => 2,
            Net::Uncert => 3,
        }
    }

    pub fn of(name: &str) -> Option<Net> {
        Net::ALL.into_iter().find(|n| name.starts_with(n.prefix()))
    }
}

struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
}

fn encdec_specs(prefix: &str, cin: usize, enc: [usize; 4], dec: [usize; 4], head: usize, head_scales: usize) -> Vec<ConvSpec> {
    let conv = |name: String, cin, cout, kernel| ConvSpec { name, cin, cout, kernel };
    let mut v = Vec::new();
    let mut c = cin;
    for (i, &e) in enc.iter().enumerate() {
        v.push(conv(format!("{prefix}enc{i}"), c, e, 3));
        c = e;
    }
    v.push(conv(format!("{prefix}dec3"), enc[3], dec[3], 3));
    for s in (0..3).rev() {
        v.push(conv(format!("{prefix}dec{s}"), dec[s + 1] + enc[s], dec[s], 3));
    }
    for s in 0..head_scales {
        v.push(conv(format!("{prefix}head{s}"), dec[s], head, 3));
    }
    v
}

fn pose_specs() -> Vec<ConvSpec> {
    let mut v = Vec::new();
    let mut c = 6;
    for (i, &e) in POSE_ENCODER.iter().enumerate() {
        v.push(ConvSpec { name: format!("pose.enc{i}"), cin: c, cout: e, kernel: 3 });
        c = e;
    }
    v.push(ConvSpec { name: "pose.out".into(), cin: c, cout: 6, kernel: 1 });
    v
}

fn specs(net: Net) -> Vec<ConvSpec> {
    match net {
        Net::Depth => encdec_specs("depth.", 3, DEPTH_ENCODER, DEPTH_DECODER, 2, NUM_SCALES),
        Net::Pose => pose_specs(),
        Net::Uncert => encdec_specs("uncert.", 6, UNCERT_ENCODER, UNCERT_DECODER, 1, 1),
    }
}

/// Named parameter tensors, kept in a fixed declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub seed: u64,
    entries: Vec<(String, Array)>,
}

impl NetworkParams {
    /// Kaiming-uniform (fan-in) kernels and zero biases. Each network draws
    /// from its own stream of the seed so the networks initialise
    /// independently of one another.
    pub fn init(seed: u64) -> Self {
        let mut entries = Vec::new();
        for net in Net::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(net.stream());
            for s in specs(net) {
                let fan_in = s.cin * s.kernel * s.kernel;
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = s.cout * fan_in;
                let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                entries.push((format!("{}.weight", s.name), Array { shape: vec![s.cout, s.cin, s.kernel, s.kernel], data: w }));
                entries.push((format!("{}.bias", s.name), Array::zeros(&[s.cout])));
            }
        }
        NetworkParams { seed, entries }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self, net: Net) -> usize {
        self.iter().filter(|(n, _)| Net::of(n) == Some(net)).map(|(_, a)| a.len()).sum()
    }

    /// SHA-256 over names, shapes and values of the chosen networks.
    pub fn hash(&self, nets: &[Net]) -> String {
        let mut h = Sha256::new();
        for (name, a) in self.iter().filter(|(n, _)| Net::of(n).is_some_and(|x| nets.contains(&x))) {
            h.update(name.as_bytes());
            for d in &a.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &a.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, a) in self.iter() {
            if let Some(i) = a.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("parameter {name}"), index: i });
            }
        }
        Ok(())
    }

    /// Load the selected networks' parameters into `g`.
    pub fn bind(&self, g: &mut Graph, nets: &[Net], trainable: bool) -> Bound {
        let mut map = HashMap::new();
        let mut order = Vec::new();
        for (name, a) in self.iter() {
            if Net::of(name).is_some_and(|n| nets.contains(&n)) {
                let t = g.leaf(a.data.clone(), &a.shape, trainable).expect("stored shapes are consistent");
                map.insert(name.to_string(), t);
                order.push(name.to_string());
            }
        }
        Bound { map, order }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_str(&mut buf, ARCHITECTURE);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, a) in &self.entries {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Read a checkpoint and verify it matches this build's architecture.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::CheckpointNotFound(path.display().to_string()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let arch = r.string()?;
        if arch != ARCHITECTURE {
            return Err(Error::ArchitectureMismatch(format!("checkpoint has {arch}, expected {ARCHITECTURE}")));
        }
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let reference = NetworkParams::init(0);
        if count != reference.len() {
            return Err(Error::ArchitectureMismatch(format!("{count} tensors, expected {}", reference.len())));
        }
        let mut entries = Vec::with_capacity(count);
        for (ref_name, ref_arr) in reference.iter() {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != ref_name || shape != ref_arr.shape {
                return Err(Error::ArchitectureMismatch(format!(
                    "tensor {name} {shape:?}, expected {ref_name} {:?}",
                    ref_arr.shape
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push((name, Array { shape, data }));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after tensor table"));
        }
        Ok(NetworkParams { seed, entries })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid utf-8 in name"))
    }
}

/// Parameters loaded into one graph.
pub struct Bound {
    map: HashMap<String, Tensor>,
    order: Vec<String>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name} is not bound")))
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    /// Gradient per bound parameter (zeros where none reached it).
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> Vec<(String, Vec<f64>)> {
        self.order
            .iter()
            .map(|n| {
                let t = self.map[n];
                (n.clone(), grads.get_or_zeros(t, g.value(t).len()))
            })
            .collect()
    }
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Tensor, stride: usize) -> Result<Tensor> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

fn conv_elu(g: &mut Graph, p: &Bound, name: &str, x: Tensor, stride: usize) -> Result<Tensor> {
    let y = conv(g, p, name, x, stride)?;
    g.elu(y)
}

fn normalize(g: &mut Graph, x: Tensor) -> Result<Tensor> {
    let y = g.add_scalar(x, -IMAGE_MEAN)?;
    g.mul_scalar(y, 1.0 / IMAGE_STD)
}

/// Shared encoder-decoder; returns the decoder features per level, finest first.
fn encdec(g: &mut Graph, p: &Bound, prefix: &str, x: Tensor, first_stride: usize) -> Result<Vec<Tensor>> {
    let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
    let div = first_stride << (NUM_SCALES - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape("encoder_decoder", &[g.shape(x), &[div]]));
    }
    let mut skips = Vec::with_capacity(4);
    let mut f = x;
    for i in 0..4 {
        f = conv_elu(g, p, &format!("{prefix}enc{i}"), f, if i == 0 { first_stride } else { 2 })?;
        skips.push(f);
    }
    let mut feats = vec![f; 4];
    let mut d = conv_elu(g, p, &format!("{prefix}dec3"), skips[3], 1)?;
    feats[3] = d;
    for s in (0..3).rev() {
        let up = g.upsample_nearest(d, 2)?;
        let cat = g.concat(&[up, skips[s]], 1)?;
        d = conv_elu(g, p, &format!("{prefix}dec{s}"), cat, 1)?;
        feats[s] = d;
    }
    Ok(feats)
}

/// Per-scale depth outputs, finest scale first.
pub struct DepthOutput {
    /// `[N, 1, H/2^s, W/2^s]`, sigmoid disparity in (0, 1).
    pub disparity: Vec<Tensor>,
    /// `[N, 1, H/2^s, W/2^s]`, unclamped log regression uncertainty.
    pub log_sigma: Vec<Tensor>,
}

/// Depth network on `[N, 3, H, W]` images in [0, 1].
pub fn depthnet_forward(g: &mut Graph, p: &Bound, image: Tensor) -> Result<DepthOutput> {
    if g.shape(image).len() != 4 || g.shape(image)[1] != 3 {
        return Err(Error::shape("depthnet_forward", &[g.shape(image)]));
    }
    let x = normalize(g, image)?;
    let feats = encdec(g, p, "depth.", x, 1)?;
    let mut out = DepthOutput { disparity: Vec::new(), log_sigma: Vec::new() };
    for (s, &f) in feats.iter().enumerate() {
        let head = conv(g, p, &format!("depth.head{s}"), f, 1)?;
        let disp = g.narrow(head, 1, 0, 1)?;
        out.disparity.push(g.sigmoid(disp)?);
        out.log_sigma.push(g.narrow(head, 1, 1, 1)?);
    }
    Ok(out)
}

/// Depth network restricted to the finest disparity.
pub fn depthnet_disparity(g: &mut Graph, p: &Bound, image: Tensor) -> Result<Tensor> {
    Ok(depthnet_forward(g, p, image)?.disparity[0])
}

/// Pose network on channel-stacked pairs `[N, 6, H, W]` = (target, source).
/// Returns `[N, 6]`: axis-angle then translation, scaled by 0.01.
pub fn posenet_forward(g: &mut Graph, p: &Bound, pair: Tensor) -> Result<Tensor> {
    if g.shape(pair).len() != 4 || g.shape(pair)[1] != 6 {
        return Err(Error::shape("posenet_forward", &[g.shape(pair)]));
    }
    let mut f = normalize(g, pair)?;
    for i in 0..POSE_ENCODER.len() {
        f = conv_elu(g, p, &format!("pose.enc{i}"), f, 2)?;
    }
    let o = conv(g, p, "pose.out", f, 1)?;
    let o = g.mean_axis(o, 3)?;
    let o = g.mean_axis(o, 2)?;
    let n = g.shape(o)[0];
    let o = g.reshape(o, &[n, 6])?;
    g.mul_scalar(o, POSE_SCALE)
}

/// Read the per-sample poses out of a [`posenet_forward`] result.
pub fn poses_from_output(g: &Graph, t: Tensor) -> Result<Vec<Pose6DoF>> {
    g.value(t)
        .chunks_exact(6)
        .map(|v| Pose6DoF::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))
        .collect()
}

/// Photometric uncertainty network on `[N, 6, H, W]` pairs (H and W
/// divisible by 16); returns the full-resolution log sigma `[N, 1, H, W]`.
pub fn uncertnet_forward(g: &mut Graph, p: &Bound, pair: Tensor) -> Result<Tensor> {
    if g.shape(pair).len() != 4 || g.shape(pair)[1] != 6 {
        return Err(Error::shape("uncertnet_forward", &[g.shape(pair)]));
    }
    let (h, w) = (g.shape(pair)[2], g.shape(pair)[3]);
    let x = normalize(g, pair)?;
    let feats = encdec(g, p, "uncert.", x, 2)?;
    let half = conv(g, p, "uncert.head0", feats[0], 1)?;
    g.resize_bilinear(half, h, w)
}

fn check_range(d_min: f64, d_max: f64) -> Result<()> {
    if !(d_min > 0.0 && d_min < d_max && d_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("need 0 < d_min < d_max, got [{d_min}, {d_max}]")));
    }
    Ok(())
}

/// `1 / (1/d_max + (1/d_min - 1/d_max) * disp)`.
pub fn disparity_to_depth(g: &mut Graph, disp: Tensor, d_min: f64, d_max: f64) -> Result<Tensor> {
    check_range(d_min, d_max)?;
    let lo = 1.0 / d_max;
    let span = 1.0 / d_min - lo;
    let s = g.mul_scalar(disp, span)?;
    let s = g.add_scalar(s, lo)?;
    let one = g.ones_like(s);
    g.div(one, s)
}

/// Scalar version of [`disparity_to_depth`].
pub fn disparity_to_depth_value(disp: f64, d_min: f64, d_max: f64) -> Result<f64> {
    check_range(d_min, d_max)?;
    if !(0.0..=1.0).contains(&disp) {
        return Err(Error::domain("disparity_to_depth", format!("disparity {disp} outside [0, 1]")));
    }
    Ok(1.0 / (1.0 / d_max + (1.0 / d_min - 1.0 / d_max) * disp))
}

/// Inverse of [`disparity_to_depth_value`].
pub fn depth_to_disparity_value(depth: f64, d_min: f64, d_max: f64) -> Result<f64> {
    check_range(d_min, d_max)?;
    Ok((1.0 / depth - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_shapes_per_scale() {
        let p = NetworkParams::init(1);
        let mut g = Graph::new();
        let b = p.bind(&mut g, &[Net::Depth], false);
        let x = g.full(&[2, 3, 48, 64], 0.3);
        let out = depthnet_forward(&mut g, &b, x).unwrap();
        let expect = [[48, 64], [24, 32], [12, 16], [6, 8]];
        for s in 0..4 {
            assert_eq!(g.shape(out.disparity[s]), &[2, 1, expect[s][0], expect[s][1]]);
            assert_eq!(g.shape(out.log_sigma[s]), &[2, 1, expect[s][0], expect[s][1]]);
        }
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let p = NetworkParams::init(1);
        let mut g = Graph::new();
        let b = p.bind(&mut g, &[Net::Depth], false);
        let x = g.full(&[1, 3, 50, 64], 0.3);
        assert!(depthnet_forward(&mut g, &b, x).is_err());
    }

    #[test]
    fn zero_weights_give_half_disparity_and_identity_pose() {
        let mut p = NetworkParams::init(1);
        p.iter_mut().for_each(|(_, a)| a.data.iter_mut().for_each(|v| *v = 0.0));
        let mut g = Graph::new();
        let b = p.bind(&mut g, &Net::ALL, false);
        let x = g.full(&[1, 3, 16, 16], 0.7);
        let out = depthnet_forward(&mut g, &b, x).unwrap();
        assert!(out.disparity.iter().all(|&d| g.value(d).iter().all(|&v| v == 0.5)));
        let pair = g.full(&[1, 6, 16, 16], 0.2);
        let pose = posenet_forward(&mut g, &b, pair).unwrap();
        assert!(g.value(pose).iter().all(|&v| v == 0.0));
        let ls = uncertnet_forward(&mut g, &b, pair).unwrap();
        assert_eq!(g.shape(ls), &[1, 1, 16, 16]);
        assert!(g.value(ls).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disparity_depth_formula() {
        let d = disparity_to_depth_value(0.5, 0.1, 100.0).unwrap();
        assert!((d - 1.0 / (0.01 + 9.99 * 0.5)).abs() < 1e-15);
        assert!((d - 0.199800).abs() < 1e-6);
        assert!((disparity_to_depth_value(0.0, 0.1, 100.0).unwrap() - 100.0).abs() < 1e-9);
        assert!((disparity_to_depth_value(1.0, 0.1, 100.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(disparity_to_depth_value(0.5, 1.0, 0.5).is_err());
        let back = depth_to_disparity_value(d, 0.1, 100.0).unwrap();
        assert!((back - 0.5).abs() < 1e-12);
    }

    #[test]
    fn init_streams_are_independent() {
        let a = NetworkParams::init(5);
        let b = NetworkParams::init(5);
        let c = NetworkParams::init(6);
        assert_eq!(a, b);
        assert_ne!(a.hash(&[Net::Depth]), c.hash(&[Net::Depth]));
        assert!(a.iter().filter(|(n, _)| n.ends_with("bias")).all(|(_, x)| x.data.iter().all(|&v| v == 0.0)));
    }
}
