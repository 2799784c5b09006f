//! Bit-exact persistence: demonstration episodes, dataset statistics and
//! model checkpoints.
//!
//! Both formats are flat little-endian binary with a 4-byte magic and a
//! version word. Readers validate the declared sizes against the actual
//! file length before touching any payload, so truncated or mutated files
//! fail with a format error instead of a panic.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Scalar, Tensor};

pub const EPISODE_MAGIC: &[u8; 4] = b"IACT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IAPT";
pub const FORMAT_VERSION: u32 = 1;

/// One recorded demonstration: per-timestep joint positions (both arms),
/// the commanded action, and the rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub j_per_arm: u32,
    pub h: u32,
    pub w: u32,
    pub c: u32,
    /// `T * 2J`, row per timestep.
    pub qpos: Vec<f32>,
    /// `T * 2J`, row per timestep.
    pub action: Vec<f32>,
    /// `T * H*W*C`, frame per timestep.
    pub images: Vec<f32>,
}

impl DemoEpisode {
    pub fn len(&self) -> usize {
        let width = 2 * self.j_per_arm as usize;
        if width == 0 {
            0
        } else {
            self.qpos.len() / width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.qpos.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        2 * self.j_per_arm as usize
    }

    pub fn frame_len(&self) -> usize {
        (self.h * self.w * self.c) as usize
    }

    pub fn qpos_at(&self, t: usize) -> &[f32] {
        let w = self.action_dim();
        &self.qpos[t * w..(t + 1) * w]
    }

    pub fn action_at(&self, t: usize) -> &[f32] {
        let w = self.action_dim();
        &self.action[t * w..(t + 1) * w]
    }

    pub fn image_at(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.images[t * n..(t + 1) * n]
    }

    fn check_consistent(&self) -> Result<()> {
        let w = self.action_dim();
        if w == 0 || self.qpos.len() % w != 0 || self.action.len() != self.qpos.len() {
            return Err(Error::dim(format!(
                "episode arrays inconsistent: qpos {} action {} width {w}",
                self.qpos.len(),
                self.action.len()
            )));
        }
        let t = self.qpos.len() / w;
        if self.images.len() != t * self.frame_len() {
            return Err(Error::dim(format!(
                "episode has {t} steps but {} image floats (frame {})",
                self.images.len(),
                self.frame_len()
            )));
        }
        Ok(())
    }
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.offset(),
                format!(
                    "truncated while reading {what}: need {} bytes, file has {}",
                    self.pos + n,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.offset(),
                format!(
                    "trailing bytes: declared sizes end at {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        Ok(())
    }
}

pub fn write_episode(ep: &DemoEpisode, path: &Path) -> Result<()> {
    ep.check_consistent()?;
    let mut w = ByteWriter::new();
    w.bytes(EPISODE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(ep.j_per_arm);
    w.u32(ep.len() as u32);
    w.u32(ep.h);
    w.u32(ep.w);
    w.u32(ep.c);
    w.f32s(&ep.qpos);
    w.f32s(&ep.action);
    w.f32s(&ep.images);
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<DemoEpisode> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    let magic = r.take(4, "magic")?;
    if magic != EPISODE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, want {EPISODE_MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let j = r.u32("j_per_arm")?;
    let t = r.u32("t")?;
    let h = r.u32("h")?;
    let w = r.u32("w")?;
    let c = r.u32("c")?;
    if j == 0 {
        return Err(Error::format(8, "j_per_arm must be positive".to_string()));
    }

    // Validate the declared payload against the true file length before any
    // allocation sized from header fields.
    let qn = (t as u64) * 2 * (j as u64);
    let inum = (t as u64) * (h as u64) * (w as u64) * (c as u64);
    let expect = 28u64 + 4 * (qn * 2 + inum);
    if expect != buf.len() as u64 {
        return Err(Error::format(
            28,
            format!("expected {expect} bytes from header, file has {}", buf.len()),
        ));
    }

    let qpos = r.f32s(qn as usize, "qpos")?;
    let action = r.f32s(qn as usize, "action")?;
    let images = r.f32s(inum as usize, "images")?;
    r.expect_end()?;
    Ok(DemoEpisode {
        j_per_arm: j,
        h,
        w,
        c,
        qpos,
        action,
        images,
    })
}

/// Episode files of a dataset directory, lexicographically sorted.
pub fn list_episode_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "iact").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Per-dimension normalization statistics over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub qpos_mean: Vec<f32>,
    pub qpos_std: Vec<f32>,
    pub action_mean: Vec<f32>,
    pub action_std: Vec<f32>,
}

pub const STD_FLOOR: f32 = 1e-6;

impl NormStats {
    pub fn dim(&self) -> usize {
        self.qpos_mean.len()
    }

    pub fn normalize_qpos(&self, q: &[f32]) -> Vec<f32> {
        q.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.qpos_mean[i]) / self.qpos_std[i])
            .collect()
    }

    pub fn normalize_action(&self, a: &[f32]) -> Vec<f32> {
        a.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.action_mean[i]) / self.action_std[i])
            .collect()
    }

    pub fn denormalize_action(&self, a: &[f32]) -> Vec<f32> {
        a.iter()
            .enumerate()
            .map(|(i, &v)| v * self.action_std[i] + self.action_mean[i])
            .collect()
    }

    /// Register the four vectors as frozen entries so they ride along in
    /// checkpoints.
    pub fn register_into<F: Scalar>(&self, store: &mut ParameterStore<F>) -> Result<()> {
        let mut put = |name: &str, data: &[f32]| -> Result<()> {
            let t = Tensor::from_vec(
                &[data.len()],
                data.iter().map(|&v| F::from_f64(f64::from(v))).collect(),
            )?;
            store.register(name, t, false)?;
            Ok(())
        };
        put("stats.qpos_mean", &self.qpos_mean)?;
        put("stats.qpos_std", &self.qpos_std)?;
        put("stats.action_mean", &self.action_mean)?;
        put("stats.action_std", &self.action_std)?;
        Ok(())
    }

    /// Read back the frozen entries registered by [`register_into`].
    pub fn from_store<F: Scalar>(store: &ParameterStore<F>) -> Result<NormStats> {
        let get = |name: &str| -> Result<Vec<f32>> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::usage(format!("store has no '{name}' entry")))?;
            Ok(store
                .value(id)
                .data()
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect())
        };
        Ok(NormStats {
            qpos_mean: get("stats.qpos_mean")?,
            qpos_std: get("stats.qpos_std")?,
            action_mean: get("stats.action_mean")?,
            action_std: get("stats.action_std")?,
        })
    }
}

/// Single-pass mean/std (population) over all timesteps of all episodes,
/// std floored at 1e-6.
pub fn compute_stats(paths: &[PathBuf]) -> Result<NormStats> {
    if paths.is_empty() {
        return Err(Error::usage("compute_stats: empty dataset"));
    }
    let first = read_episode(&paths[0])?;
    let dim = first.action_dim();

    let mut q_sum = vec![0f64; dim];
    let mut q_sq = vec![0f64; dim];
    let mut a_sum = vec![0f64; dim];
    let mut a_sq = vec![0f64; dim];
    let mut n = 0u64;
    for p in paths {
        let ep = read_episode(p)?;
        if ep.action_dim() != dim {
            return Err(Error::dim(format!(
                "episode {} has action width {}, expected {dim}",
                p.display(),
                ep.action_dim()
            )));
        }
        for t in 0..ep.len() {
            for (i, &v) in ep.qpos_at(t).iter().enumerate() {
                q_sum[i] += f64::from(v);
                q_sq[i] += f64::from(v) * f64::from(v);
            }
            for (i, &v) in ep.action_at(t).iter().enumerate() {
                a_sum[i] += f64::from(v);
                a_sq[i] += f64::from(v) * f64::from(v);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::usage("compute_stats: dataset has no timesteps"));
    }
    let finish = |sum: &[f64], sq: &[f64]| -> (Vec<f32>, Vec<f32>) {
        let mean: Vec<f32> = sum.iter().map(|&s| (s / n as f64) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(sq)
            .map(|(&s, &s2)| {
                let m = s / n as f64;
                let var = (s2 / n as f64 - m * m).max(0.0);
                (var.sqrt() as f32).max(STD_FLOOR)
            })
            .collect();
        (mean, std)
    };
    let (qpos_mean, qpos_std) = finish(&q_sum, &q_sq);
    let (action_mean, action_std) = finish(&a_sum, &a_sq);
    Ok(NormStats {
        qpos_mean,
        qpos_std,
        action_mean,
        action_std,
    })
}

pub fn save_checkpoint<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    path: &Path,
) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(config.digest());
    let ids = store.sorted_ids();
    w.u32(ids.len() as u32);
    for id in ids {
        let name = store.name(id).as_bytes();
        w.u32(name.len() as u32);
        w.bytes(name);
        let t = store.value(id);
        w.u32(t.rank() as u32);
        for &e in t.shape() {
            w.u32(e as u32);
        }
        let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
        w.f32s(&data);
    }
    fs::write(path, &w.buf)?;
    Ok(())
}

/// Raw checkpoint contents: the stored config digest plus named tensors in
/// file order.
pub fn read_checkpoint(path: &Path) -> Result<(u64, Vec<(String, Tensor<f32>)>)> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:?}, want {CHECKPOINT_MAGIC:?}"),
        ));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let digest = r.u64("config digest")?;
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for i in 0..count {
        let off = r.offset();
        let name_len = r.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(Error::format(off, format!("entry {i}: name length {name_len} unreasonable")));
        }
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::format(off, format!("entry {i}: name is not utf-8")))?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(off, format!("entry {i} '{name}': rank {rank} unreasonable")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = r.u32("extent")? as u64;
            if e == 0 {
                return Err(Error::format(off, format!("entry {i} '{name}': zero extent")));
            }
            numel = numel.saturating_mul(e);
            shape.push(e as usize);
        }
        // bound the payload by the remaining file size before allocating
        if numel.saturating_mul(4) > (buf.len() as u64).saturating_sub(r.offset()) {
            return Err(Error::format(
                r.offset(),
                format!("entry {i} '{name}': declared {numel} floats exceed file size"),
            ));
        }
        let data = r.f32s(numel as usize, "tensor data")?;
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    r.expect_end()?;
    Ok((digest, entries))
}

/// Load a checkpoint into an already-built store. The config digest must
/// match unless `force`; names and shapes must match exactly either way.
pub fn load_checkpoint_into<F: Scalar>(
    store: &mut ParameterStore<F>,
    config: &ModelConfig,
    path: &Path,
    force: bool,
) -> Result<()> {
    let (digest, entries) = read_checkpoint(path)?;
    let want = config.digest();
    if digest != want && !force {
        return Err(Error::usage(format!(
            "checkpoint config digest {digest:016x} does not match current config {want:016x} \
             (pass force to override)"
        )));
    }
    if entries.len() != store.len() {
        return Err(Error::usage(format!(
            "checkpoint has {} entries, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, tensor) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::usage(format!("checkpoint entry '{name}' unknown to the model")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::dim(format!(
                "checkpoint entry '{name}': shape {:?} vs model {:?}",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        store.set_value(id, tensor.cast::<F>())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn temp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("interact-io-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    fn rand_episode(seed: u64, j: u32, t: usize, h: u32, w: u32, c: u32) -> DemoEpisode {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let width = 2 * j as usize;
        let frame = (h * w * c) as usize;
        DemoEpisode {
            j_per_arm: j,
            h,
            w,
            c,
            qpos: (0..t * width).map(|_| r.random_range(-2.0..2.0)).collect(),
            action: (0..t * width).map(|_| r.random_range(-2.0..2.0)).collect(),
            images: (0..t * frame).map(|_| r.random_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn episode_round_trip_is_byte_exact() {
        let dir = temp_dir("ep");
        let ep = rand_episode(1, 4, 17, 8, 8, 1);
        let p = dir.join("a.iact");
        write_episode(&ep, &p).unwrap();
        let back = read_episode(&p).unwrap();
        assert_eq!(ep, back);
        let p2 = dir.join("b.iact");
        write_episode(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn episode_payload_size_matches_header_arithmetic() {
        let dir = temp_dir("size");
        let ep = rand_episode(2, 4, 200, 64, 64, 1);
        let p = dir.join("sz.iact");
        write_episode(&ep, &p).unwrap();
        let expect = 28 + (200 * 8 * 4) + (200 * 8 * 4) + (200 * 4096 * 4);
        assert_eq!(fs::metadata(&p).unwrap().len(), expect as u64);
    }

    #[test]
    fn truncated_episode_names_expected_and_actual() {
        let dir = temp_dir("trunc");
        let ep = rand_episode(3, 2, 5, 4, 4, 1);
        let p = dir.join("t.iact");
        write_episode(&ep, &p).unwrap();
        let full = fs::read(&p).unwrap();
        fs::write(&p, &full[..full.len() - 7]).unwrap();
        let err = read_episode(&p).unwrap_err();
        match err {
            Error::Format { offset: _, msg } => {
                assert!(msg.contains(&format!("{}", full.len())), "{msg}");
                assert!(msg.contains(&format!("{}", full.len() - 7)), "{msg}");
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let dir = temp_dir("magic");
        let p = dir.join("m.iact");
        fs::write(&p, b"NOPE0000000000000000000000000000").unwrap();
        match read_episode(&p).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn stats_of_constant_dataset_floor_std() {
        let dir = temp_dir("stats-const");
        let mut ep = rand_episode(4, 2, 6, 4, 4, 1);
        for v in ep.qpos.iter_mut().chain(ep.action.iter_mut()) {
            *v = 0.7;
        }
        let p = dir.join("c.iact");
        write_episode(&ep, &p).unwrap();
        let s = compute_stats(&[p]).unwrap();
        assert!(s.qpos_std.iter().all(|&v| v == STD_FLOOR));
        assert!(s.action_std.iter().all(|&v| v == STD_FLOOR));
        assert!(s.qpos_mean.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn stats_of_two_value_dataset() {
        let dir = temp_dir("stats-two");
        let mut ep = rand_episode(5, 2, 2, 4, 4, 1);
        for (i, v) in ep.qpos.iter_mut().enumerate() {
            *v = if i < 4 { 0.0 } else { 2.0 }; // first step all 0, second all 2
        }
        for (i, v) in ep.action.iter_mut().enumerate() {
            *v = if i < 4 { 0.0 } else { 2.0 };
        }
        let p = dir.join("two.iact");
        write_episode(&ep, &p).unwrap();
        let s = compute_stats(&[p]).unwrap();
        for i in 0..4 {
            assert!((s.qpos_mean[i] - 1.0).abs() < 1e-7);
            assert!((s.qpos_std[i] - 1.0).abs() < 1e-7);
            assert!((s.action_mean[i] - 1.0).abs() < 1e-7);
            assert!((s.action_std[i] - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn streaming_stats_match_two_pass_oracle() {
        let dir = temp_dir("stats-oracle");
        let mut paths = Vec::new();
        for i in 0..3 {
            let ep = rand_episode(10 + i, 3, 11, 4, 4, 1);
            let p = dir.join(format!("o{i}.iact"));
            write_episode(&ep, &p).unwrap();
            paths.push(p);
        }
        let got = compute_stats(&paths).unwrap();

        // two-pass reference
        let eps: Vec<DemoEpisode> = paths.iter().map(|p| read_episode(p).unwrap()).collect();
        let dim = 6;
        let n: usize = eps.iter().map(|e| e.len()).sum();
        let mut mean = vec![0f64; dim];
        for e in &eps {
            for t in 0..e.len() {
                for (i, &v) in e.qpos_at(t).iter().enumerate() {
                    mean[i] += f64::from(v);
                }
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0f64; dim];
        for e in &eps {
            for t in 0..e.len() {
                for (i, &v) in e.qpos_at(t).iter().enumerate() {
                    var[i] += (f64::from(v) - mean[i]).powi(2);
                }
            }
        }
        for (i, v) in var.iter().enumerate() {
            let std = (v / n as f64).sqrt();
            assert!((f64::from(got.qpos_mean[i]) - mean[i]).abs() < 1e-6);
            assert!((f64::from(got.qpos_std[i]) - std).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_dataset_is_a_usage_error() {
        assert!(matches!(compute_stats(&[]), Err(Error::Usage(_))));
    }

    fn small_store(seed: u64) -> ParameterStore<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        for (name, shape) in [("b.w", vec![3usize, 2]), ("a.bias", vec![4]), ("z.t", vec![2, 2])] {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            s.register(name, Tensor::from_vec(&shape, data).unwrap(), true)
                .unwrap();
        }
        s
    }

    #[test]
    fn checkpoint_save_load_save_is_idempotent() {
        let dir = temp_dir("ckpt");
        let cfg = ModelConfig::desk();
        let store = small_store(1);
        let p1 = dir.join("one.iapt");
        save_checkpoint(&store, &cfg, &p1).unwrap();

        let mut store2 = small_store(2);
        load_checkpoint_into(&mut store2, &cfg, &p1, false).unwrap();
        let p2 = dir.join("two.iapt");
        save_checkpoint(&store2, &cfg, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_digest_mismatch_reports_both_digests() {
        let dir = temp_dir("digest");
        let cfg = ModelConfig::desk();
        let store = small_store(3);
        let p = dir.join("d.iapt");
        save_checkpoint(&store, &cfg, &p).unwrap();

        let mut other_cfg = cfg.clone();
        other_cfg.lr = 0.5;
        let mut store2 = small_store(4);
        let err = load_checkpoint_into(&mut store2, &other_cfg, &p, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("{:016x}", cfg.digest())), "{msg}");
        assert!(msg.contains(&format!("{:016x}", other_cfg.digest())), "{msg}");
        // force overrides
        load_checkpoint_into(&mut store2, &other_cfg, &p, true).unwrap();
    }

    #[test]
    fn checkpoint_fuzz_never_panics() {
        let dir = temp_dir("fuzz");
        let cfg = ModelConfig::desk();
        let store = small_store(5);
        let p = dir.join("f.iapt");
        save_checkpoint(&store, &cfg, &p).unwrap();
        let good = fs::read(&p).unwrap();

        let mut r = ChaCha8Rng::seed_from_u64(99);
        let fp = dir.join("mut.iapt");
        for i in 0..300 {
            let mut bytes = good.clone();
            match i % 3 {
                0 => {
                    let cut = r.random_range(0..bytes.len());
                    bytes.truncate(cut);
                }
                1 => {
                    let at = r.random_range(0..bytes.len());
                    bytes[at] ^= 1 << r.random_range(0..8);
                }
                _ => {
                    let at = r.random_range(0..bytes.len());
                    let n = r.random_range(1..16usize).min(bytes.len() - at);
                    for b in &mut bytes[at..at + n] {
                        *b = r.random();
                    }
                }
            }
            fs::write(&fp, &bytes).unwrap();
            let _ = read_checkpoint(&fp); // must return, never crash
        }
    }
}
