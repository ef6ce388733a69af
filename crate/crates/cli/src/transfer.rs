//! `style-transfer`: re-render an image from one context as another, using
//! the per-channel moments a trained checkpoint learned for each context.
//!
//! Images move through PNG (8-bit, values scaled to [0, 1]) or through a raw
//! tensor file for lossless round trips: magic `NLTENS01`, four u32 LE dims
//! (N, C, H, W), then f32 LE values.

use std::path::Path;

use normlab_core::context::{CnMode, CnSpec, ContextNorm};
use normlab_core::param::ParamStore;
use normlab_core::{checkpoint, Error, Result, Shape4, Tensor4};

const RAW_MAGIC: &[u8; 8] = b"NLTENS01";

pub fn read_raw_tensor(path: &Path) -> Result<Tensor4<f64>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 24 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::format(0, "not a raw tensor file (bad magic)".to_string()));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("sized")) as usize
    };
    let shape = Shape4::new(dim(0), dim(1), dim(2), dim(3));
    let need = 24 + 4 * shape.numel();
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need) as u64,
            format!("raw tensor of shape {shape} needs {need} bytes, file has {}", bytes.len()),
        ));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("sized")) as f64)
        .collect();
    Tensor4::from_vec(shape, data)
}

pub fn write_raw_tensor(path: &Path, t: &Tensor4<f64>) -> Result<()> {
    let s = t.shape();
    let mut out = Vec::with_capacity(24 + 4 * s.numel());
    out.extend_from_slice(RAW_MAGIC);
    for d in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(std::fs::write(path, out)?)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_png(path: &Path) -> Result<Tensor4<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("cannot decode {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor4::from_vec(Shape4::new(1, 3, h, w), data)
}

fn write_png(path: &Path, t: &Tensor4<f64>) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Input(format!(
            "PNG output needs a single 3-channel image, got {s}"
        )));
    }
    let d = t.data();
    let mut img = image::RgbImage::new(s.w as u32, s.h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = d[(c * s.h + y as usize) * s.w + x as usize];
            p.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn read_image(path: &Path) -> Result<Tensor4<f64>> {
    if is_png(path) {
        read_png(path)
    } else {
        read_raw_tensor(path)
    }
}

pub fn write_image(path: &Path, t: &Tensor4<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    if is_png(path) {
        write_png(path, t)
    } else {
        write_raw_tensor(path, t)
    }
}

/// Rebuild the context layer a checkpoint contains. The table shapes pin the
/// layer down: `<prefix>.w_r` is contexts × embedding and `<prefix>.w_mu` is
/// embedding × channels.
pub fn context_layer_from(
    store: &ParamStore<f64>,
    epsilon: f64,
) -> Result<(ContextNorm, ParamStore<f64>)> {
    let prefix = store
        .names()
        .find_map(|n| n.strip_suffix(".w_r"))
        .map(str::to_string)
        .ok_or_else(|| Error::Input("checkpoint has no context table".into()))?;
    let wr = store.tensor(&format!("{prefix}.w_r"))?.shape();
    let wmu = store.tensor(&format!("{prefix}.w_mu"))?.shape();
    let (contexts, embed_dim, channels) = (wr.n, wr.c, wmu.c);

    let spec = CnSpec { contexts, embed_dim, mode: CnMode::Channels, epsilon };
    let mut rebuilt = ParamStore::new();
    let cn = ContextNorm::init(&mut rebuilt, &prefix, channels, &spec, 0)?;
    for suffix in ["w_r", "b_r", "w_mu", "b_mu", "w_sigma", "b_sigma"] {
        let name = format!("{prefix}.{suffix}");
        let src = store.tensor(&name)?;
        let dst = rebuilt.get_mut(&name)?;
        if dst.tensor.shape() != src.shape() {
            return Err(Error::Input(format!(
                "context table entry '{name}' has shape {}, expected {}",
                src.shape(),
                dst.tensor.shape()
            )));
        }
        dst.tensor = src.clone();
    }
    Ok((cn, rebuilt))
}

pub fn cmd_style_transfer(
    ckpt: &Path,
    input: &Path,
    from: usize,
    to: usize,
    out: &Path,
    epsilon: f64,
) -> Result<()> {
    let store = checkpoint::load::<f64>(ckpt)?;
    let (cn, params) = context_layer_from(&store, epsilon)?;
    if from >= cn.contexts() || to >= cn.contexts() {
        return Err(Error::Input(format!(
            "contexts {from} -> {to} out of range (checkpoint has {})",
            cn.contexts()
        )));
    }
    let x = read_image(input)?;
    let y = cn.style_transfer(&params, &x, from, to)?;
    write_image(out, &y)?;
    eprintln!(
        "rendered {} as context {to} (was {from}) -> {}",
        input.display(),
        out.display()
    );
    Ok(())
}
