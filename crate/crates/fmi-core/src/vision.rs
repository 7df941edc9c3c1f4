//! A deterministic stand-in for the vision side: frame sampling, tiling,
//! 2×2 adaptive pooling, shared temporal encoding, and a seeded linear patch
//! encoder that turns pixels into model-width tokens.

use std::path::Path;

use crate::conditioning::VisualContext;
use crate::error::{config_err, dim_err, Error, Result};
use crate::io::TensorStore;
use crate::rng::Rng;
use crate::tensor::{matmul, sinusoidal, Tensor};

fn range_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Range(msg.into()))
}

/// Pixels `[H×W×ch]`, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Tensor,
}

impl ImageGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        let &[height, width, channels] = data.shape() else {
            return dim_err(format!("image must be H×W×ch, got {:?}", data.shape()));
        };
        if height == 0 || width == 0 || channels == 0 {
            return dim_err("image dimensions must be positive");
        }
        Ok(ImageGrid { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        ImageGrid::new(Tensor::zeros(&[height, width, channels]))
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let data = Tensor::from_fn(&[height, width, channels], |i| {
            f(i / (width * channels), (i / channels) % width, i % channels)
        });
        ImageGrid::new(data)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data.data()[(y * self.width + x) * self.channels + c]
    }

    /// Horizontal-plus-vertical ramp in `[0, 1]`, channel `c` offset by `c/ch`.
    pub fn gradient(height: usize, width: usize, channels: usize) -> Result<Self> {
        ImageGrid::from_fn(height, width, channels, |y, x, c| {
            let base = (y as f64 / height as f64 + x as f64 / width as f64) / 2.0;
            (base + c as f64 / channels as f64).fract()
        })
    }

    /// Alternating `0` / `1` squares of side `cell`.
    pub fn checkerboard(height: usize, width: usize, channels: usize, cell: usize) -> Result<Self> {
        if cell == 0 {
            return config_err("checkerboard cell must be positive");
        }
        ImageGrid::from_fn(height, width, channels, |y, x, _| ((y / cell + x / cell) % 2) as f64)
    }

    pub fn noise(height: usize, width: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        ImageGrid::new(rng.uniform_tensor(&[height, width, channels], 0.0, 1.0))
    }

    /// Planar `[ch×H×W]` layout used on disk.
    pub fn to_planar(&self) -> Tensor {
        let (h, w, ch) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[ch, h, w], |i| self.get((i / w) % h, i % w, i / (h * w)))
    }

    pub fn from_planar(planar: &Tensor) -> Result<Self> {
        let &[ch, h, w] = planar.shape() else {
            return dim_err(format!("planar image must be ch×H×W, got {:?}", planar.shape()));
        };
        ImageGrid::from_fn(h, w, ch, |y, x, c| planar.data()[(c * h + y) * w + x])
    }

    /// Writes the image as a one-tensor manifest named `image`.
    pub fn write(&self, manifest: &Path) -> Result<()> {
        let mut store = TensorStore::new();
        store.insert("image", self.to_planar())?;
        store.write(manifest)
    }

    pub fn read(manifest: &Path) -> Result<Self> {
        let store = TensorStore::read(manifest)?;
        let planar = store.get("image").ok_or_else(|| Error::Parse("manifest has no image tensor".into()))?;
        ImageGrid::from_planar(planar)
    }
}

/// Frames with their indices in the source video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub frames: Vec<ImageGrid>,
    pub timestamps: Vec<usize>,
}

impl FrameSet {
    pub fn new(frames: Vec<ImageGrid>, timestamps: Vec<usize>) -> Result<Self> {
        if frames.is_empty() || frames.len() != timestamps.len() {
            return dim_err(format!("{} frames with {} timestamps", frames.len(), timestamps.len()));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return range_err("timestamps must be strictly increasing");
        }
        let first = &frames[0];
        if frames.iter().any(|f| (f.height, f.width, f.channels) != (first.height, first.width, first.channels)) {
            return dim_err("frames differ in size");
        }
        Ok(FrameSet { frames, timestamps })
    }

    /// Samples `k` frames from a synthetic clip of `video_len` frames whose
    /// frame `n` is a gradient image shifted by `n` pixels.
    pub fn synthetic(video_len: usize, k: usize, side: usize, channels: usize) -> Result<Self> {
        let idx = sample_frames(video_len, k)?;
        let base = ImageGrid::gradient(side, side, channels)?;
        let frames = idx
            .iter()
            .map(|&n| ImageGrid::from_fn(side, side, channels, |y, x, c| base.get(y, (x + n) % side, c)))
            .collect::<Result<Vec<_>>>()?;
        FrameSet::new(frames, idx)
    }
}

/// `round(j·(n−1)/(k−1))` for `j` in `0..k`; `{0}` when `k = 1`.
pub fn sample_frames(video_len: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return range_err("cannot sample zero frames");
    }
    if k > video_len {
        return range_err(format!("cannot sample {k} frames from {video_len}"));
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    let step = (video_len - 1) as f64 / (k - 1) as f64;
    let idx: Vec<usize> = (0..k).map(|j| (j as f64 * step).round() as usize).collect();
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return range_err(format!("sampling {k} of {video_len} frames repeats an index"));
    }
    Ok(idx)
}

/// Zero-pads right and bottom to multiples of `tile` and splits into
/// `tile×tile` pieces, row-major.
pub fn tile_image(img: &ImageGrid, tile: usize) -> Result<Vec<ImageGrid>> {
    if tile == 0 {
        return config_err("tile side must be positive");
    }
    let rows = img.height.div_ceil(tile);
    let cols = img.width.div_ceil(tile);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(ImageGrid::from_fn(tile, tile, img.channels, |y, x, ch| {
                let (sy, sx) = (r * tile + y, c * tile + x);
                if sy < img.height && sx < img.width {
                    img.get(sy, sx, ch)
                } else {
                    0.0
                }
            })?);
        }
    }
    Ok(out)
}

/// Inverse of [`tile_image`]: the padded image from `rows × cols` tiles.
pub fn untile(tiles: &[ImageGrid], rows: usize, cols: usize) -> Result<ImageGrid> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return dim_err(format!("{} tiles for a {rows}×{cols} layout", tiles.len()));
    }
    let (th, tw, ch) = (tiles[0].height, tiles[0].width, tiles[0].channels);
    if tiles.iter().any(|t| (t.height, t.width, t.channels) != (th, tw, ch)) {
        return dim_err("tiles differ in size");
    }
    ImageGrid::from_fn(rows * th, cols * tw, ch, |y, x, c| tiles[(y / th) * cols + x / tw].get(y % th, x % tw, c))
}

/// Adaptive average pooling of `[gh×gw×C]` to `[⌈gh/2⌉×⌈gw/2⌉×C]`. Output
/// bin `i` of `t` covers input rows `⌊i·g/t⌋ .. ⌊(i+1)·g/t⌋ − 1`.
pub fn pool_adaptive_2x2(tokens: &Tensor) -> Result<Tensor> {
    let &[gh, gw, c] = tokens.shape() else {
        return dim_err(format!("pooling expects g×g×C, got {:?}", tokens.shape()));
    };
    if gh == 0 || gw == 0 {
        return dim_err("pooling needs a non-empty grid");
    }
    let (th, tw) = (gh.div_ceil(2), gw.div_ceil(2));
    let bins = |i: usize, g: usize, t: usize| (i * g / t)..((i + 1) * g / t);
    let src = tokens.data();
    let mut out = Tensor::zeros(&[th, tw, c]);
    let dst = out.data_mut();
    for i in 0..th {
        for j in 0..tw {
            let (ri, rj) = (bins(i, gh, th), bins(j, gw, tw));
            let n = (ri.len() * rj.len()) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in ri.clone() {
                    for x in rj.clone() {
                        acc += src[(y * gw + x) * c + ch];
                    }
                }
                dst[(i * tw + j) * c + ch] = acc / n;
            }
        }
    }
    Ok(out)
}

/// Tokens kept per frame of a `g×g` patch grid.
pub fn pooled_tokens_per_frame(grid: usize) -> usize {
    grid.div_ceil(2).pow(2)
}

/// Concatenates frames in order and adds the sinusoidal code of the frame
/// index to every token of that frame.
pub fn temporal_encode(frame_tokens: &[Tensor]) -> Result<Tensor> {
    let Some(first) = frame_tokens.first() else {
        return dim_err("no frames to encode");
    };
    let (n, c) = first.dims2()?;
    let mut out = Tensor::zeros(&[frame_tokens.len() * n, c]);
    for (f, tokens) in frame_tokens.iter().enumerate() {
        if tokens.shape() != [n, c] {
            return dim_err(format!("frame {f} has shape {:?}, expected [{n}, {c}]", tokens.shape()));
        }
        let code = sinusoidal(f, c);
        for i in 0..n {
            for (j, o) in out.row_mut(f * n + i).iter_mut().enumerate() {
                *o = tokens.at2(i, j) + code[j];
            }
        }
    }
    Ok(out)
}

/// Bias-free patch projection `[(patch²·ch) × C]` drawn from `seed`.
pub fn stub_projection(patch: usize, image_channels: usize, channels: usize, seed: u64) -> Tensor {
    let fan_in = patch * patch * image_channels;
    Rng::new(seed).normal_tensor(&[fan_in, channels], 1.0 / (fan_in as f64).sqrt())
}

/// Patch grid `(rows, cols)` of an image: non-overlapping, trailing partial
/// patches dropped.
pub fn patch_grid(img: &ImageGrid, patch: usize) -> (usize, usize) {
    (img.height / patch, img.width / patch)
}

/// Flattens each `patch×patch` block (row, column, channel order) and
/// projects it with `proj`. Returns `[N×C]`, patches in row-major order.
pub fn encode_stub(img: &ImageGrid, patch: usize, proj: &Tensor) -> Result<Tensor> {
    if patch == 0 {
        return config_err("patch side must be positive");
    }
    let (gh, gw) = patch_grid(img, patch);
    if gh == 0 || gw == 0 {
        return dim_err(format!("{}×{} image is smaller than one {patch}-pixel patch", img.height, img.width));
    }
    let fan_in = patch * patch * img.channels;
    if proj.dims2()?.0 != fan_in {
        return dim_err(format!("projection expects {} inputs, patches have {fan_in}", proj.rows()));
    }
    let flat = Tensor::from_fn(&[gh * gw, fan_in], |i| {
        let (p, k) = (i / fan_in, i % fan_in);
        let (py, px) = (p / gw, p % gw);
        let (dy, rest) = (k / (patch * img.channels), k % (patch * img.channels));
        let (dx, ch) = (rest / img.channels, rest % img.channels);
        img.get(py * patch + dy, px * patch + dx, ch)
    });
    matmul(&flat, proj)
}

/// Settings of the stub vision tower.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub patch: usize,
    pub image_channels: usize,
    pub proj: Tensor,
}

impl PatchEncoder {
    pub fn new(patch: usize, image_channels: usize, channels: usize, seed: u64) -> Self {
        PatchEncoder { patch, image_channels, proj: stub_projection(patch, image_channels, channels, seed) }
    }

    pub fn channels(&self) -> usize {
        self.proj.row_len()
    }

    /// All tiles of `img`, each encoded, concatenated in tile order.
    pub fn encode_image(&self, img: &ImageGrid, tile: usize) -> Result<VisualContext> {
        let tiles = tile_image(img, tile)?;
        let encoded = tiles.iter().map(|t| encode_stub(t, self.patch, &self.proj)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = encoded.iter().collect();
        let tag = if tiles.len() == 1 { "image" } else { "tiles" };
        VisualContext::new(Tensor::concat_rows(&refs)?, tag)
    }

    /// Encodes each frame, pools its patch grid, adds the frame code.
    /// Yields `k·⌈g/2⌉²` tokens for a `g×g` grid.
    pub fn encode_video(&self, frames: &FrameSet) -> Result<VisualContext> {
        let c = self.channels();
        let pooled = frames
            .frames
            .iter()
            .map(|f| {
                let (gh, gw) = patch_grid(f, self.patch);
                let tokens = encode_stub(f, self.patch, &self.proj)?.reshape(&[gh, gw, c])?;
                let p = pool_adaptive_2x2(&tokens)?;
                let n = p.len() / c;
                p.reshape(&[n, c])
            })
            .collect::<Result<Vec<_>>>()?;
        VisualContext::new(temporal_encode(&pooled)?, "frames")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn frame_sampling_examples() {
        assert_eq!(sample_frames(100, 4).unwrap(), vec![0, 33, 66, 99]);
        assert_eq!(sample_frames(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(sample_frames(1, 1).unwrap(), vec![0]);
        assert!(matches!(sample_frames(3, 4), Err(Error::Range(_))));
        assert!(sample_frames(3, 0).is_err());
    }

    #[test]
    fn tiling_examples() {
        let img = ImageGrid::gradient(672, 672, 1).unwrap();
        let tiles = tile_image(&img, 336).unwrap();
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[1].get(0, 0, 0), img.get(0, 336, 0));
        assert_eq!(tiles[2].get(5, 7, 0), img.get(341, 7, 0));

        let img = ImageGrid::gradient(400, 336, 2).unwrap();
        let tiles = tile_image(&img, 336).unwrap();
        assert_eq!(tiles.len(), 2);
        assert_eq!(tiles[1].get(63, 0, 1), img.get(399, 0, 1));
        assert_eq!(tiles[1].get(64, 0, 1), 0.0);

        let img = ImageGrid::checkerboard(336, 336, 3, 14).unwrap();
        assert_eq!(tile_image(&img, 336).unwrap(), vec![img]);
    }

    #[test]
    fn pooling_examples() {
        let g = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_adaptive_2x2(&g).unwrap().data(), &[2.5]);
        let g = Tensor::new(vec![4, 4, 1], (1..=16).map(f64::from).collect()).unwrap();
        assert_eq!(pool_adaptive_2x2(&g).unwrap().data(), &[3.5, 5.5, 11.5, 13.5]);
        let g = Tensor::new(vec![1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(pool_adaptive_2x2(&g).unwrap(), g);
    }

    #[test]
    fn odd_grid_uses_floor_bins() {
        // g=3, t=2: bins {0} and {1,2}
        let g = Tensor::new(vec![3, 3, 1], (0..9).map(f64::from).collect()).unwrap();
        let p = pool_adaptive_2x2(&g).unwrap();
        assert_eq!(p.shape(), &[2, 2, 1]);
        assert_eq!(p.data(), &[0.0, 1.5, 4.5, 6.0]);
    }

    #[test]
    fn temporal_codes() {
        let mut rng = Rng::new(3);
        let frames: Vec<Tensor> = (0..2).map(|_| rng.normal_tensor(&[3, 6], 1.0)).collect();
        let out = temporal_encode(&frames).unwrap();
        assert_eq!(out.shape(), &[6, 6]);
        let zero = temporal_encode(&[Tensor::zeros(&[2, 6])]).unwrap();
        assert_eq!(zero.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(zero.row(1), zero.row(0));
        for i in 0..3 {
            for j in 0..6 {
                let a = out.at2(3 + i, j) - out.at2(3, j);
                let b = frames[1].at2(i, j) - frames[1].at2(0, j);
                assert!((a - b).abs() <= 1e-15);
            }
        }
        let bad = vec![rng.normal_tensor(&[3, 6], 1.0), rng.normal_tensor(&[2, 6], 1.0)];
        assert!(matches!(temporal_encode(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn encoder_token_counts() {
        let enc = PatchEncoder::new(14, 3, 8, 0);
        let clip = ImageGrid::gradient(336, 336, 3).unwrap();
        assert_eq!(encode_stub(&clip, 14, &enc.proj).unwrap().shape(), &[576, 8]);
        let siglip = ImageGrid::gradient(384, 384, 3).unwrap();
        assert_eq!(encode_stub(&siglip, 14, &enc.proj).unwrap().shape(), &[729, 8]);
        let zero = ImageGrid::zeros(28, 28, 3).unwrap();
        assert!(encode_stub(&zero, 14, &enc.proj).unwrap().data().iter().all(|&x| x == 0.0));
        let hd = ImageGrid::gradient(672, 672, 3).unwrap();
        assert_eq!(enc.encode_image(&hd, 336).unwrap().len(), 4 * 576);
    }

    #[test]
    fn encoder_is_deterministic() {
        let img = ImageGrid::checkerboard(42, 42, 3, 7).unwrap();
        let a = PatchEncoder::new(14, 3, 8, 5).encode_image(&img, 42).unwrap();
        let b = PatchEncoder::new(14, 3, 8, 5).encode_image(&img, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn video_pipeline_token_count() {
        let enc = PatchEncoder::new(4, 1, 8, 1);
        for (side, g) in [(20, 5usize), (24, 6)] {
            let frames = FrameSet::synthetic(30, 3, side, 1).unwrap();
            let v = enc.encode_video(&frames).unwrap();
            assert_eq!(v.len(), 3 * pooled_tokens_per_frame(g));
            assert_eq!(v.source_tag(), "frames");
        }
    }

    #[test]
    fn image_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.manifest");
        let img = ImageGrid::gradient(5, 7, 3).unwrap();
        img.write(&path).unwrap();
        assert_eq!(ImageGrid::read(&path).unwrap(), img);
    }

    #[test]
    fn frame_set_validation() {
        let f = ImageGrid::zeros(2, 2, 1).unwrap();
        assert!(FrameSet::new(vec![f.clone(), f.clone()], vec![3, 3]).is_err());
        assert!(FrameSet::new(vec![f.clone(), ImageGrid::zeros(3, 2, 1).unwrap()], vec![0, 1]).is_err());
        assert!(FrameSet::new(vec![f], vec![0]).is_ok());
    }

    proptest! {
        #[test]
        fn tiles_reassemble_losslessly(h in 1usize..20, w in 1usize..20, tile in 1usize..9, seed in any::<u64>()) {
            let img = ImageGrid::noise(h, w, 2, &mut Rng::new(seed)).unwrap();
            let tiles = tile_image(&img, tile).unwrap();
            let (rows, cols) = (h.div_ceil(tile), w.div_ceil(tile));
            prop_assert_eq!(tiles.len(), rows * cols);
            let back = untile(&tiles, rows, cols).unwrap();
            for y in 0..back.height {
                for x in 0..back.width {
                    for c in 0..2 {
                        let expected = if y < h && x < w { img.get(y, x, c) } else { 0.0 };
                        prop_assert_eq!(back.get(y, x, c), expected);
                    }
                }
            }
        }

        #[test]
        fn pooling_preserves_mean(g in 1usize..12, seed in any::<u64>()) {
            let grid = Rng::new(seed).normal_tensor(&[g, g, 2], 1.0);
            let p = pool_adaptive_2x2(&grid).unwrap();
            let t = g.div_ceil(2);
            prop_assert_eq!(p.shape(), &[t, t, 2]);
            for ch in 0..2 {
                let mean_in = (0..g * g).map(|i| grid.data()[i * 2 + ch]).sum::<f64>() / (g * g) as f64;
                // bin-size weighted mean of the pooled grid
                let size = |i: usize| ((i + 1) * g / t - i * g / t) as f64;
                let mut weighted = 0.0;
                for i in 0..t {
                    for j in 0..t {
                        weighted += p.data()[(i * t + j) * 2 + ch] * size(i) * size(j);
                    }
                }
                prop_assert!((weighted / (g * g) as f64 - mean_in).abs() <= 1e-12);
                if g % 2 == 0 {
                    let mean_out = (0..t * t).map(|i| p.data()[i * 2 + ch]).sum::<f64>() / (t * t) as f64;
                    prop_assert!((mean_out - mean_in).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn sampled_frames_span_endpoints(n in 1usize..300, k in 1usize..300) {
            prop_assume!(k <= n);
            let idx = sample_frames(n, k).unwrap();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(idx[0], 0);
            if k >= 2 {
                prop_assert_eq!(*idx.last().unwrap(), n - 1);
            }
        }
    }
}
