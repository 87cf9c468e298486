//! Raw detector-head tensors, the `YXT1` stream file format, and the
//! inference-backend port.
//!
//! A stream file is little-endian throughout:
//!
//! ```text
//! "YXT1" | u32 version | u32 num_classes | u32 image_width | u32 image_height
//!        | u32 stride[0] | u32 stride[1] | u32 stride[2] | u32 frame_count
//! per frame:
//!   u32 frame_index
//!   3 x ( u32 grid_h | u32 grid_w | u32 channels | grid_h*grid_w*channels f32 )
//! ```
//!
//! Tensors are channels-last, row-major: element `(y, x, c)` lives at
//! `(y * grid_w + x) * channels + c`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"YXT1";
pub const FORMAT_VERSION: u32 = 1;

/// Number of stride levels every frame carries.
pub const LEVELS: usize = 3;

/// Box regression (4) + objectness (1).
pub const BOX_CHANNELS: u32 = 5;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("bad magic: expected \"YXT1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("frame {frame_index}: geometry mismatch: {detail}")]
    GeometryMismatch { frame_index: u32, detail: String },
    #[error("stream truncated while reading frame {frame_index}")]
    Truncated { frame_index: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One stride level's head output, shape `(grid_h, grid_w, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    pub grid_h: u32,
    pub grid_w: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl HeadTensor {
    pub fn filled(grid_h: u32, grid_w: u32, channels: u32, value: f32) -> Self {
        let len = grid_h as usize * grid_w as usize * channels as usize;
        Self {
            grid_h,
            grid_w,
            channels,
            data: vec![value; len],
        }
    }

    #[inline]
    pub fn offset(&self, y: u32, x: u32) -> usize {
        (y as usize * self.grid_w as usize + x as usize) * self.channels as usize
    }

    /// The channel vector of cell `(y, x)`.
    #[inline]
    pub fn cell(&self, y: u32, x: u32) -> &[f32] {
        let o = self.offset(y, x);
        &self.data[o..o + self.channels as usize]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: u32, x: u32) -> &mut [f32] {
        let o = self.offset(y, x);
        let c = self.channels as usize;
        &mut self.data[o..o + c]
    }

    fn expected_len(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize * self.channels as usize
    }
}

/// The three per-stride head outputs for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensorSet {
    pub frame_index: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub outputs: [HeadTensor; LEVELS],
}

impl RawTensorSet {
    /// A frame where every element equals `value` (e.g. a background logit).
    pub fn filled(header: &TensorStreamHeader, frame_index: u32, value: f32) -> Self {
        let channels = header.channels();
        let outputs = header.strides.map(|s| {
            HeadTensor::filled(
                header.image_height / s,
                header.image_width / s,
                channels,
                value,
            )
        });
        Self {
            frame_index,
            image_width: header.image_width,
            image_height: header.image_height,
            outputs,
        }
    }

    pub fn num_classes(&self) -> u32 {
        self.outputs[0].channels.saturating_sub(BOX_CHANNELS)
    }

    /// Checks this frame against the header's image size, strides and class count.
    pub fn check_geometry(&self, header: &TensorStreamHeader) -> Result<(), TensorIoError> {
        let mismatch = |detail: String| TensorIoError::GeometryMismatch {
            frame_index: self.frame_index,
            detail,
        };
        if self.image_width != header.image_width || self.image_height != header.image_height {
            return Err(mismatch(format!(
                "image {}x{} but header declares {}x{}",
                self.image_width, self.image_height, header.image_width, header.image_height
            )));
        }
        let channels = header.channels();
        for (level, (out, &stride)) in self.outputs.iter().zip(&header.strides).enumerate() {
            let (eh, ew) = (header.image_height / stride, header.image_width / stride);
            if out.grid_h != eh || out.grid_w != ew {
                return Err(mismatch(format!(
                    "stride-{stride} grid is {}x{}, expected {}x{}",
                    out.grid_w, out.grid_h, ew, eh
                )));
            }
            if out.channels != channels {
                return Err(mismatch(format!(
                    "level {level} has {} channels, expected {channels}",
                    out.channels
                )));
            }
            if out.data.len() != out.expected_len() {
                return Err(mismatch(format!(
                    "level {level} holds {} elements, shape implies {}",
                    out.data.len(),
                    out.expected_len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorStreamHeader {
    pub version: u32,
    pub num_classes: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub strides: [u32; LEVELS],
    pub frame_count: u32,
}

impl TensorStreamHeader {
    pub fn new(
        num_classes: u32,
        image_width: u32,
        image_height: u32,
        strides: [u32; LEVELS],
    ) -> Self {
        Self {
            version: FORMAT_VERSION,
            num_classes,
            image_width,
            image_height,
            strides,
            frame_count: 0,
        }
    }

    pub fn channels(&self) -> u32 {
        BOX_CHANNELS + self.num_classes
    }

    pub fn grid(&self, level: usize) -> (u32, u32) {
        let s = self.strides[level];
        (self.image_height / s, self.image_width / s)
    }

    /// Bytes occupied by one frame record.
    pub fn frame_bytes(&self) -> u64 {
        let mut n = 4u64;
        for level in 0..LEVELS {
            let (h, w) = self.grid(level);
            n += 12 + 4 * h as u64 * w as u64 * self.channels() as u64;
        }
        n
    }

    pub fn validate(&self) -> Result<(), TensorIoError> {
        if self.version != FORMAT_VERSION {
            return Err(TensorIoError::UnsupportedVersion(self.version));
        }
        let invalid = |m: String| Err(TensorIoError::InvalidHeader(m));
        if self.num_classes == 0 {
            return invalid("num_classes must be at least 1".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return invalid("image dimensions must be positive".into());
        }
        if self.strides[0] == 0 || !self.strides.windows(2).all(|w| w[0] < w[1]) {
            return invalid(format!(
                "strides {:?} are not strictly increasing",
                self.strides
            ));
        }
        for &s in &self.strides {
            if !self.image_width.is_multiple_of(s) || !self.image_height.is_multiple_of(s) {
                return invalid(format!(
                    "image {}x{} is not divisible by stride {s}",
                    self.image_width, self.image_height
                ));
            }
        }
        Ok(())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&MAGIC)?;
        for v in [
            self.version,
            self.num_classes,
            self.image_width,
            self.image_height,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in self.strides {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&self.frame_count.to_le_bytes())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self, TensorIoError> {
        let mut magic = [0u8; 4];
        read_exact_or(r, &mut magic, || {
            TensorIoError::InvalidHeader("file shorter than the 36-byte header".into())
        })?;
        if magic != MAGIC {
            return Err(TensorIoError::BadMagic { found: magic });
        }
        let mut words = [0u32; 8];
        for word in words.iter_mut() {
            let mut b = [0u8; 4];
            read_exact_or(r, &mut b, || {
                TensorIoError::InvalidHeader("file shorter than the 36-byte header".into())
            })?;
            *word = u32::from_le_bytes(b);
        }
        let header = Self {
            version: words[0],
            num_classes: words[1],
            image_width: words[2],
            image_height: words[3],
            strides: [words[4], words[5], words[6]],
            frame_count: words[7],
        };
        header.validate()?;
        Ok(header)
    }
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    on_eof: impl FnOnce() -> TensorIoError,
) -> Result<(), TensorIoError> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(on_eof()),
        Err(e) => Err(e.into()),
    }
}

/// Serializes `header` followed by `frames` to any writer.
///
/// The stored `frame_count` is `frames.len()`; the header's own count is
/// ignored. Every frame is validated before the first byte is written.
pub fn write_stream<W: Write>(
    w: &mut W,
    header: &TensorStreamHeader,
    frames: &[RawTensorSet],
) -> Result<usize, TensorIoError> {
    header.validate()?;
    for (i, frame) in frames.iter().enumerate() {
        frame.check_geometry(header)?;
        if frame.frame_index as usize != i {
            return Err(TensorIoError::GeometryMismatch {
                frame_index: frame.frame_index,
                detail: format!("stored at position {i}; frame indices must run 0,1,2,..."),
            });
        }
    }
    let count = u32::try_from(frames.len())
        .map_err(|_| TensorIoError::InvalidHeader("more than u32::MAX frames".into()))?;
    let header = TensorStreamHeader {
        frame_count: count,
        ..*header
    };
    header.write_to(w)?;
    let mut buf = Vec::new();
    for frame in frames {
        w.write_all(&frame.frame_index.to_le_bytes())?;
        for out in &frame.outputs {
            w.write_all(&out.grid_h.to_le_bytes())?;
            w.write_all(&out.grid_w.to_le_bytes())?;
            w.write_all(&out.channels.to_le_bytes())?;
            buf.clear();
            buf.reserve(out.data.len() * 4);
            for v in &out.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(frames.len())
}

/// Writes a stream file. Nothing is created if validation fails.
pub fn write_tensor_stream(
    path: impl AsRef<Path>,
    header: &TensorStreamHeader,
    frames: &[RawTensorSet],
) -> Result<usize, TensorIoError> {
    header.validate()?;
    for frame in frames {
        frame.check_geometry(header)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_stream(&mut w, header, frames)
}

/// Lazily yields the frames of a stream. After the first error the
/// iterator is exhausted.
pub struct TensorStreamReader<R> {
    inner: R,
    header: TensorStreamHeader,
    next: u32,
    failed: bool,
}

impl<R: Read> TensorStreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self, TensorIoError> {
        let header = TensorStreamHeader::read_from(&mut inner)?;
        Ok(Self {
            inner,
            header,
            next: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &TensorStreamHeader {
        &self.header
    }

    fn read_frame(&mut self) -> Result<RawTensorSet, TensorIoError> {
        let frame_index = self.next;
        let truncated = || TensorIoError::Truncated { frame_index };
        let mut word = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32, TensorIoError> {
            read_exact_or(r, &mut word, truncated)?;
            Ok(u32::from_le_bytes(word))
        };

        let stored = read_u32(&mut self.inner)?;
        if stored != frame_index {
            return Err(TensorIoError::GeometryMismatch {
                frame_index,
                detail: format!("stored frame index {stored}"),
            });
        }
        let channels = self.header.channels();
        let mut outputs = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            let grid_h = read_u32(&mut self.inner)?;
            let grid_w = read_u32(&mut self.inner)?;
            let ch = read_u32(&mut self.inner)?;
            let (eh, ew) = self.header.grid(level);
            if (grid_h, grid_w, ch) != (eh, ew, channels) {
                return Err(TensorIoError::GeometryMismatch {
                    frame_index,
                    detail: format!(
                        "level {level} shape ({grid_h}, {grid_w}, {ch}), expected ({eh}, {ew}, {channels})"
                    ),
                });
            }
            let len = grid_h as usize * grid_w as usize * ch as usize;
            let mut bytes = vec![0u8; len * 4];
            read_exact_or(&mut self.inner, &mut bytes, truncated)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            outputs.push(HeadTensor {
                grid_h,
                grid_w,
                channels: ch,
                data,
            });
        }
        let outputs: [HeadTensor; LEVELS] = outputs.try_into().expect("three levels");
        Ok(RawTensorSet {
            frame_index,
            image_width: self.header.image_width,
            image_height: self.header.image_height,
            outputs,
        })
    }
}

impl<R: Read> Iterator for TensorStreamReader<R> {
    type Item = Result<RawTensorSet, TensorIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.header.frame_count {
            return None;
        }
        let item = self.read_frame();
        match &item {
            Ok(_) => self.next += 1,
            Err(_) => self.failed = true,
        }
        Some(item)
    }
}

/// Opens a stream file; the header is validated before this returns.
pub fn read_tensor_stream(
    path: impl AsRef<Path>,
) -> Result<(TensorStreamHeader, TensorStreamReader<BufReader<File>>), TensorIoError> {
    let reader = TensorStreamReader::new(BufReader::new(File::open(path)?))?;
    Ok((*reader.header(), reader))
}

/// The seam where an accelerator runtime plugs in. `None` from
/// [`next_frame`](InferenceBackend::next_frame) is end-of-stream, never an error.
pub trait InferenceBackend {
    fn descriptor(&self) -> &str;

    /// Geometry every yielded frame conforms to.
    fn header(&self) -> &TensorStreamHeader;

    fn next_frame(&mut self) -> Option<Result<RawTensorSet, TensorIoError>>;
}

enum Source {
    File {
        path: PathBuf,
        reader: Option<TensorStreamReader<BufReader<File>>>,
    },
    Memory {
        frames: Vec<RawTensorSet>,
        pos: usize,
    },
}

/// Replays recorded (or synthesized) tensors as if an accelerator produced
/// them, optionally looping and sleeping before each frame.
pub struct PlaybackBackend {
    descriptor: String,
    header: TensorStreamHeader,
    source: Source,
    loops_left: u32,
    delay: Duration,
    emitted: u32,
    done: bool,
}

impl PlaybackBackend {
    pub fn open(
        path: impl AsRef<Path>,
        loop_count: u32,
        simulated_delay: Duration,
    ) -> Result<Self, TensorIoError> {
        if loop_count == 0 {
            return Err(TensorIoError::InvalidHeader(
                "loop_count must be positive".into(),
            ));
        }
        let path = path.as_ref().to_path_buf();
        let (header, reader) = read_tensor_stream(&path)?;
        Ok(Self {
            descriptor: format!("playback:{}", path.display()),
            header,
            source: Source::File {
                path,
                reader: Some(reader),
            },
            loops_left: loop_count,
            delay: simulated_delay,
            emitted: 0,
            done: false,
        })
    }

    /// Plays frames held in memory. Frames are checked against `header` up front.
    pub fn from_frames(
        header: TensorStreamHeader,
        frames: Vec<RawTensorSet>,
        loop_count: u32,
        simulated_delay: Duration,
    ) -> Result<Self, TensorIoError> {
        if loop_count == 0 {
            return Err(TensorIoError::InvalidHeader(
                "loop_count must be positive".into(),
            ));
        }
        header.validate()?;
        for f in &frames {
            f.check_geometry(&header)?;
        }
        let header = TensorStreamHeader {
            frame_count: frames.len() as u32,
            ..header
        };
        Ok(Self {
            descriptor: "playback:memory".into(),
            header,
            source: Source::Memory { frames, pos: 0 },
            loops_left: loop_count,
            delay: simulated_delay,
            emitted: 0,
            done: false,
        })
    }

    fn pull(&mut self) -> Option<Result<RawTensorSet, TensorIoError>> {
        loop {
            if self.loops_left == 0 || self.header.frame_count == 0 {
                return None;
            }
            let item = match &mut self.source {
                Source::Memory { frames, pos } => {
                    let f = frames.get(*pos).cloned();
                    *pos += 1;
                    f.map(Ok)
                }
                Source::File { reader, .. } => reader.as_mut().and_then(Iterator::next),
            };
            if item.is_some() {
                return item;
            }
            self.loops_left -= 1;
            if self.loops_left == 0 {
                return None;
            }
            match &mut self.source {
                Source::Memory { pos, .. } => *pos = 0,
                Source::File { path, reader } => match read_tensor_stream(&*path) {
                    Ok((_, r)) => *reader = Some(r),
                    Err(e) => return Some(Err(e)),
                },
            }
        }
    }
}

impl InferenceBackend for PlaybackBackend {
    fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn header(&self) -> &TensorStreamHeader {
        &self.header
    }

    fn next_frame(&mut self) -> Option<Result<RawTensorSet, TensorIoError>> {
        if self.done {
            return None;
        }
        let item = match self.pull() {
            Some(item) => item,
            None => {
                self.done = true;
                return None;
            }
        };
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Some(match item {
            Ok(mut frame) => {
                frame.frame_index = self.emitted;
                self.emitted += 1;
                Ok(frame)
            }
            Err(e) => {
                // a broken file stays broken on every loop
                self.done = true;
                Err(e)
            }
        })
    }
}
