//! Dense `F x H x W x C` video arrays.

use crate::error::{Error, Result};

/// A frame-major video: `data[((f * H + y) * W + x) * C + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let dims = [frames, height, width, channels];
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                op: "video",
                msg: format!("zero-sized dimension in {dims:?}"),
            });
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidShape {
                op: "video",
                msg: format!("{} values for shape {dims:?}", data.len()),
            });
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self::filled(frames, height, width, channels, 0.0)
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![value; frames * height * width * channels],
        }
    }

    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(frames * height * width * channels);
        for k in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        data.push(f(k, y, x, c));
                    }
                }
            }
        }
        Self {
            frames,
            height,
            width,
            channels,
            data,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn index(&self, k: usize, y: usize, x: usize, c: usize) -> usize {
        ((k * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, k: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(k, y, x, c)]
    }

    /// Copies frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Video> {
        if len == 0 || start + len > self.frames {
            return Err(Error::InvalidArgument(format!(
                "frame range {start}..{} outside a {}-frame video",
                start + len,
                self.frames
            )));
        }
        let n = self.frame_len();
        Video::new(
            len,
            self.height,
            self.width,
            self.channels,
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }

    /// Stacks frames of equally shaped videos.
    pub fn concat_frames(parts: &[Video]) -> Result<Video> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no videos to concatenate".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width || p.channels != first.channels {
                return Err(Error::shape("concat_frames", &first.shape(), &p.shape()));
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        Video::new(frames, first.height, first.width, first.channels, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Video {
        Video {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_frame_major() {
        let v = Video::from_fn(2, 3, 4, 2, |k, y, x, c| (k * 1000 + y * 100 + x * 10 + c) as f32);
        assert_eq!(v.at(1, 2, 3, 1), 1231.0);
        assert_eq!(v.frame(1)[0], 1000.0);
        let s = v.slice_frames(1, 1).unwrap();
        assert_eq!(s.at(0, 2, 3, 1), 1231.0);
        let back = Video::concat_frames(&[v.slice_frames(0, 1).unwrap(), s]).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Video::new(1, 2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Video::new(0, 2, 2, 1, vec![]).is_err());
    }
}
