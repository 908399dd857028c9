//! Content-addressed image store. Bytes are opaque; only the PNG header is
//! read, to record dimensions.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ImageRef;

pub const PNG_MEDIA_TYPE: &str = "image/png";
const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("payload is not a PNG image")]
    NotPng,
    #[error("PNG header declares zero width or height")]
    EmptyImage,
    #[error("unknown image {0}")]
    Unknown(String),
}

/// Reads (width, height) from the IHDR chunk.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32), ImageError> {
    if bytes.len() < 24 || bytes[..8] != PNG_SIGNATURE || &bytes[12..16] != b"IHDR" {
        return Err(ImageError::NotPng);
    }
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    if w == 0 || h == 0 {
        return Err(ImageError::EmptyImage);
    }
    Ok((w, h))
}

pub fn content_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Shared, thread-safe store keyed by SHA-256 of the bytes.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    inner: Arc<RwLock<HashMap<String, Arc<Vec<u8>>>>>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_png(&self, bytes: Vec<u8>) -> Result<ImageRef, ImageError> {
        let (width, height) = png_dimensions(&bytes)?;
        let id = content_id(&bytes);
        self.inner
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .entry(id.clone())
            .or_insert_with(|| Arc::new(bytes));
        Ok(ImageRef { content_id: id, width, height, media_type: PNG_MEDIA_TYPE.to_string() })
    }

    pub fn get(&self, image: &ImageRef) -> Result<Arc<Vec<u8>>, ImageError> {
        self.inner
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&image.content_id)
            .cloned()
            .ok_or_else(|| ImageError::Unknown(image.content_id.clone()))
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
