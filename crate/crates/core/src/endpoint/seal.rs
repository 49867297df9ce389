//! End-to-end frame sealing with a shared secret.
//!
//! ChaCha20-Poly1305 with a key derived from the secret via HKDF-SHA256.
//! The nonce is fixed by the frame's (track label, seq), so a relay that
//! cannot open a frame can still forward it unchanged.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::media::MediaFrame;

const KDF_SALT: &[u8] = b"namedstream/e2e/v1";
const KDF_INFO: &[u8] = b"frame key";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SealError {
    #[error("empty secret")]
    EmptySecret,
    #[error("frame is already sealed")]
    AlreadySealed,
    #[error("frame is not sealed")]
    NotSealed,
    #[error("frame failed integrity check")]
    Integrity,
}

#[derive(Clone)]
pub struct FrameKey {
    cipher: ChaCha20Poly1305,
}

impl std::fmt::Debug for FrameKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FrameKey(..)")
    }
}

impl FrameKey {
    pub fn derive(secret: &str) -> Result<Self, SealError> {
        if secret.is_empty() {
            return Err(SealError::EmptySecret);
        }
        let hk = Hkdf::<Sha256>::new(Some(KDF_SALT), secret.as_bytes());
        let mut okm = [0u8; 32];
        hk.expand(KDF_INFO, &mut okm).expect("32 bytes is a valid length");
        Ok(Self {
            cipher: ChaCha20Poly1305::new(Key::from_slice(&okm)),
        })
    }
}

fn nonce(track_label: &str, seq: u64) -> [u8; 12] {
    let label = Sha256::digest(track_label.as_bytes());
    let mut n = [0u8; 12];
    n[..4].copy_from_slice(&label[..4]);
    n[4..].copy_from_slice(&seq.to_be_bytes());
    n
}

fn aad(frame: &MediaFrame) -> Vec<u8> {
    let mut a = Vec::with_capacity(frame.track_label.len() + 16);
    a.extend_from_slice(frame.track_label.as_bytes());
    a.extend_from_slice(&frame.seq.to_be_bytes());
    a.extend_from_slice(&frame.ts_ms.to_be_bytes());
    a
}

pub fn seal_frame(frame: &MediaFrame, key: &FrameKey) -> Result<MediaFrame, SealError> {
    if frame.sealed {
        return Err(SealError::AlreadySealed);
    }
    let n = nonce(&frame.track_label, frame.seq);
    let ct = key
        .cipher
        .encrypt(
            Nonce::from_slice(&n),
            Payload {
                msg: &frame.payload,
                aad: &aad(frame),
            },
        )
        .map_err(|_| SealError::Integrity)?;
    Ok(MediaFrame {
        payload: ct,
        sealed: true,
        ..frame.clone()
    })
}

pub fn open_frame(frame: &MediaFrame, key: &FrameKey) -> Result<MediaFrame, SealError> {
    if !frame.sealed {
        return Err(SealError::NotSealed);
    }
    let n = nonce(&frame.track_label, frame.seq);
    let pt = key
        .cipher
        .decrypt(
            Nonce::from_slice(&n),
            Payload {
                msg: &frame.payload,
                aad: &aad(frame),
            },
        )
        .map_err(|_| SealError::Integrity)?;
    Ok(MediaFrame {
        payload: pt,
        sealed: false,
        ..frame.clone()
    })
}
