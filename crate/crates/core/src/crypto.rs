//! Cipher interfaces and the reference instantiation used by the protocol.
//!
//! The protocol needs two capabilities: an asymmetric scheme (encrypt to the
//! server, and server-signed material anyone can check) and an authenticated
//! symmetric scheme for the per-query proposed key. The reference
//! instantiation is X25519 + HKDF-SHA256 + ChaCha20-Poly1305 for public-key
//! encryption, Ed25519 for signatures and ChaCha20-Poly1305 for sealing.
//!
//! All randomness is drawn from a caller-supplied generator so simulations
//! stay reproducible.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey as DhPublic, StaticSecret};

pub const SYMMETRIC_KEY_LEN: usize = 32;
const NONCE_LEN: usize = 12;
const DH_LEN: usize = 32;
const SIG_LEN: usize = 64;
const KDF_INFO: &[u8] = b"p4qs/sealed-key/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("ciphertext failed authentication")]
    Authentication,
    #[error("ciphertext too short")]
    Truncated,
    #[error("signature does not verify")]
    BadSignature,
}

/// Authenticated symmetric encryption.
pub trait SymmetricScheme {
    type Key;

    fn generate_key<R: RngCore + ?Sized>(rng: &mut R) -> Self::Key;
    fn seal<R: RngCore + ?Sized>(key: &Self::Key, plaintext: &[u8], rng: &mut R) -> Vec<u8>;
    fn open(key: &Self::Key, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError>;
}

/// Public-key encryption plus signatures that carry their message.
pub trait AsymmetricScheme {
    type PublicKey;
    type PrivateKey;

    fn generate_keypair<R: RngCore + ?Sized>(rng: &mut R) -> Self::PrivateKey;
    fn public_key(sk: &Self::PrivateKey) -> Self::PublicKey;
    fn encrypt_with_public<R: RngCore + ?Sized>(pk: &Self::PublicKey, plaintext: &[u8], rng: &mut R) -> Vec<u8>;
    fn decrypt_with_private(sk: &Self::PrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError>;
    /// Produces a blob from which [`AsymmetricScheme::verify_with_public`]
    /// recovers `message`.
    fn sign_with_private(sk: &Self::PrivateKey, message: &[u8]) -> Vec<u8>;
    fn verify_with_public(pk: &Self::PublicKey, signed: &[u8]) -> Result<Vec<u8>, CryptoError>;
}

/// 256-bit key for [`ChaChaPoly`].
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; SYMMETRIC_KEY_LEN]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; SYMMETRIC_KEY_LEN]) -> Self {
        SymmetricKey(bytes)
    }

    pub fn try_from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(SymmetricKey)
    }

    pub fn as_bytes(&self) -> &[u8; SYMMETRIC_KEY_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// ChaCha20-Poly1305 with a random 96-bit nonce prepended to the ciphertext.
#[derive(Debug, Clone, Copy)]
pub struct ChaChaPoly;

impl SymmetricScheme for ChaChaPoly {
    type Key = SymmetricKey;

    fn generate_key<R: RngCore + ?Sized>(rng: &mut R) -> SymmetricKey {
        let mut k = [0u8; SYMMETRIC_KEY_LEN];
        rng.fill_bytes(&mut k);
        SymmetricKey(k)
    }

    fn seal<R: RngCore + ?Sized>(key: &SymmetricKey, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
        let ct = cipher
            .encrypt(Nonce::from_slice(&nonce), plaintext)
            .expect("in-memory encryption cannot fail");
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    fn open(key: &SymmetricKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < NONCE_LEN {
            return Err(CryptoError::Truncated);
        }
        let (nonce, body) = ciphertext.split_at(NONCE_LEN);
        ChaCha20Poly1305::new(Key::from_slice(&key.0))
            .decrypt(Nonce::from_slice(nonce), body)
            .map_err(|_| CryptoError::Authentication)
    }
}

/// Server key material: a static X25519 secret and an Ed25519 signing key.
#[derive(Clone)]
pub struct ServerKeyPair {
    dh: StaticSecret,
    signing: SigningKey,
    public: ServerPublicKey,
}

impl ServerKeyPair {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        X25519Ed25519::generate_keypair(rng)
    }

    pub fn public(&self) -> ServerPublicKey {
        self.public.clone()
    }
}

impl std::fmt::Debug for ServerKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerKeyPair").field("public", &self.public()).finish()
    }
}

/// Public half of [`ServerKeyPair`]; pre-installed on every peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerPublicKey {
    dh: DhPublic,
    verifying: VerifyingKey,
}

#[derive(Debug, Clone, Copy)]
pub struct X25519Ed25519;

fn derive_key(shared: &[u8], eph: &[u8], recipient: &[u8]) -> SymmetricKey {
    let mut salt = [0u8; 2 * DH_LEN];
    salt[..DH_LEN].copy_from_slice(eph);
    salt[DH_LEN..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; SYMMETRIC_KEY_LEN];
    hk.expand(KDF_INFO, &mut okm).expect("32 bytes is a valid HKDF length");
    SymmetricKey(okm)
}

impl AsymmetricScheme for X25519Ed25519 {
    type PublicKey = ServerPublicKey;
    type PrivateKey = ServerKeyPair;

    fn generate_keypair<R: RngCore + ?Sized>(rng: &mut R) -> ServerKeyPair {
        let mut dh = [0u8; 32];
        let mut sig = [0u8; 32];
        rng.fill_bytes(&mut dh);
        rng.fill_bytes(&mut sig);
        let dh = StaticSecret::from(dh);
        let signing = SigningKey::from_bytes(&sig);
        let public = ServerPublicKey {
            dh: DhPublic::from(&dh),
            verifying: signing.verifying_key(),
        };
        ServerKeyPair { dh, signing, public }
    }

    fn public_key(sk: &ServerKeyPair) -> ServerPublicKey {
        sk.public.clone()
    }

    fn encrypt_with_public<R: RngCore + ?Sized>(pk: &ServerPublicKey, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
        let mut eph_bytes = [0u8; 32];
        rng.fill_bytes(&mut eph_bytes);
        let eph = StaticSecret::from(eph_bytes);
        let eph_pub = DhPublic::from(&eph);
        let shared = eph.diffie_hellman(&pk.dh);
        let key = derive_key(shared.as_bytes(), eph_pub.as_bytes(), pk.dh.as_bytes());
        let mut out = eph_pub.as_bytes().to_vec();
        out.extend(ChaChaPoly::seal(&key, plaintext, rng));
        out
    }

    fn decrypt_with_private(sk: &ServerKeyPair, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < DH_LEN {
            return Err(CryptoError::Truncated);
        }
        let (eph, body) = ciphertext.split_at(DH_LEN);
        let eph: [u8; DH_LEN] = eph.try_into().expect("split at DH_LEN");
        let eph_pub = DhPublic::from(eph);
        let shared = sk.dh.diffie_hellman(&eph_pub);
        let key = derive_key(shared.as_bytes(), &eph, sk.public.dh.as_bytes());
        ChaChaPoly::open(&key, body)
    }

    fn sign_with_private(sk: &ServerKeyPair, message: &[u8]) -> Vec<u8> {
        let sig = sk.signing.sign(message);
        let mut out = sig.to_bytes().to_vec();
        out.extend_from_slice(message);
        out
    }

    fn verify_with_public(pk: &ServerPublicKey, signed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if signed.len() < SIG_LEN {
            return Err(CryptoError::Truncated);
        }
        let (sig, msg) = signed.split_at(SIG_LEN);
        let sig = Signature::from_slice(sig).map_err(|_| CryptoError::BadSignature)?;
        pk.verifying
            .verify_strict(msg, &sig)
            .map_err(|_| CryptoError::BadSignature)?;
        Ok(msg.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn wrong_symmetric_key_fails() {
        let mut r = rng(1);
        let k1 = ChaChaPoly::generate_key(&mut r);
        let k2 = ChaChaPoly::generate_key(&mut r);
        let ct = ChaChaPoly::seal(&k1, b"hello", &mut r);
        assert_eq!(ChaChaPoly::open(&k2, &ct), Err(CryptoError::Authentication));
        assert_eq!(ChaChaPoly::open(&k1, &ct[..5]), Err(CryptoError::Truncated));
    }

    #[test]
    fn other_server_cannot_decrypt() {
        let mut r = rng(2);
        let a = ServerKeyPair::generate(&mut r);
        let b = ServerKeyPair::generate(&mut r);
        let ct = X25519Ed25519::encrypt_with_public(&a.public(), b"prop-key", &mut r);
        assert_eq!(X25519Ed25519::decrypt_with_private(&a, &ct).unwrap(), b"prop-key");
        assert_eq!(X25519Ed25519::decrypt_with_private(&b, &ct), Err(CryptoError::Authentication));
    }

    #[test]
    fn signature_binds_message_and_signer() {
        let mut r = rng(3);
        let a = ServerKeyPair::generate(&mut r);
        let b = ServerKeyPair::generate(&mut r);
        let signed = X25519Ed25519::sign_with_private(&a, b"token");
        assert_eq!(X25519Ed25519::verify_with_public(&a.public(), &signed).unwrap(), b"token");
        assert!(X25519Ed25519::verify_with_public(&b.public(), &signed).is_err());
        let mut forged = signed.clone();
        *forged.last_mut().unwrap() ^= 1;
        assert!(X25519Ed25519::verify_with_public(&a.public(), &forged).is_err());
    }

    #[test]
    fn keypair_generation_is_seeded() {
        let a = ServerKeyPair::generate(&mut rng(9)).public();
        let b = ServerKeyPair::generate(&mut rng(9)).public();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symmetric_round_trip(msg in proptest::collection::vec(any::<u8>(), 0..512), seed in any::<u64>()) {
            let mut r = rng(seed);
            let k = ChaChaPoly::generate_key(&mut r);
            let ct = ChaChaPoly::seal(&k, &msg, &mut r);
            prop_assert_eq!(ChaChaPoly::open(&k, &ct).unwrap(), msg);
        }

        #[test]
        fn asymmetric_round_trip(msg in proptest::collection::vec(any::<u8>(), 0..256), seed in any::<u64>()) {
            let mut r = rng(seed);
            let sk = ServerKeyPair::generate(&mut r);
            let ct = X25519Ed25519::encrypt_with_public(&sk.public(), &msg, &mut r);
            prop_assert_eq!(X25519Ed25519::decrypt_with_private(&sk, &ct).unwrap(), msg);
        }
    }
}
